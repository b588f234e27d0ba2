use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser};
use gateway_core::protocol::ProtocolId;
use gateway_core::sim::{default_fleet, run_fleet, SimNodeConfig};
use serde::Deserialize;

/// Simulated weather-station nodes sending readings to a gateway.
#[derive(Parser, Debug)]
#[command(name = "node-sim", version)]
#[command(group(ArgGroup::new("source").required(true).args(["config", "default_fleet"])))]
struct Cli {
    /// JSON file with a list of node configs (or {"nodes": [...]}).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run the two-node, six-sensor fleet.
    #[arg(long, requires = "gateway")]
    default_fleet: bool,
    /// Gateway host for --default-fleet.
    #[arg(long)]
    gateway: Option<String>,
    #[arg(long, default_value_t = 7001)]
    wifi_port: u16,
    #[arg(long, default_value_t = 7002)]
    bluetooth_port: u16,
    #[arg(long, default_value_t = 7003)]
    zigbee_port: u16,
    #[arg(long, default_value_t = 1883)]
    broker_port: u16,
    /// Do not subscribe to pushed configuration.
    #[arg(long)]
    no_config: bool,
    /// Override the sampling period, seconds.
    #[arg(long)]
    period: Option<u32>,
    /// Override the run duration, seconds.
    #[arg(long)]
    duration: Option<u32>,
    /// Run faster than real time by this factor.
    #[arg(long)]
    time_scale: Option<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConfigFile {
    List(Vec<SimNodeConfig>),
    Wrapped { nodes: Vec<SimNodeConfig> },
}

fn resolve(host: &str) -> Result<IpAddr, String> {
    (host, 0)
        .to_socket_addrs()
        .map_err(|e| format!("cannot resolve {host}: {e}"))?
        .next()
        .map(|a| a.ip())
        .ok_or_else(|| format!("{host} has no address"))
}

fn nodes(cli: &Cli) -> Result<Vec<SimNodeConfig>, String> {
    let mut nodes = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            match serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))? {
                ConfigFile::List(n) | ConfigFile::Wrapped { nodes: n } => n,
            }
        }
        None => {
            let ip = resolve(cli.gateway.as_deref().unwrap_or("127.0.0.1"))?;
            let endpoints: BTreeMap<ProtocolId, SocketAddr> = [
                (ProtocolId::Wifi, cli.wifi_port),
                (ProtocolId::Bluetooth, cli.bluetooth_port),
                (ProtocolId::Zigbee, cli.zigbee_port),
            ]
            .into_iter()
            .map(|(p, port)| (p, SocketAddr::new(ip, port)))
            .collect();
            default_fleet(&endpoints, Some(SocketAddr::new(ip, cli.broker_port)))
        }
    };
    for n in &mut nodes {
        if cli.no_config {
            n.broker = None;
        }
        if let Some(p) = cli.period {
            n.sampling_period = p;
        }
        if let Some(d) = cli.duration {
            n.run_duration = d;
        }
        if let Some(s) = cli.time_scale {
            n.time_scale = s;
        }
        n.validate().map_err(|e| e.to_string())?;
    }
    Ok(nodes)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let nodes = match nodes(&cli) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("node-sim: {e}");
            return ExitCode::from(1);
        }
    };
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    match rt.block_on(run_fleet(nodes)) {
        Ok(reports) => {
            let frames: u64 = reports.iter().map(|r| r.frames_sent).sum();
            let failures: u64 = reports.iter().map(|r| r.send_failures).sum();
            let out = serde_json::json!({ "nodes": reports, "frames_sent": frames, "send_failures": failures });
            println!("{}", serde_json::to_string_pretty(&out).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("node-sim: {e}");
            ExitCode::from(1)
        }
    }
}
