use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use gateway_core::daemon::{self, GatewayConfig, EXIT_CONFIG};

/// Multiprotocol IoT gateway: wifi, bluetooth and zigbee links in, MQTT out.
#[derive(Parser, Debug)]
#[command(name = "gateway", version)]
struct Cli {
    /// JSON config file; unset fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "GATEWAY_API_PORT")]
    api_port: Option<u16>,
    /// Upstream broker as host:port.
    #[arg(long, env = "GATEWAY_UPSTREAM")]
    upstream: Option<String>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

fn effective_config(cli: &Cli) -> Result<GatewayConfig, daemon::ConfigError> {
    let mut config = match &cli.config {
        Some(path) => daemon::load_config(path)?,
        None => GatewayConfig::default(),
    };
    if let Some(port) = cli.api_port {
        config.ports.api = port;
    }
    if let Some(up) = &cli.upstream {
        config.upstream.address = up.clone();
    }
    config.validate()?;
    Ok(config)
}

async fn terminated() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
        tokio::select! {
            _ = term.recv() => {}
            _ = tokio::signal::ctrl_c() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = match effective_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("gateway: config error: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    if cli.print_config {
        println!("{}", daemon::dump_config(&config));
        return ExitCode::SUCCESS;
    }
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    rt.block_on(async move {
        let handle = match daemon::run(config).await {
            Ok(h) => h,
            Err(e) => {
                eprintln!("gateway: startup failed: {e}");
                return ExitCode::from(e.exit_code() as u8);
            }
        };
        let ready = serde_json::json!({
            "event": "ready",
            "api": handle.api_addr(),
            "broker": handle.broker_addr(),
            "links": handle.link_addrs(),
        });
        println!("{ready}");
        terminated().await;
        log::info!("shutting down");
        let report = handle.shutdown().await;
        println!("{}", serde_json::json!({ "event": "stopped", "report": report }));
        if report.unflushed > 0 {
            log::warn!("{} uplink messages were not delivered before shutdown", report.unflushed);
        }
        ExitCode::SUCCESS
    })
}
