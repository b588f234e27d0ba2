mod common;

use std::net::TcpListener;
use std::process::Stdio;
use std::time::{Duration, Instant};

use common::*;
use gateway_core::daemon::{self, RejectCause};
use gateway_core::mqtt::{Connect, MqttConnection, QoS, TopicFilter};
use gateway_core::normalizer::parse_record;
use gateway_core::protocol::ProtocolId;
use gateway_core::sim::{default_fleet, run_node, run_fleet, SocketLinks};
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::process::{Child, Command};

const GATEWAY: &str = env!("CARGO_BIN_EXE_gateway");
const NODE_SIM: &str = env!("CARGO_BIN_EXE_node-sim");

fn write_config(dir: &std::path::Path, config: &Value) -> std::path::PathBuf {
    let path = dir.join("gateway.json");
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn ephemeral_config(dir: &std::path::Path, upstream: std::net::SocketAddr) -> Value {
    json!({
        "bind_host": "127.0.0.1",
        "ports": { "wifi": 0, "bluetooth": 0, "zigbee": 0, "broker": 0, "api": 0 },
        "upstream": { "address": upstream.to_string() },
        "state_file": dir.join("state.json"),
    })
}

async fn spawn_gateway(config: &std::path::Path) -> (Child, Value) {
    let mut child = Command::new(GATEWAY)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .kill_on_drop(true)
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let line = tokio::time::timeout(Duration::from_secs(10), lines.next_line()).await.unwrap().unwrap().unwrap();
    let ready: Value = serde_json::from_str(&line).unwrap();
    assert_eq!(ready["event"], "ready", "{line}");
    // Keep draining stdout so the child never blocks on a full pipe.
    tokio::spawn(async move { while let Ok(Some(_)) = lines.next_line().await {} });
    (child, ready)
}

async fn terminate(child: &mut Child) -> std::process::ExitStatus {
    let pid = child.id().unwrap().to_string();
    let status = std::process::Command::new("kill").args(["-TERM", &pid]).status().unwrap();
    assert!(status.success());
    tokio::time::timeout(Duration::from_secs(15), child.wait()).await.unwrap().unwrap()
}

#[tokio::test]
async fn sigterm_keeps_registry_state() {
    let dir = tempfile::tempdir().unwrap();
    let sink = Sink::start(local(0)).await;
    let config = write_config(dir.path(), &ephemeral_config(dir.path(), sink.addr()));

    let (mut child, ready) = spawn_gateway(&config).await;
    let api: std::net::SocketAddr = ready["api"].as_str().unwrap().parse().unwrap();
    assert!(ready["links"]["wifi"].is_string() && ready["broker"].is_string(), "{ready}");
    let (status, _) = http(api, "POST", "/nodes", Some(&json!({ "node_id": "nodo1" }))).await;
    assert_eq!(status, 201);
    let (status, _) = http(api, "PATCH", "/nodes/nodo1", Some(&json!({ "sampling_period": 12 }))).await;
    assert_eq!(status, 200);
    let exit = terminate(&mut child).await;
    assert_eq!(exit.code(), Some(0));

    let state: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("state.json")).unwrap()).unwrap();
    assert_eq!(state["state"]["nodes"]["nodo1"]["sampling_period"], 12, "{state}");

    let (mut child, ready) = spawn_gateway(&config).await;
    let api: std::net::SocketAddr = ready["api"].as_str().unwrap().parse().unwrap();
    let (status, node) = http(api, "GET", "/nodes/nodo1", None).await;
    assert_eq!((status, node["sampling_period"].clone()), (200, json!(12)));
    assert_eq!(terminate(&mut child).await.code(), Some(0));
    sink.stop().await;
}

#[tokio::test]
async fn occupied_broker_port_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let mut config = ephemeral_config(dir.path(), local(1883));
    config["ports"]["broker"] = json!(taken.local_addr().unwrap().port());
    let path = write_config(dir.path(), &config);
    let out = Command::new(GATEWAY).arg("--config").arg(&path).output().await.unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("broker"), "{stderr}");
}

#[tokio::test]
async fn occupied_link_port_names_the_link() {
    let dir = tempfile::tempdir().unwrap();
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let mut config = ephemeral_config(dir.path(), local(1883));
    config["ports"]["wifi"] = json!(taken.local_addr().unwrap().port());
    let path = write_config(dir.path(), &config);
    let out = Command::new(GATEWAY).arg("--config").arg(&path).output().await.unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("wifi link"));
}

#[tokio::test]
async fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"ports\": { \"api\": \"x\" }\n}").unwrap();
    let out = Command::new(GATEWAY).arg("--config").arg(&path).output().await.unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"), "line number expected");

    let out = Command::new(GATEWAY).args(["--upstream", "nohost"]).output().await.unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("upstream.address"));

    let out = Command::new(GATEWAY).args(["--api-port", "1883"]).output().await.unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ports.api"));
}

#[tokio::test]
async fn print_config_applies_overrides() {
    let out = Command::new(GATEWAY)
        .args(["--print-config", "--upstream", "broker.local:1884"])
        .env("GATEWAY_API_PORT", "9090")
        .output()
        .await
        .unwrap();
    assert!(out.status.success());
    let config: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(config["ports"]["api"], 9090);
    assert_eq!(config["upstream"]["address"], "broker.local:1884");
    assert_eq!(config["ports"]["wifi"], 7001);
}

#[tokio::test]
async fn node_sim_binary_reports_frames() {
    let dir = tempfile::tempdir().unwrap();
    let sink = Sink::start(local(0)).await;
    let gw = daemon::run(gateway_config(dir.path(), sink.addr(), 0)).await.unwrap();
    let port = |p| gw.link_addr(p).unwrap().port().to_string();
    let out = Command::new(NODE_SIM)
        .args(["--default-fleet", "--gateway", "127.0.0.1", "--no-config"])
        .args(["--wifi-port", &port(ProtocolId::Wifi), "--bluetooth-port", &port(ProtocolId::Bluetooth)])
        .args(["--zigbee-port", &port(ProtocolId::Zigbee), "--period", "1", "--duration", "2"])
        .output()
        .await
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["frames_sent"], 24);
    assert_eq!(report["send_failures"], 0);
    assert!(wait_until(Duration::from_secs(5), || sink.count() == 24).await);
    gw.shutdown().await;
    sink.stop().await;

    let out = Command::new(NODE_SIM).args(["--default-fleet"]).output().await.unwrap();
    assert!(!out.status.success(), "--default-fleet needs --gateway");
}

/// Times at which the gateway accepted new wifi frames, sampled every 10 ms.
async fn wifi_arrivals(gw: &daemon::GatewayHandle, until: Instant) -> Vec<Instant> {
    let mut seen = 0;
    let mut out = Vec::new();
    while Instant::now() < until {
        let n = gw.health().links[&ProtocolId::Wifi].accepted_frames;
        if n > seen {
            // Both wifi sensors of one tick arrive together.
            if out.last().is_none_or(|t: &Instant| t.elapsed() > Duration::from_millis(500)) {
                out.push(Instant::now());
            }
            seen = n;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    out
}

#[tokio::test]
async fn period_change_reaches_the_node() {
    let dir = tempfile::tempdir().unwrap();
    let sink = Sink::start(local(0)).await;
    let gw = daemon::run(gateway_config(dir.path(), sink.addr(), 0)).await.unwrap();
    let api = gw.api_addr();
    let (status, _) = http(api, "POST", "/nodes", Some(&json!({ "node_id": "nodo1" }))).await;
    assert_eq!(status, 201);

    // Real time: ticks at 0 and 6 s, then the change, then 18 and 30 s.
    let mut node = default_fleet(&gw.link_addrs(), Some(gw.broker_addr())).remove(0);
    node.run_duration = 31;
    let links = SocketLinks::new(&node.endpoints);
    let start = Instant::now();
    let run = tokio::spawn(run_node(node, links));
    let patch = tokio::spawn(async move {
        tokio::time::sleep(Duration::from_secs(8)).await;
        http(api, "PATCH", "/nodes/nodo1", Some(&json!({ "sampling_period": 12 }))).await
    });
    let arrivals = wifi_arrivals(&gw, start + Duration::from_secs(32)).await;
    let report = run.await.unwrap().unwrap();
    assert_eq!(patch.await.unwrap().0, 200);

    let gaps: Vec<f64> = arrivals.windows(2).map(|w| (w[1] - w[0]).as_secs_f64()).collect();
    assert_eq!(gaps.len(), 3, "arrivals at {:?}", arrivals.iter().map(|t| (*t - start).as_secs_f64()).collect::<Vec<_>>());
    assert!((gaps[0] - 6.0).abs() <= 1.0, "gap before the change {gaps:?}");
    for g in &gaps[1..] {
        assert!((g - 12.0).abs() <= 1.0, "gap after the change {gaps:?}");
    }
    assert_eq!(report.final_period, 12);
    assert!(report.config_updates >= 2, "retained config plus the change: {}", report.config_updates);
    gw.shutdown().await;
    sink.stop().await;
}

#[tokio::test]
async fn alerts_disabled_nodes_and_identity() {
    let dir = tempfile::tempdir().unwrap();
    let sink = Sink::start(local(0)).await;
    let gw = daemon::run(gateway_config(dir.path(), sink.addr(), 0)).await.unwrap();
    let api = gw.api_addr();

    let mut watcher = MqttConnection::connect(gw.broker_addr(), Connect::new("watcher", 0)).await.unwrap();
    watcher.subscribe(TopicFilter::new("piico/alerts/#").unwrap(), QoS::AtLeastOnce).await.unwrap();

    let rule = json!({ "rule_id": "any-temp", "node_selector": "nodo1", "sensor_selector": "Temperature", "comparator": "gt", "threshold": -100 });
    assert_eq!(http(api, "POST", "/rules", Some(&rule)).await.0, 201);
    let identity = json!({ "gate_id": "gw7", "network_id": "campus" });
    assert_eq!(http(api, "PUT", "/identity", Some(&identity)).await.0, 200);
    assert_eq!(http(api, "POST", "/nodes", Some(&json!({ "node_id": "nodo2", "gps": "4.6,-74.1" }))).await.0, 201);
    assert_eq!(http(api, "PATCH", "/nodes/nodo2", Some(&json!({ "enabled": false }))).await.0, 200);

    let mut fleet = default_fleet(&gw.link_addrs(), None);
    for n in &mut fleet {
        n.sampling_period = 1;
        n.run_duration = 2;
    }
    let reports = run_fleet(fleet).await.unwrap();
    let sent: u64 = reports.iter().map(|r| r.frames_sent).sum();
    assert_eq!(sent, 24);
    assert!(wait_until(Duration::from_secs(5), || gw.pipeline().frames_in == 24).await);

    let p = gw.pipeline();
    assert_eq!(p.unaccounted(), 0);
    assert_eq!(p.frames_published, 12);
    assert_eq!(p.rejected.get(&RejectCause::NodeDisabled), Some(&12));
    assert_eq!(p.alerts, 2);

    for _ in 0..2 {
        let alert = tokio::time::timeout(Duration::from_secs(2), watcher.next_publish()).await.unwrap().unwrap();
        assert_eq!(alert.topic.as_str(), "piico/alerts/any-temp");
        assert_eq!(alert.qos, QoS::AtLeastOnce);
        let rec = parse_record(&alert.payload).unwrap();
        assert_eq!((rec.node_id.as_str(), rec.sensor_id.as_str()), ("nodo1", "Temperature"));
    }

    assert!(wait_until(Duration::from_secs(5), || sink.count() == 12).await);
    for p in sink.received.lock().iter() {
        let rec = parse_record(&p.payload).unwrap();
        assert_eq!(rec.node_id, "nodo1");
        assert_eq!((rec.gate_id.as_str(), rec.network_id.as_str()), ("gw7", "campus"));
        assert!(p.topic.as_str().starts_with("piico/campus/gw7/nodo1/"), "{}", p.topic.as_str());
    }

    // Deleting a node clears its retained config.
    assert!(gw.broker().retained("piico/cfg/nodo2").is_some());
    assert_eq!(http(api, "DELETE", "/nodes/nodo2", None).await.0, 204);
    assert!(gw.broker().retained("piico/cfg/nodo2").is_none());

    let (_, health) = http(api, "GET", "/health", None).await;
    assert_eq!(health["status"], "ok");
    assert_eq!(health["pipeline"]["frames_in"], 24);
    let report = gw.shutdown().await;
    assert_eq!(report.unflushed, 0);
    sink.stop().await;
}

#[tokio::test]
async fn unreachable_upstream_is_degraded_but_serving() {
    let dir = tempfile::tempdir().unwrap();
    let dead = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let gw = daemon::run(gateway_config(dir.path(), dead, 0)).await.unwrap();
    let (status, health) = http(gw.api_addr(), "GET", "/health", None).await;
    assert_eq!(status, 200);
    assert_eq!(health["status"], "degraded");
    assert_ne!(health["uplink"]["status"], "connected");
    assert_eq!(health["links"]["zigbee"]["up"], true);
    let report = gw.shutdown().await;
    assert_eq!(report.unflushed, 0);
}
