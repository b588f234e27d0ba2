use std::sync::Arc;
use std::time::{Duration, SystemTime};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use chrono::NaiveDate;
use gateway_core::metrics::{ResourceSampler, ThroughputMeter};
use gateway_core::normalizer::{normalize, RawReading};
use gateway_core::protocol::ProtocolId;
use gateway_core::registry::api::{router, ApiState};
use gateway_core::registry::{GatewayIdentity, RecentRecords, Registry};
use parking_lot::Mutex;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Api {
    app: Router,
    recent: Arc<RecentRecords>,
    throughput: Arc<ThroughputMeter>,
}

fn api_with(registry: Registry) -> Api {
    let recent = Arc::new(RecentRecords::new(100));
    let throughput = Arc::new(ThroughputMeter::new(Duration::from_secs(1), 600));
    let state = ApiState {
        registry: Arc::new(registry),
        recent: recent.clone(),
        throughput: throughput.clone(),
        resources: Arc::new(Mutex::new(ResourceSampler::new(Duration::from_secs(10), 10))),
        health: Arc::new(|| json!({ "status": "ok" })),
        ui_dir: None,
    };
    Api { app: router(state), recent, throughput }
}

fn api() -> Api {
    api_with(Registry::in_memory())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, String) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), 1 << 20).await.unwrap();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let text = body.map(|b| b.to_string());
    let (status, out) = call(app, method, uri, text.as_deref()).await;
    (status, if out.is_empty() { Value::Null } else { serde_json::from_str(&out).unwrap() })
}

#[tokio::test]
async fn create_node_echoes_with_defaults() {
    let a = api();
    let (status, node) = call_json(&a.app, "POST", "/nodes", Some(json!({ "node_id": "nodo3" }))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(node["node_id"], "nodo3");
    assert_eq!(node["gps"], "-");
    assert_eq!(node["sampling_period"], 6);
    assert_eq!(node["enabled"], true);
    assert_eq!(node["sensors"], json!([]));

    let (status, got) = call_json(&a.app, "GET", "/nodes/nodo3", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(got, node);
    let (_, list) = call_json(&a.app, "GET", "/nodes", None).await;
    assert_eq!(list, json!([node]));
}

#[tokio::test]
async fn error_statuses() {
    let a = api();
    call_json(&a.app, "POST", "/nodes", Some(json!({ "node_id": "nodo1" }))).await;

    let (status, err) = call_json(&a.app, "POST", "/nodes", Some(json!({ "node_id": "nodo1" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(err["error"].is_string() && err["message"].is_string(), "{err}");

    let (status, _) = call_json(&a.app, "GET", "/nodes/ghost", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call_json(&a.app, "DELETE", "/nodes/ghost", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call_json(&a.app, "DELETE", "/rules/ghost", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, err) = call_json(&a.app, "PATCH", "/nodes/nodo1", Some(json!({ "sampling_period": -1 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{err}");
    let (status, _) = call_json(&a.app, "PATCH", "/nodes/nodo1", Some(json!({ "sampling_period": 0 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call_json(&a.app, "PATCH", "/nodes/nodo1", Some(json!({ "colour": "red" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, _) = call(&a.app, "POST", "/nodes", Some("{not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call_json(&a.app, "POST", "/nodes", Some(json!({ "node_id": "a/b" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    // The failed PATCH left the node untouched.
    let (_, node) = call_json(&a.app, "GET", "/nodes/nodo1", None).await;
    assert_eq!(node["sampling_period"], 6);
}

#[tokio::test]
async fn patch_and_sensor_lifecycle() {
    let a = api();
    call_json(&a.app, "POST", "/nodes", Some(json!({ "node_id": "nodo1", "links": ["wifi", "zigbee"] }))).await;
    let (status, node) =
        call_json(&a.app, "PATCH", "/nodes/nodo1", Some(json!({ "sampling_period": 12, "gps": "4.6,-74.1" }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((node["sampling_period"].clone(), node["gps"].clone()), (json!(12), json!("4.6,-74.1")));

    let sensor = json!({ "sensor_id": "Temperature", "magnitude": "celcius", "protocol": "wifi" });
    let (status, _) = call_json(&a.app, "POST", "/nodes/nodo1/sensors", Some(sensor.clone())).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, _) = call_json(&a.app, "POST", "/nodes/nodo1/sensors", Some(sensor)).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, _) = call_json(&a.app, "PUT", "/nodes/nodo1/sensors/Temperature/protocol", Some(json!("zigbee"))).await;
    assert_eq!(status, StatusCode::OK);
    // The node has no bluetooth radio.
    let (status, _) =
        call_json(&a.app, "PUT", "/nodes/nodo1/sensors/Temperature/protocol", Some(json!({ "protocol": "bluetooth" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call_json(&a.app, "PUT", "/nodes/nodo1/sensors/Rain/protocol", Some(json!("wifi"))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (_, node) = call_json(&a.app, "GET", "/nodes/nodo1", None).await;
    assert_eq!(node["sensors"][0]["protocol"], "zigbee");

    let (status, _) = call_json(&a.app, "DELETE", "/nodes/nodo1/sensors/Temperature", None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = call_json(&a.app, "DELETE", "/nodes/nodo1", None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (_, list) = call_json(&a.app, "GET", "/nodes", None).await;
    assert_eq!(list, json!([]));
}

#[tokio::test]
async fn rules_get_default_topic() {
    let a = api();
    let rule = json!({ "rule_id": "hot", "sensor_selector": "Temperature", "comparator": "gt", "threshold": 30.0 });
    let (status, created) = call_json(&a.app, "POST", "/rules", Some(rule.clone())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(created["action_topic"], "piico/alerts/hot");
    assert_eq!(created["node_selector"], "*");
    assert_eq!(created["armed"], true);
    let (status, _) = call_json(&a.app, "POST", "/rules", Some(rule)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (_, rules) = call_json(&a.app, "GET", "/rules", None).await;
    assert_eq!(rules.as_array().unwrap().len(), 1);
    let (status, _) = call_json(&a.app, "DELETE", "/rules/hot", None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
}

#[tokio::test]
async fn recent_records_limit() {
    let a = api();
    let t = NaiveDate::from_ymd_opt(2019, 9, 13).unwrap().and_hms_opt(8, 59, 18).unwrap();
    for i in 0..12 {
        let r = RawReading::new("Temperature", format!("{}.0", 10 + i), "celcius");
        a.recent.push(normalize(&r, ProtocolId::Wifi, "nodo2", t, &GatewayIdentity::default(), |_| None));
    }
    let (status, recs) = call_json(&a.app, "GET", "/records/recent?limit=5", None).await;
    assert_eq!(status, StatusCode::OK);
    let values: Vec<&str> = recs.as_array().unwrap().iter().map(|r| r["value"].as_str().unwrap()).collect();
    assert_eq!(values, ["21.0", "20.0", "19.0", "18.0", "17.0"]);
    assert_eq!(recs[0]["date"], "09/13/19-08:59:18");
    let (_, all) = call_json(&a.app, "GET", "/records/recent", None).await;
    assert_eq!(all.as_array().unwrap().len(), 12);
    let (status, _) = call_json(&a.app, "GET", "/records/recent?limit=x", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn throughput_json_and_csv() {
    let a = api();
    let base = 1_700_000_000_000u64;
    let at = |ms: u64| SystemTime::UNIX_EPOCH + Duration::from_millis(ms);
    a.throughput.record_bytes(ProtocolId::Wifi, 100, at(base + 10));
    a.throughput.record_bytes(ProtocolId::Wifi, 50, at(base + 900));
    a.throughput.record_bytes(ProtocolId::Zigbee, 40, at(base + 1500));

    let uri = format!("/metrics/throughput?iface=wifi&from={base}&to={}", base + 3000);
    let (status, series) = call_json(&a.app, "GET", &uri, None).await;
    assert_eq!(status, StatusCode::OK);
    let wifi: Vec<_> = series.as_array().unwrap().iter().filter(|s| s["bytes"].as_u64() != Some(0)).collect();
    assert_eq!(wifi.len(), 1);
    assert_eq!(wifi[0]["bytes"], 150);
    assert_eq!(wifi[0]["bps"], 1200.0);

    let uri = format!("/metrics/throughput?from={base}&to={}&format=csv", base + 3000);
    let (status, csv) = call(&a.app, "GET", &uri, None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(csv.starts_with("interface,window_start_ms,window_len_ms,bytes,bps\n"), "{csv}");
    assert!(csv.lines().any(|l| l.starts_with(&format!("zigbee,{},1000,40,", base + 1000))), "{csv}");

    let (status, _) = call_json(&a.app, "GET", "/metrics/throughput?iface=lora", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let uri = format!("/metrics/throughput?from={}&to={base}", base + 1);
    let (status, _) = call_json(&a.app, "GET", &uri, None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn identity_health_and_ui() {
    let a = api();
    let (status, id) = call_json(&a.app, "PUT", "/identity", Some(json!({ "gate_id": "gw1", "network_id": "campus" }))).await;
    assert_eq!(status, StatusCode::OK, "{id}");
    let (_, id) = call_json(&a.app, "GET", "/identity", None).await;
    assert_eq!(id, json!({ "gate_id": "gw1", "network_id": "campus" }));
    let (status, health) = call_json(&a.app, "GET", "/health", None).await;
    assert_eq!((status, health["status"].clone()), (StatusCode::OK, json!("ok")));
    for path in ["/ui", "/ui/", "/ui/dashboard"] {
        let (status, page) = call(&a.app, "GET", path, None).await;
        assert_eq!(status, StatusCode::OK, "{path}");
        assert!(page.contains("/nodes"), "{page}");
    }
    let (status, csv) = call(&a.app, "GET", "/metrics/resources?format=csv", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(csv.starts_with("at_ms,cpu_pct,ram_free_bytes,ram_total_bytes,free_fraction"));
}

#[tokio::test]
async fn ui_dir_is_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>console</h1>").unwrap();
    let mut a = api();
    let state = ApiState {
        registry: Arc::new(Registry::in_memory()),
        recent: a.recent.clone(),
        throughput: a.throughput.clone(),
        resources: Arc::new(Mutex::new(ResourceSampler::new(Duration::from_secs(10), 10))),
        health: Arc::new(|| json!({})),
        ui_dir: Some(dir.path().to_path_buf()),
    };
    a.app = router(state);
    let (status, page) = call(&a.app, "GET", "/ui/index.html", None).await;
    assert_eq!((status, page.as_str()), (StatusCode::OK, "<h1>console</h1>"));
}

#[tokio::test]
async fn api_changes_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    {
        let a = api_with(Registry::open(&path).unwrap());
        call_json(&a.app, "POST", "/nodes", Some(json!({ "node_id": "nodo1" }))).await;
        call_json(&a.app, "PATCH", "/nodes/nodo1", Some(json!({ "sampling_period": 12 }))).await;
        let rule = json!({ "rule_id": "wet", "sensor_selector": "Humidity", "comparator": "ge", "threshold": 90 });
        call_json(&a.app, "POST", "/rules", Some(rule)).await;
    }
    let a = api_with(Registry::open(&path).unwrap());
    let (_, node) = call_json(&a.app, "GET", "/nodes/nodo1", None).await;
    assert_eq!(node["sampling_period"], 12);
    let (_, rules) = call_json(&a.app, "GET", "/rules", None).await;
    assert_eq!(rules[0]["rule_id"], "wet");
}
