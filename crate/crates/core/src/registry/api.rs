//! JSON-over-HTTP operator API.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, SystemTime};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, put};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use super::{AlarmRule, Change, GatewayIdentity, NodeDescriptor, RecentRecords, Registry, RegistryError, SensorDescriptor};
use crate::metrics::{epoch_ms, from_epoch_ms, ResourceSampler, ThroughputMeter};
use crate::protocol::{ProtocolId, RADIO_LINKS};

pub const DEFAULT_RECENT_LIMIT: usize = 100;
pub const DEFAULT_THROUGHPUT_RANGE: Duration = Duration::from_secs(60);
pub const MAX_SERIES_WINDOWS: u64 = 86_400;

pub type HealthFn = Arc<dyn Fn() -> Value + Send + Sync>;

#[derive(Clone)]
pub struct ApiState {
    pub registry: Arc<Registry>,
    pub recent: Arc<RecentRecords>,
    pub throughput: Arc<ThroughputMeter>,
    pub resources: Arc<Mutex<ResourceSampler>>,
    pub health: HealthFn,
    /// Directory holding the built console. `None` serves a placeholder page.
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub enum ApiError {
    Registry(RegistryError),
    BadRequest(String),
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        ApiError::Registry(e)
    }
}

fn unprocessable(field: &str, reason: impl Into<String>) -> ApiError {
    ApiError::Registry(RegistryError::Validation { field: field.into(), reason: reason.into() })
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code, message) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad-request", m),
            ApiError::Registry(e) => {
                let status = match &e {
                    RegistryError::UnknownNode(_) | RegistryError::UnknownSensor { .. } | RegistryError::UnknownRule(_) => {
                        StatusCode::NOT_FOUND
                    }
                    RegistryError::DuplicateNode(_) | RegistryError::DuplicateSensor { .. } | RegistryError::DuplicateRule(_) => {
                        StatusCode::CONFLICT
                    }
                    RegistryError::InvalidPeriod(_) | RegistryError::UnknownLink { .. } | RegistryError::Validation { .. } => {
                        StatusCode::UNPROCESSABLE_ENTITY
                    }
                    RegistryError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
                };
                (status, e.code(), e.to_string())
            }
        };
        (status, Json(json!({ "error": code, "message": message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Syntax errors are 400; well-formed JSON of the wrong shape is 422.
fn body<T: DeserializeOwned>(bytes: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(bytes).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => unprocessable("body", e.to_string()),
        _ => ApiError::BadRequest(e.to_string()),
    })
}

async fn apply(st: &ApiState, change: Change) -> ApiResult<Arc<super::RegistryState>> {
    let registry = st.registry.clone();
    // Persisting syncs to disk; keep it off the async workers.
    tokio::task::spawn_blocking(move || registry.apply(change))
        .await
        .map_err(|e| ApiError::Registry(RegistryError::Storage(e.to_string())))?
        .map_err(ApiError::from)
}

pub fn router(state: ApiState) -> Router {
    let ui_dir = state.ui_dir.clone();
    let api = Router::new()
        .route("/nodes", get(list_nodes).post(create_node))
        .route("/nodes/{id}", get(get_node).delete(delete_node).patch(patch_node))
        .route("/nodes/{id}/sensors", axum::routing::post(add_sensor))
        .route("/nodes/{id}/sensors/{sid}", axum::routing::delete(remove_sensor))
        .route("/nodes/{id}/sensors/{sid}/protocol", put(assign_protocol))
        .route("/rules", get(list_rules).post(create_rule))
        .route("/rules/{id}", axum::routing::delete(delete_rule))
        .route("/records/recent", get(recent_records))
        .route("/metrics/throughput", get(throughput))
        .route("/metrics/resources", get(resources))
        .route("/identity", get(get_identity).put(put_identity))
        .route("/health", get(health))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api
            .route("/ui", get(ui_placeholder))
            .route("/ui/", get(ui_placeholder))
            .route("/ui/{*rest}", get(ui_placeholder)),
    }
}

async fn ui_placeholder() -> Html<&'static str> {
    Html(
        "<!doctype html><title>gateway</title><h1>gateway</h1>\
         <p>No console bundle is configured. The JSON API is available at \
         /nodes, /rules, /records/recent, /metrics/throughput, /metrics/resources, /identity and /health.</p>",
    )
}

async fn list_nodes(State(st): State<ApiState>) -> Json<Vec<NodeDescriptor>> {
    Json(st.registry.snapshot().nodes.values().cloned().collect())
}

async fn get_node(State(st): State<ApiState>, Path(id): Path<String>) -> ApiResult<Json<NodeDescriptor>> {
    st.registry.snapshot().nodes.get(&id).cloned().map(Json).ok_or(ApiError::Registry(RegistryError::UnknownNode(id)))
}

async fn create_node(State(st): State<ApiState>, raw: Bytes) -> ApiResult<(StatusCode, Json<NodeDescriptor>)> {
    let node: NodeDescriptor = body(&raw)?;
    let id = node.node_id.clone();
    let state = apply(&st, Change::RegisterNode { node }).await?;
    Ok((StatusCode::CREATED, Json(state.nodes[&id].clone())))
}

async fn delete_node(State(st): State<ApiState>, Path(node_id): Path<String>) -> ApiResult<StatusCode> {
    apply(&st, Change::RemoveNode { node_id }).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodePatch {
    sampling_period: Option<i64>,
    gps: Option<String>,
    enabled: Option<bool>,
}

async fn patch_node(State(st): State<ApiState>, Path(node_id): Path<String>, raw: Bytes) -> ApiResult<Json<NodeDescriptor>> {
    let patch: NodePatch = body(&raw)?;
    let sampling_period = match patch.sampling_period {
        Some(p) => Some(u32::try_from(p).ok().filter(|&p| p >= 1).ok_or(RegistryError::InvalidPeriod(p))?),
        None => None,
    };
    let change = Change::UpdateNode { node_id: node_id.clone(), sampling_period, gps: patch.gps, enabled: patch.enabled };
    let state = apply(&st, change).await?;
    Ok(Json(state.nodes[&node_id].clone()))
}

async fn add_sensor(
    State(st): State<ApiState>,
    Path(node_id): Path<String>,
    raw: Bytes,
) -> ApiResult<(StatusCode, Json<SensorDescriptor>)> {
    let sensor: SensorDescriptor = body(&raw)?;
    apply(&st, Change::AddSensor { node_id, sensor: sensor.clone() }).await?;
    Ok((StatusCode::CREATED, Json(sensor)))
}

async fn remove_sensor(State(st): State<ApiState>, Path((node_id, sensor_id)): Path<(String, String)>) -> ApiResult<StatusCode> {
    apply(&st, Change::RemoveSensor { node_id, sensor_id }).await?;
    Ok(StatusCode::NO_CONTENT)
}

/// Accepts `"zigbee"` or `{"protocol": "zigbee"}`.
async fn assign_protocol(
    State(st): State<ApiState>,
    Path((node_id, sensor_id)): Path<(String, String)>,
    raw: Bytes,
) -> ApiResult<Json<SensorDescriptor>> {
    let v: Value = body(&raw)?;
    let name = match &v {
        Value::String(s) => s.as_str(),
        Value::Object(m) => m.get("protocol").and_then(Value::as_str).ok_or_else(|| unprocessable("protocol", "missing"))?,
        _ => return Err(unprocessable("protocol", "expected a protocol name")),
    };
    let protocol: ProtocolId = name.parse().map_err(|e: crate::protocol::UnknownProtocol| unprocessable("protocol", e.to_string()))?;
    let state = apply(&st, Change::AssignProtocol { node_id: node_id.clone(), sensor_id: sensor_id.clone(), protocol }).await?;
    Ok(Json(state.nodes[&node_id].sensor(&sensor_id).cloned().expect("sensor just updated")))
}

async fn list_rules(State(st): State<ApiState>) -> Json<Vec<AlarmRule>> {
    Json(st.registry.snapshot().rules.values().cloned().collect())
}

async fn create_rule(State(st): State<ApiState>, raw: Bytes) -> ApiResult<(StatusCode, Json<AlarmRule>)> {
    let rule: AlarmRule = body::<AlarmRule>(&raw)?.with_defaults();
    apply(&st, Change::AddRule { rule: rule.clone() }).await?;
    Ok((StatusCode::CREATED, Json(rule)))
}

async fn delete_rule(State(st): State<ApiState>, Path(rule_id): Path<String>) -> ApiResult<StatusCode> {
    apply(&st, Change::RemoveRule { rule_id }).await?;
    Ok(StatusCode::NO_CONTENT)
}

fn query_num<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<T>> {
    q.get(key).map(|v| v.parse().map_err(|_| unprocessable(key, format!("{v:?} is not a valid number")))).transpose()
}

fn wants_csv(q: &HashMap<String, String>) -> ApiResult<bool> {
    match q.get("format").map(String::as_str) {
        None | Some("json") => Ok(false),
        Some("csv") => Ok(true),
        Some(other) => Err(unprocessable("format", format!("unsupported format {other:?}"))),
    }
}

fn csv(text: String) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], text).into_response()
}

async fn recent_records(State(st): State<ApiState>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Response> {
    let limit = query_num::<usize>(&q, "limit")?.unwrap_or(DEFAULT_RECENT_LIMIT);
    Ok(Json(st.recent.latest(limit.min(st.recent.capacity()))).into_response())
}

/// `from`/`to` are Unix milliseconds; the default range is the last minute.
async fn throughput(State(st): State<ApiState>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Response> {
    let ifaces = match q.get("iface") {
        Some(name) => vec![name.parse::<ProtocolId>().map_err(|e| unprocessable("iface", e.to_string()))?],
        None => RADIO_LINKS.to_vec(),
    };
    let to = query_num::<u64>(&q, "to")?.unwrap_or_else(|| epoch_ms(SystemTime::now()));
    let from = query_num::<u64>(&q, "from")?.unwrap_or(to.saturating_sub(DEFAULT_THROUGHPUT_RANGE.as_millis() as u64));
    if from > to {
        return Err(unprocessable("from", "must not be after to"));
    }
    let window_ms = st.throughput.window().as_millis() as u64;
    if (to - from).div_ceil(window_ms) > MAX_SERIES_WINDOWS {
        return Err(unprocessable("to", format!("range exceeds {MAX_SERIES_WINDOWS} windows")));
    }
    let series: Vec<_> = ifaces
        .into_iter()
        .flat_map(|p| st.throughput.window_series(p, from_epoch_ms(from), from_epoch_ms(to)))
        .collect();
    if wants_csv(&q)? {
        let mut out = String::from("interface,window_start_ms,window_len_ms,bytes,bps\n");
        for s in &series {
            let _ = writeln!(out, "{},{},{},{},{}", s.interface, s.window_start_ms, s.window_len_ms, s.bytes, s.bps);
        }
        return Ok(csv(out));
    }
    Ok(Json(series).into_response())
}

async fn resources(State(st): State<ApiState>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Response> {
    let samples = st.resources.lock().samples();
    if wants_csv(&q)? {
        let mut out = String::from("at_ms,cpu_pct,ram_free_bytes,ram_total_bytes,free_fraction\n");
        for s in &samples {
            let _ = writeln!(out, "{},{},{},{},{}", s.at_ms, s.cpu_pct, s.ram_free_bytes, s.ram_total_bytes, s.free_fraction());
        }
        return Ok(csv(out));
    }
    Ok(Json(samples).into_response())
}

async fn get_identity(State(st): State<ApiState>) -> Json<GatewayIdentity> {
    Json(st.registry.snapshot().identity.clone())
}

async fn put_identity(State(st): State<ApiState>, raw: Bytes) -> ApiResult<Json<GatewayIdentity>> {
    let identity: GatewayIdentity = body(&raw)?;
    let state = apply(&st, Change::SetIdentity { identity }).await?;
    Ok(Json(state.identity.clone()))
}

async fn health(State(st): State<ApiState>) -> Json<Value> {
    Json((st.health)())
}
