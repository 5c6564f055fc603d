//! afserve: local HTTP API behind the AF-tuning UI.

use std::io::Write;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use stainforge_core::imgproc::af_subtract;
use stainforge_core::io::{encode_png, ColorType, read_channels, read_manifest, read_rgb};
use stainforge_core::{stats, AfParams, ChannelImage, ManifestRecord, PanelConfig};
use tower_http::services::ServeDir;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Display window of previews, as foreground-agnostic percentiles.
const WINDOW: (f64, f64) = (0.005, 0.995);

pub struct AppState {
    pub panel_path: PathBuf,
    pub audit_log: PathBuf,
    pub tiles: Vec<ManifestRecord>,
    writer: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn new(panel_path: PathBuf, manifest: &Path, audit_log: Option<PathBuf>) -> Result<Self> {
        let base = manifest.parent().unwrap_or(Path::new("."));
        let tiles = read_manifest(manifest)?.into_iter().map(|r| r.resolved(base)).collect();
        let audit_log = audit_log.unwrap_or_else(|| panel_path.with_extension("audit.jsonl"));
        Ok(Self { panel_path, audit_log, tiles, writer: tokio::sync::Mutex::new(()) })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Self::new(cfg.paths.panel.clone(), &cfg.paths.manifest, cfg.serve.audit_log.clone())
    }

    fn tile(&self, id: &str) -> std::result::Result<&ManifestRecord, ApiError> {
        self.tiles.iter().find(|t| t.tile_id == id).ok_or_else(|| ApiError::not_found(format!("unknown tile `{id}`")))
    }

    fn panel(&self) -> std::result::Result<PanelConfig, ApiError> {
        PanelConfig::load(&self.panel_path).map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelInfo {
    pub name: String,
    pub lambda: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelsResponse {
    pub channels: Vec<ChannelInfo>,
    pub af_channel: Option<String>,
    pub tiles: Vec<String>,
}

async fn channels(State(st): State<Arc<AppState>>) -> ApiResult<Json<ChannelsResponse>> {
    let panel = st.panel()?;
    Ok(Json(ChannelsResponse {
        channels: panel
            .markers
            .iter()
            .map(|m| ChannelInfo { name: m.name.clone(), lambda: m.af.lambda, b: m.af.b })
            .collect(),
        af_channel: panel.af_channel.clone(),
        tiles: st.tiles.iter().map(|t| t.tile_id.clone()).collect(),
    }))
}

#[derive(Debug, Deserialize)]
struct PreviewQuery {
    tile: String,
    channel: String,
    lambda: Option<f64>,
    b: Option<f64>,
    format: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RawQuery {
    tile: String,
    channel: String,
}

fn load_channel(st: &AppState, panel: &PanelConfig, tile: &str, channel: &str) -> ApiResult<ChannelImage> {
    let rec = st.tile(tile)?;
    let idx = panel.channel_index(channel).map_err(|e| ApiError::not_found(e.to_string()))?;
    let mut chans = read_channels(&rec.mif_path, rec.mpp).map_err(ApiError::internal)?;
    if idx >= chans.len() {
        return Err(ApiError::internal(format!("{} has {} pages", rec.mif_path.display(), chans.len())));
    }
    Ok(chans.swap_remove(idx))
}

fn raw_response(img: &ChannelImage) -> Response {
    let bytes: Vec<u8> = img.pixels().iter().flat_map(|v| v.to_le_bytes()).collect();
    let mut resp = ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response();
    let h = resp.headers_mut();
    h.insert("x-width", HeaderValue::from(img.width()));
    h.insert("x-height", HeaderValue::from(img.height()));
    resp
}

/// Percentile-windowed 8-bit grayscale PNG.
fn window_png(img: &ChannelImage) -> ApiResult<Vec<u8>> {
    let mut sorted = img.pixels().to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = stats::quantile_sorted(&sorted, WINDOW.0).unwrap_or(0.0);
    let hi = stats::quantile_sorted(&sorted, WINDOW.1).unwrap_or(1.0);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gray: Vec<u8> = img.pixels().iter().map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut out = Vec::new();
    encode_png(&mut out, img.width() as u32, img.height() as u32, &gray, ColorType::L8).map_err(ApiError::internal)?;
    Ok(out)
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

/// AF-subtracted channel; `lambda`/`b` default to the saved panel values.
async fn preview(State(st): State<Arc<AppState>>, Query(q): Query<PreviewQuery>) -> ApiResult<Response> {
    blocking(move || {
        let panel = st.panel()?;
        let marker = panel.marker(&q.channel).ok_or_else(|| ApiError::not_found(format!("unknown marker channel `{}`", q.channel)))?;
        let params = AfParams { lambda: q.lambda.unwrap_or(marker.af.lambda), b: q.b.unwrap_or(marker.af.b) };
        params.validate().map_err(|e| ApiError::invalid(e.to_string()))?;
        let af_name = panel.af_channel.clone().ok_or_else(|| ApiError::invalid("panel has no AF channel"))?;
        let c = load_channel(&st, &panel, &q.tile, &q.channel)?;
        let af = load_channel(&st, &panel, &q.tile, &af_name)?;
        let corrected = af_subtract(&c, &af, params).map_err(ApiError::internal)?;
        match q.format.as_deref() {
            None | Some("png") => Ok(png(window_png(&corrected)?)),
            Some("f64") => Ok(raw_response(&corrected)),
            Some(other) => Err(ApiError::invalid(format!("unknown format `{other}`"))),
        }
    })
    .await
}

/// Uncorrected channel as little-endian f64 for client-side recomputation.
async fn raw(State(st): State<Arc<AppState>>, Query(q): Query<RawQuery>) -> ApiResult<Response> {
    blocking(move || {
        let panel = st.panel()?;
        Ok(raw_response(&load_channel(&st, &panel, &q.tile, &q.channel)?))
    })
    .await
}

async fn tile_he(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    blocking(move || {
        let rec = st.tile(&id)?;
        let img = read_rgb(&rec.he_path).map_err(ApiError::internal)?;
        let mut out = Vec::new();
        encode_png(&mut out, img.width() as u32, img.height() as u32, img.data(), ColorType::Rgb8)
            .map_err(ApiError::internal)?;
        Ok(png(out))
    })
    .await
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamPair {
    pub lambda: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsUpdate {
    pub channel: String,
    pub lambda: f64,
    pub b: f64,
    /// Values the client last saw; a mismatch means another writer won.
    #[serde(default)]
    pub previous: Option<ParamPair>,
}

#[derive(Serialize)]
struct AuditEntry<'a> {
    unix_time: u64,
    channel: &'a str,
    old: ParamPair,
    new: ParamPair,
    panel_hash: String,
}

async fn update_params(State(st): State<Arc<AppState>>, Json(req): Json<ParamsUpdate>) -> ApiResult<Json<ChannelInfo>> {
    let params = AfParams { lambda: req.lambda, b: req.b };
    params.validate().map_err(|e| ApiError::invalid(e.to_string()))?;
    let _guard = st.writer.lock().await;
    let st2 = st.clone();
    blocking(move || {
        let st = st2;
        let mut panel = st.panel()?;
        let marker = panel.marker_mut(&req.channel).ok_or_else(|| ApiError::not_found(format!("unknown marker channel `{}`", req.channel)))?;
        let old = ParamPair { lambda: marker.af.lambda, b: marker.af.b };
        if let Some(prev) = req.previous {
            if prev != old {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    format!("`{}` changed to lambda={}, b={} since it was read", req.channel, old.lambda, old.b),
                ));
            }
        }
        marker.af = params;
        panel.save(&st.panel_path).map_err(ApiError::internal)?;
        let entry = AuditEntry {
            unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            channel: &req.channel,
            old,
            new: ParamPair { lambda: req.lambda, b: req.b },
            panel_hash: panel.hash(),
        };
        let mut line = serde_json::to_string(&entry).map_err(ApiError::internal)?;
        line.push('\n');
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&st.audit_log)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(ApiError::internal)?;
        log::info!("{}: lambda {} -> {}, b {} -> {}", req.channel, old.lambda, req.lambda, old.b, req.b);
        Ok(Json(ChannelInfo { name: req.channel.clone(), lambda: req.lambda, b: req.b }))
    })
    .await
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/channels", get(channels))
        .route("/api/preview", get(preview))
        .route("/api/raw", get(raw))
        .route("/api/params", post(update_params))
        .route("/api/tile/{id}/he", get(tile_he))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serve on `127.0.0.1:port` until interrupted.
pub fn serve(cfg: &RunConfig, port: u16) -> Result<()> {
    let state = Arc::new(AppState::from_config(cfg)?);
    let app = router(state, cfg.serve.static_dir.as_deref());
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, port));
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::user(format!("cannot bind {addr}: {e}")))?;
        log::info!("afserve listening on http://{addr}");
        axum::serve(listener, app).await.map_err(|e| CliError::Internal(e.to_string()))
    })
}
