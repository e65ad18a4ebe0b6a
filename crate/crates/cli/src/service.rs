//! HTTP inference service.
//!
//! | route              | body                  | answer                                   |
//! |--------------------|-----------------------|------------------------------------------|
//! | `GET /healthz`     |                       | `{"status":"ok"}`                        |
//! | `GET /categories`  |                       | taxonomy, its hash and preview colors    |
//! | `POST /layout`     | [`SceneRequest`]      | layout preview, coverage, boxes          |
//! | `POST /synthesize` | [`SceneRequest`]      | the above plus the generated image       |
//!
//! `/layout` accepts `?perturb=<range>&perturb_seed=<n>&mode=<mode>`; the
//! perturbed scene is echoed back in the answer. PNGs are base64 encoded.
//! Errors answer `{"error": <name>, "kind": <class>, "message": ...}` with
//! status 400 for invalid scenes and requests, 409 for a taxonomy hash that
//! differs from the served checkpoint, 500 otherwise.
//!
//! Layout requests run concurrently; image synthesis runs one request at a
//! time in arrival order.

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use plgan_core::eval::coverage_batch;
use plgan_core::plg::{LayoutBatch, LayoutMode};
use plgan_core::render::{category_color, layout_preview, png_bytes, tensor_to_image, RgbImage};
use plgan_core::scene::{perturb_scene, Kind, Scene};
use plgan_core::{Error, Model};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

/// Served model plus inference settings.
pub struct ServiceState {
    model: Model,
    tau: f64,
    use_gf: bool,
    synthesis: Mutex<()>,
}

impl ServiceState {
    pub fn new(model: Model) -> Self {
        let tau = model.config().generator.norm.tau;
        Self { model, tau, use_gf: true, synthesis: Mutex::new(()) }
    }

    pub fn with_guided_filter(mut self, on: bool) -> Self {
        self.use_gf = on;
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/categories", get(categories))
        .route("/layout", post(layout))
        .route("/synthesize", post(synthesize))
        .with_state(state)
}

/// A scene plus request options.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneRequest {
    #[serde(flatten)]
    pub scene: Scene,
    /// Latent seed; 0 when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub want_layout: Option<bool>,
    #[serde(default)]
    pub want_image: Option<bool>,
    /// When present, must equal the served taxonomy's hash.
    #[serde(default)]
    pub taxonomy_hash: Option<String>,
    #[serde(default)]
    pub mode: Option<String>,
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct LayoutQuery {
    pub perturb: Option<f64>,
    pub perturb_seed: Option<u64>,
    pub mode: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxOut {
    pub object_index: usize,
    pub category: usize,
    pub cx: f64,
    pub cy: f64,
    pub h: f64,
    pub w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResponse {
    /// The scene that was laid out (perturbed when requested).
    pub scene: Scene,
    pub seed: u64,
    pub mode: String,
    /// Percent of canvas pixels assigned to some category.
    pub coverage: f64,
    pub boxes: Vec<BoxOut>,
    pub layout_png: Option<String>,
    pub image_png: Option<String>,
    pub timing_ms: f64,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    kind: &'static str,
    message: String,
}

/// Error answer with its status code.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn bad_request(error: &str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody { error: error.into(), kind: "InvalidRequest", message: message.into() },
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = if e.is_invalid_scene() {
            (StatusCode::BAD_REQUEST, "InvalidScene")
        } else if matches!(e, Error::ShapeMismatch(_) | Error::Json(_)) {
            (StatusCode::BAD_REQUEST, "InvalidRequest")
        } else {
            (StatusCode::INTERNAL_SERVER_ERROR, "Internal")
        };
        Self { status, body: ErrorBody { error: e.name().into(), kind, message: e.to_string() } }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Serialize)]
struct CategoryOut {
    id: usize,
    name: String,
    kind: Kind,
    color: [u8; 3],
}

async fn categories(State(state): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    let tax = state.model.taxonomy();
    let cats: Vec<CategoryOut> = tax
        .categories()
        .iter()
        .map(|c| CategoryOut { id: c.id, name: c.name.clone(), kind: c.kind, color: category_color(c.id, c.kind) })
        .collect();
    Json(serde_json::json!({
        "taxonomy_hash": tax.hash(),
        "resolution": state.model.config().resolution,
        "max_size": state.model.config().max_size,
        "max_objects": state.model.config().max_objects,
        "categories": cats,
    }))
}

fn parse_request(state: &ServiceState, body: &[u8]) -> Result<SceneRequest, ApiError> {
    let req: SceneRequest =
        serde_json::from_slice(body).map_err(|e| ApiError::bad_request("MalformedRequest", e.to_string()))?;
    if let Some(h) = &req.taxonomy_hash {
        let served = state.model.taxonomy().hash();
        if *h != served {
            return Err(ApiError {
                status: StatusCode::CONFLICT,
                body: ErrorBody {
                    error: "TaxonomyMismatch".into(),
                    kind: "TaxonomyMismatch",
                    message: format!("request taxonomy {h} differs from served taxonomy {served}"),
                },
            });
        }
    }
    Ok(req)
}

fn parse_mode(s: Option<&str>) -> Result<LayoutMode, ApiError> {
    match s {
        None => Ok(LayoutMode::Panoptic),
        Some(m) => LayoutMode::parse(m).ok_or_else(|| ApiError::bad_request("UnknownMode", format!("unknown mode {m:?}"))),
    }
}

fn encode_png(img: &RgbImage) -> Result<String, ApiError> {
    Ok(BASE64.encode(png_bytes(img)?))
}

fn describe(
    state: &ServiceState,
    scene: Scene,
    seed: u64,
    mode: LayoutMode,
    layouts: &LayoutBatch,
    want_layout: bool,
) -> Result<SynthesisResponse, ApiError> {
    let coverage = coverage_batch(layouts, state.tau)?[0];
    let boxes = layouts
        .boxes(0)
        .into_iter()
        .map(|(object_index, category, b)| BoxOut { object_index, category, cx: b.cx, cy: b.cy, h: b.h, w: b.w })
        .collect();
    let layout_png = if want_layout {
        Some(encode_png(&layout_preview(layouts, 0, state.model.taxonomy(), state.tau)?)?)
    } else {
        None
    };
    Ok(SynthesisResponse {
        scene,
        seed,
        mode: mode.as_str().into(),
        coverage,
        boxes,
        layout_png,
        image_png: None,
        timing_ms: 0.0,
    })
}

fn run_layout(state: &ServiceState, req: SceneRequest, query: LayoutQuery) -> Result<SynthesisResponse, ApiError> {
    let start = Instant::now();
    let mode = parse_mode(query.mode.as_deref().or(req.mode.as_deref()))?;
    let seed = req.seed.unwrap_or(0);
    let scene = match query.perturb {
        Some(r) => perturb_scene(&req.scene, r, query.perturb_seed.unwrap_or(0))?,
        None => req.scene,
    };
    let valid = state.model.validate(&scene)?;
    let layouts = state.model.layouts(&[valid], &[seed], mode)?;
    let mut out = describe(state, scene, seed, mode, &layouts, req.want_layout.unwrap_or(true))?;
    out.timing_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

fn run_synthesis(state: &ServiceState, req: SceneRequest) -> Result<SynthesisResponse, ApiError> {
    let start = Instant::now();
    let mode = parse_mode(req.mode.as_deref())?;
    let seed = req.seed.unwrap_or(0);
    let valid = state.model.validate(&req.scene)?;
    let synth = state.model.synthesize(&[valid], &[seed], mode, state.use_gf)?;
    let mut out = describe(state, req.scene, seed, mode, &synth.layouts, req.want_layout.unwrap_or(true))?;
    if req.want_image.unwrap_or(true) {
        out.image_png = Some(encode_png(&tensor_to_image(&synth.image.get(0).map_err(Error::from)?)?)?);
    }
    out.timing_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

async fn blocking<F>(f: F) -> Result<Json<SynthesisResponse>, ApiError>
where
    F: FnOnce() -> Result<SynthesisResponse, ApiError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json),
        Err(e) => Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody { error: "WorkerFailed".into(), kind: "Internal", message: e.to_string() },
        }),
    }
}

async fn layout(
    State(state): State<Arc<ServiceState>>,
    Query(query): Query<LayoutQuery>,
    body: Bytes,
) -> Result<Json<SynthesisResponse>, ApiError> {
    let req = parse_request(&state, &body)?;
    blocking(move || run_layout(&state, req, query)).await
}

async fn synthesize(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<SynthesisResponse>, ApiError> {
    let req = parse_request(&state, &body)?;
    let _turn = state.synthesis.lock().await;
    let worker = Arc::clone(&state);
    blocking(move || run_synthesis(&worker, req)).await
}
