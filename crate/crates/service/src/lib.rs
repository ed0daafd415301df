//! HTTP API for single-image decomposition, relighting and light transfer.
//!
//! | route | body | reply |
//! |---|---|---|
//! | `POST /api/decompose` | multipart `image` PNG, optional `mask` PNG | [`DecomposeResponse`] |
//! | `POST /api/relight` | [`RelightRequest`] JSON | `image/png` |
//! | `POST /api/transfer` | multipart `source_session_id`, `reference` PNG, optional `mask` PNG | [`TransferResponse`] |
//! | `GET /api/session/{id}/{albedo,normals,shading,reconstruction}.png` | | `image/png` |
//! | `GET /api/health` | | [`HealthResponse`] |
//!
//! Lighting arrays are the 27 coefficients basis-major, RGB-minor.
//! Errors are JSON `{error, id}`; 500s log the id with the cause.

pub mod error;
pub mod imaging;
pub mod session;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use relit_core::lightsolve::{estimate_light, Ridge};
use relit_core::losses::Components;
use relit_core::nn::{Checkpoint, Model, Trainer};
use relit_core::{ImagePlane, Mask, ShLighting};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

pub use error::{ApiError, ApiResult};
pub use session::{Session, SessionCache};

pub const API_VERSION: &str = "v1";
const BODY_LIMIT: usize = 64 << 20;

/// Anything that turns an image into components. The service uses a
/// checkpointed [`Model`]; tests plug in ground-truth oracles.
pub trait Decomposer: Send + Sync {
    fn decompose(&self, image: &ImagePlane, mask: &Mask) -> relit_core::Result<Components>;
}

impl Decomposer for Model {
    fn decompose(&self, image: &ImagePlane, mask: &Mask) -> relit_core::Result<Components> {
        self.decompose_single(image, mask)
    }
}

pub struct AppState {
    pub decomposer: Arc<dyn Decomposer>,
    pub sessions: SessionCache,
    pub checkpoint_hash: String,
}

impl AppState {
    pub fn new(decomposer: Arc<dyn Decomposer>, checkpoint_hash: impl Into<String>) -> Self {
        Self {
            decomposer,
            sessions: SessionCache::default(),
            checkpoint_hash: checkpoint_hash.into(),
        }
    }

    /// Loads the checkpoint once; its SHA-256 identifies it in `/api/health`.
    pub fn from_checkpoint(path: &Path) -> relit_core::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| relit_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let hash = hex::encode(Sha256::digest(&bytes));
        let ckpt = Checkpoint::from_bytes(&bytes, path)?;
        let model = Trainer::from_checkpoint(&ckpt)?.into_model();
        Ok(Self::new(Arc::new(model), hash))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrls {
    pub albedo: String,
    pub normals: String,
    pub shading: String,
    pub reconstruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposeResponse {
    pub session_id: String,
    pub width: usize,
    pub height: usize,
    pub lighting: Vec<f64>,
    pub urls: ImageUrls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelightRequest {
    pub session_id: String,
    pub lighting: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResponse {
    /// Session holding the source geometry under the reference lighting.
    pub session_id: String,
    pub lighting: Vec<f64>,
    pub relit_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub checkpoint_hash: String,
    pub version: String,
    pub api_version: String,
}

fn urls(id: &str) -> ImageUrls {
    let u = |name: &str| format!("/api/session/{id}/{name}.png");
    ImageUrls {
        albedo: u("albedo"),
        normals: u("normals"),
        shading: u("shading"),
        reconstruction: u("reconstruction"),
    }
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn parse_lighting(v: &[f64]) -> ApiResult<ShLighting> {
    if v.len() != 27 {
        return Err(ApiError::BadRequest(format!("lighting must have 27 values, got {}", v.len())));
    }
    ShLighting::from_flat(v).map_err(|e| ApiError::BadRequest(e.to_string()))
}

/// Named multipart fields, fully buffered.
async fn read_fields(mut mp: Multipart) -> ApiResult<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    while let Some(field) = mp
        .next_field()
        .await
        .map_err(|e| ApiError::BadRequest(format!("multipart: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::BadRequest(format!("multipart field {name}: {e}")))?;
        out.push((name, bytes.to_vec()));
    }
    Ok(out)
}

fn field<'a>(fields: &'a [(String, Vec<u8>)], name: &str) -> Option<&'a [u8]> {
    fields.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
}

fn required<'a>(fields: &'a [(String, Vec<u8>)], name: &str) -> ApiResult<&'a [u8]> {
    field(fields, name).ok_or_else(|| ApiError::BadRequest(format!("missing multipart field {name}")))
}

/// Decodes the upload and runs the decomposer off the async executor.
async fn decompose_upload(
    state: &Arc<AppState>,
    image: &[u8],
    mask: Option<&[u8]>,
) -> ApiResult<(ImagePlane, Mask, Components)> {
    let img = imaging::decode_image(image)?;
    let mask = match mask {
        Some(b) => imaging::decode_mask(b, img.width(), img.height())?,
        None => Mask::full(img.width(), img.height()),
    };
    let st = Arc::clone(state);
    let (img, mask, comps) = tokio::task::spawn_blocking(move || {
        let c = st.decomposer.decompose(&img, &mask);
        (img, mask, c)
    })
    .await
    .map_err(|e| ApiError::Internal(relit_core::Error::InvalidState(format!("decompose task: {e}"))))?;
    Ok((img, mask, comps?))
}

async fn decompose(State(state): State<Arc<AppState>>, mp: Multipart) -> ApiResult<Json<DecomposeResponse>> {
    let fields = read_fields(mp).await?;
    let (img, mask, c) = decompose_upload(&state, required(&fields, "image")?, field(&fields, "mask")).await?;
    let session = state
        .sessions
        .insert(Session::new(c.albedo, c.normals, mask, c.light)?);
    Ok(Json(DecomposeResponse {
        session_id: session.id.clone(),
        width: img.width(),
        height: img.height(),
        lighting: session.light.to_flat().to_vec(),
        urls: urls(&session.id),
    }))
}

async fn relight(State(state): State<Arc<AppState>>, body: axum::body::Bytes) -> ApiResult<Response> {
    let req: RelightRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("relight body: {e}")))?;
    let light = parse_lighting(&req.lighting)?;
    let session = state
        .sessions
        .get(&req.session_id)
        .ok_or(ApiError::UnknownSession(req.session_id))?;
    Ok(png(session.relight(&light)?))
}

/// Decomposes the reference, refines its lighting by least squares against
/// the reference pixels under its own albedo and normals, and relights the
/// source with it.
async fn transfer(State(state): State<Arc<AppState>>, mp: Multipart) -> ApiResult<Json<TransferResponse>> {
    let fields = read_fields(mp).await?;
    let source_id = String::from_utf8(required(&fields, "source_session_id")?.to_vec())
        .map_err(|_| ApiError::BadRequest("source_session_id is not UTF-8".into()))?;
    let source = state
        .sessions
        .get(source_id.trim())
        .ok_or(ApiError::UnknownSession(source_id.trim().to_string()))?;
    let (img, mask, c) = decompose_upload(&state, required(&fields, "reference")?, field(&fields, "mask")).await?;
    let light = match estimate_light(&img, &c.albedo, &c.normals, &mask, Ridge::default()) {
        Ok(est) => est.light,
        Err(e) => {
            log::warn!("light refinement failed, using the network estimate: {e}");
            c.light
        }
    };
    let session = state.sessions.insert(Session::new(
        source.albedo.clone(),
        source.normals.clone(),
        source.mask.clone(),
        light,
    )?);
    Ok(Json(TransferResponse {
        session_id: session.id.clone(),
        lighting: light.to_flat().to_vec(),
        relit_url: urls(&session.id).reconstruction,
    }))
}

async fn session_image(
    State(state): State<Arc<AppState>>,
    UrlPath((id, file)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let session = state.sessions.get(&id).ok_or(ApiError::UnknownSession(id))?;
    let name = file.strip_suffix(".png").unwrap_or(&file);
    match session.image(name) {
        Some(b) => Ok(png(b.to_vec())),
        None => Ok((StatusCode::NOT_FOUND, format!("no image {file}")).into_response()),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        checkpoint_hash: state.checkpoint_hash.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        api_version: API_VERSION.into(),
    })
}

/// API routes, plus the static UI bundle as fallback when `static_dir` is set.
pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/decompose", post(decompose))
        .route("/api/relight", post(relight))
        .route("/api/transfer", post(transfer))
        .route("/api/session/{id}/{file}", get(session_image))
        .route("/api/health", get(health))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state);
    let app = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(CorsLayer::permissive())
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
