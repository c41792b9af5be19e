//! Session-oriented HTTP render service: upload an image, inspect its slots,
//! edit them and render novel views.
//!
//! Bodies are JSON. Images travel as base64-encoded PNG strings. The render
//! camera is passed as `camera=` followed by 17 comma-separated numbers: the
//! 12 row-major entries of world_from_camera, then focal_px, cx, cy, width
//! and height.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use colf::editor::{EditOp, EditedScene, RosterEntry};
use colf::model::ColfModel;
use colf::raygeom::{Camera, CameraRecord, RigidTransform};
use colf::scenegen::CameraRig;
use colf::ColfError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub max_sessions: usize,
    pub ttl: Duration,
    /// Largest render width or height accepted.
    pub max_resolution: usize,
    /// Seed for the slot-initialization noise; uploads of one image under one seed encode identically.
    pub encode_seed: u64,
    /// Shown by the health endpoint.
    pub checkpoint: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_sessions: 64,
            ttl: Duration::from_secs(3600),
            max_resolution: 256,
            encode_seed: 0,
            checkpoint: String::new(),
        }
    }
}

struct Session {
    scene: Arc<EditedScene>,
    context_camera: Camera,
    created: Instant,
    last_access: Instant,
}

pub struct AppState {
    model: Option<Arc<ColfModel>>,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Session>>,
}

impl AppState {
    pub fn new(model: Option<ColfModel>, config: ServiceConfig) -> Arc<Self> {
        Arc::new(AppState {
            model: model.map(Arc::new),
            config,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    /// Drops sessions idle for longer than the TTL; returns how many were removed.
    pub fn evict_expired(&self) -> usize {
        let ttl = self.config.ttl;
        let mut sessions = self.sessions.lock().unwrap();
        let before = sessions.len();
        sessions.retain(|_, s| s.last_access.elapsed() <= ttl);
        before - sessions.len()
    }

    fn model(&self) -> Result<Arc<ColfModel>, ApiError> {
        self.model
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded"))
    }

    fn snapshot(&self, id: &str) -> Result<(Arc<EditedScene>, Camera), ApiError> {
        let mut sessions = self.sessions.lock().unwrap();
        let s = sessions
            .get_mut(id)
            .filter(|s| s.last_access.elapsed() <= self.config.ttl)
            .ok_or_else(|| ApiError::not_found(id))?;
        s.last_access = Instant::now();
        Ok((s.scene.clone(), s.context_camera))
    }

    /// Applies `edit` to the session's scene under the lock, so concurrent renders
    /// observe either the old or the new snapshot and nothing in between.
    fn mutate<F>(&self, id: &str, edit: F) -> Result<Arc<EditedScene>, ApiError>
    where
        F: FnOnce(&EditedScene) -> colf::Result<EditedScene>,
    {
        let mut sessions = self.sessions.lock().unwrap();
        let s = sessions.get_mut(id).ok_or_else(|| ApiError::not_found(id))?;
        let next = Arc::new(edit(&s.scene)?);
        s.scene = next.clone();
        s.last_access = Instant::now();
        Ok(next)
    }

    fn insert(&self, scene: EditedScene, camera: Camera) -> String {
        let mut sessions = self.sessions.lock().unwrap();
        let ttl = self.config.ttl;
        sessions.retain(|_, s| s.last_access.elapsed() <= ttl);
        while sessions.len() >= self.config.max_sessions.max(1) {
            let oldest = sessions
                .iter()
                .min_by_key(|(_, s)| (s.last_access, s.created))
                .map(|(k, _)| k.clone());
            match oldest {
                Some(k) => sessions.remove(&k),
                None => break,
            };
        }
        let id = loop {
            let id = uuid::Uuid::new_v4().simple().to_string();
            if !sessions.contains_key(&id) {
                break id;
            }
        };
        let now = Instant::now();
        sessions.insert(
            id.clone(),
            Session {
                scene: Arc::new(scene),
                context_camera: camera,
                created: now,
                last_access: now,
            },
        );
        id
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, format!("unknown session '{id}'"))
    }
}

impl From<ColfError> for ApiError {
    fn from(e: ColfError) -> Self {
        let status = match e {
            ColfError::NotFound(_) => StatusCode::NOT_FOUND,
            ColfError::Domain(_) | ColfError::Contract(_) | ColfError::Config(_) | ColfError::Image(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSession {
    /// Base64 PNG, 8-bit RGB at the model's input size.
    pub image: String,
    /// Context camera; the default rig camera at azimuth 0 when absent.
    #[serde(default)]
    pub camera: Option<CameraRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: String,
    #[serde(rename = "K")]
    pub k: usize,
    /// SHA-256 over the little-endian slot latents.
    pub latent_digest: String,
    pub slots: Vec<RosterEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Roster {
    pub slots: Vec<RosterEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditRequest {
    pub edits: Vec<EditOp>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImportRequest {
    pub source_id: String,
    pub slot: usize,
    #[serde(default)]
    pub transform: RigidTransform,
}

#[derive(Debug, Deserialize)]
pub struct RenderQuery {
    #[serde(default)]
    pub camera: Option<String>,
    #[serde(default)]
    pub seg: u8,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RenderResponse {
    pub width: usize,
    pub height: usize,
    /// Base64 PNG, 8-bit RGB.
    pub image: String,
    /// Base64 PNG, 8-bit gray; each value is the roster index of the argmax slot.
    pub segmentation: Option<String>,
    /// Mean compositing weight per slot, in roster order.
    pub weights: Vec<SlotWeight>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SlotWeight {
    pub index: usize,
    pub mean: f32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint: String,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub resolution: Option<usize>,
}

/// Parses the 17-number camera query value.
pub fn parse_camera(text: &str, max_resolution: usize) -> Result<Camera, ApiError> {
    let values: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| ApiError::bad_request(format!("invalid camera: {e}")))?;
    if values.len() != 17 {
        return Err(ApiError::bad_request(format!(
            "invalid camera: expected 17 numbers, got {}",
            values.len()
        )));
    }
    let dim = |v: f64, what: &str| -> Result<usize, ApiError> {
        if v.fract() != 0.0 || v < 1.0 || v > max_resolution as f64 {
            return Err(ApiError::bad_request(format!(
                "invalid camera: {what} must be an integer in 1..={max_resolution}"
            )));
        }
        Ok(v as usize)
    };
    let record = CameraRecord {
        world_from_camera: values[..12].try_into().unwrap(),
        focal_px: values[12],
        cx: values[13],
        cy: values[14],
        width: dim(values[15], "width")?,
        height: dim(values[16], "height")?,
    };
    Camera::from_record(&record).map_err(|e| ApiError::bad_request(format!("invalid camera: {e}")))
}

/// Formats a camera as the query value accepted by [`parse_camera`].
pub fn camera_query(camera: &Camera) -> String {
    let r = camera.to_record();
    let mut parts: Vec<String> = r.world_from_camera.iter().map(|v| v.to_string()).collect();
    parts.extend([r.focal_px, r.cx, r.cy].iter().map(|v| v.to_string()));
    parts.push(r.width.to_string());
    parts.push(r.height.to_string());
    parts.join(",")
}

fn decode_png(data: &str) -> Result<image::RgbImage, ApiError> {
    let bytes = B64
        .decode(data.trim())
        .map_err(|e| ApiError::bad_request(format!("image is not valid base64: {e}")))?;
    let img = image::load_from_memory(&bytes).map_err(|e| ApiError::bad_request(format!("undecodable image: {e}")))?;
    Ok(img.to_rgb8())
}

fn encode_png<P, C>(img: &image::ImageBuffer<P, C>) -> Result<String, ApiError>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(B64.encode(out.into_inner()))
}

fn latent_digest(scene: &EditedScene) -> String {
    let mut h = Sha256::new();
    for s in &scene.slots {
        for v in &s.latent {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: if state.model.is_some() { "ok" } else { "no-model" }.into(),
        checkpoint: state.config.checkpoint.clone(),
        k: state.model.as_ref().map(|m| m.config.num_slots()),
        resolution: state.model.as_ref().map(|m| m.config.image_size),
    })
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> Result<Json<SessionCreated>, ApiError> {
    let model = state.model()?;
    let img = decode_png(&req.image)?;
    let size = model.config.image_size;
    if img.width() as usize != size || img.height() as usize != size {
        return Err(ApiError::bad_request(format!(
            "size mismatch: got {}×{}, model expects {size}×{size}",
            img.width(),
            img.height()
        )));
    }
    let camera = match &req.camera {
        Some(rec) => Camera::from_record(rec).map_err(|e| ApiError::bad_request(format!("invalid camera: {e}")))?,
        None => CameraRig::default().camera(0.0, size)?,
    };
    if camera.width != size || camera.height != size {
        return Err(ApiError::bad_request("size mismatch: camera does not match the image"));
    }
    let seed = state.config.encode_seed;
    let scene = blocking(move || {
        let pixels: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        let set = model.encode(&pixels, &camera, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(EditedScene::from_slot_set(&set)?)
    })
    .await?;
    let created = SessionCreated {
        id: String::new(),
        k: scene.slots.len() - 1,
        latent_digest: latent_digest(&scene),
        slots: scene.roster(),
    };
    let id = state.insert(scene, camera);
    log::info!("session {id} created");
    Ok(Json(SessionCreated { id, ..created }))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Roster>, ApiError> {
    let (scene, _) = state.snapshot(&id)?;
    Ok(Json(Roster { slots: scene.roster() }))
}

async fn render(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<RenderQuery>,
) -> Result<Json<RenderResponse>, ApiError> {
    let model = state.model()?;
    let (scene, context) = state.snapshot(&id)?;
    let camera = match &q.camera {
        Some(text) => parse_camera(text, state.config.max_resolution)?,
        None => context,
    };
    if q.seg > 1 {
        return Err(ApiError::bad_request("seg must be 0 or 1"));
    }
    let with_seg = q.seg == 1;
    blocking(move || {
        let view = scene.render(&model, &camera)?;
        let ids: Vec<usize> = scene.slots.iter().map(|s| s.id).collect();
        let rgb: Vec<u8> = view.image.iter().map(|&v| colf::scenegen::to_u8(v)).collect();
        let image = image::RgbImage::from_raw(view.width as u32, view.height as u32, rgb)
            .ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "render buffer size"))?;
        let segmentation = if with_seg {
            if ids.iter().any(|&i| i > u8::MAX as usize) {
                return Err(ApiError::bad_request("segmentation supports slot indices up to 255"));
            }
            let labels: Vec<u8> = view.segmentation().into_iter().map(|p| ids[p] as u8).collect();
            let gray = image::GrayImage::from_raw(view.width as u32, view.height as u32, labels)
                .ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "segmentation buffer size"))?;
            Some(encode_png(&gray)?)
        } else {
            None
        };
        let pixels = (view.width * view.height).max(1) as f32;
        let weights = ids
            .iter()
            .enumerate()
            .map(|(pos, &index)| SlotWeight {
                index,
                mean: view.weights.iter().skip(pos).step_by(view.num_slots).sum::<f32>() / pixels,
            })
            .collect();
        Ok(RenderResponse {
            width: view.width,
            height: view.height,
            image: encode_png(&image)?,
            segmentation,
            weights,
        })
    })
    .await
    .map(Json)
}

async fn apply_edits(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<EditRequest>,
) -> Result<Json<Roster>, ApiError> {
    let scene = state.mutate(&id, |s| s.apply_all(&req.edits))?;
    Ok(Json(Roster { slots: scene.roster() }))
}

async fn import_slot(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<ImportRequest>,
) -> Result<Json<Roster>, ApiError> {
    let (source, _) = state.snapshot(&req.source_id)?;
    let from = source.export(req.slot, &format!("{}/{}", req.source_id, req.slot))?;
    let op = EditOp::Import {
        from,
        transform: req.transform,
    };
    let scene = state.mutate(&id, |s| s.apply(&op))?;
    Ok(Json(Roster { slots: scene.roster() }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/render", get(render))
        .route("/sessions/{id}/edits", post(apply_edits))
        .route("/sessions/{id}/import", post(import_slot))
        .with_state(state)
}

/// Periodically evicts expired sessions until the state is dropped elsewhere.
pub fn spawn_evictor(state: Arc<AppState>) -> tokio::task::JoinHandle<()> {
    let period = (state.config.ttl / 4).clamp(Duration::from_millis(100), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = state.evict_expired();
            if n > 0 {
                log::info!("evicted {n} expired sessions");
            }
        }
    })
}

pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let evictor = spawn_evictor(state.clone());
    let result = axum::serve(listener, router(state)).await;
    evictor.abort();
    result
}
