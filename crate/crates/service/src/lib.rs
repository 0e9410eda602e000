//! HTTP API for interactive segmentation sessions.
//!
//! Sessions live in memory, keyed by a random id, and are evicted least
//! recently used first once `max_sessions` is reached.

pub mod session;

use std::sync::{Arc, Mutex};

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use clickseg::dataset::{decode_mask, encode_gray_png, encode_mask_png};
use clickseg::mask::Mask;
use clickseg::model::Model;
use clickseg::Polarity;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;
use tower_http::trace::TraceLayer;

use session::{Session, SessionError};

/// Largest accepted image side, in pixels.
pub const MAX_SIDE: u32 = 2048;
const BODY_LIMIT: usize = 16 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    model: Arc<Model<f64>>,
    sessions: Arc<Mutex<IndexMap<String, Arc<Mutex<Session>>>>>,
    max_sessions: usize,
}

impl AppState {
    pub fn new(model: Model<f64>, max_sessions: usize) -> Self {
        AppState {
            model: Arc::new(model),
            sessions: Arc::new(Mutex::new(IndexMap::new())),
            max_sessions: max_sessions.max(1),
        }
    }

    fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let mut map = self.sessions.lock().unwrap();
        let idx = map.get_index_of(id).ok_or_else(|| ApiError::not_found(id))?;
        // most recently used goes last
        let last = map.len() - 1;
        map.move_index(idx, last);
        Ok(map[last].clone())
    }

    fn insert(&self, session: Session) -> Arc<Mutex<Session>> {
        let mut map = self.sessions.lock().unwrap();
        while map.len() >= self.max_sessions {
            map.shift_remove_index(0);
        }
        let id = session.id.clone();
        let handle = Arc::new(Mutex::new(session));
        map.insert(id, handle.clone());
        handle
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
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
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session {id}"))
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::OutOfBounds { .. } | SessionError::InvalidStage(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::NothingToUndo => StatusCode::CONFLICT,
            SessionError::Model(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Deserialize)]
pub struct CreateRequest {
    pub image_png: String,
    #[serde(default)]
    pub initial_mask_png: Option<String>,
    #[serde(default)]
    pub gt_mask_png: Option<String>,
}

#[derive(Deserialize)]
pub struct ClickRequest {
    pub row: i64,
    pub col: i64,
    pub polarity: Polarity,
}

#[derive(Deserialize)]
pub struct OverlayQuery {
    pub stage: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ClickEntry {
    pub row: usize,
    pub col: usize,
    pub polarity: Polarity,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct SessionView {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
    pub click_count: usize,
    pub history_depth: usize,
    /// Binary mask, 0/255 grayscale PNG, base64.
    pub mask_png: String,
    /// Foreground probability as grayscale PNG, base64.
    pub prob_png: String,
    /// IoU against the ground truth, when one was supplied.
    pub iou: Option<f64>,
    pub clicks: Vec<ClickEntry>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct OverlayView {
    pub stage: usize,
    pub similarity_png: String,
    pub aggregated_attention_png: String,
}

fn png_b64(bytes: clickseg::Result<Vec<u8>>) -> Result<String, ApiError> {
    bytes
        .map(|b| B64.encode(b))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

fn view(s: &Session) -> Result<SessionView, ApiError> {
    let st = s.current();
    let lb = s.letterbox;
    let prob = image::GrayImage::from_fn(lb.width as u32, lb.height as u32, |x, y| {
        let v = st.prob[y as usize * lb.width + x as usize];
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    Ok(SessionView {
        session_id: s.id.clone(),
        height: lb.height,
        width: lb.width,
        click_count: s.click_count(),
        history_depth: s.history_depth(),
        mask_png: png_b64(encode_mask_png(&st.mask))?,
        prob_png: png_b64(encode_gray_png(&prob))?,
        iou: s.iou(),
        clicks: st
            .log
            .iter()
            .map(|c| ClickEntry {
                row: c.row,
                col: c.col,
                polarity: c.polarity,
            })
            .collect(),
    })
}

fn decode_b64(field: &str, text: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(text.trim()).map_err(|e| ApiError::bad_request(format!("{field}: invalid base64: {e}")))
}

fn decode_side_mask(field: &str, text: &str, h: usize, w: usize) -> Result<Mask, ApiError> {
    let m = decode_mask(&decode_b64(field, text)?).map_err(|e| ApiError::bad_request(format!("{field}: {e}")))?;
    if (m.height(), m.width()) != (h, w) {
        return Err(ApiError::bad_request(format!(
            "{field}: {}x{} does not match the {h}x{w} image",
            m.height(),
            m.width()
        )));
    }
    Ok(m)
}

fn create(state: &AppState, req: CreateRequest) -> Result<SessionView, ApiError> {
    let bytes = decode_b64("image_png", &req.image_png)?;
    let img = image::load_from_memory(&bytes).map_err(|e| ApiError::bad_request(format!("image_png: {e}")))?;
    if img.width() > MAX_SIDE || img.height() > MAX_SIDE {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image {}x{} exceeds {MAX_SIDE} px per side", img.height(), img.width()),
        ));
    }
    let img = img.to_rgb8();
    let (h, w) = (img.height() as usize, img.width() as usize);
    let initial = req
        .initial_mask_png
        .as_deref()
        .map(|t| decode_side_mask("initial_mask_png", t, h, w))
        .transpose()?;
    let gt = req.gt_mask_png.as_deref().map(|t| decode_side_mask("gt_mask_png", t, h, w)).transpose()?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = Session::new(id, &img, state.model.config().input_size, initial.as_ref(), gt);
    let v = view(&session)?;
    state.insert(session);
    Ok(v)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn create_session(State(state): State<AppState>, Json(req): Json<CreateRequest>) -> Result<Json<SessionView>, ApiError> {
    blocking(move || create(&state, req)).await.map(Json)
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let s = state.get(&id)?;
    let s = s.lock().unwrap();
    view(&s).map(Json)
}

async fn click(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<ClickRequest>,
) -> Result<Json<SessionView>, ApiError> {
    let s = state.get(&id)?;
    blocking(move || {
        let mut s = s.lock().unwrap();
        s.add_click(&state.model, req.row, req.col, req.polarity)?;
        view(&s)
    })
    .await
    .map(Json)
}

async fn undo(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let s = state.get(&id)?;
    let mut s = s.lock().unwrap();
    s.undo()?;
    view(&s).map(Json)
}

async fn reset(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let s = state.get(&id)?;
    let mut s = s.lock().unwrap();
    s.reset();
    view(&s).map(Json)
}

async fn overlays(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<OverlayQuery>,
) -> Result<Json<OverlayView>, ApiError> {
    let s = state.get(&id)?;
    blocking(move || {
        let s = s.lock().unwrap();
        let o = s.overlays(&state.model, q.stage)?;
        Ok(OverlayView {
            stage: q.stage,
            similarity_png: png_b64(encode_gray_png(&o.similarity))?,
            aggregated_attention_png: png_b64(encode_gray_png(&o.attention))?,
        })
    })
    .await
    .map(Json)
}

async fn healthz() -> &'static str {
    "ok"
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/session", post(create_session))
        .route("/session/{id}", get(get_session))
        .route("/session/{id}/click", post(click))
        .route("/session/{id}/undo", post(undo))
        .route("/session/{id}/reset", post(reset))
        .route("/session/{id}/overlays", get(overlays))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .layer(CorsLayer::permissive())
        .layer(TraceLayer::new_for_http())
        .with_state(state)
}
