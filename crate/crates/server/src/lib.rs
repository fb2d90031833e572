//! HTTP JSON API for assistant sessions.
//!
//! | method | path                    | body                                  |
//! |--------|-------------------------|---------------------------------------|
//! | POST   | `/sessions`             | optional session config overrides     |
//! | POST   | `/sessions/{id}/trigger`| none                                  |
//! | POST   | `/sessions/{id}/frames` | JSON detections + depth, or multipart |
//! | POST   | `/sessions/{id}/query`  | `{"q": "..."}`                        |
//! | GET    | `/sessions/{id}`        | none                                  |
//!
//! Errors are `{"code", "message", "retriable"}` with a matching status.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use partsight_core::assistant::{
    DepthRegion, ErrorCode, FrameInput, FrameStatus, QueryResponse, ServiceError, SessionConfig,
    SessionManager, SessionSnapshot,
};
use partsight_core::detorch::Detection;
use partsight_core::detpost::DepthMap;
use partsight_core::geometry::PixelImage;

pub const API_VERSION: &str = "1";
const MAX_BODY: usize = 64 * 1024 * 1024;

/// Error body and status for a failed call.
#[derive(Debug)]
pub struct ApiError(pub ServiceError);

impl ApiError {
    fn input(message: impl Into<String>) -> Self {
        ApiError(ServiceError::new(ErrorCode::InvalidInput, message))
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

pub fn status_for(code: ErrorCode) -> StatusCode {
    match code {
        ErrorCode::InvalidConfig | ErrorCode::InvalidInput => StatusCode::BAD_REQUEST,
        ErrorCode::NotFound => StatusCode::NOT_FOUND,
        ErrorCode::InvalidState | ErrorCode::GateTimeout => StatusCode::CONFLICT,
        ErrorCode::DepthMissing => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorCode::ProviderFailed => StatusCode::BAD_GATEWAY,
        ErrorCode::KnowledgeError => StatusCode::SERVICE_UNAVAILABLE,
        ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (status_for(self.0.code), Json(self.0)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Inline depth: explicit values, or a background with painted boxes.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum WireDepth {
    Values {
        width: u32,
        height: u32,
        values: Vec<f32>,
    },
    Regions {
        width: u32,
        height: u32,
        background: f32,
        #[serde(default)]
        regions: Vec<DepthRegion>,
    },
}

impl WireDepth {
    fn build(self) -> Result<DepthMap, ApiError> {
        let map = match self {
            WireDepth::Values { width, height, values } => DepthMap::new(width, height, values),
            WireDepth::Regions {
                width,
                height,
                background,
                regions,
            } => DepthMap::constant(width, height, background).map(|mut d| {
                for r in &regions {
                    d.fill_box(&r.bbox, r.value);
                }
                d
            }),
        };
        map.map_err(|e| ApiError::input(e.to_string()))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramePayload {
    pub detections: Vec<Detection>,
    #[serde(default)]
    pub depth: Option<WireDepth>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryPayload {
    pub q: String,
}

pub fn router(manager: Arc<SessionManager>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/trigger", post(trigger))
        .route("/sessions/{id}/frames", post(push_frame))
        .route("/sessions/{id}/query", post(query))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .layer(axum::middleware::map_response(stamp_version))
        .with_state(manager)
}

async fn stamp_version(mut res: Response) -> Response {
    res.headers_mut()
        .insert("x-api-version", HeaderValue::from_static(API_VERSION));
    res
}

/// Serves on `listener` until the task is dropped.
pub async fn serve(listener: tokio::net::TcpListener, manager: Arc<SessionManager>) -> std::io::Result<()> {
    axum::serve(listener, router(manager)).await
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "api_version": API_VERSION }))
}

fn parse_json<T: for<'de> Deserialize<'de>>(bytes: &[u8], what: &str) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::input(format!("{what}: {e}")))
}

fn session_id(raw: &str) -> Result<u64, ApiError> {
    raw.parse()
        .map_err(|_| ApiError(ServiceError::new(ErrorCode::NotFound, format!("no session {raw}"))))
}

async fn create_session(State(m): State<Arc<SessionManager>>, body: Bytes) -> Response {
    let config: SessionConfig = if body.iter().all(u8::is_ascii_whitespace) {
        SessionConfig::default()
    } else {
        match parse_json(&body, "session config") {
            Ok(c) => c,
            Err(e) => return e.into_response(),
        }
    };
    match m.create(config) {
        Ok(s) => (StatusCode::CREATED, Json(s)).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn get_session(
    State(m): State<Arc<SessionManager>>,
    Path(id): Path<String>,
) -> ApiResult<SessionSnapshot> {
    Ok(Json(m.snapshot(session_id(&id)?)?))
}

async fn trigger(
    State(m): State<Arc<SessionManager>>,
    Path(id): Path<String>,
) -> ApiResult<SessionSnapshot> {
    Ok(Json(m.trigger(session_id(&id)?)?))
}

async fn read_multipart(mut mp: Multipart) -> Result<FrameInput, ApiError> {
    let mut frame = FrameInput::default();
    while let Some(field) = mp
        .next_field()
        .await
        .map_err(|e| ApiError::input(format!("multipart: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_owned();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::input(format!("multipart part `{name}`: {e}")))?;
        match name.as_str() {
            "image" => {
                frame.image = Some(
                    PixelImage::decode(&bytes)
                        .map_err(|e| ApiError::input(format!("image part: {e}")))?,
                )
            }
            "depth" => {
                frame.depth = Some(
                    DepthMap::decode(&bytes)
                        .map_err(|e| ApiError::input(format!("depth part: {e}")))?,
                )
            }
            "detections" => frame.detections = Some(parse_json(&bytes, "detections part")?),
            other => return Err(ApiError::input(format!("unexpected multipart part `{other}`"))),
        }
    }
    Ok(frame)
}

async fn push_frame(
    State(m): State<Arc<SessionManager>>,
    Path(id): Path<String>,
    req: Request,
) -> ApiResult<FrameStatus> {
    let id = session_id(&id)?;
    let content_type = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_owned();
    let frame = if content_type.starts_with("multipart/form-data") {
        let mp = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::input(e.body_text()))?;
        read_multipart(mp).await?
    } else {
        let body = Bytes::from_request(req, &())
            .await
            .map_err(|e| ApiError::input(e.body_text()))?;
        let p: FramePayload = parse_json(&body, "frame")?;
        FrameInput {
            detections: Some(p.detections),
            image: None,
            depth: p.depth.map(WireDepth::build).transpose()?,
        }
    };
    let status = tokio::task::spawn_blocking(move || m.push_frame(id, frame))
        .await
        .map_err(|e| ApiError(ServiceError::new(ErrorCode::Internal, e.to_string())))??;
    Ok(Json(status))
}

async fn query(
    State(m): State<Arc<SessionManager>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<QueryResponse> {
    let id = session_id(&id)?;
    let p: QueryPayload = parse_json(&body, "query")?;
    let resp = tokio::task::spawn_blocking(move || m.submit_query(id, &p.q))
        .await
        .map_err(|e| ApiError(ServiceError::new(ErrorCode::Internal, e.to_string())))??;
    Ok(Json(resp))
}
