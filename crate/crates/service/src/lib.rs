//! Inference HTTP service: synthesizes faces from posted landmarks with a
//! frozen checkpoint.
//!
//! Endpoints: `POST /synthesize`, `GET /targets`, `GET /canonical/{target_id}`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use facemark_core::geometry::LandmarkVector;
use facemark_core::registry::{ModelRegistry, TargetId};
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRequest {
    pub target_id: String,
    pub landmarks: Vec<[f64; 2]>,
    #[serde(default)]
    pub bypass_converter: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthResponse {
    /// Base64-encoded PNG.
    pub image: String,
    /// Landmarks the generator was driven with.
    pub converted_landmarks: Vec<[f64; 2]>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetEntry {
    pub target_id: String,
    pub display_name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// Shared read-only state. `models` is `None` until a checkpoint is loaded.
#[derive(Clone, Default)]
pub struct AppState {
    pub models: Option<Arc<ModelRegistry>>,
}

impl AppState {
    pub fn loaded(models: ModelRegistry) -> Self {
        Self {
            models: Some(Arc::new(models)),
        }
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn models(state: &AppState) -> Result<Arc<ModelRegistry>, ApiError> {
    state
        .models
        .clone()
        .ok_or_else(|| ApiError(StatusCode::SERVICE_UNAVAILABLE, "model not loaded".into()))
}

fn lookup(models: &ModelRegistry, id: &str) -> Result<TargetId, ApiError> {
    let not_found = || {
        ApiError(
            StatusCode::NOT_FOUND,
            format!(
                "unknown target `{id}`; registered: {}",
                models
                    .target_ids()
                    .iter()
                    .map(|t| t.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        )
    };
    let id = TargetId::new(id).map_err(|_| not_found())?;
    models.target(&id).map_err(|_| not_found())?;
    Ok(id)
}

/// Validates and clamps the request, then runs the pipeline.
pub fn synthesize(models: &ModelRegistry, req: &SynthRequest) -> Result<SynthResponse, ApiError> {
    let expected = models.topology().point_count;
    if req.landmarks.len() != expected {
        return Err(bad_request(format!(
            "expected {expected} landmark points, got {}",
            req.landmarks.len()
        )));
    }
    if let Some(i) = req
        .landmarks
        .iter()
        .position(|p| !(p[0].is_finite() && p[1].is_finite()))
    {
        return Err(bad_request(format!("landmark {i} is not finite")));
    }
    let target = lookup(models, &req.target_id)?;
    let mut warnings = Vec::new();
    let (lms, clamped) =
        LandmarkVector::new(req.landmarks.iter().flat_map(|p| [p[0], p[1]]).collect())
            .to_set_clamped();
    if clamped > 0 {
        warnings.push(format!("{clamped} landmark(s) clamped into [0,1]"));
    }
    let internal =
        |e: facemark_core::Error| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    let (img, fed) = models
        .synthesize_from(&target, &lms.to_vector(), req.bypass_converter)
        .map_err(internal)?;
    let png = img.png_bytes().map_err(internal)?;
    Ok(SynthResponse {
        image: base64::engine::general_purpose::STANDARD.encode(png),
        converted_landmarks: fed.values().chunks(2).map(|c| [c[0], c[1]]).collect(),
        warnings,
    })
}

async fn post_synthesize(
    State(state): State<AppState>,
    body: Result<Json<SynthRequest>, JsonRejection>,
) -> Result<Json<SynthResponse>, ApiError> {
    let models = models(&state)?;
    let Json(req) = body.map_err(|e| bad_request(e.body_text()))?;
    tokio::task::spawn_blocking(move || synthesize(&models, &req))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map(Json)
}

async fn get_targets(State(state): State<AppState>) -> Result<Json<Vec<TargetEntry>>, ApiError> {
    let models = models(&state)?;
    Ok(Json(
        models
            .targets()
            .map(|t| TargetEntry {
                target_id: t.id.to_string(),
                display_name: t.display_name.clone(),
            })
            .collect(),
    ))
}

async fn get_canonical(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<Vec<[f64; 2]>>, ApiError> {
    let models = models(&state)?;
    let id = lookup(&models, &id)?;
    let info = models
        .target(&id)
        .map_err(|e| ApiError(StatusCode::NOT_FOUND, e.to_string()))?;
    Ok(Json(info.canonical.points().to_vec()))
}

/// CORS for the studio: `None` allows any origin.
pub fn cors(origin: Option<&str>) -> Result<CorsLayer, String> {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    Ok(match origin {
        None => layer.allow_origin(Any),
        Some(o) => layer.allow_origin(
            o.parse::<HeaderValue>()
                .map_err(|e| format!("bad CORS origin `{o}`: {e}"))?,
        ),
    })
}

pub fn router(state: AppState, cors: CorsLayer) -> Router {
    Router::new()
        .route("/synthesize", post(post_synthesize))
        .route("/targets", get(get_targets))
        .route("/canonical/{target_id}", get(get_canonical))
        .layer(cors)
        .with_state(state)
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, app: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
