//! Stateless JSON API over propagation for the scribble UI.
//!
//! - `POST /api/propagate`: labels plus optional boundary field in, the
//!   propagated distributions, MAP labeling, entropy and weights out
//! - `GET /api/health`: liveness

use std::net::SocketAddr;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::Json;
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use rwprop_core::loss::DEFAULT_ALPHA;
use rwprop_core::solver::SolverOptions;
use rwprop_core::BoundaryField;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::formats::{LabelEntry, LabelsFile};
use crate::outputs;

pub const DEFAULT_HOST: &str = "127.0.0.1";
pub const DEFAULT_PORT: u16 = 8754;

/// Largest accepted lattice, in pixels.
pub const MAX_PIXELS: i64 = 512 * 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PropagateRequest {
    pub width: i64,
    pub height: i64,
    pub num_classes: i64,
    pub entries: Vec<LabelEntry>,
    #[serde(default)]
    pub boundary: Option<Vec<f64>>,
    #[serde(default)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PropagateResponse {
    pub p: Vec<f64>,
    pub map: Vec<usize>,
    pub entropy: Vec<f64>,
    pub weights: Vec<f64>,
    pub unreached: Vec<usize>,
    pub solve_millis: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn unprocessable(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(rejection: JsonRejection) -> Self {
        let status = match &rejection {
            JsonRejection::JsonSyntaxError(_) => StatusCode::BAD_REQUEST,
            JsonRejection::JsonDataError(_) => StatusCode::UNPROCESSABLE_ENTITY,
            JsonRejection::MissingJsonContentType(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            _ => rejection.status(),
        };
        Self {
            status,
            message: rejection.body_text(),
        }
    }
}

impl From<rwprop_core::Error> for ApiError {
    fn from(e: rwprop_core::Error) -> Self {
        Self {
            status: if e.is_numerical() {
                StatusCode::INTERNAL_SERVER_ERROR
            } else {
                StatusCode::UNPROCESSABLE_ENTITY
            },
            message: e.to_string(),
        }
    }
}

/// Validates a request and runs the propagation; `solveMillis` is the only
/// field that depends on anything but the request.
pub fn handle_propagate(req: PropagateRequest) -> Result<PropagateResponse, ApiError> {
    let pixels = req.width.checked_mul(req.height);
    if req.width >= 1 && req.height >= 1 && pixels.is_none_or(|n| n > MAX_PIXELS) {
        return Err(ApiError::unprocessable(format!(
            "width: lattice {}x{} exceeds {MAX_PIXELS} pixels",
            req.width, req.height
        )));
    }
    let file = LabelsFile {
        width: req.width,
        height: req.height,
        num_classes: req.num_classes,
        entries: req.entries,
    };
    let (lattice, labels) = file.to_labels().map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let alpha = req.alpha.unwrap_or(DEFAULT_ALPHA);
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(ApiError::unprocessable(format!("alpha: must be >= 0, got {alpha}")));
    }
    let boundary = match req.boundary {
        None => BoundaryField::zeros(&lattice),
        Some(values) => {
            if values.len() != lattice.num_pixels() {
                return Err(ApiError::unprocessable(format!(
                    "boundary: expected {} values, got {}",
                    lattice.num_pixels(),
                    values.len()
                )));
            }
            if let Some(i) = values.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(ApiError::unprocessable(format!(
                    "boundary[{i}]: must be finite and >= 0, got {}",
                    values[i]
                )));
            }
            BoundaryField::new(values)?
        }
    };
    let start = Instant::now();
    let out = outputs::compute(&lattice, &labels, &boundary, alpha, &SolverOptions::default())?;
    Ok(PropagateResponse {
        p: out.p,
        map: out.map,
        entropy: out.entropy,
        weights: out.weights,
        unreached: out.unreached,
        solve_millis: start.elapsed().as_secs_f64() * 1e3,
    })
}

async fn propagate(payload: Result<Json<PropagateRequest>, JsonRejection>) -> Result<Json<PropagateResponse>, ApiError> {
    let Json(req) = payload?;
    match tokio::task::spawn_blocking(move || handle_propagate(req)).await {
        Ok(result) => result.map(Json),
        Err(e) => Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: format!("solver task failed: {e}"),
        }),
    }
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

/// `http(s)://localhost`, `127.0.0.1` or `[::1]`, any port.
pub fn is_local_origin(origin: &HeaderValue) -> bool {
    let Ok(origin) = origin.to_str() else {
        return false;
    };
    let Some(rest) = origin
        .strip_prefix("http://")
        .or_else(|| origin.strip_prefix("https://"))
    else {
        return false;
    };
    let (name, tail) = match rest.strip_prefix('[') {
        Some(v6) => match v6.split_once(']') {
            Some((h, tail)) => return h == "::1" && port_ok(tail),
            None => return false,
        },
        None => rest.find(':').map_or((rest, ""), |i| rest.split_at(i)),
    };
    matches!(name, "localhost" | "127.0.0.1") && port_ok(tail)
}

fn port_ok(tail: &str) -> bool {
    match tail.strip_prefix(':') {
        None => tail.is_empty(),
        Some(port) => !port.is_empty() && port.bytes().all(|b| b.is_ascii_digit()),
    }
}

pub fn router() -> Router {
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::predicate(|origin, _| is_local_origin(origin)))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/api/propagate", post(propagate))
        .route("/api/health", get(health))
        .layer(cors)
}

pub async fn serve(addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
