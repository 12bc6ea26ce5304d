//! HTTP+JSON endpoints.
//!
//! | method | path                       | auth  |
//! |--------|----------------------------|-------|
//! | GET    | `/api/cases`               | rater |
//! | GET    | `/api/cases/{id}`          | rater |
//! | PUT    | `/api/cases/{id}/diagnosis`| rater |
//! | GET    | `/api/export`              | admin |
//! | GET    | `/images/{id}`             | rater |
//!
//! Tokens go in `Authorization: Bearer <token>`. A missing or unknown token
//! is 401; a valid token for the wrong role is 403.

use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, put};
use axum::{Json, Router};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{RatingLog, StudyConfig};
use crate::error::Result;
use crate::ingestion::Sex;
use crate::label::Diagnosis;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: String,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseList {
    pub rater_id: String,
    pub cases: Vec<CaseSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseMetadata {
    pub age: Option<u32>,
    pub sex: Option<Sex>,
    pub site: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwnDiagnosis {
    pub diagnosis: Diagnosis,
    #[serde(default)]
    pub comment: Option<String>,
    pub revision: u32,
}

/// What a rater sees for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseView {
    pub case_id: String,
    pub image_url: String,
    pub metadata: CaseMetadata,
    pub batch: Option<String>,
    pub my_latest_diagnosis: Option<OwnDiagnosis>,
}

#[derive(Debug, Clone, Deserialize)]
struct Submission {
    diagnosis: String,
    #[serde(default)]
    comment: Option<String>,
}

struct Case {
    id: String,
    image: PathBuf,
    metadata: CaseMetadata,
    batch: Option<String>,
}

enum Role {
    Rater(usize),
    Admin,
}

struct AppState {
    cases: Vec<Case>,
    case_index: HashMap<String, usize>,
    /// token -> role; rater ids in `raters` by position
    tokens: HashMap<String, Role>,
    raters: Vec<String>,
    /// per-rater case order
    orders: Vec<Vec<usize>>,
    log: Mutex<RatingLog>,
}

type Shared = Arc<AppState>;

#[derive(Debug)]
struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

impl AppState {
    fn new(config: &StudyConfig) -> Result<Self> {
        let log = RatingLog::open(&config.log_path)?;
        let cases: Vec<Case> = config
            .cases
            .iter()
            .map(|c| Case {
                id: c.id.clone(),
                image: c.image.clone(),
                metadata: CaseMetadata {
                    age: c.age,
                    sex: c.sex,
                    site: c.site.clone(),
                },
                batch: c.batch.clone(),
            })
            .collect();
        let case_index = cases.iter().enumerate().map(|(i, c)| (c.id.clone(), i)).collect();
        let mut raters: Vec<String> = config.raters.iter().map(|r| r.id.clone()).collect();
        let mut tokens: HashMap<String, Role> = config
            .raters
            .iter()
            .enumerate()
            .map(|(i, r)| (r.token.clone(), Role::Rater(i)))
            .collect();
        if let (Some(id), Some(token)) = (config.second_pass_id(), &config.senior_second_pass_token) {
            tokens.insert(token.clone(), Role::Rater(raters.len()));
            raters.push(id);
        }
        tokens.insert(config.admin_token.clone(), Role::Admin);
        let orders = (0..raters.len())
            .map(|i| {
                let mut order: Vec<usize> = (0..cases.len()).collect();
                if let Some(seed) = config.shuffle_seed {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    order.shuffle(&mut rng);
                }
                order
            })
            .collect();
        Ok(Self {
            cases,
            case_index,
            tokens,
            raters,
            orders,
            log: Mutex::new(log),
        })
    }

    fn role(&self, headers: &HeaderMap) -> ApiResult<&Role> {
        let token = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| ApiError(StatusCode::UNAUTHORIZED, "missing bearer token".into()))?;
        self.tokens
            .get(token.trim())
            .ok_or_else(|| ApiError(StatusCode::UNAUTHORIZED, "unknown token".into()))
    }

    fn rater(&self, headers: &HeaderMap) -> ApiResult<usize> {
        match self.role(headers)? {
            Role::Rater(i) => Ok(*i),
            Role::Admin => Err(ApiError(StatusCode::FORBIDDEN, "rater token required".into())),
        }
    }

    fn case(&self, id: &str) -> ApiResult<&Case> {
        self.case_index
            .get(id)
            .map(|&i| &self.cases[i])
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown case {id}")))
    }

    fn log(&self) -> std::sync::MutexGuard<'_, RatingLog> {
        self.log.lock().unwrap_or_else(|p| p.into_inner())
    }
}

async fn list_cases(State(s): State<Shared>, headers: HeaderMap) -> ApiResult<Json<CaseList>> {
    let r = s.rater(&headers)?;
    let rater_id = &s.raters[r];
    let log = s.log();
    let cases = s.orders[r]
        .iter()
        .map(|&i| CaseSummary {
            case_id: s.cases[i].id.clone(),
            completed: log.latest(rater_id, &s.cases[i].id).is_some(),
        })
        .collect();
    Ok(Json(CaseList {
        rater_id: rater_id.clone(),
        cases,
    }))
}

async fn get_case(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<CaseView>> {
    let r = s.rater(&headers)?;
    let case = s.case(&id)?;
    let mine = s.log().latest(&s.raters[r], &case.id).map(|rec| OwnDiagnosis {
        diagnosis: rec.diagnosis,
        comment: rec.comment.clone(),
        revision: rec.revision,
    });
    Ok(Json(CaseView {
        case_id: case.id.clone(),
        image_url: format!("/images/{}", case.id),
        metadata: case.metadata.clone(),
        batch: case.batch.clone(),
        my_latest_diagnosis: mine,
    }))
}

async fn put_diagnosis(
    State(s): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<super::RatingRecord>> {
    let r = s.rater(&headers)?;
    let case_id = s.case(&id)?.id.clone();
    let sub: Submission = serde_json::from_slice(&body)
        .map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid body: {e}")))?;
    let diagnosis: Diagnosis = sub.diagnosis.parse().map_err(|_| {
        ApiError(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("invalid diagnosis {:?}", sub.diagnosis),
        )
    })?;
    let comment = sub.comment.filter(|c| !c.trim().is_empty());
    let state = s.clone();
    let record = tokio::task::spawn_blocking(move || state.log().append(&state.raters[r], &case_id, diagnosis, comment))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| {
            tracing::error!(error = %e, "rating append failed");
            ApiError(StatusCode::INTERNAL_SERVER_ERROR, "storage failure; rating not recorded".into())
        })?;
    Ok(Json(record))
}

async fn export(State(s): State<Shared>, headers: HeaderMap) -> ApiResult<Response> {
    match s.role(&headers)? {
        Role::Admin => Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], s.log().export()).into_response()),
        Role::Rater(_) => Err(ApiError(StatusCode::FORBIDDEN, "admin token required".into())),
    }
}

async fn image(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Response> {
    s.rater(&headers)?;
    let path = s.case(&id)?.image.clone();
    let bytes = tokio::fs::read(&path).await.map_err(|e| {
        tracing::error!(path = %path.display(), error = %e, "image read failed");
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, "image unavailable".into())
    })?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

/// Builds the router; replays the rating log as part of setup.
pub fn router(config: &StudyConfig) -> Result<Router> {
    let state = Arc::new(AppState::new(config)?);
    Ok(Router::new()
        .route("/api/cases", get(list_cases))
        .route("/api/cases/{id}", get(get_case))
        .route("/api/cases/{id}/diagnosis", put(put_diagnosis))
        .route("/api/export", get(export))
        .route("/images/{id}", get(image))
        .with_state(state))
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    config: &StudyConfig,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<()> {
    let app = router(config)?;
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| crate::error::AuditError::io("<listener>", e))
}
