use std::collections::BTreeMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use altq_core::world::World;
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{NaiveDate, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::session::{compare_bundle, compare_labels, AnswerOutcome, Model, Rating, Reveal, Session, SessionError};
use crate::store::{Choice, ExportFilter, SessionStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub pool_size: usize,
    /// Show the questioner's per-round guess before the reveal.
    pub show_guesses: bool,
    /// Models paired by the comparison endpoint; empty means all of them.
    pub compare_models: Vec<String>,
    pub data_dir: PathBuf,
    /// Built web client to serve at `/`, if present.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            pool_size: 20,
            show_guesses: false,
            compare_models: Vec::new(),
            data_dir: PathBuf::from("service-data"),
            static_dir: None,
        }
    }
}

pub struct AppState {
    pub world: Arc<World>,
    pub models: BTreeMap<String, Arc<Model>>,
    pub store: SessionStore,
    pub config: ServiceConfig,
}

impl AppState {
    pub fn new(world: Arc<World>, models: Vec<Model>, config: ServiceConfig) -> crate::session::Result<Self> {
        if models.is_empty() {
            return Err(SessionError::Invalid("the service needs at least one model".into()));
        }
        let models: BTreeMap<String, Arc<Model>> = models.into_iter().map(|m| (m.tag.clone(), Arc::new(m))).collect();
        for tag in &config.compare_models {
            if !models.contains_key(tag) {
                return Err(SessionError::Invalid(format!("unknown comparison model {tag}")));
            }
        }
        Ok(AppState {
            world,
            store: SessionStore::open(&config.data_dir)?,
            models,
            config,
        })
    }

    fn model(&self, tag: &str) -> Result<&Arc<Model>, ApiError> {
        self.models
            .get(tag)
            .ok_or_else(|| ApiError::from(SessionError::Invalid(format!("unknown model {tag}"))))
    }

    fn compare_models(&self) -> Vec<&Model> {
        if self.config.compare_models.is_empty() {
            self.models.values().map(|m| m.as_ref()).collect()
        } else {
            self.config.compare_models.iter().map(|t| self.models[t].as_ref()).collect()
        }
    }
}

pub struct ApiError(SessionError);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            SessionError::Invalid(_) => StatusCode::BAD_REQUEST,
            SessionError::NotFound(_) => StatusCode::NOT_FOUND,
            SessionError::Conflict(_) => StatusCode::CONFLICT,
            SessionError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// JSON bodies are parsed by hand so malformed input maps to 400.
fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let body: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| SessionError::Invalid(format!("invalid request body: {e}")).into())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateGame {
    model: Option<String>,
    seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswerBody {
    text: String,
}

#[derive(Serialize)]
struct AnswerResponse {
    round: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    question: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    guess: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reveal: Option<Reveal>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChoiceBody {
    model: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportQuery {
    model: Option<String>,
    from: Option<String>,
    to: Option<String>,
}

fn date(s: Option<String>) -> ApiResult<Option<NaiveDate>> {
    s.map(|s| {
        NaiveDate::parse_from_str(&s, "%Y-%m-%d")
            .map_err(|_| ApiError::from(SessionError::Invalid(format!("bad date {s}, expected YYYY-MM-DD"))))
    })
    .transpose()
}

/// Largest seed a JavaScript client can hold exactly.
const MAX_SAFE_SEED: u64 = (1 << 53) - 1;

async fn create_game(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: CreateGame = parse(&body)?;
    let tag = match req.model {
        Some(t) => t,
        None => app.models.keys().next().cloned().unwrap_or_default(),
    };
    let model = app.model(&tag)?;
    let id = uuid::Uuid::new_v4();
    let seed = req.seed.unwrap_or(id.as_u64_pair().0 & MAX_SAFE_SEED);
    let session = Session::start(id.to_string(), &app.world, model, seed, app.config.pool_size, Utc::now())?;
    let snap = session.snapshot(&app.world, app.config.show_guesses)?;
    app.store.insert(session)?;
    Ok((StatusCode::CREATED, Json(snap)))
}

async fn get_game(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let handle = app.store.get(&id)?;
    let snap = handle.lock().unwrap().snapshot(&app.world, app.config.show_guesses)?;
    Ok(Json(snap))
}

fn answer_sync(app: &AppState, id: &str, text: &str) -> ApiResult<AnswerResponse> {
    let handle = app.store.get(id)?;
    let mut s = handle.lock().unwrap();
    let model = app.model(&s.model)?.clone();
    // work on a copy so a failed write leaves the session untouched
    let mut next = s.clone();
    let outcome = next.answer(&app.world, &model, text, Utc::now())?;
    app.store.persist(&next)?;
    *s = next;
    Ok(match outcome {
        AnswerOutcome::Question { question, guess } => AnswerResponse {
            round: s.round,
            question: Some(question),
            guess: app.config.show_guesses.then_some(guess),
            reveal: None,
        },
        AnswerOutcome::Reveal(r) => AnswerResponse {
            round: s.round,
            question: None,
            guess: None,
            reveal: Some(r),
        },
    })
}

async fn answer(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: AnswerBody = parse(&body)?;
    Ok(Json(answer_sync(&app, &id, &req.text)?))
}

fn rate_sync(app: &AppState, id: &str, rating: Rating) -> ApiResult<()> {
    let handle = app.store.get(id)?;
    let mut s = handle.lock().unwrap();
    let mut next = s.clone();
    next.rate(rating, Utc::now())?;
    app.store.persist(&next)?;
    app.store.log_finished(&next)?;
    *s = next;
    Ok(())
}

async fn rating(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<StatusCode> {
    app.store.get(&id)?;
    let r: Rating = parse(&body)?;
    rate_sync(&app, &id, r)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn compare(State(app): State<Arc<AppState>>, Path(seed): Path<u64>) -> ApiResult<impl IntoResponse> {
    Ok(Json(compare_bundle(&app.world, &app.compare_models(), seed, app.config.pool_size)?))
}

async fn compare_choice(
    State(app): State<Arc<AppState>>,
    Path(seed): Path<u64>,
    body: Bytes,
) -> ApiResult<StatusCode> {
    let req: ChoiceBody = parse(&body)?;
    let tags: Vec<String> = app.compare_models().iter().map(|m| m.tag.clone()).collect();
    let (label, model) = compare_labels(&tags, seed)
        .into_iter()
        .find(|(l, _)| *l == req.model)
        .ok_or_else(|| SessionError::Invalid(format!("unknown choice {}", req.model)))?;
    app.store.record_choice(&Choice {
        seed,
        label,
        model,
        at: Utc::now(),
    })?;
    Ok(StatusCode::NO_CONTENT)
}

async fn tally(State(app): State<Arc<AppState>>) -> ApiResult<impl IntoResponse> {
    Ok(Json(app.store.tally()?))
}

async fn export(State(app): State<Arc<AppState>>, Query(q): Query<ExportQuery>) -> ApiResult<impl IntoResponse> {
    let filter = ExportFilter {
        model: q.model,
        from: date(q.from)?,
        to: date(q.to)?,
    };
    let mut body = String::new();
    for line in app.store.export(&filter)? {
        body.push_str(&serde_json::to_string(&line).map_err(|e| SessionError::Internal(e.to_string()))?);
        body.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body))
}

async fn health(State(app): State<Arc<AppState>>) -> impl IntoResponse {
    Json(serde_json::json!({
        "status": "ok",
        "models": app.models.keys().collect::<Vec<_>>(),
        "sessions": app.store.len(),
    }))
}

pub fn router(app: Arc<AppState>) -> Router {
    let static_dir = app.config.static_dir.clone().filter(|d| d.is_dir());
    let api = Router::new()
        .route("/health", get(health))
        .route("/games", post(create_game))
        .route("/games/{id}", get(get_game))
        .route("/games/{id}/answer", post(answer))
        .route("/games/{id}/rating", post(rating))
        .route("/compare/{seed}", get(compare))
        .route("/compare/{seed}/choice", post(compare_choice))
        .route("/tally", get(tally))
        .route("/export", get(export))
        .with_state(app);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until `shutdown` resolves. Every mutation is already on disk, so
/// nothing needs flushing afterwards.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(app)).with_graceful_shutdown(shutdown).await
}
