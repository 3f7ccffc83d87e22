//! HTTP/JSON API over the store, plus the background training and recommendation workers.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use anyhow::Result;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dimrank_core::recommender::{fetch_feed, unix_now, FeedItem, RecommendError, Recommender};
use dimrank_core::search::{keyword_search, SearchError, SearchResult, SharedIndex};
use dimrank_core::store::{SnapshotHandle, NEW_QUEUE, TRAIN_QUEUE};
use dimrank_core::recommender::RECOMMENDER_CURSOR;
use dimrank_core::trainer::{receive_label, RunLimit, TrainError, TrainingServer, TRAINER_CURSOR};
use dimrank_core::{
    featurize_context, Label, LabelSource, ModelError, PostId, SessionKind, Store, StoreError, Target, UserId,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{error, info};

use crate::config::ServiceConfig;
use crate::state::initial_state;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl ToString) -> Self {
        Self {
            status,
            message: message.to_string(),
        }
    }

    fn bad_request(message: impl ToString) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(err: StoreError) -> Self {
        let status = match &err {
            StoreError::UnknownUser(_) | StoreError::UnknownPost(_) => StatusCode::NOT_FOUND,
            StoreError::EmptyPost | StoreError::Model(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, err)
    }
}

impl From<TrainError> for ApiError {
    fn from(err: TrainError) -> Self {
        match err {
            TrainError::Store(e) => e.into(),
            TrainError::Model(e) => Self::bad_request(e),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other),
        }
    }
}

impl From<SearchError> for ApiError {
    fn from(err: SearchError) -> Self {
        match err {
            SearchError::Store(e) => e.into(),
            other => Self::bad_request(other),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(rejection: JsonRejection) -> Self {
        Self::bad_request(rejection.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Default)]
pub struct Counters {
    pub users_created: AtomicU64,
    pub posts_created: AtomicU64,
    pub labels_received: AtomicU64,
    pub feed_requests: AtomicU64,
    pub search_requests: AtomicU64,
    pub errors: AtomicU64,
}

pub struct AppState {
    pub store: Arc<Store>,
    pub index: SharedIndex,
    pub config: ServiceConfig,
    pub counters: Counters,
}

impl AppState {
    /// Indexes every stored post and publishes a first snapshot if none exists.
    pub fn new(store: Arc<Store>, config: ServiceConfig) -> Result<Self> {
        if store.snapshot().is_none() {
            store.publish_snapshot(&initial_state(&store, &config)?);
        }
        let index = SharedIndex::new();
        let posts = store.posts.posts();
        index.index_batch(posts.iter().map(|p| (p.post_id, p.text.as_str())));
        Ok(Self {
            store,
            index,
            config,
            counters: Counters::default(),
        })
    }

    fn snapshot(&self) -> SnapshotHandle {
        self.store.snapshot().expect("a snapshot is published at startup")
    }

    fn count<T>(&self, result: ApiResult<T>) -> ApiResult<T> {
        if result.is_err() {
            self.counters.errors.fetch_add(1, Ordering::Relaxed);
        }
        result
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/users", post(create_user))
        .route("/posts", post(create_post))
        .route("/labels", post(create_label))
        .route("/feed/{user}", get(feed))
        .route("/search", get(search))
        .route("/health", get(health))
        .route("/metrics", get(metrics))
        .with_state(state)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewUser {
    pub user_id: Option<u64>,
}

async fn create_user(
    State(app): State<Arc<AppState>>,
    body: Option<Json<NewUser>>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let request = body.map(|Json(b)| b).unwrap_or_default();
    let result = app
        .store
        .posts
        .register_user(request.user_id.map(UserId), unix_now())
        .map_err(ApiError::from)
        .map(|user| {
            app.counters.users_created.fetch_add(1, Ordering::Relaxed);
            (StatusCode::CREATED, Json(json!({ "user_id": user.user_id })))
        });
    app.count(result)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewPost {
    pub author: u64,
    pub text: String,
    #[serde(default)]
    pub url: Option<String>,
}

async fn create_post(
    State(app): State<Arc<AppState>>,
    body: Result<Json<NewPost>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let result = (|| {
        let Json(body) = body?;
        let post = app.store.create_post(UserId(body.author), &body.text, body.url, unix_now())?;
        app.index.index_post(post.post_id, &post.text);
        app.counters.posts_created.fetch_add(1, Ordering::Relaxed);
        Ok((StatusCode::CREATED, Json(json!({ "post_id": post.post_id }))))
    })();
    app.count(result)
}

fn default_magnitude() -> f32 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewLabel {
    pub user: u64,
    pub post: u64,
    pub like: bool,
    #[serde(default = "default_magnitude")]
    pub magnitude: f32,
    #[serde(default)]
    pub session: Option<SessionKind>,
}

async fn create_label(
    State(app): State<Arc<AppState>>,
    body: Result<Json<NewLabel>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let result = (|| {
        let Json(body) = body?;
        let target = if body.like { Target::Like } else { Target::Dislike };
        let label = Label::new(target, body.magnitude, LabelSource::Explicit).map_err(|e: ModelError| ApiError::bad_request(e))?;
        let session = body.session.unwrap_or(SessionKind::Browse);
        let id = receive_label(&app.store, UserId(body.user), PostId(body.post), unix_now(), session, label)?;
        app.counters.labels_received.fetch_add(1, Ordering::Relaxed);
        Ok((StatusCode::ACCEPTED, Json(json!({ "example_id": id }))))
    })();
    app.count(result)
}

#[derive(Debug, Deserialize)]
pub struct FeedParams {
    pub limit: Option<usize>,
}

async fn feed(
    State(app): State<Arc<AppState>>,
    Path(user): Path<u64>,
    Query(params): Query<FeedParams>,
) -> ApiResult<Json<Vec<FeedItem>>> {
    let limit = params.limit.unwrap_or(app.config.feed_limit);
    let snapshot = app.snapshot();
    let result = fetch_feed(&app.store, UserId(user), limit, &snapshot.state, unix_now())
        .map(Json)
        .map_err(ApiError::from);
    app.counters.feed_requests.fetch_add(1, Ordering::Relaxed);
    app.count(result)
}

#[derive(Debug, Deserialize)]
pub struct SearchParams {
    pub user: u64,
    #[serde(default)]
    pub q: String,
    pub top_k: Option<usize>,
    pub alpha: Option<f64>,
}

async fn search(
    State(app): State<Arc<AppState>>,
    Query(params): Query<SearchParams>,
) -> ApiResult<Json<Vec<SearchResult>>> {
    let snapshot = app.snapshot();
    let context = featurize_context(unix_now(), SessionKind::Search);
    let result = keyword_search(
        &app.index.snapshot(),
        &params.q,
        UserId(params.user),
        &context,
        params.top_k.unwrap_or(app.config.top_k),
        params.alpha.unwrap_or(app.config.alpha),
        &snapshot.state,
        &app.store.posts,
    )
    .map(Json)
    .map_err(ApiError::from);
    app.counters.search_requests.fetch_add(1, Ordering::Relaxed);
    app.count(result)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Health {
    pub status: String,
    pub users: usize,
    pub posts: usize,
    pub train_queue: u64,
    /// Labels not yet consumed by the training server.
    pub train_backlog: u64,
    /// Posts not yet fanned out by the recommender.
    pub new_backlog: u64,
    pub snapshot_version: u64,
}

/// Backlog behind `cursor`, or the whole queue if that reader never started.
fn backlog<T: Serialize + serde::de::DeserializeOwned>(queue: &dimrank_core::store::DurableQueue<T>, cursor: &str) -> u64 {
    queue.backlog(cursor).unwrap_or_else(|_| queue.len())
}

pub fn health_of(app: &AppState) -> Health {
    let store = &app.store;
    Health {
        status: "ok".into(),
        users: store.posts.user_count(),
        posts: store.posts.post_count(),
        train_queue: store.train_queue.len(),
        train_backlog: backlog(&store.train_queue, TRAINER_CURSOR),
        new_backlog: backlog(&store.new_queue, RECOMMENDER_CURSOR),
        snapshot_version: store.snapshots.version(),
    }
}

async fn health(State(app): State<Arc<AppState>>) -> Json<Health> {
    Json(health_of(&app))
}

async fn metrics(State(app): State<Arc<AppState>>) -> impl IntoResponse {
    let h = health_of(&app);
    let c = &app.counters;
    let load = |v: &AtomicU64| v.load(Ordering::Relaxed);
    let mut out = String::new();
    let lines = [
        ("dimrank_users_created_total", load(&c.users_created)),
        ("dimrank_posts_created_total", load(&c.posts_created)),
        ("dimrank_labels_received_total", load(&c.labels_received)),
        ("dimrank_feed_requests_total", load(&c.feed_requests)),
        ("dimrank_search_requests_total", load(&c.search_requests)),
        ("dimrank_request_errors_total", load(&c.errors)),
        ("dimrank_users", h.users as u64),
        ("dimrank_posts", h.posts as u64),
        ("dimrank_train_queue_length", h.train_queue),
        ("dimrank_train_backlog", h.train_backlog),
        ("dimrank_new_backlog", h.new_backlog),
        ("dimrank_snapshot_version", h.snapshot_version),
    ];
    for (name, value) in lines {
        let _ = writeln!(out, "{name} {value}");
    }
    ([(header::CONTENT_TYPE, "text/plain; version=0.0.4")], out)
}

/// The in-process training and recommendation servers.
pub struct Workers {
    stop: Arc<AtomicBool>,
    store: Arc<Store>,
    handles: Vec<JoinHandle<()>>,
}

impl Workers {
    pub fn spawn(store: Arc<Store>, config: &ServiceConfig) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let mut handles = Vec::new();

        let (dims, trainer_config) = (config.dims, config.trainer);
        let (s, flag) = (Arc::clone(&store), Arc::clone(&stop));
        handles.push(thread::spawn(move || {
            let result = TrainingServer::open(&s, dims, trainer_config).and_then(|mut server| {
                server.run(&flag, RunLimit::Follow, |p| {
                    info!(steps = p.steps, loss = p.mean_loss, rate = p.examples_per_sec, "training")
                })
            });
            match result {
                Ok(stats) => info!(processed = stats.processed, "training server stopped"),
                Err(err) => error!(%err, "training server failed"),
            }
        }));

        let recommender_config = config.recommender;
        let (s, flag) = (Arc::clone(&store), Arc::clone(&stop));
        handles.push(thread::spawn(move || {
            let result = Recommender::new(&s, recommender_config).and_then(|mut r| r.run(&flag, true));
            match result {
                Ok(stats) => info!(posts = stats.posts, deliveries = stats.deliveries, "recommender stopped"),
                Err(RecommendError::NoSnapshot) => error!("recommender started without a model snapshot"),
                Err(err) => error!(%err, "recommender failed"),
            }
        }));

        Self { stop, store, handles }
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        self.store.train_queue.notify();
        self.store.new_queue.notify();
        for h in self.handles {
            let _ = h.join();
        }
    }
}

/// Runs the API with both workers until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<()> {
    config.prepare_data_dir()?;
    let store = Arc::new(Store::open(&config.data_dir, config.store_options())?);
    let state = Arc::new(AppState::new(Arc::clone(&store), config.clone())?);
    let workers = Workers::spawn(Arc::clone(&store), &config);
    let listener = tokio::net::TcpListener::bind(&config.listen_address).await?;
    info!(address = %listener.local_addr()?, data_dir = %config.data_dir.display(), queues = ?[TRAIN_QUEUE, NEW_QUEUE], "listening");
    let served = axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            info!("shutting down");
        })
        .await;
    tokio::task::spawn_blocking(move || workers.shutdown()).await?;
    served?;
    Ok(())
}
