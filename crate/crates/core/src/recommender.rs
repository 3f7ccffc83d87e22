//! Fan-out of new posts into personal feeds.
//!
//! For each post taken from the new-post queue, every candidate user whose
//! predicted like probability reaches `tau_rec` gets the post in their feed.
//! Candidates are either all users or, with pruning on, the users whose
//! embeddings point furthest along the direction in user space that raises
//! the post's predicted score.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::ids::{PostId, UserId};
use crate::model::{featurize_context, ContextFeatures, SessionKind};
use crate::store::{ModelState, Post, Store, StoreError, Wait};

pub const RECOMMENDER_CURSOR: &str = "recommender";
const POLL_INTERVAL: Duration = Duration::from_millis(100);

#[derive(Debug, Error)]
pub enum RecommendError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid recommender config: {0}")]
    InvalidConfig(String),
    #[error("no model snapshot has been published yet")]
    NoSnapshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pruning {
    #[default]
    Exhaustive,
    EmbeddingKnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecommenderConfig {
    /// Minimum predicted like probability for delivery.
    pub tau_rec: f32,
    pub pruning: Pruning,
    /// Candidate users per post when pruning.
    pub knn_k: usize,
    /// Above this many users, exhaustive mode prunes to `knn_k` candidates.
    pub exhaustive_max_users: usize,
}

impl Default for RecommenderConfig {
    fn default() -> Self {
        Self {
            tau_rec: 0.5,
            pruning: Pruning::Exhaustive,
            knn_k: 200,
            exhaustive_max_users: 10_000,
        }
    }
}

impl RecommenderConfig {
    pub fn validate(&self) -> Result<(), RecommendError> {
        if !(self.tau_rec > 0.0 && self.tau_rec < 1.0) {
            return Err(RecommendError::InvalidConfig("tau_rec must be in (0, 1)".into()));
        }
        if self.knn_k == 0 {
            return Err(RecommendError::InvalidConfig("knn_k must be at least 1".into()));
        }
        Ok(())
    }
}

fn browse_context(now: u64) -> ContextFeatures {
    featurize_context(now, SessionKind::Browse)
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Users worth scoring for `post`. Always contains the author.
pub fn candidate_users(
    post: &Post,
    users: &[UserId],
    state: &ModelState,
    context: &ContextFeatures,
    config: &RecommenderConfig,
) -> Vec<UserId> {
    let prune = match config.pruning {
        Pruning::EmbeddingKnn => true,
        Pruning::Exhaustive if users.len() > config.exhaustive_max_users => {
            warn!(
                users = users.len(),
                max = config.exhaustive_max_users,
                "too many users for exhaustive fan-out, pruning"
            );
            true
        }
        Pruning::Exhaustive => false,
    };
    let mut out: Vec<UserId> = if !prune || config.knn_k >= users.len() {
        users.to_vec()
    } else {
        nearest_users(post, users, state, context, config.knn_k)
    };
    if !out.contains(&post.author_user_id) {
        out.push(post.author_user_id);
    }
    out.sort_unstable();
    out
}

/// The `k` users most aligned with the post's preference direction.
///
/// The direction is the gradient of the model's logit with respect to the user
/// embedding, taken at the mean user. Users are ranked by the cosine between
/// that direction and their offset from the mean.
fn nearest_users(post: &Post, users: &[UserId], state: &ModelState, context: &ContextFeatures, k: usize) -> Vec<UserId> {
    let n = state.dims.user;
    let vectors: Vec<_> = users.iter().map(|&u| state.user_vector(u)).collect();
    let mut mean = vec![0.0f32; n];
    for v in &vectors {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x / users.len() as f32;
        }
    }
    let doc = state.doc_vector(post.post_id, Some(post.author_user_id));
    let direction = state
        .weights
        .user_direction(&mean, &doc, context.as_slice())
        .expect("state vectors match the configured dimensions");
    let norm = |v: &mut dyn Iterator<Item = f32>| v.map(|x| x * x).sum::<f32>().sqrt();
    let dir_norm = norm(&mut direction.iter().copied()).max(f32::MIN_POSITIVE);

    let mut ranked: Vec<(f32, UserId)> = users
        .iter()
        .zip(&vectors)
        .map(|(&u, v)| {
            let offset: Vec<f32> = v.iter().zip(&mean).map(|(x, m)| x - m).collect();
            let dot: f32 = offset.iter().zip(&direction).map(|(a, b)| a * b).sum();
            let off_norm = norm(&mut offset.iter().copied()).max(f32::MIN_POSITIVE);
            (dot / (off_norm * dir_norm), u)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(k).map(|(_, u)| u).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub post_id: PostId,
    pub candidates: usize,
    pub recipients: Vec<UserId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecommendStats {
    pub posts: u64,
    pub deliveries: u64,
}

/// Moves posts from the new-post queue into user feeds.
pub struct Recommender<'s> {
    store: &'s Store,
    config: RecommenderConfig,
    clock: Box<dyn Fn() -> u64 + Send + Sync + 's>,
}

impl<'s> Recommender<'s> {
    pub fn new(store: &'s Store, config: RecommenderConfig) -> Result<Self, RecommendError> {
        config.validate()?;
        store.new_queue.register_cursor(RECOMMENDER_CURSOR)?;
        Ok(Self {
            store,
            config,
            clock: Box::new(unix_now),
        })
    }

    /// Replaces the wall clock used for the browse context, e.g. with simulated time.
    pub fn with_clock(mut self, clock: impl Fn() -> u64 + Send + Sync + 's) -> Self {
        self.clock = Box::new(clock);
        self
    }

    pub fn config(&self) -> &RecommenderConfig {
        &self.config
    }

    /// Scores `post` for its candidate users under `state` and pushes it into
    /// the feeds of those at or above `tau_rec`. The author never receives it.
    pub fn deliver(&self, post: &Post, state: &ModelState) -> Result<Delivery, RecommendError> {
        let context = browse_context((self.clock)());
        let users = self.store.posts.users();
        let candidates = candidate_users(post, &users, state, &context, &self.config);
        let mut recipients = Vec::new();
        for &user in &candidates {
            if user == post.author_user_id {
                continue;
            }
            let p = state.score(user, post.post_id, Some(post.author_user_id), &context);
            if p >= self.config.tau_rec && self.store.feeds.push(user, post.post_id)? {
                recipients.push(user);
            }
        }
        debug!(post = %post.post_id, candidates = candidates.len(), delivered = recipients.len(), "fan-out");
        Ok(Delivery {
            post_id: post.post_id,
            candidates: candidates.len(),
            recipients,
        })
    }

    /// Handles one queued post and acknowledges it. Nothing is acknowledged on error.
    pub fn process_next(&mut self, wait: Wait) -> Result<Option<Delivery>, RecommendError> {
        let snapshot = self.store.snapshot().ok_or(RecommendError::NoSnapshot)?;
        let Some((id, post_id)) = self.store.new_queue.poll(RECOMMENDER_CURSOR, wait)? else {
            return Ok(None);
        };
        let post = self.store.posts.require_post(post_id)?;
        let delivery = self.deliver(&post, &snapshot.state)?;
        self.store.new_queue.ack(RECOMMENDER_CURSOR, id)?;
        Ok(Some(delivery))
    }

    /// Processes queued posts until `stop` is set, or until the queue is empty
    /// when `follow` is false.
    pub fn run(&mut self, stop: &AtomicBool, follow: bool) -> Result<RecommendStats, RecommendError> {
        let mut stats = RecommendStats::default();
        while !stop.load(Ordering::Relaxed) {
            let wait = if follow { Wait::Timeout(POLL_INTERVAL) } else { Wait::No };
            match self.process_next(wait)? {
                Some(d) => {
                    stats.posts += 1;
                    stats.deliveries += d.recipients.len() as u64;
                }
                None if !follow => break,
                None => {}
            }
        }
        Ok(stats)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeedItem {
    pub post: Post,
    pub score: f32,
}

/// Up to `limit` unread posts from the user's feed, best predicted first, and
/// marks them read.
pub fn fetch_feed(
    store: &Store,
    user: UserId,
    limit: usize,
    state: &ModelState,
    now: u64,
) -> Result<Vec<FeedItem>, StoreError> {
    store.posts.require_user(user)?;
    let context = browse_context(now);
    store.feeds.update(user, |feed| {
        let mut scored: Vec<FeedItem> = feed
            .unread()
            .filter_map(|post_id| store.posts.get(post_id).ok().flatten())
            .map(|post| FeedItem {
                score: state.score(user, post.post_id, Some(post.author_user_id), &context),
                post,
            })
            .collect();
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.post.post_id.cmp(&b.post.post_id)));
        scored.truncate(limit);
        for item in &scored {
            feed.mark_read(item.post.post_id);
        }
        scored
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;
    use crate::store::{StoreOptions, SyncPolicy};

    fn store(dir: &std::path::Path) -> Store {
        Store::open(
            dir,
            StoreOptions {
                sync: SyncPolicy::Never,
                ..StoreOptions::default()
            },
        )
        .unwrap()
    }

    fn users(store: &Store, n: usize) -> Vec<UserId> {
        (0..n).map(|_| store.posts.register_user(None, 0).unwrap().user_id).collect()
    }

    fn constant_state(logit: f32) -> ModelState {
        let mut state = ModelState::new(Dims::default(), 1);
        state.weights.w1_mut().fill(0.0);
        state.weights.w2_mut().fill(0.0);
        *state.weights.b2_mut() = logit;
        state
    }

    #[test]
    fn exhaustive_returns_everyone() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let us = users(&s, 3);
        let post = s.create_post(us[0], "hi", None, 0).unwrap();
        let state = ModelState::new(Dims::default(), 1);
        let c = candidate_users(&post, &us, &state, &browse_context(0), &RecommenderConfig::default());
        assert_eq!(c, us);
    }

    #[test]
    fn knn_with_large_k_equals_exhaustive() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let us = users(&s, 7);
        let post = s.create_post(us[2], "hi", None, 0).unwrap();
        let state = ModelState::new(Dims::default(), 4);
        let ctx = browse_context(0);
        let knn = RecommenderConfig {
            pruning: Pruning::EmbeddingKnn,
            knn_k: 7,
            ..Default::default()
        };
        let all = candidate_users(&post, &us, &state, &ctx, &RecommenderConfig::default());
        assert_eq!(candidate_users(&post, &us, &state, &ctx, &knn), all);
    }

    #[test]
    fn knn_always_includes_author() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let us = users(&s, 10);
        let post = s.create_post(us[9], "hi", None, 0).unwrap();
        let state = ModelState::new(Dims::default(), 4);
        let knn = RecommenderConfig {
            pruning: Pruning::EmbeddingKnn,
            knn_k: 2,
            ..Default::default()
        };
        let c = candidate_users(&post, &us, &state, &browse_context(0), &knn);
        assert!(c.contains(&us[9]));
        assert!(c.len() <= 3);
    }

    #[test]
    fn saturated_model_delivers_to_everyone_but_the_author() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let us = users(&s, 4);
        s.publish_snapshot(&constant_state(20.0));
        s.create_post(us[1], "hello", None, 0).unwrap();
        let mut rec = Recommender::new(&s, RecommenderConfig::default()).unwrap().with_clock(|| 0);
        let d = rec.process_next(Wait::No).unwrap().unwrap();
        assert_eq!(d.recipients, vec![us[0], us[2], us[3]]);
        assert!(s.feeds.snapshot(us[1]).unwrap().is_empty());
        assert_eq!(s.new_queue.backlog(RECOMMENDER_CURSOR).unwrap(), 0);
    }

    #[test]
    fn threshold_above_model_output_delivers_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let us = users(&s, 3);
        // sigmoid(1) ~ 0.731
        s.publish_snapshot(&constant_state(1.0));
        s.create_post(us[0], "hello", None, 0).unwrap();
        let config = RecommenderConfig {
            tau_rec: 0.74,
            ..Default::default()
        };
        let mut rec = Recommender::new(&s, config).unwrap();
        assert!(rec.process_next(Wait::No).unwrap().unwrap().recipients.is_empty());
        // Exactly at the threshold still delivers.
        s.create_post(us[0], "again", None, 0).unwrap();
        let at = s.snapshot().unwrap().state.score(us[1], PostId(2), Some(us[0]), &browse_context(0));
        let mut rec = Recommender::new(&s, RecommenderConfig { tau_rec: at, ..Default::default() }).unwrap();
        assert_eq!(rec.process_next(Wait::No).unwrap().unwrap().recipients.len(), 2);
    }

    #[test]
    fn missing_snapshot_leaves_post_queued() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let us = users(&s, 2);
        s.create_post(us[0], "hello", None, 0).unwrap();
        let mut rec = Recommender::new(&s, RecommenderConfig::default()).unwrap();
        assert!(matches!(rec.process_next(Wait::No), Err(RecommendError::NoSnapshot)));
        assert_eq!(s.new_queue.backlog(RECOMMENDER_CURSOR).unwrap(), 1);
    }

    #[test]
    fn feed_is_ordered_and_marks_read() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let us = users(&s, 2);
        let state = ModelState::new(Dims::default(), 8);
        assert!(fetch_feed(&s, us[0], 10, &state, 0).unwrap().is_empty());
        for i in 0..5 {
            let p = s.create_post(us[1], &format!("post {i}"), None, 0).unwrap();
            s.feeds.push(us[0], p.post_id).unwrap();
        }
        let mut all: Vec<(f32, PostId)> = s
            .posts
            .posts()
            .iter()
            .map(|p| (state.score(us[0], p.post_id, Some(us[1]), &browse_context(0)), p.post_id))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0));

        let first = fetch_feed(&s, us[0], 1, &state, 0).unwrap();
        assert_eq!(first.len(), 1);
        assert_eq!(first[0].post.post_id, all[0].1);
        let rest = fetch_feed(&s, us[0], 10, &state, 0).unwrap();
        assert_eq!(rest.len(), 4);
        assert!(rest.iter().all(|i| i.post.post_id != first[0].post.post_id));
        assert!(rest.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(fetch_feed(&s, us[0], 10, &state, 0).unwrap().is_empty());
        assert!(matches!(
            fetch_feed(&s, UserId(99), 1, &state, 0),
            Err(StoreError::UnknownUser(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(RecommenderConfig::default().validate().is_ok());
        assert!(RecommenderConfig { tau_rec: 1.0, ..Default::default() }.validate().is_err());
        assert!(RecommenderConfig { tau_rec: 0.0, ..Default::default() }.validate().is_err());
        assert!(RecommenderConfig { knn_k: 0, ..Default::default() }.validate().is_err());
    }
}
