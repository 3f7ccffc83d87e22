//! Label ingestion and the training server.
//!
//! Labels become [`Example`]s appended to the training queue. The training
//! server polls that queue, applies one SGD step per example and acknowledges
//! it afterwards. Checkpoints record how many queue records they reflect; on
//! restart the server loads the newest checkpoint and re-applies every
//! acknowledged record after it, so acknowledged work is never lost and at most
//! the one in-flight example is stepped twice.

use std::fs::{File, OpenOptions};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::ids::{PostId, UserId};
use crate::model::{featurize_context, loss, Dims, EntityKind, Label, ModelError, SessionKind};
use crate::store::{
    latest_checkpoint, Example, Hyperparameters, ModelCheckpoint, ModelState, SnapshotHandle, Store, StoreError, Wait,
    FORMAT_VERSION,
};

/// Cursor name the training server uses on the training queue.
pub const TRAINER_CURSOR: &str = "trainer";
const POLL_INTERVAL: Duration = Duration::from_millis(100);
const STATUS_EVERY: u64 = 1000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("another training server holds {0}")]
    Locked(PathBuf),
    #[error("example {0} was stepped but not acknowledged")]
    PendingAck(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    /// Learning rate of the shared network weights.
    pub eta_w: f32,
    /// Learning rate of the user and document embeddings.
    pub eta_emb: f32,
    /// L2 penalty on the two active embedding rows.
    pub l2: f32,
    pub snapshot_every: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            eta_w: 0.01,
            eta_emb: 0.05,
            l2: 0.0,
            snapshot_every: 100,
            checkpoint_every: 10_000,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = |v: f32| v.is_finite() && v > 0.0;
        if !positive(self.eta_w) || !positive(self.eta_emb) {
            return Err(TrainError::InvalidConfig("learning rates must be positive".into()));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(TrainError::InvalidConfig("l2 must be non-negative".into()));
        }
        if self.snapshot_every == 0 || self.checkpoint_every == 0 {
            return Err(TrainError::InvalidConfig("intervals must be at least 1".into()));
        }
        Ok(())
    }

    pub fn hyperparameters(&self) -> Hyperparameters {
        Hyperparameters {
            eta_w: self.eta_w,
            eta_emb: self.eta_emb,
            l2: self.l2,
        }
    }
}

/// Records a label as a training example and returns the example id.
///
/// Also marks the post read in the labeler's feed, if it is queued there.
pub fn receive_label(
    store: &Store,
    user: UserId,
    post: PostId,
    timestamp: u64,
    session: SessionKind,
    label: Label,
) -> Result<u64, TrainError> {
    label.validate()?;
    store.posts.require_user(user)?;
    store.posts.require_post(post)?;
    let context = featurize_context(timestamp, session);
    let (id, _) = store.train_queue.append_with(|example_id| {
        Ok::<_, StoreError>(Example {
            example_id,
            user_id: user,
            post_id: post,
            timestamp,
            session,
            context,
            label,
        })
    })?;
    store.feeds.update(user, |feed| feed.mark_read(post))?;
    Ok(id)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub example_id: u64,
    /// Loss of the example before the update.
    pub loss: f32,
    /// False when the example was quarantined because of non-finite values.
    pub applied: bool,
}

/// The mutable model plus SGD bookkeeping.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainerConfig,
    state: ModelState,
    steps: u64,
    skipped: u64,
    /// Training-queue records reflected in `state`.
    cursor: u64,
}

impl Trainer {
    pub fn new(dims: Dims, config: TrainerConfig) -> Self {
        Self {
            state: ModelState::new(dims, config.seed),
            config,
            steps: 0,
            skipped: 0,
            cursor: 0,
        }
    }

    pub fn from_checkpoint(ckpt: ModelCheckpoint, config: TrainerConfig) -> Self {
        Self {
            config,
            state: ckpt.state,
            steps: ckpt.steps,
            skipped: ckpt.skipped,
            cursor: ckpt.training_cursor,
        }
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut ModelState {
        &mut self.state
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            format_version: FORMAT_VERSION,
            hyper: self.config.hyperparameters(),
            training_cursor: self.cursor,
            steps: self.steps,
            skipped: self.skipped,
            state: self.state.clone(),
        }
    }

    /// One SGD step on `example`. `author` seeds the document embedding if the
    /// post has none yet.
    ///
    /// Only the shared weights and the example's own user and document rows
    /// change. Steps that would introduce non-finite values are skipped.
    pub fn sgd_step(&mut self, example: &Example, author: Option<UserId>) -> StepReport {
        let state = &mut self.state;
        let user = state.ensure(EntityKind::User, example.user_id.0, None).values;
        let doc = state.ensure(EntityKind::Document, example.post_id.0, author).values;
        let ctx = example.context.values::<f32>();
        let label = &example.label;

        let outcome = state
            .weights
            .forward(&user, &doc, &ctx)
            .and_then(|pass| {
                let before = loss(pass.p, label);
                state.weights.backward(&pass, label).map(|g| (before, g))
            });
        let (before, grads) = match outcome {
            Ok(v) => v,
            Err(err) => {
                warn!(example = example.example_id, %err, "skipping example");
                self.skipped += 1;
                return StepReport {
                    example_id: example.example_id,
                    loss: f32::NAN,
                    applied: false,
                };
            }
        };

        let eta = self.config.eta_emb;
        let l2 = self.config.l2;
        let step = |row: &[f32], g: &[f32]| -> Vec<f32> {
            row.iter().zip(g).map(|(v, g)| v - eta * (g + l2 * v)).collect()
        };
        let new_user = step(&user, &grads.user);
        let new_doc = step(&doc, &grads.doc);
        let mut new_weights = state.weights.clone();
        new_weights.apply(&grads, self.config.eta_w);

        let finite = before.is_finite()
            && grads.is_finite()
            && new_weights.is_finite()
            && new_user.iter().chain(&new_doc).all(|v| v.is_finite());
        if !finite {
            warn!(example = example.example_id, "non-finite update, example quarantined");
            self.skipped += 1;
            return StepReport {
                example_id: example.example_id,
                loss: before,
                applied: false,
            };
        }

        state.weights = new_weights;
        state.users.get_mut(example.user_id.0).unwrap().copy_from_slice(&new_user);
        state.docs.get_mut(example.post_id.0).unwrap().copy_from_slice(&new_doc);
        if label.target == crate::model::Target::Like {
            state.record_like(example.user_id, example.post_id);
        }
        self.steps += 1;
        StepReport {
            example_id: example.example_id,
            loss: before,
            applied: true,
        }
    }
}

/// How long [`TrainingServer::run`] keeps going.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunLimit {
    /// Stop once the queue is empty or after `max_steps` examples.
    Drain { max_steps: Option<u64> },
    /// Wait for new examples until stopped.
    Follow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub steps: u64,
    pub mean_loss: f64,
    pub examples_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainStats {
    /// Examples taken from the queue during this run.
    pub processed: u64,
    pub skipped: u64,
    /// Acknowledged examples re-applied on startup.
    pub recovered: u64,
    pub mean_loss: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Drives a [`Trainer`] from the store's training queue.
pub struct TrainingServer<'s> {
    store: &'s Store,
    trainer: Trainer,
    pending: Option<u64>,
    recovered: u64,
    _lock: File,
}

impl<'s> TrainingServer<'s> {
    /// Takes the store's trainer lock, restores the newest checkpoint and
    /// re-applies acknowledged examples recorded after it.
    pub fn open(store: &'s Store, dims: Dims, config: TrainerConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let lock_path = store.root().join("trainer.lock");
        let lock = OpenOptions::new().create(true).truncate(false).write(true).open(&lock_path).map_err(StoreError::from)?;
        if lock.try_lock().is_err() {
            return Err(TrainError::Locked(lock_path));
        }

        let queue = &store.train_queue;
        queue.register_cursor(TRAINER_CURSOR)?;
        let mut trainer = match latest_checkpoint(&store.checkpoint_dir())? {
            Some(path) => {
                let ckpt = ModelCheckpoint::load(&path, Some(dims))?;
                info!(path = %path.display(), cursor = ckpt.training_cursor, "restored checkpoint");
                Trainer::from_checkpoint(ckpt, config)
            }
            None => Trainer::new(dims, config),
        };
        let acked = queue.cursor(TRAINER_CURSOR)?;
        if trainer.cursor > acked {
            queue.advance_cursor(TRAINER_CURSOR, trainer.cursor)?;
        }
        let mut recovered = 0;
        while trainer.cursor < acked {
            let example = queue
                .read(trainer.cursor)?
                .ok_or_else(|| StoreError::Corrupt(format!("acknowledged example {} missing", trainer.cursor)))?;
            let author = store.posts.author_of(example.post_id);
            trainer.sgd_step(&example, author);
            trainer.cursor += 1;
            recovered += 1;
        }
        if recovered > 0 {
            info!(recovered, "re-applied acknowledged examples");
        }
        store.publish_snapshot(trainer.state());
        Ok(Self {
            store,
            trainer,
            pending: None,
            recovered,
            _lock: lock,
        })
    }

    pub fn trainer(&self) -> &Trainer {
        &self.trainer
    }

    pub fn recovered(&self) -> u64 {
        self.recovered
    }

    /// Polls one example and steps on it without acknowledging.
    pub fn poll_step(&mut self, wait: Wait) -> Result<Option<StepReport>, TrainError> {
        if let Some(id) = self.pending {
            return Err(TrainError::PendingAck(id));
        }
        let Some((id, example)) = self.store.train_queue.poll(TRAINER_CURSOR, wait)? else {
            return Ok(None);
        };
        let author = self.store.posts.author_of(example.post_id);
        let report = self.trainer.sgd_step(&example, author);
        self.pending = Some(id);
        Ok(Some(report))
    }

    /// Acknowledges the example stepped by [`poll_step`](Self::poll_step), then
    /// publishes a snapshot or writes a checkpoint when one is due.
    pub fn ack(&mut self) -> Result<(), TrainError> {
        let Some(id) = self.pending else {
            return Ok(());
        };
        self.store.train_queue.ack(TRAINER_CURSOR, id)?;
        self.pending = None;
        self.trainer.cursor += 1;
        let done = self.trainer.cursor;
        let config = *self.trainer.config();
        if done % config.snapshot_every == 0 {
            self.publish();
        }
        if done % config.checkpoint_every == 0 {
            self.checkpoint_now()?;
        }
        Ok(())
    }

    pub fn process_next(&mut self, wait: Wait) -> Result<Option<StepReport>, TrainError> {
        let report = self.poll_step(wait)?;
        if report.is_some() {
            self.ack()?;
        }
        Ok(report)
    }

    pub fn publish(&self) -> SnapshotHandle {
        self.store.publish_snapshot(self.trainer.state())
    }

    /// Writes `checkpoints/<cursor>.ckpt`.
    pub fn checkpoint_now(&mut self) -> Result<PathBuf, TrainError> {
        let path = self
            .store
            .checkpoint_dir()
            .join(format!("{:012}.ckpt", self.trainer.cursor));
        self.trainer.checkpoint().save(&path)?;
        Ok(path)
    }

    /// The training loop: poll, step, acknowledge, until `stop` is set or `limit`
    /// is reached. Always ends with a snapshot and a checkpoint.
    pub fn run(
        &mut self,
        stop: &AtomicBool,
        limit: RunLimit,
        mut progress: impl FnMut(&Progress),
    ) -> Result<TrainStats, TrainError> {
        let mut stats = TrainStats {
            recovered: self.recovered,
            ..TrainStats::default()
        };
        let skipped_before = self.trainer.skipped();
        let mut loss_sum = 0.0f64;
        let mut window_sum = 0.0f64;
        let mut window_count = 0u64;
        let mut window_start = Instant::now();

        let outcome = loop {
            if stop.load(Ordering::Relaxed) {
                break Ok(());
            }
            let wait = match limit {
                RunLimit::Drain { max_steps } => {
                    if max_steps.is_some_and(|m| stats.processed >= m) {
                        break Ok(());
                    }
                    Wait::No
                }
                RunLimit::Follow => Wait::Timeout(POLL_INTERVAL),
            };
            match self.process_next(wait) {
                Ok(Some(report)) => {
                    stats.processed += 1;
                    if report.applied {
                        loss_sum += report.loss as f64;
                        window_sum += report.loss as f64;
                        window_count += 1;
                    }
                    if stats.processed % STATUS_EVERY == 0 {
                        let secs = window_start.elapsed().as_secs_f64().max(1e-9);
                        progress(&Progress {
                            steps: self.trainer.cursor(),
                            mean_loss: window_sum / window_count.max(1) as f64,
                            examples_per_sec: STATUS_EVERY as f64 / secs,
                        });
                        window_sum = 0.0;
                        window_count = 0;
                        window_start = Instant::now();
                    }
                }
                Ok(None) if matches!(limit, RunLimit::Drain { .. }) => break Ok(()),
                Ok(None) => {}
                Err(err) => break Err(err),
            }
        };

        stats.skipped = self.trainer.skipped() - skipped_before;
        let applied = stats.processed - stats.skipped;
        stats.mean_loss = if applied > 0 { loss_sum / applied as f64 } else { 0.0 };
        self.publish();
        match outcome {
            Ok(()) => {
                stats.checkpoint = Some(self.checkpoint_now()?);
                Ok(stats)
            }
            Err(err) => {
                if let Err(ckpt_err) = self.checkpoint_now() {
                    warn!(%ckpt_err, "checkpoint after failure also failed");
                }
                Err(err)
            }
        }
    }
}
