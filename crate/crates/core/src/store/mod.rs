//! Durable state: queues, posts, users, per-user feeds, model snapshots and checkpoints.
//!
//! Layout under the data directory:
//!
//! ```text
//! queues/<name>.log      append-only record logs (train, new)
//! cursors/<name>.json    acknowledged position per reader
//! checkpoints/<n>.ckpt   model checkpoints, named by step count
//! posts.jsonl            one post per line
//! users.jsonl            one registered user per line
//! feeds/<user>.json      per-user recommendation queues
//! ```

mod checkpoint;
mod feed;
mod posts;
mod queue;
mod snapshot;
mod state;

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{latest_checkpoint, Hyperparameters, ModelCheckpoint, FORMAT_VERSION};
pub use feed::{FeedStore, UserFeedQueue, DEFAULT_FEED_CAPACITY};
pub use posts::{Post, PostStore, UserRecord};
pub use queue::{DurableQueue, Wait};
pub use snapshot::{Snapshot, SnapshotCell, SnapshotHandle};
pub use state::{EmbeddingTable, ModelState, LIKED_HISTORY};

use crate::ids::{PostId, UserId};
use crate::model::{ContextFeatures, Label, ModelError, SessionKind};

pub const TRAIN_QUEUE: &str = "train";
pub const NEW_QUEUE: &str = "new";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint dimensions {found:?} do not match configured {expected:?}")]
    DimensionMismatch {
        found: crate::model::Dims,
        expected: crate::model::Dims,
    },
    #[error("unknown cursor {0}")]
    UnknownCursor(String),
    #[error("ack out of order: cursor is at {expected}, got {got}")]
    AckOutOfOrder { expected: u64, got: u64 },
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown post {0}")]
    UnknownPost(PostId),
    #[error("post text must not be empty")]
    EmptyPost,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Whether writes are fsynced before returning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncPolicy {
    #[default]
    Always,
    /// Flush to the OS only. Survives process death, not power loss.
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreOptions {
    pub sync: SyncPolicy,
    /// Keep per-user feeds on disk so separate processes can share them.
    pub persist_feeds: bool,
    pub feed_capacity: usize,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            sync: SyncPolicy::Always,
            persist_feeds: true,
            feed_capacity: DEFAULT_FEED_CAPACITY,
        }
    }
}

/// One labeled training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub example_id: u64,
    pub user_id: UserId,
    pub post_id: PostId,
    pub timestamp: u64,
    pub session: SessionKind,
    pub context: ContextFeatures,
    pub label: Label,
}

pub struct Store {
    root: PathBuf,
    options: StoreOptions,
    /// Labeled examples waiting for the training server.
    pub train_queue: DurableQueue<Example>,
    /// Newly created posts waiting for the recommendation server.
    pub new_queue: DurableQueue<PostId>,
    pub posts: PostStore,
    pub feeds: FeedStore,
    pub snapshots: SnapshotCell,
}

impl Store {
    pub fn open(root: impl AsRef<Path>, options: StoreOptions) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("checkpoints"))?;
        let feeds_dir = options.persist_feeds.then(|| root.join("feeds"));
        Ok(Self {
            train_queue: DurableQueue::open(&root, TRAIN_QUEUE, options.sync)?,
            new_queue: DurableQueue::open(&root, NEW_QUEUE, options.sync)?,
            posts: PostStore::open(&root, options.sync)?,
            feeds: FeedStore::new(feeds_dir, options.feed_capacity)?,
            snapshots: SnapshotCell::default(),
            root,
            options,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn options(&self) -> StoreOptions {
        self.options
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    /// Persists a post and queues it for recommendation.
    pub fn create_post(
        &self,
        author: UserId,
        text: &str,
        url: Option<String>,
        created_at: u64,
    ) -> Result<Post, StoreError> {
        let post = self.posts.create_post(author, text, url, created_at)?;
        self.new_queue.append(&post.post_id)?;
        Ok(post)
    }

    /// Publishes `state` as the newest read snapshot.
    pub fn publish_snapshot(&self, state: &ModelState) -> SnapshotHandle {
        self.snapshots.publish(state.clone())
    }

    pub fn snapshot(&self) -> Option<SnapshotHandle> {
        self.snapshots.current()
    }
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8], sync: SyncPolicy) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut file = File::create(&tmp)?;
        file.write_all(bytes)?;
        if sync == SyncPolicy::Always {
            file.sync_all()?;
        }
    }
    fs::rename(&tmp, path)?;
    if sync == SyncPolicy::Always {
        if let Some(parent) = path.parent() {
            // Directory fsync is not supported everywhere; the rename itself already happened.
            let _ = File::open(parent).and_then(|d| d.sync_all());
        }
    }
    Ok(())
}
