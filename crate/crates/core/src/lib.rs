//! Personalized ranking with an independent embedding per user and per document,
//! trained one labeled example at a time.
//!
//! * [`model`]: the scoring network with exact gradients.
//! * [`store`]: durable queues, posts, feeds, snapshots and checkpoints.
//! * [`trainer`]: label ingestion and the SGD training server.
//! * [`recommender`]: fan-out of new posts into per-user feeds.
//! * [`search`]: BM25 retrieval followed by personalized re-ranking.
//! * [`sim`]: the vote-brigading simulation.

pub mod ids;
pub mod model;
pub mod recommender;
pub mod search;
pub mod sim;
pub mod store;
pub mod trainer;

pub use ids::{PostId, UserId};
pub use model::{
    featurize_context, loss, ContextFeatures, Dims, Embedding, EntityKind, Gradients, Label, LabelSource,
    ModelError, ModelWeights, SessionKind, Target,
};
pub use store::{Example, ModelCheckpoint, ModelState, Post, Snapshot, SnapshotHandle, Store, StoreError, StoreOptions};
