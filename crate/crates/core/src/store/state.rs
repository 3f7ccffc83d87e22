use std::borrow::Cow;
use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ids::{PostId, UserId};
use crate::model::{ContextFeatures, Dims, Embedding, EntityKind, ModelError, ModelWeights};

/// How many recent likes of an author seed the embedding of their new posts.
pub const LIKED_HISTORY: usize = 10;
const DOC_INIT_NOISE: f64 = 0.01;

/// Embeddings of one entity kind, keyed by id. Rows are never removed.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    kind: EntityKind,
    dim: usize,
    rows: BTreeMap<u64, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(kind: EntityKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> EntityKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&[f32]> {
        self.rows.get(&id).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, id: u64) -> Option<&mut [f32]> {
        self.rows.get_mut(&id).map(Vec::as_mut_slice)
    }

    /// Rows in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f32])> {
        self.rows.iter().map(|(&id, v)| (id, v.as_slice()))
    }

    pub fn insert(&mut self, id: u64, values: Vec<f32>) -> Result<(), ModelError> {
        if values.len() != self.dim {
            return Err(ModelError::DimensionMismatch {
                what: "embedding row",
                expected: self.dim,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("embedding row"));
        }
        self.rows.insert(id, values);
        Ok(())
    }
}

/// Everything the model knows: shared weights, both embedding tables and the
/// per-user like history used for document cold start.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub dims: Dims,
    pub seed: u64,
    pub weights: ModelWeights<f32>,
    pub users: EmbeddingTable,
    pub docs: EmbeddingTable,
    pub liked: BTreeMap<UserId, VecDeque<PostId>>,
}

impl ModelState {
    /// Fresh state with weights drawn from `seed`.
    pub fn new(dims: Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            dims,
            seed,
            weights: ModelWeights::init(dims, &mut rng),
            users: EmbeddingTable::new(EntityKind::User, dims.user),
            docs: EmbeddingTable::new(EntityKind::Document, dims.doc),
            liked: BTreeMap::new(),
        }
    }

    /// Random stream dedicated to one entity, so initialization does not depend
    /// on the order in which entities are first seen.
    pub fn entity_rng(seed: u64, kind: EntityKind, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Stream 0 belongs to the weight initializer.
        rng.set_stream(1 + 2 * id + kind as u64);
        rng
    }

    fn table(&self, kind: EntityKind) -> &EmbeddingTable {
        match kind {
            EntityKind::User => &self.users,
            EntityKind::Document => &self.docs,
        }
    }

    fn table_mut(&mut self, kind: EntityKind) -> &mut EmbeddingTable {
        match kind {
            EntityKind::User => &mut self.users,
            EntityKind::Document => &mut self.docs,
        }
    }

    /// The vector a new entity would start with, without storing it.
    ///
    /// Users draw from `U(-1/sqrt(n), 1/sqrt(n))`. Documents start at the mean of
    /// their author's last liked documents plus `U(-0.01, 0.01)` noise, or draw
    /// like users when the author has no liked history.
    pub fn cold_start<R: Rng + ?Sized>(&self, kind: EntityKind, author: Option<UserId>, rng: &mut R) -> Vec<f32> {
        let dim = self.dims.embedding(kind);
        if kind == EntityKind::Document {
            if let Some(mean) = author.and_then(|a| self.liked_mean(a)) {
                return mean
                    .into_iter()
                    .map(|m| (m + rng.gen_range(-DOC_INIT_NOISE..DOC_INIT_NOISE)) as f32)
                    .collect();
            }
        }
        let limit = 1.0 / (dim as f64).sqrt();
        (0..dim).map(|_| rng.gen_range(-limit..limit) as f32).collect()
    }

    /// Mean embedding of the documents `user` liked most recently.
    pub fn liked_mean(&self, user: UserId) -> Option<Vec<f64>> {
        let history = self.liked.get(&user)?;
        let mut sum = vec![0.0f64; self.dims.doc];
        let mut count = 0usize;
        for post in history {
            if let Some(row) = self.docs.get(post.0) {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += *v as f64;
                }
                count += 1;
            }
        }
        (count > 0).then(|| sum.into_iter().map(|s| s / count as f64).collect())
    }

    /// Returns the stored embedding, creating it through [`cold_start`](Self::cold_start) if absent.
    pub fn get_or_init_embedding<R: Rng + ?Sized>(
        &mut self,
        kind: EntityKind,
        id: u64,
        author: Option<UserId>,
        rng: &mut R,
    ) -> Embedding {
        if self.table(kind).get(id).is_none() {
            let values = self.cold_start(kind, author, rng);
            self.table_mut(kind)
                .insert(id, values)
                .expect("cold start produces finite rows of the table width");
        }
        Embedding {
            kind,
            id,
            values: self.table(kind).get(id).unwrap().to_vec(),
        }
    }

    /// [`get_or_init_embedding`](Self::get_or_init_embedding) with the entity's own random stream.
    pub fn ensure(&mut self, kind: EntityKind, id: u64, author: Option<UserId>) -> Embedding {
        let mut rng = Self::entity_rng(self.seed, kind, id);
        self.get_or_init_embedding(kind, id, author, &mut rng)
    }

    /// Stored user vector, or the vector the user would be initialized with.
    pub fn user_vector(&self, user: UserId) -> Cow<'_, [f32]> {
        match self.users.get(user.0) {
            Some(row) => Cow::Borrowed(row),
            None => {
                let mut rng = Self::entity_rng(self.seed, EntityKind::User, user.0);
                Cow::Owned(self.cold_start(EntityKind::User, None, &mut rng))
            }
        }
    }

    /// Stored document vector, or the vector the document would be initialized with.
    pub fn doc_vector(&self, post: PostId, author: Option<UserId>) -> Cow<'_, [f32]> {
        match self.docs.get(post.0) {
            Some(row) => Cow::Borrowed(row),
            None => {
                let mut rng = Self::entity_rng(self.seed, EntityKind::Document, post.0);
                Cow::Owned(self.cold_start(EntityKind::Document, author, &mut rng))
            }
        }
    }

    /// Like probability of `user` for `post` in `context`.
    pub fn score(&self, user: UserId, post: PostId, author: Option<UserId>, context: &ContextFeatures) -> f32 {
        let u = self.user_vector(user);
        let d = self.doc_vector(post, author);
        self.weights
            .score(&u, &d, context.as_slice())
            .expect("state vectors match the configured dimensions")
    }

    pub fn record_like(&mut self, user: UserId, post: PostId) {
        let history = self.liked.entry(user).or_default();
        history.retain(|&p| p != post);
        history.push_back(post);
        while history.len() > LIKED_HISTORY {
            history.pop_front();
        }
    }
}
