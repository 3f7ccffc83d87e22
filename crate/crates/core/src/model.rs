//! The scoring network.
//!
//! A single hidden layer perceptron over the concatenation `[user; document; context]`:
//!
//! ```text
//! p = sigmoid(w2 . relu(W1 x + b1) + b2),   x = [u; d; c]
//! ```
//!
//! Storage and serving run in `f32`. Everything is generic over [`Real`] so the
//! gradient checks can run the exact same code in `f64`.

use std::fmt;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of the context encoding: four time-of-day buckets plus two session kinds.
pub const CONTEXT_DIM: usize = 6;

const TIME_BUCKETS: usize = 4;
const SECONDS_PER_DAY: u64 = 86_400;
const SECONDS_PER_HOUR: u64 = 3_600;

pub trait Real: Float + Default + fmt::Debug + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
    fn widen(self) -> f64;
}

impl Real for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn widen(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("activation cache is stale: computed at weight generation {cached}, weights are at {current}")]
    StaleActivations { cached: u64, current: u64 },
    #[error("label magnitude must be in (0, 1], got {0}")]
    InvalidMagnitude(f32),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Network and embedding sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// User embedding length (`n`).
    pub user: usize,
    /// Document embedding length (`m`).
    pub doc: usize,
    /// Hidden layer width.
    pub hidden: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            user: 32,
            doc: 32,
            hidden: 64,
        }
    }
}

impl Dims {
    pub fn input(&self) -> usize {
        self.user + self.doc + CONTEXT_DIM
    }

    pub fn embedding(&self, kind: EntityKind) -> usize {
        match kind {
            EntityKind::User => self.user,
            EntityKind::Document => self.doc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    User,
    Document,
}

/// A dense vector owned by one user or one document.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub kind: EntityKind,
    pub id: u64,
    pub values: Vec<f32>,
}

impl Embedding {
    pub fn new(kind: EntityKind, id: u64, values: Vec<f32>, dims: &Dims) -> Result<Self, ModelError> {
        let expected = dims.embedding(kind);
        if values.len() != expected {
            return Err(ModelError::DimensionMismatch {
                what: "embedding",
                expected,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("embedding"));
        }
        Ok(Self { kind, id, values })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionKind {
    Browse,
    Search,
}

/// Fixed one-hot encoding of when and how a session happens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextFeatures(pub [f32; CONTEXT_DIM]);

impl ContextFeatures {
    pub fn values<T: Real>(&self) -> [T; CONTEXT_DIM] {
        self.0.map(|v| T::lit(v as f64))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Encodes the UTC six-hour bucket of `timestamp` and the session kind.
pub fn featurize_context(timestamp: u64, session: SessionKind) -> ContextFeatures {
    let hour = (timestamp % SECONDS_PER_DAY) / SECONDS_PER_HOUR;
    let bucket = (hour / 6) as usize;
    let mut values = [0.0; CONTEXT_DIM];
    values[bucket] = 1.0;
    values[TIME_BUCKETS + session as usize] = 1.0;
    ContextFeatures(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Dislike = 0,
    Like = 1,
}

impl Target {
    pub fn value<T: Real>(self) -> T {
        match self {
            Target::Dislike => T::zero(),
            Target::Like => T::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    #[default]
    Explicit,
    Implicit,
}

/// Whether a user liked a post, and how much.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub target: Target,
    pub magnitude: f32,
    #[serde(default)]
    pub source: LabelSource,
}

impl Label {
    pub fn new(target: Target, magnitude: f32, source: LabelSource) -> Result<Self, ModelError> {
        let label = Self {
            target,
            magnitude,
            source,
        };
        label.validate()?;
        Ok(label)
    }

    pub fn like() -> Self {
        Self {
            target: Target::Like,
            magnitude: 1.0,
            source: LabelSource::Explicit,
        }
    }

    pub fn dislike() -> Self {
        Self {
            target: Target::Dislike,
            magnitude: 1.0,
            source: LabelSource::Explicit,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        // NaN fails both comparisons.
        if self.magnitude > 0.0 && self.magnitude <= 1.0 {
            Ok(())
        } else {
            Err(ModelError::InvalidMagnitude(self.magnitude))
        }
    }
}

/// Magnitude-weighted binary cross-entropy.
pub fn loss<T: Real>(p: T, label: &Label) -> T {
    let t: T = label.target.value();
    let bce = -(t * p.ln() + (T::one() - t) * (T::one() - p).ln());
    T::lit(label.magnitude as f64) * bce
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Keeps probabilities strictly inside (0, 1) once the sigmoid saturates.
fn clamp_probability<T: Real>(p: T) -> T {
    let eps = T::epsilon();
    p.max(eps).min(T::one() - eps)
}

/// Shared network weights.
///
/// `w1` is row-major with one row of length `dims.input()` per hidden unit.
/// Every mutable accessor bumps the generation counter so activation caches
/// taken before the mutation are rejected by [`ModelWeights::backward`].
/// Equality compares parameter values only.
#[derive(Debug, Clone)]
pub struct ModelWeights<T> {
    dims: Dims,
    w1: Vec<T>,
    b1: Vec<T>,
    w2: Vec<T>,
    b2: T,
    generation: u64,
}

impl<T: PartialEq> PartialEq for ModelWeights<T> {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.w1 == other.w1
            && self.b1 == other.b1
            && self.w2 == other.w2
            && self.b2 == other.b2
    }
}

/// Activations cached by a forward pass for use by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    /// Like probability, strictly inside (0, 1).
    pub p: T,
    pub logit: T,
    input: Vec<T>,
    pre: Vec<T>,
    hidden: Vec<T>,
    generation: u64,
}

impl<T> ForwardPass<T> {
    pub fn pre_activations(&self) -> &[T] {
        &self.pre
    }
}

/// Gradients of the loss with respect to every trainable parameter of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: T,
    pub user: Vec<T>,
    pub doc: Vec<T>,
}

impl<T: Real> Gradients<T> {
    pub fn is_finite(&self) -> bool {
        self.b2.is_finite()
            && [&self.w1, &self.b1, &self.w2, &self.user, &self.doc]
                .iter()
                .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

impl<T: Real> ModelWeights<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            w1: vec![T::zero(); dims.hidden * dims.input()],
            b1: vec![T::zero(); dims.hidden],
            w2: vec![T::zero(); dims.hidden],
            b2: T::zero(),
            generation: 0,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Self {
        let mut weights = Self::zeros(dims);
        let limit1 = (6.0 / (dims.input() + dims.hidden) as f64).sqrt();
        for w in &mut weights.w1 {
            *w = T::lit(rng.gen_range(-limit1..limit1));
        }
        let limit2 = (6.0 / (dims.hidden + 1) as f64).sqrt();
        for w in &mut weights.w2 {
            *w = T::lit(rng.gen_range(-limit2..limit2));
        }
        weights
    }

    pub fn from_parts(dims: Dims, w1: Vec<T>, b1: Vec<T>, w2: Vec<T>, b2: T) -> Result<Self, ModelError> {
        check_len("w1", dims.hidden * dims.input(), w1.len())?;
        check_len("b1", dims.hidden, b1.len())?;
        check_len("w2", dims.hidden, w2.len())?;
        let weights = Self {
            dims,
            w1,
            b1,
            w2,
            b2,
            generation: 0,
        };
        if !weights.is_finite() {
            return Err(ModelError::NonFinite("weights"));
        }
        Ok(weights)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn w1(&self) -> &[T] {
        &self.w1
    }

    pub fn b1(&self) -> &[T] {
        &self.b1
    }

    pub fn w2(&self) -> &[T] {
        &self.w2
    }

    pub fn b2(&self) -> T {
        self.b2
    }

    pub fn w1_mut(&mut self) -> &mut [T] {
        self.generation += 1;
        &mut self.w1
    }

    pub fn b1_mut(&mut self) -> &mut [T] {
        self.generation += 1;
        &mut self.b1
    }

    pub fn w2_mut(&mut self) -> &mut [T] {
        self.generation += 1;
        &mut self.w2
    }

    pub fn b2_mut(&mut self) -> &mut T {
        self.generation += 1;
        &mut self.b2
    }

    pub fn is_finite(&self) -> bool {
        self.b2.is_finite() && [&self.w1, &self.b1, &self.w2].iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Converts to another precision, e.g. `f32` weights into `f64` for gradient checks.
    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.widen())).collect::<Vec<U>>();
        ModelWeights {
            dims: self.dims,
            w1: conv(&self.w1),
            b1: conv(&self.b1),
            w2: conv(&self.w2),
            b2: U::lit(self.b2.widen()),
            generation: self.generation,
        }
    }

    fn check_inputs(&self, user: &[T], doc: &[T], ctx: &[T]) -> Result<(), ModelError> {
        check_len("user embedding", self.dims.user, user.len())?;
        check_len("document embedding", self.dims.doc, doc.len())?;
        check_len("context", CONTEXT_DIM, ctx.len())
    }

    fn pre_activation(&self, unit: usize, user: &[T], doc: &[T], ctx: &[T]) -> T {
        let row = &self.w1[unit * self.dims.input()..(unit + 1) * self.dims.input()];
        let (ru, rest) = row.split_at(user.len());
        let (rd, rc) = rest.split_at(doc.len());
        self.b1[unit] + dot(ru, user) + dot(rd, doc) + dot(rc, ctx)
    }

    /// Like probability without keeping activations.
    pub fn score(&self, user: &[T], doc: &[T], ctx: &[T]) -> Result<T, ModelError> {
        self.check_inputs(user, doc, ctx)?;
        let mut logit = self.b2;
        for unit in 0..self.dims.hidden {
            let z = self.pre_activation(unit, user, doc, ctx);
            logit = logit + self.w2[unit] * relu(z);
        }
        Ok(clamp_probability(sigmoid(logit)))
    }

    /// Gradient of the logit with respect to the user embedding, i.e. the direction
    /// in user space along which the predicted preference for `doc` grows.
    pub fn user_direction(&self, user: &[T], doc: &[T], ctx: &[T]) -> Result<Vec<T>, ModelError> {
        self.check_inputs(user, doc, ctx)?;
        let mut dir = vec![T::zero(); self.dims.user];
        for unit in 0..self.dims.hidden {
            if self.pre_activation(unit, user, doc, ctx) > T::zero() {
                let row = &self.w1[unit * self.dims.input()..][..self.dims.user];
                for (g, w) in dir.iter_mut().zip(row) {
                    *g = *g + self.w2[unit] * *w;
                }
            }
        }
        Ok(dir)
    }

    pub fn forward(&self, user: &[T], doc: &[T], ctx: &[T]) -> Result<ForwardPass<T>, ModelError> {
        self.check_inputs(user, doc, ctx)?;
        let mut pre = Vec::with_capacity(self.dims.hidden);
        let mut hidden = Vec::with_capacity(self.dims.hidden);
        let mut logit = self.b2;
        for unit in 0..self.dims.hidden {
            let z = self.pre_activation(unit, user, doc, ctx);
            let a = relu(z);
            logit = logit + self.w2[unit] * a;
            pre.push(z);
            hidden.push(a);
        }
        let mut input = Vec::with_capacity(self.dims.input());
        input.extend_from_slice(user);
        input.extend_from_slice(doc);
        input.extend_from_slice(ctx);
        Ok(ForwardPass {
            p: clamp_probability(sigmoid(logit)),
            logit,
            input,
            pre,
            hidden,
            generation: self.generation,
        })
    }

    /// Exact gradients of [`loss`] for the example that produced `pass`.
    ///
    /// The context encoding is fixed, so no gradient is returned for it.
    pub fn backward(&self, pass: &ForwardPass<T>, label: &Label) -> Result<Gradients<T>, ModelError> {
        if pass.generation != self.generation {
            return Err(ModelError::StaleActivations {
                cached: pass.generation,
                current: self.generation,
            });
        }
        check_len("activation cache", self.dims.hidden, pass.pre.len())?;
        label.validate()?;

        let width = self.dims.input();
        let magnitude = T::lit(label.magnitude as f64);
        // d(BCE o sigmoid)/d logit, taken on the unclamped sigmoid.
        let dlogit = magnitude * (sigmoid(pass.logit) - label.target.value());

        let w2: Vec<T> = pass.hidden.iter().map(|&a| dlogit * a).collect();
        let mut w1 = vec![T::zero(); self.w1.len()];
        let mut b1 = vec![T::zero(); self.dims.hidden];
        let mut dinput = vec![T::zero(); width];
        for unit in 0..self.dims.hidden {
            // relu'(0) is taken as 0.
            if pass.pre[unit] <= T::zero() {
                continue;
            }
            let dz = dlogit * self.w2[unit];
            b1[unit] = dz;
            let row = &self.w1[unit * width..(unit + 1) * width];
            let grow = &mut w1[unit * width..(unit + 1) * width];
            for ((g, x), (di, w)) in grow.iter_mut().zip(&pass.input).zip(dinput.iter_mut().zip(row)) {
                *g = dz * *x;
                *di = *di + dz * *w;
            }
        }
        let user = dinput[..self.dims.user].to_vec();
        let doc = dinput[self.dims.user..self.dims.user + self.dims.doc].to_vec();
        Ok(Gradients {
            w1,
            b1,
            w2,
            b2: dlogit,
            user,
            doc,
        })
    }

    /// `theta <- theta - rate * g` for the shared weights.
    pub fn apply(&mut self, grads: &Gradients<T>, rate: T) {
        for (w, g) in self.w1.iter_mut().zip(&grads.w1) {
            *w = *w - rate * *g;
        }
        for (w, g) in self.b1.iter_mut().zip(&grads.b1) {
            *w = *w - rate * *g;
        }
        for (w, g) in self.w2.iter_mut().zip(&grads.w2) {
            *w = *w - rate * *g;
        }
        self.b2 = self.b2 - rate * grads.b2;
        self.generation += 1;
    }
}

/// Four independent accumulators in a fixed order: vectorizable and still deterministic.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (a4, b4) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail = a4.remainder().iter().zip(b4.remainder()).fold(T::zero(), |s, (x, y)| s + *x * *y);
    for (x, y) in a4.zip(b4) {
        for k in 0..4 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn relu<T: Real>(z: T) -> T {
    if z > T::zero() {
        z
    } else {
        T::zero()
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<(), ModelError> {
    if expected == actual {
        Ok(())
    } else {
        Err(ModelError::DimensionMismatch { what, expected, actual })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const T0030: u64 = 30 * 60;
    const T1300: u64 = 13 * 3600;
    const T2359: u64 = 23 * 3600 + 59 * 60;

    #[test]
    fn context_buckets() {
        assert_eq!(featurize_context(T0030, SessionKind::Browse).0, [1., 0., 0., 0., 1., 0.]);
        assert_eq!(featurize_context(T1300, SessionKind::Search).0, [0., 0., 1., 0., 0., 1.]);
        assert_eq!(featurize_context(T2359, SessionKind::Browse).0, [0., 0., 0., 1., 1., 0.]);
        // Same hour on a later day.
        let later = 19_000 * SECONDS_PER_DAY + T1300;
        assert_eq!(featurize_context(later, SessionKind::Search), featurize_context(T1300, SessionKind::Search));
    }

    #[test]
    fn context_has_exactly_two_hot_entries() {
        for ts in (0..2 * SECONDS_PER_DAY).step_by(1234) {
            for session in [SessionKind::Browse, SessionKind::Search] {
                let c = featurize_context(ts, session);
                assert_eq!(c.0.iter().filter(|&&v| v == 1.0).count(), 2);
                assert_eq!(c.0.iter().filter(|&&v| v == 0.0).count(), CONTEXT_DIM - 2);
            }
        }
    }

    fn zero_inputs(dims: &Dims) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        (vec![0.0; dims.user], vec![0.0; dims.doc], vec![0.0; CONTEXT_DIM])
    }

    #[test]
    fn zero_model_scores_one_half() {
        let dims = Dims::default();
        let w = ModelWeights::<f32>::zeros(dims);
        let (u, d, c) = zero_inputs(&dims);
        assert_eq!(w.forward(&u, &d, &c).unwrap().p, 0.5);
    }

    #[test]
    fn output_bias_ln3_scores_three_quarters() {
        let dims = Dims::default();
        let mut w = ModelWeights::<f64>::zeros(dims);
        *w.b2_mut() = 3f64.ln();
        let (u, d, c) = zero_inputs(&dims);
        let cast = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
        let p = w.forward(&cast(u), &cast(d), &cast(c)).unwrap().p;
        assert!((p - 0.75).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let dims = Dims::default();
        let w = ModelWeights::<f32>::zeros(dims);
        let err = w.forward(&[0.0; 31], &[0.0; 32], &[0.0; 6]).unwrap_err();
        assert_eq!(
            err,
            ModelError::DimensionMismatch {
                what: "user embedding",
                expected: 32,
                actual: 31
            }
        );
        assert!(w.score(&[0.0; 32], &[0.0; 32], &[0.0; 5]).is_err());
    }

    #[test]
    fn loss_values() {
        let like = Label::like();
        assert!((loss(0.5f64, &like) - 0.693_147).abs() < 1e-6);
        let half = Label::new(Target::Like, 0.5, LabelSource::Explicit).unwrap();
        assert!((loss(0.5f64, &half) - 0.346_574).abs() < 1e-6);
        // BCE is minimized at p == t.
        let near = loss(1.0 - 1e-12, &like);
        for p in [0.1, 0.5, 0.9, 0.999] {
            assert!(loss(p, &like) > near);
        }
        let dislike = Label::dislike();
        assert!(loss(1e-12, &dislike) < loss(0.2, &dislike));
    }

    #[test]
    fn label_magnitude_bounds() {
        assert!(Label::new(Target::Like, 0.0, LabelSource::Explicit).is_err());
        assert!(Label::new(Target::Like, 1.5, LabelSource::Implicit).is_err());
        assert!(Label::new(Target::Like, f32::NAN, LabelSource::Explicit).is_err());
        assert!(Label::new(Target::Dislike, 1.0, LabelSource::Implicit).is_ok());
    }

    #[test]
    fn logit_gradient_closed_form() {
        let dims = Dims::default();
        let mut w = ModelWeights::<f64>::zeros(dims);
        *w.b2_mut() = 3f64.ln();
        let pass = w.forward(&[0.0; 32], &[0.0; 32], &[0.0; 6]).unwrap();
        let g = w.backward(&pass, &Label::like()).unwrap();
        assert!((g.b2 + 0.25).abs() < 1e-12);
    }

    #[test]
    fn inactive_units_get_no_gradient() {
        let dims = Dims::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = ModelWeights::<f64>::init(dims, &mut rng);
        let u: Vec<f64> = (0..dims.user).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..dims.doc).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = featurize_context(0, SessionKind::Browse).values::<f64>();
        let pass = w.forward(&u, &d, &c).unwrap();
        let g = w.backward(&pass, &Label::like()).unwrap();
        let width = dims.input();
        let mut dead = 0;
        for (unit, &z) in pass.pre_activations().iter().enumerate() {
            if z < 0.0 {
                dead += 1;
                assert!(g.w1[unit * width..(unit + 1) * width].iter().all(|&v| v == 0.0));
                assert_eq!(g.b1[unit], 0.0);
            }
        }
        assert!(dead > 0);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let dims = Dims::default();
        let mut w = ModelWeights::<f32>::init(dims, &mut ChaCha8Rng::seed_from_u64(1));
        let pass = w.forward(&[0.1; 32], &[0.1; 32], &[0.0; 6]).unwrap();
        let g = w.backward(&pass, &Label::like()).unwrap();
        w.apply(&g, 0.1);
        assert!(matches!(
            w.backward(&pass, &Label::like()),
            Err(ModelError::StaleActivations { .. })
        ));
    }

    #[test]
    fn score_matches_forward_bitwise() {
        let dims = Dims::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = ModelWeights::<f32>::init(dims, &mut rng);
        let u: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = featurize_context(5000, SessionKind::Search);
        let a = w.forward(&u, &d, c.as_slice()).unwrap().p;
        let b = w.score(&u, &d, c.as_slice()).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a.to_bits(), w.score(&u, &d, c.as_slice()).unwrap().to_bits());
    }

    #[test]
    fn saturated_output_stays_inside_unit_interval() {
        let dims = Dims::default();
        let mut w = ModelWeights::<f32>::zeros(dims);
        *w.b2_mut() = 1e6;
        let p = w.score(&[0.0; 32], &[0.0; 32], &[0.0; 6]).unwrap();
        assert!(p < 1.0 && p > 0.0);
        *w.b2_mut() = -1e6;
        let p = w.score(&[0.0; 32], &[0.0; 32], &[0.0; 6]).unwrap();
        assert!(p < 1.0 && p > 0.0);
        assert!(loss(p, &Label::like()).is_finite());
    }
}
