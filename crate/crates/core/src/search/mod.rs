//! Two-pass personalized keyword search.
//!
//! The first pass is plain BM25 and knows nothing about the user. The second
//! pass re-orders those candidates with a convex blend of the normalized BM25
//! score and the model's like probability; it never adds or drops candidates.

mod index;

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

pub use index::{tokenize, InvertedIndex, SharedIndex, BM25_B, BM25_K1};

use crate::ids::{PostId, UserId};
use crate::model::ContextFeatures;
use crate::store::{ModelState, PostStore, StoreError};

/// The first pass retrieves this many candidates per requested result.
pub const CANDIDATE_MULTIPLIER: usize = 5;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("query has no searchable tokens")]
    EmptyQuery,
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("alpha must be in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub post_id: PostId,
    pub generic_score: f64,
    /// Model like probability.
    pub personalized_score: f32,
    pub final_score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Non-personalized BM25 retrieval.
pub fn generic_search(index: &InvertedIndex, keywords: &str, top_k: usize) -> Result<Vec<(PostId, f64)>, SearchError> {
    if top_k == 0 {
        return Err(SearchError::InvalidTopK);
    }
    let tokens: BTreeSet<String> = tokenize(keywords).collect();
    if tokens.is_empty() {
        return Err(SearchError::EmptyQuery);
    }
    let mut hits = index.bm25(&tokens);
    hits.truncate(top_k);
    Ok(hits)
}

/// Re-ranks generic results for `user`.
///
/// `final = alpha * bm25 / max_bm25 + (1 - alpha) * p_like`, sorted descending
/// with ties broken by ascending post id.
pub fn personalize(
    generic: &[(PostId, f64)],
    user: UserId,
    context: &ContextFeatures,
    alpha: f64,
    state: &ModelState,
    posts: &PostStore,
) -> Result<Vec<SearchResult>, SearchError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SearchError::InvalidAlpha(alpha));
    }
    posts.require_user(user)?;
    let max = generic.iter().map(|(_, s)| *s).fold(0.0f64, f64::max);
    let mut out: Vec<SearchResult> = generic
        .iter()
        .map(|&(post_id, bm25)| {
            let normalized = if max > 0.0 { bm25 / max } else { 0.0 };
            let p = state.score(user, post_id, posts.author_of(post_id), context);
            SearchResult {
                post_id,
                generic_score: bm25,
                personalized_score: p,
                final_score: alpha * normalized + (1.0 - alpha) * p as f64,
                rank: 0,
            }
        })
        .collect();
    out.sort_by(|a, b| b.final_score.total_cmp(&a.final_score).then(a.post_id.cmp(&b.post_id)));
    for (i, r) in out.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(out)
}

/// Generic retrieval of `5 * top_k` candidates, personalized, cut to `top_k`.
#[allow(clippy::too_many_arguments)]
pub fn keyword_search(
    index: &InvertedIndex,
    keywords: &str,
    user: UserId,
    context: &ContextFeatures,
    top_k: usize,
    alpha: f64,
    state: &ModelState,
    posts: &PostStore,
) -> Result<Vec<SearchResult>, SearchError> {
    let generic = generic_search(index, keywords, top_k.saturating_mul(CANDIDATE_MULTIPLIER))?;
    let mut ranked = personalize(&generic, user, context, alpha, state, posts)?;
    ranked.truncate(top_k);
    Ok(ranked)
}
