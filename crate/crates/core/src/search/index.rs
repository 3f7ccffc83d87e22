use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::RwLock;

use crate::ids::PostId;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Term postings plus the corpus statistics BM25 needs.
#[derive(Debug, Clone, Default)]
pub struct InvertedIndex {
    /// token -> (post, term frequency), sorted by post id.
    postings: HashMap<String, Vec<(PostId, u32)>>,
    doc_lengths: BTreeMap<PostId, u32>,
    total_tokens: u64,
}

impl InvertedIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Indexes `text` under `post_id` and returns its token count. Re-indexing an
    /// already indexed post is a no-op returning 0.
    pub fn index_post(&mut self, post_id: PostId, text: &str) -> usize {
        if self.doc_lengths.contains_key(&post_id) {
            return 0;
        }
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        let mut length = 0u32;
        for token in tokenize(text) {
            *counts.entry(token).or_default() += 1;
            length += 1;
        }
        for (token, tf) in counts {
            let list = self.postings.entry(token).or_default();
            let at = list.partition_point(|(p, _)| *p < post_id);
            list.insert(at, (post_id, tf));
        }
        self.doc_lengths.insert(post_id, length);
        self.total_tokens += length as u64;
        length as usize
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        if self.doc_lengths.is_empty() {
            0.0
        } else {
            self.total_tokens as f64 / self.doc_lengths.len() as f64
        }
    }

    pub fn doc_frequency(&self, token: &str) -> usize {
        self.postings.get(token).map_or(0, Vec::len)
    }

    pub fn postings(&self, token: &str) -> &[(PostId, u32)] {
        self.postings.get(token).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, post_id: PostId) -> bool {
        self.doc_lengths.contains_key(&post_id)
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, positive for every df.
    pub fn idf(&self, token: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.doc_frequency(token) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 over the distinct query tokens (OR semantics). Results are sorted by
    /// score descending, ties by ascending post id, and all scores are positive.
    pub fn bm25(&self, tokens: &BTreeSet<String>) -> Vec<(PostId, f64)> {
        let avgdl = self.avg_doc_length();
        let mut scores: HashMap<PostId, f64> = HashMap::new();
        for token in tokens {
            let idf = self.idf(token);
            for &(post, tf) in self.postings(token) {
                let tf = tf as f64;
                let dl = self.doc_lengths[&post] as f64;
                let norm = 1.0 - BM25_B + BM25_B * dl / avgdl;
                *scores.entry(post).or_default() += idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm);
            }
        }
        let mut out: Vec<(PostId, f64)> = scores.into_iter().filter(|(_, s)| *s > 0.0).collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }
}

/// Single-writer index whose readers work on immutable snapshots.
#[derive(Default)]
pub struct SharedIndex {
    current: RwLock<Arc<InvertedIndex>>,
}

impl SharedIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> Arc<InvertedIndex> {
        self.current.read().clone()
    }

    pub fn index_post(&self, post_id: PostId, text: &str) -> usize {
        let mut slot = self.current.write();
        Arc::make_mut(&mut slot).index_post(post_id, text)
    }

    /// Indexes a batch and publishes it as one new snapshot.
    pub fn index_batch<'a>(&self, posts: impl IntoIterator<Item = (PostId, &'a str)>) -> usize {
        let mut next = (*self.snapshot()).clone();
        let added = posts.into_iter().map(|(id, text)| next.index_post(id, text)).sum();
        *self.current.write() = Arc::new(next);
        added
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_and_lowercases() {
        let tokens: Vec<_> = tokenize("Hello, hello  WORLD!-42").collect();
        assert_eq!(tokens, vec!["hello", "hello", "world", "42"]);
        assert_eq!(tokenize(" ,;!! ").count(), 0);
    }

    #[test]
    fn index_counts_tokens() {
        let mut idx = InvertedIndex::new();
        assert_eq!(idx.index_post(PostId(1), "Hello, hello world"), 3);
        assert_eq!(idx.postings("hello"), &[(PostId(1), 2)]);
        assert_eq!(idx.postings("world"), &[(PostId(1), 1)]);
        assert_eq!(idx.index_post(PostId(1), "Hello, hello world"), 0);
        assert_eq!(idx.doc_count(), 1);
        assert_eq!(idx.postings("hello"), &[(PostId(1), 2)]);
    }

    #[test]
    fn postings_stay_sorted() {
        let mut idx = InvertedIndex::new();
        for id in [5, 2, 9, 1] {
            idx.index_post(PostId(id), "shared");
        }
        let ids: Vec<u64> = idx.postings("shared").iter().map(|(p, _)| p.0).collect();
        assert_eq!(ids, vec![1, 2, 5, 9]);
    }

    #[test]
    fn empty_text_is_unreachable() {
        let mut idx = InvertedIndex::new();
        assert_eq!(idx.index_post(PostId(1), "?!"), 0);
        idx.index_post(PostId(2), "words here");
        let tokens: BTreeSet<String> = ["words".to_string()].into();
        assert_eq!(idx.bm25(&tokens).len(), 1);
    }

    #[test]
    fn old_snapshots_are_unchanged_by_writes() {
        let shared = SharedIndex::new();
        shared.index_post(PostId(1), "alpha");
        let before = shared.snapshot();
        shared.index_post(PostId(2), "alpha beta");
        assert_eq!(before.doc_count(), 1);
        assert_eq!(shared.snapshot().doc_count(), 2);
        shared.index_batch([(PostId(3), "gamma"), (PostId(4), "delta")]);
        assert_eq!(shared.snapshot().doc_count(), 4);
    }
}
