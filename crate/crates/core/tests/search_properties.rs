use std::collections::BTreeMap;

use dimrank_core::search::{generic_search, keyword_search, personalize, tokenize, InvertedIndex, CANDIDATE_MULTIPLIER};
use dimrank_core::store::{PostStore, SyncPolicy};
use dimrank_core::{featurize_context, Dims, ModelState, SessionKind, UserId};
use proptest::prelude::*;

const VOCAB: &[&str] = &["apple", "river", "stone", "cloud", "ember", "maple", "quartz", "drift"];

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(VOCAB), 0..12).prop_map(|w| w.join(" "))
}

fn query() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(VOCAB), 1..4).prop_map(|w| w.join(" "))
}

struct Corpus {
    _dir: tempfile::TempDir,
    posts: PostStore,
    index: InvertedIndex,
    user: UserId,
    state: ModelState,
}

fn corpus(texts: &[String], seed: u64) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let posts = PostStore::open(dir.path(), SyncPolicy::Never).unwrap();
    let user = posts.register_user(None, 0).unwrap().user_id;
    let mut index = InvertedIndex::new();
    for t in texts {
        // Empty posts are rejected by the store, so give them a placeholder body.
        let body = if t.is_empty() { "-" } else { t.as_str() };
        let p = posts.create_post(user, body, None, 0).unwrap();
        index.index_post(p.post_id, body);
    }
    let dims = Dims { user: 4, doc: 4, hidden: 8 };
    Corpus { _dir: dir, posts, index, user, state: ModelState::new(dims, seed) }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn token_counts_match_tokenizer(t in text()) {
        let mut index = InvertedIndex::new();
        let n = index.index_post(dimrank_core::PostId(1), &t);
        prop_assert_eq!(n, tokenize(&t).count());
        prop_assert_eq!(index.contains(dimrank_core::PostId(1)), true);
    }

    #[test]
    fn bm25_is_positive_finite_and_ordered(texts in prop::collection::vec(text(), 1..30), q in query(), k in 1usize..10) {
        let c = corpus(&texts, 1);
        let hits = generic_search(&c.index, &q, k).unwrap();
        prop_assert!(hits.len() <= k);
        for w in hits.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
        prop_assert!(hits.iter().all(|(_, s)| s.is_finite() && *s > 0.0));
        // Every hit contains a query token.
        let wanted: Vec<String> = tokenize(&q).collect();
        for (post, _) in &hits {
            let body = c.posts.get(*post).unwrap().unwrap().text;
            prop_assert!(tokenize(&body).any(|t| wanted.contains(&t)));
        }
    }

    #[test]
    fn personalize_permutes_candidates(texts in prop::collection::vec(text(), 1..30), q in query(), alpha in 0.0f64..=1.0, seed in 0u64..1000) {
        let c = corpus(&texts, seed);
        let ctx = featurize_context(0, SessionKind::Search);
        let generic = generic_search(&c.index, &q, 50).unwrap();
        let ranked = personalize(&generic, c.user, &ctx, alpha, &c.state, &c.posts).unwrap();
        let count = |ids: Vec<dimrank_core::PostId>| ids.into_iter().fold(BTreeMap::new(), |mut m, id| { *m.entry(id).or_insert(0) += 1; m });
        prop_assert_eq!(count(generic.iter().map(|g| g.0).collect()), count(ranked.iter().map(|r| r.post_id).collect()));
        for (i, r) in ranked.iter().enumerate() {
            prop_assert_eq!(r.rank, i + 1);
        }
        for w in ranked.windows(2) {
            prop_assert!(w[0].final_score >= w[1].final_score);
        }

        let by_text = personalize(&generic, c.user, &ctx, 1.0, &c.state, &c.posts).unwrap();
        let by_text: Vec<_> = by_text.iter().map(|r| r.post_id).collect();
        let generic_order: Vec<_> = generic.iter().map(|g| g.0).collect();
        prop_assert_eq!(by_text, generic_order);
    }

    #[test]
    fn top_one_is_the_argmax(texts in prop::collection::vec(text(), 1..30), q in query(), seed in 0u64..1000) {
        let c = corpus(&texts, seed);
        let ctx = featurize_context(0, SessionKind::Search);
        let top = keyword_search(&c.index, &q, c.user, &ctx, 1, 0.5, &c.state, &c.posts).unwrap();
        let pool = generic_search(&c.index, &q, CANDIDATE_MULTIPLIER).unwrap();
        let all = personalize(&pool, c.user, &ctx, 0.5, &c.state, &c.posts).unwrap();
        prop_assert_eq!(top.first().map(|r| r.post_id), all.first().map(|r| r.post_id));
        if let Some(best) = top.first() {
            prop_assert!(all.iter().all(|r| r.final_score <= best.final_score));
        }
    }
}
