//! Fan-out and candidate pruning on a trained two-cluster world.

use dimrank_core::recommender::{candidate_users, Pruning, Recommender, RecommenderConfig};
use dimrank_core::store::{Store, StoreOptions, SyncPolicy, Wait};
use dimrank_core::trainer::{receive_label, TrainerConfig, TrainingServer};
use dimrank_core::{featurize_context, Dims, Label, ModelState, Post, PostId, SessionKind, UserId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const USERS: usize = 40;
const DOCS: usize = 400;
const LABELS_PER_USER: usize = 20;

fn cluster(user: usize) -> usize {
    user % 2
}

struct World {
    _dir: tempfile::TempDir,
    store: Store,
    users: Vec<UserId>,
    rng: ChaCha8Rng,
}

impl World {
    /// Users like exactly the documents authored in their own cluster. Documents
    /// become labelable over time, so later labels meet documents that already moved.
    fn trained(seed: u64) -> (Self, ModelState) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(
            dir.path(),
            StoreOptions {
                sync: SyncPolicy::Never,
                persist_feeds: false,
                ..StoreOptions::default()
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let users: Vec<UserId> = (0..USERS).map(|_| store.posts.register_user(None, 0).unwrap().user_id).collect();
        let mut world = Self { _dir: dir, store, users, rng: rng.clone() };
        let docs: Vec<(PostId, usize)> = (0..DOCS).map(|i| world.post(i % 2, i as u64)).collect();

        let total = USERS * LABELS_PER_USER;
        let mut quota = [LABELS_PER_USER; USERS];
        let mut seen = vec![std::collections::HashSet::new(); USERS];
        for k in 0..total {
            let available = LABELS_PER_USER + k * (DOCS - LABELS_PER_USER) / total;
            let u = loop {
                let u = rng.gen_range(0..USERS);
                if quota[u] > 0 {
                    break u;
                }
            };
            let d = loop {
                let d = rng.gen_range(0..available);
                if seen[u].insert(d) {
                    break d;
                }
            };
            quota[u] -= 1;
            let label = if docs[d].1 == cluster(u) { Label::like() } else { Label::dislike() };
            receive_label(&world.store, world.users[u], docs[d].0, k as u64, SessionKind::Browse, label).unwrap();
        }

        let config = TrainerConfig {
            eta_emb: 2.0,
            seed,
            ..TrainerConfig::default()
        };
        let mut server = TrainingServer::open(&world.store, Dims::default(), config).unwrap();
        while server.process_next(Wait::No).unwrap().is_some() {}
        server.publish();
        let state = server.trainer().state().clone();
        drop(server);
        world.rng = rng;
        (world, state)
    }

    fn post(&mut self, topic: usize, at: u64) -> (PostId, usize) {
        let author = loop {
            let a = self.rng.gen_range(0..USERS);
            if cluster(a) == topic {
                break a;
            }
        };
        let post = self.store.create_post(self.users[author], &format!("topic {topic} at {at}"), None, at).unwrap();
        (post.post_id, topic)
    }

    fn cluster_of(&self, user: UserId) -> usize {
        cluster(self.users.iter().position(|&u| u == user).unwrap())
    }
}

#[test]
fn knn_of_one_picks_the_documents_cluster() {
    let (mut world, state) = World::trained(11);
    let config = RecommenderConfig {
        pruning: Pruning::EmbeddingKnn,
        knn_k: 1,
        ..RecommenderConfig::default()
    };
    let ctx = featurize_context(0, SessionKind::Browse);
    let trials = 200;
    let mut hits = 0;
    for t in 0..trials {
        let (post_id, topic) = world.post(t % 2, 10_000 + t as u64);
        let post: Post = world.store.posts.require_post(post_id).unwrap();
        let picked = candidate_users(&post, &world.users, &state, &ctx, &config);
        assert!(picked.contains(&post.author_user_id));
        assert!(picked.len() <= 2);
        let chosen = picked.iter().copied().find(|&u| u != post.author_user_id).unwrap_or(post.author_user_id);
        if world.cluster_of(chosen) == topic {
            hits += 1;
        }
    }
    let rate = hits as f64 / trials as f64;
    assert!(rate >= 0.9, "knn picked the document's cluster in {rate:.3} of trials");
}

#[test]
fn trained_world_delivers_within_cluster() {
    let (mut world, state) = World::trained(5);
    let snapshot = world.store.publish_snapshot(&state);
    assert!(snapshot.version >= 1);
    let new_posts: Vec<(PostId, usize)> = (0..100).map(|t| world.post(t % 2, 20_000 + t as u64)).collect();

    let recommender = Recommender::new(&world.store, RecommenderConfig::default()).unwrap().with_clock(|| 0);
    let (mut same, mut same_total, mut cross, mut cross_total) = (0, 0, 0, 0);
    for &(post_id, topic) in &new_posts {
        let post = world.store.posts.require_post(post_id).unwrap();
        let delivery = recommender.deliver(&post, &state).unwrap();
        for &user in &world.users {
            if user == post.author_user_id {
                continue;
            }
            let got = delivery.recipients.contains(&user);
            if world.cluster_of(user) == topic {
                same_total += 1;
                same += got as usize;
            } else {
                cross_total += 1;
                cross += got as usize;
            }
        }
    }
    let same_rate = same as f64 / same_total as f64;
    let cross_rate = cross as f64 / cross_total as f64;
    assert!(same_rate >= 0.9, "same-cluster delivery {same_rate:.3}");
    assert!(cross_rate <= 0.2, "cross-cluster delivery {cross_rate:.3}");
}
