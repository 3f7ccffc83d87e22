//! Vote-brigading simulation.
//!
//! A community `C` posts and votes; an attacker group `A` down-votes every
//! community post it sees. The same seeded world is replayed against a global
//! vote-tally feed with early-kill threshold, and against the personalized
//! pipeline (store, recommender, trainer) running in-process.

mod reddit;
mod world;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use reddit::{reddit_feed_step, reddit_hot, RedditFeedState, RedditParams, Tally, Vote, VoteOutcome, HOT_DIVISOR};
pub use world::{plan_posts, round_order, Agent, AgentPopulation, PlannedPost};

use crate::ids::{PostId, UserId};
use crate::model::{featurize_context, Dims, Label, ModelError, SessionKind};
use crate::recommender::{fetch_feed, RecommendError, Recommender, RecommenderConfig};
use crate::store::{ModelState, Store, StoreError, StoreOptions, SyncPolicy, Wait};
use crate::trainer::{receive_label, TrainError, TrainerConfig, TrainingServer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Reddit,
    DimensionRank,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Reddit => "reddit",
            Algorithm::DimensionRank => "dimensionrank",
        })
    }
}

impl FromStr for Algorithm {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "reddit" => Ok(Algorithm::Reddit),
            "dimensionrank" => Ok(Algorithm::DimensionRank),
            other => Err(SimError::InvalidConfig(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Recommend(#[from] RecommendError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub algorithm: Algorithm,
    pub community: usize,
    pub attackers: usize,
    pub rounds: u32,
    pub seed: u64,
    /// Posts created before this round are not scored.
    pub warmup_rounds: u32,
    /// Posts created in the last `settle_rounds` rounds are not scored.
    pub settle_rounds: u32,
    pub round_seconds: u64,
    pub p_like: f64,
    /// Chance that a community member looks at its feed in a round. Attackers always do.
    pub p_active: f64,
    /// Chance that a community member authors a post in a round.
    pub post_probability: f64,
    pub on_topic_fraction: f64,
    pub latent_dim: usize,
    pub community_spread: f64,
    pub like_threshold: f64,
    /// Share of the community that must like a post for it to count as good.
    pub good_threshold: f64,
    /// Share of the community that must see a good post for it to count as visible.
    pub seen_threshold: f64,
    /// Posts read per personalized feed fetch.
    pub feed_limit: usize,
    pub reddit: RedditParams,
    pub dims: Dims,
    pub trainer: TrainerConfig,
    pub recommender: RecommenderConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Reddit,
            community: 50,
            attackers: 50,
            rounds: 200,
            seed: 7,
            warmup_rounds: 20,
            settle_rounds: 10,
            round_seconds: 3600,
            p_like: 0.9,
            p_active: 0.5,
            post_probability: 0.1,
            on_topic_fraction: 0.7,
            latent_dim: 8,
            community_spread: 0.15,
            like_threshold: 0.5,
            good_threshold: 0.8,
            seen_threshold: 0.5,
            feed_limit: 20,
            reddit: RedditParams::default(),
            dims: Dims::default(),
            trainer: TrainerConfig::default(),
            recommender: RecommenderConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_string()));
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if self.community == 0 {
            return bad("community must have at least one member");
        }
        if !(self.p_like > 0.0 && self.p_like <= 1.0) {
            return bad("p_like must be in (0, 1]");
        }
        if self.rounds == 0 || self.round_seconds == 0 {
            return bad("rounds and round_seconds must be positive");
        }
        let probabilities = [
            self.p_active,
            self.post_probability,
            self.on_topic_fraction,
            self.good_threshold,
            self.seen_threshold,
        ];
        if !probabilities.into_iter().all(unit) {
            return bad("probabilities and thresholds must be in [0, 1]");
        }
        if self.latent_dim == 0 || self.feed_limit == 0 {
            return bad("latent_dim and feed_limit must be positive");
        }
        if !(self.community_spread.is_finite() && self.community_spread >= 0.0 && self.like_threshold.is_finite()) {
            return bad("community_spread and like_threshold must be finite");
        }
        if self.reddit.hot_list + self.reddit.new_list == 0 {
            return bad("the listing must show at least one post");
        }
        if self.algorithm == Algorithm::DimensionRank {
            self.trainer.validate()?;
            self.recommender.validate()?;
        }
        Ok(())
    }

    fn scored_rounds(&self) -> std::ops::Range<u32> {
        self.warmup_rounds..self.rounds.saturating_sub(self.settle_rounds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub posts: u32,
    pub good_posts: u32,
    /// Posts removed by the kill threshold so far.
    pub killed: u64,
    /// Votes cast or labels submitted this round.
    pub reactions: u64,
    /// Feed deliveries made by the recommender this round.
    pub deliveries: u64,
    pub train_steps: u64,
    pub mean_loss: f64,
    /// Mean share of the community that has seen each good post created so far.
    pub good_seen_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimMetrics {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub community: usize,
    pub attackers: usize,
    pub rounds: u32,
    pub scored_from_round: u32,
    pub scored_to_round: u32,
    /// Good posts created in the scored rounds.
    pub good_posts: usize,
    /// Good scored posts seen by fewer than `seen_threshold` of the community.
    pub suppressed_posts: usize,
    pub suppression_rate: f64,
    pub visibility_rate: f64,
    /// Attackers' mean like probability for scored good posts with every
    /// parameter at its initial value. Personalized arm only.
    pub attacker_affinity_initial: Option<f64>,
    /// The same mean under the final model.
    pub attacker_affinity_final: Option<f64>,
    pub series: Vec<RoundMetrics>,
}

impl SimMetrics {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        let mut writer = csv::Writer::from_writer(out);
        for row in &self.series {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

struct PostRecord {
    id: PostId,
    round: u32,
    author: usize,
    good: bool,
    topic: Vec<f64>,
    created_at: u64,
    seen: Vec<bool>,
    seen_count: usize,
}

/// State shared by both arms: the seeded world and who has seen what.
struct World {
    config: SimConfig,
    population: AgentPopulation,
    plan: Vec<Vec<PlannedPost>>,
    rng: ChaCha8Rng,
    posts: Vec<PostRecord>,
    index: HashMap<PostId, usize>,
    /// Posts each agent has already reacted to.
    handled: Vec<HashSet<usize>>,
}

impl World {
    fn new(config: &SimConfig) -> Self {
        let mut world_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let population = AgentPopulation::generate(config, &mut world_rng);
        let plan = plan_posts(config, &population, &mut world_rng);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Self {
            config: config.clone(),
            handled: vec![HashSet::new(); population.community + population.attackers],
            population,
            plan,
            rng,
            posts: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn agent_index(&self, agent: Agent) -> usize {
        match agent {
            Agent::Community(c) => c,
            Agent::Attacker(a) => self.population.community + a,
        }
    }

    fn add_post(&mut self, id: PostId, planned: &PlannedPost, created_at: u64) {
        self.index.insert(id, self.posts.len());
        self.posts.push(PostRecord {
            id,
            round: planned.round,
            author: planned.author,
            good: planned.good,
            topic: planned.topic.clone(),
            created_at,
            seen: vec![false; self.population.community],
            seen_count: 0,
        });
    }

    /// Records that `agent` saw `post` and returns its reaction, or `None` if it
    /// already handled the post or chose not to react.
    fn encounter(&mut self, agent: Agent, post: PostId) -> Option<bool> {
        let idx = *self.index.get(&post)?;
        let slot = self.agent_index(agent);
        if !self.handled[slot].insert(idx) {
            return None;
        }
        let record = &mut self.posts[idx];
        if let Agent::Community(c) = agent {
            if !record.seen[c] {
                record.seen[c] = true;
                record.seen_count += 1;
            }
        }
        self.population.reaction(agent, &self.posts[idx].topic, &mut self.rng)
    }

    /// Authors see and like their own posts on submission.
    fn self_like(&mut self, post: PostId) -> Agent {
        let idx = self.index[&post];
        let author = self.posts[idx].author;
        self.handled[author].insert(idx);
        let record = &mut self.posts[idx];
        record.seen[author] = true;
        record.seen_count += 1;
        Agent::Community(author)
    }

    fn turn_time(&self, round: u32, turn: usize, turns: usize) -> u64 {
        let start = round as u64 * self.config.round_seconds;
        start + (turn as u64 + 1) * self.config.round_seconds / (turns as u64 + 1)
    }

    fn good_seen_fraction(&self) -> f64 {
        let good: Vec<_> = self.posts.iter().filter(|p| p.good).collect();
        if good.is_empty() {
            return 0.0;
        }
        let c = self.population.community as f64;
        good.iter().map(|p| p.seen_count as f64 / c).sum::<f64>() / good.len() as f64
    }

    fn scored_good(&self) -> impl Iterator<Item = &PostRecord> {
        let range = self.config.scored_rounds();
        self.posts.iter().filter(move |p| p.good && range.contains(&p.round))
    }

    fn finish(&self, series: Vec<RoundMetrics>, affinity: Option<(f64, f64)>) -> SimMetrics {
        let needed = self.config.seen_threshold * self.population.community as f64;
        let good = self.scored_good().count();
        let suppressed = self.scored_good().filter(|p| (p.seen_count as f64) < needed).count();
        let suppression_rate = if good == 0 { 0.0 } else { suppressed as f64 / good as f64 };
        let range = self.config.scored_rounds();
        SimMetrics {
            algorithm: self.config.algorithm,
            seed: self.config.seed,
            community: self.population.community,
            attackers: self.population.attackers,
            rounds: self.config.rounds,
            scored_from_round: range.start,
            scored_to_round: range.end,
            good_posts: good,
            suppressed_posts: suppressed,
            suppression_rate,
            visibility_rate: 1.0 - suppression_rate,
            attacker_affinity_initial: affinity.map(|a| a.0),
            attacker_affinity_final: affinity.map(|a| a.1),
            series,
        }
    }
}

/// Runs the configured arm. The personalized arm keeps its store in a temporary directory.
pub fn run_simulation(config: &SimConfig) -> Result<SimMetrics, SimError> {
    config.validate()?;
    match config.algorithm {
        Algorithm::Reddit => run_reddit(config),
        Algorithm::DimensionRank => {
            let dir = tempfile::tempdir()?;
            run_dimensionrank(config, dir.path())
        }
    }
}

/// Like [`run_simulation`], but the personalized arm keeps its store under `dir`.
pub fn run_simulation_in(config: &SimConfig, dir: &Path) -> Result<SimMetrics, SimError> {
    config.validate()?;
    match config.algorithm {
        Algorithm::Reddit => run_reddit(config),
        Algorithm::DimensionRank => run_dimensionrank(config, dir),
    }
}

fn run_reddit(config: &SimConfig) -> Result<SimMetrics, SimError> {
    let mut world = World::new(config);
    let mut feed = RedditFeedState::new(config.reddit, 0);
    let mut series = Vec::with_capacity(config.rounds as usize);
    let mut next_id = 1u64;

    for round in 0..config.rounds {
        let start = round as u64 * config.round_seconds;
        let planned = std::mem::take(&mut world.plan[round as usize]);
        for (i, p) in planned.iter().enumerate() {
            let id = PostId(next_id);
            next_id += 1;
            let at = start + i as u64;
            world.add_post(id, p, at);
            feed.add_post(id, at);
            let author = world.self_like(id);
            let voter = UserId(world.agent_index(author) as u64);
            feed.vote(&Vote { voter, post: id, up: true, at });
        }

        let order = round_order(&world.population, config.p_active, &mut world.rng);
        // Each author's like of its own post counts as a reaction.
        let mut reactions = planned.len() as u64;
        for (turn, &agent) in order.iter().enumerate() {
            let at = world.turn_time(round, turn, order.len());
            let voter = UserId(world.agent_index(agent) as u64);
            for post in feed.visible() {
                // Posts killed earlier in this turn are gone from the listing.
                if !feed.is_live(post) {
                    continue;
                }
                if let Some(up) = world.encounter(agent, post) {
                    feed.vote(&Vote { voter, post, up, at });
                    reactions += 1;
                }
            }
        }

        series.push(RoundMetrics {
            round,
            posts: planned.len() as u32,
            good_posts: planned.iter().filter(|p| p.good).count() as u32,
            killed: feed.killed_count(),
            reactions,
            deliveries: 0,
            train_steps: 0,
            mean_loss: 0.0,
            good_seen_fraction: world.good_seen_fraction(),
        });
    }
    Ok(world.finish(series, None))
}

fn run_dimensionrank(config: &SimConfig, dir: &Path) -> Result<SimMetrics, SimError> {
    let mut world = World::new(config);
    let store = Store::open(
        dir,
        StoreOptions {
            sync: SyncPolicy::Never,
            persist_feeds: false,
            ..StoreOptions::default()
        },
    )?;
    let users: Vec<UserId> = world
        .population
        .agents()
        .map(|_| store.posts.register_user(None, 0).map(|u| u.user_id))
        .collect::<Result<_, _>>()?;
    let user_of = |agent: Agent, world: &World| users[world.agent_index(agent)];

    let trainer_config = TrainerConfig {
        seed: config.seed,
        ..config.trainer
    };
    let mut server = TrainingServer::open(&store, config.dims, trainer_config)?;
    let initial = server.trainer().state().clone();
    let clock = AtomicU64::new(0);
    let mut recommender = Recommender::new(&store, config.recommender)?.with_clock(|| clock.load(Ordering::Relaxed));
    let never = AtomicBool::new(false);
    let mut creation_vectors: HashMap<PostId, Vec<f32>> = HashMap::new();
    let mut series = Vec::with_capacity(config.rounds as usize);

    for round in 0..config.rounds {
        let start = round as u64 * config.round_seconds;
        clock.store(start, Ordering::Relaxed);
        let planned = std::mem::take(&mut world.plan[round as usize]);
        for (i, p) in planned.iter().enumerate() {
            let author = users[p.author];
            let text = format!("post by {author} in round {round}");
            let post = store.create_post(author, &text, None, start + i as u64)?;
            world.add_post(post.post_id, p, start + i as u64);
            let vector = server.trainer().state().doc_vector(post.post_id, Some(author)).into_owned();
            creation_vectors.insert(post.post_id, vector);
            world.self_like(post.post_id);
            receive_label(&store, author, post.post_id, start + i as u64, SessionKind::Browse, Label::like())?;
        }
        let fanout = recommender.run(&never, false)?;

        let snapshot = store.snapshot().expect("the training server publishes on open");
        let order = round_order(&world.population, config.p_active, &mut world.rng);
        // Each author's like of its own post counts as a reaction.
        let mut reactions = planned.len() as u64;
        for (turn, &agent) in order.iter().enumerate() {
            let at = world.turn_time(round, turn, order.len());
            let user = user_of(agent, &world);
            for item in fetch_feed(&store, user, config.feed_limit, &snapshot.state, at)? {
                if let Some(like) = world.encounter(agent, item.post.post_id) {
                    let label = if like { Label::like() } else { Label::dislike() };
                    receive_label(&store, user, item.post.post_id, at, SessionKind::Browse, label)?;
                    reactions += 1;
                }
            }
        }

        let mut steps = 0u64;
        let mut loss = 0.0f64;
        while let Some(report) = server.process_next(Wait::No)? {
            steps += 1;
            loss += report.loss as f64;
        }
        server.publish();

        series.push(RoundMetrics {
            round,
            posts: planned.len() as u32,
            good_posts: planned.iter().filter(|p| p.good).count() as u32,
            killed: 0,
            reactions,
            deliveries: fanout.deliveries,
            train_steps: steps,
            mean_loss: if steps == 0 { 0.0 } else { loss / steps as f64 },
            good_seen_fraction: world.good_seen_fraction(),
        });
    }

    let affinity = attacker_affinity(&world, &users, &initial, server.trainer().state(), &creation_vectors)?;
    Ok(world.finish(series, affinity))
}

/// Mean attacker like probability over scored good posts, at initialization and at the end.
fn attacker_affinity(
    world: &World,
    users: &[UserId],
    initial: &ModelState,
    last: &ModelState,
    creation_vectors: &HashMap<PostId, Vec<f32>>,
) -> Result<Option<(f64, f64)>, SimError> {
    let attackers: Vec<UserId> = (0..world.population.attackers)
        .map(|a| users[world.agent_index(Agent::Attacker(a))])
        .collect();
    let mut before = 0.0f64;
    let mut after = 0.0f64;
    let mut n = 0usize;
    for post in world.scored_good() {
        let ctx = featurize_context(post.created_at, SessionKind::Browse);
        let author = users[post.author];
        for &a in &attackers {
            let u0 = initial.user_vector(a);
            before += initial.weights.score(&u0, &creation_vectors[&post.id], ctx.as_slice())? as f64;
            after += last.score(a, post.id, Some(author), &ctx) as f64;
            n += 1;
        }
    }
    Ok((n > 0).then(|| (before / n as f64, after / n as f64)))
}
