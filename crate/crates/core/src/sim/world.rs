use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::SimConfig;

/// Index into the agent list: community members first, then attackers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Agent {
    Community(usize),
    Attacker(usize),
}

/// Community members with latent tastes near a shared centroid, plus attackers.
///
/// A member would like a post when the dot product of its unit taste vector and
/// the post's unit topic vector reaches `like_threshold`.
#[derive(Debug, Clone)]
pub struct AgentPopulation {
    pub community: usize,
    pub attackers: usize,
    pub p_like: f64,
    pub like_threshold: f64,
    pub centroid: Vec<f64>,
    pub tastes: Vec<Vec<f64>>,
}

fn gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn near<R: Rng + ?Sized>(center: &[f64], spread: f64, rng: &mut R) -> Vec<f64> {
    let noise = gaussian(center.len(), rng);
    normalized(center.iter().zip(noise).map(|(c, n)| c + spread * n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl AgentPopulation {
    pub fn generate<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Self {
        let centroid = normalized(gaussian(config.latent_dim, rng));
        let tastes = (0..config.community)
            .map(|_| near(&centroid, config.community_spread, rng))
            .collect();
        Self {
            community: config.community,
            attackers: config.attackers,
            p_like: config.p_like,
            like_threshold: config.like_threshold,
            centroid,
            tastes,
        }
    }

    pub fn agents(&self) -> impl Iterator<Item = Agent> {
        (0..self.community)
            .map(Agent::Community)
            .chain((0..self.attackers).map(Agent::Attacker))
    }

    pub fn would_like(&self, member: usize, topic: &[f64]) -> bool {
        dot(&self.tastes[member], topic) >= self.like_threshold
    }

    pub fn like_fraction(&self, topic: &[f64]) -> f64 {
        let likes = (0..self.community).filter(|&c| self.would_like(c, topic)).count();
        likes as f64 / self.community as f64
    }

    /// A member likes a post it would like with probability `p_like` and
    /// otherwise ignores it. Members never down-vote.
    pub fn community_reaction<R: Rng + ?Sized>(&self, member: usize, topic: &[f64], rng: &mut R) -> Option<bool> {
        (self.would_like(member, topic) && rng.gen_bool(self.p_like)).then_some(true)
    }

    /// `Some(true)` is a like, `Some(false)` a dislike. Every post in the world is
    /// community-authored, so attackers always dislike.
    pub fn reaction<R: Rng + ?Sized>(&self, agent: Agent, topic: &[f64], rng: &mut R) -> Option<bool> {
        match agent {
            Agent::Community(c) => self.community_reaction(c, topic, rng),
            Agent::Attacker(_) => Some(false),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlannedPost {
    pub round: u32,
    pub author: usize,
    pub on_topic: bool,
    pub topic: Vec<f64>,
    /// At least `good_threshold` of the community would like it.
    pub good: bool,
}

/// The posts authored in each round. Both algorithms replay the same plan.
pub fn plan_posts<R: Rng + ?Sized>(config: &SimConfig, population: &AgentPopulation, rng: &mut R) -> Vec<Vec<PlannedPost>> {
    (0..config.rounds)
        .map(|round| {
            (0..config.community)
                .filter(|_| rng.gen_bool(config.post_probability))
                .collect::<Vec<_>>()
                .into_iter()
                .map(|author| {
                    let on_topic = rng.gen_bool(config.on_topic_fraction);
                    let topic = if on_topic {
                        near(&population.centroid, config.community_spread, rng)
                    } else {
                        normalized(gaussian(config.latent_dim, rng))
                    };
                    let good = population.like_fraction(&topic) >= config.good_threshold;
                    PlannedPost {
                        round,
                        author,
                        on_topic,
                        topic,
                        good,
                    }
                })
                .collect()
        })
        .collect()
}

/// Active community members plus all attackers, in random order.
pub fn round_order<R: Rng + ?Sized>(population: &AgentPopulation, p_active: f64, rng: &mut R) -> Vec<Agent> {
    let mut order: Vec<Agent> = population
        .agents()
        .filter(|a| match a {
            Agent::Community(_) => rng.gen_bool(p_active),
            Agent::Attacker(_) => true,
        })
        .collect();
    order.shuffle(rng);
    order
}
