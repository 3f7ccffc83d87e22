use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ids::{PostId, UserId};

pub const HOT_DIVISOR: f64 = 45_000.0;

/// `sign(s) * log10(max(|s|, 1)) + (created_at - epoch0) / 45000` with `s = ups - downs`.
pub fn reddit_hot(ups: u64, downs: u64, created_at: u64, epoch0: u64) -> f64 {
    let s = ups as i64 - downs as i64;
    let order = (s.unsigned_abs().max(1) as f64).log10();
    let sign = s.signum() as f64;
    let age = created_at as f64 - epoch0 as f64;
    sign * order + age / HOT_DIVISOR
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    /// Recorded for auditing only; the feed never looks at who voted.
    pub voter: UserId,
    pub post: PostId,
    pub up: bool,
    pub at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub ups: u64,
    pub downs: u64,
    pub created_at: u64,
    pub killed: bool,
}

impl Tally {
    pub fn net(&self) -> i64 {
        self.ups as i64 - self.downs as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoteOutcome {
    Counted,
    /// The vote pushed the post to the kill threshold inside the window.
    Killed,
    /// Unknown or already killed post.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RedditParams {
    pub kill_threshold: i64,
    /// Seconds after creation during which the threshold applies.
    pub kill_window: u64,
    /// Posts shown from the hot ranking.
    pub hot_list: usize,
    /// Newest posts shown in addition to the hot ranking.
    pub new_list: usize,
}

impl Default for RedditParams {
    fn default() -> Self {
        Self {
            kill_threshold: -5,
            kill_window: 7200,
            hot_list: 20,
            new_list: 20,
        }
    }
}

/// Vote tallies of every post plus the global listing rules.
#[derive(Debug, Clone)]
pub struct RedditFeedState {
    pub params: RedditParams,
    pub epoch0: u64,
    tallies: BTreeMap<PostId, Tally>,
    killed: u64,
}

impl RedditFeedState {
    pub fn new(params: RedditParams, epoch0: u64) -> Self {
        Self {
            params,
            epoch0,
            tallies: BTreeMap::new(),
            killed: 0,
        }
    }

    pub fn add_post(&mut self, post: PostId, created_at: u64) {
        self.tallies.entry(post).or_insert(Tally {
            ups: 0,
            downs: 0,
            created_at,
            killed: false,
        });
    }

    pub fn tally(&self, post: PostId) -> Option<&Tally> {
        self.tallies.get(&post)
    }

    pub fn tallies(&self) -> impl Iterator<Item = (PostId, &Tally)> {
        self.tallies.iter().map(|(p, t)| (*p, t))
    }

    pub fn is_live(&self, post: PostId) -> bool {
        self.tallies.get(&post).is_some_and(|t| !t.killed)
    }

    pub fn killed_count(&self) -> u64 {
        self.killed
    }

    pub fn hot(&self, post: PostId) -> Option<f64> {
        self.tallies
            .get(&post)
            .map(|t| reddit_hot(t.ups, t.downs, t.created_at, self.epoch0))
    }

    pub fn vote(&mut self, vote: &Vote) -> VoteOutcome {
        let params = self.params;
        let Some(t) = self.tallies.get_mut(&vote.post) else {
            return VoteOutcome::Ignored;
        };
        if t.killed {
            return VoteOutcome::Ignored;
        }
        if vote.up {
            t.ups += 1;
        } else {
            t.downs += 1;
        }
        let in_window = vote.at.saturating_sub(t.created_at) < params.kill_window;
        if in_window && t.net() <= params.kill_threshold {
            t.killed = true;
            self.killed += 1;
            return VoteOutcome::Killed;
        }
        VoteOutcome::Counted
    }

    /// The listing every user sees: the top `hot_list` live posts by hot score
    /// (ties by id), followed by the newest `new_list` live posts not already shown.
    pub fn visible(&self) -> Vec<PostId> {
        let mut live: Vec<(f64, PostId, u64)> = self
            .tallies
            .iter()
            .filter(|(_, t)| !t.killed)
            .map(|(p, t)| (reddit_hot(t.ups, t.downs, t.created_at, self.epoch0), *p, t.created_at))
            .collect();
        let by_hot = |a: &(f64, PostId, u64), b: &(f64, PostId, u64)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        let h = self.params.hot_list.min(live.len());
        if h < live.len() {
            live.select_nth_unstable_by(h, by_hot);
        }
        let (top, rest) = live.split_at_mut(h);
        top.sort_by(by_hot);
        let mut out: Vec<PostId> = top.iter().map(|e| e.1).collect();
        rest.sort_by(|a, b| b.2.cmp(&a.2).then(b.1.cmp(&a.1)));
        out.extend(rest.iter().take(self.params.new_list).map(|e| e.1));
        out
    }
}

/// Applies `votes` in order and returns the listing afterwards.
pub fn reddit_feed_step(state: &mut RedditFeedState, votes: &[Vote]) -> Vec<PostId> {
    for v in votes {
        state.vote(v);
    }
    state.visible()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn down(post: u64, at: u64) -> Vote {
        Vote {
            voter: UserId(0),
            post: PostId(post),
            up: false,
            at,
        }
    }

    #[test]
    fn hot_values() {
        assert!((reddit_hot(10, 3, 0, 0) - 7f64.log10()).abs() < 1e-12);
        assert_eq!(reddit_hot(4, 4, 0, 0), 0.0);
        assert_eq!(reddit_hot(4, 4, 4500, 0), 0.1);
        assert!((reddit_hot(0, 7, 0, 0) + 7f64.log10()).abs() < 1e-12);
        assert_eq!(reddit_hot(1, 0, 0, 0), 0.0);
    }

    #[test]
    fn six_downvotes_in_window_kill() {
        let mut s = RedditFeedState::new(RedditParams::default(), 0);
        s.add_post(PostId(1), 100);
        let votes: Vec<_> = (0..6).map(|i| down(1, 200 + i)).collect();
        let visible = reddit_feed_step(&mut s, &votes);
        assert!(!s.is_live(PostId(1)));
        assert!(visible.is_empty());
        // The fifth down vote reaches -5 and kills; the sixth is ignored.
        assert_eq!(s.tally(PostId(1)).unwrap().downs, 5);
        assert_eq!(s.vote(&down(1, 300)), VoteOutcome::Ignored);
    }

    #[test]
    fn late_downvotes_do_not_kill() {
        let mut s = RedditFeedState::new(RedditParams::default(), 0);
        s.add_post(PostId(1), 100);
        let votes: Vec<_> = (0..6).map(|i| down(1, 100 + 7200 + i)).collect();
        reddit_feed_step(&mut s, &votes);
        assert!(s.is_live(PostId(1)));
        assert_eq!(s.tally(PostId(1)).unwrap().net(), -6);
    }

    #[test]
    fn listing_combines_hot_and_new() {
        let params = RedditParams {
            hot_list: 2,
            new_list: 1,
            ..RedditParams::default()
        };
        let mut s = RedditFeedState::new(params, 0);
        for (id, at) in [(1, 0), (2, 0), (3, 10), (4, 20)] {
            s.add_post(PostId(id), at);
        }
        for _ in 0..100 {
            s.vote(&Vote {
                voter: UserId(9),
                post: PostId(1),
                up: true,
                at: 30,
            });
        }
        // Hot: p1 (log10 100), then p4 (newest, zero votes). New: p3.
        assert_eq!(s.visible(), vec![PostId(1), PostId(4), PostId(3)]);
    }
}
