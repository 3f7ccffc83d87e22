use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::PathBuf;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{write_atomic, StoreError, SyncPolicy};
use crate::ids::{PostId, UserId};

pub const DEFAULT_FEED_CAPACITY: usize = 1000;

/// Bounded queue of posts recommended to one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserFeedQueue {
    capacity: usize,
    unread: VecDeque<PostId>,
    /// Read watermark: how many posts have been delivered so far.
    delivered: u64,
}

impl UserFeedQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            unread: VecDeque::new(),
            delivered: 0,
        }
    }

    /// Enqueues `post` unless it is already unread, evicting the oldest entry when full.
    pub fn push(&mut self, post: PostId) -> bool {
        if self.unread.contains(&post) {
            return false;
        }
        if self.unread.len() == self.capacity {
            self.unread.pop_front();
        }
        self.unread.push_back(post);
        true
    }

    pub fn unread(&self) -> impl Iterator<Item = PostId> + '_ {
        self.unread.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.unread.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unread.is_empty()
    }

    pub fn contains(&self, post: PostId) -> bool {
        self.unread.contains(&post)
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    /// Removes `post` from the unread entries. Returns whether it was there.
    pub fn mark_read(&mut self, post: PostId) -> bool {
        match self.unread.iter().position(|&p| p == post) {
            Some(i) => {
                self.unread.remove(i);
                self.delivered += 1;
                true
            }
            None => false,
        }
    }
}

/// Every user's feed, optionally mirrored to `feeds/<user>.json`.
///
/// With persistence on, each access re-reads the user's file so a separate
/// recommender process and feed reader stay in sync.
pub struct FeedStore {
    dir: Option<PathBuf>,
    capacity: usize,
    feeds: Mutex<HashMap<UserId, UserFeedQueue>>,
}

impl FeedStore {
    pub fn new(dir: Option<PathBuf>, capacity: usize) -> Result<Self, StoreError> {
        if let Some(dir) = &dir {
            fs::create_dir_all(dir)?;
        }
        Ok(Self {
            dir,
            capacity,
            feeds: Mutex::new(HashMap::new()),
        })
    }

    /// Runs `f` on the user's feed and persists the result when it changed.
    pub fn update<R>(&self, user: UserId, f: impl FnOnce(&mut UserFeedQueue) -> R) -> Result<R, StoreError> {
        let mut feeds = self.feeds.lock();
        let feed = match &self.dir {
            Some(dir) => {
                let path = dir.join(format!("{}.json", user.0));
                let loaded = if path.exists() {
                    serde_json::from_slice(&fs::read(&path)?)
                        .map_err(|e| StoreError::Corrupt(format!("{}: {e}", path.display())))?
                } else {
                    UserFeedQueue::new(self.capacity)
                };
                feeds.insert(user, loaded);
                feeds.get_mut(&user).unwrap()
            }
            None => feeds.entry(user).or_insert_with(|| UserFeedQueue::new(self.capacity)),
        };
        let before = feed.clone();
        let out = f(feed);
        if let Some(dir) = &self.dir {
            if *feed != before {
                let path = dir.join(format!("{}.json", user.0));
                write_atomic(&path, &serde_json::to_vec(feed)?, SyncPolicy::Never)?;
            }
        }
        Ok(out)
    }

    pub fn push(&self, user: UserId, post: PostId) -> Result<bool, StoreError> {
        self.update(user, |q| q.push(post))
    }

    pub fn snapshot(&self, user: UserId) -> Result<UserFeedQueue, StoreError> {
        self.update(user, |q| q.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_duplicate_unread_and_bounded() {
        let mut q = UserFeedQueue::new(3);
        assert!(q.push(PostId(1)));
        assert!(!q.push(PostId(1)));
        q.push(PostId(2));
        q.push(PostId(3));
        q.push(PostId(4));
        assert_eq!(q.unread().collect::<Vec<_>>(), vec![PostId(2), PostId(3), PostId(4)]);
        assert!(q.mark_read(PostId(3)));
        assert!(!q.mark_read(PostId(3)));
        assert_eq!(q.delivered(), 1);
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn persisted_feeds_are_shared() {
        let dir = tempfile::tempdir().unwrap();
        let a = FeedStore::new(Some(dir.path().to_path_buf()), 10).unwrap();
        let b = FeedStore::new(Some(dir.path().to_path_buf()), 10).unwrap();
        a.push(UserId(1), PostId(7)).unwrap();
        assert!(b.snapshot(UserId(1)).unwrap().contains(PostId(7)));
        b.update(UserId(1), |q| q.mark_read(PostId(7))).unwrap();
        assert!(a.snapshot(UserId(1)).unwrap().is_empty());
    }
}
