use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{StoreError, SyncPolicy};
use crate::ids::{PostId, UserId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: PostId,
    pub author_user_id: UserId,
    pub text: String,
    pub url: Option<String>,
    pub created_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: UserId,
    pub created_at: u64,
}

/// Posts and registered users, each an append-only JSON-lines file.
///
/// Lookups that miss re-read the files so that records written by another
/// process become visible.
pub struct PostStore {
    sync: SyncPolicy,
    inner: Mutex<Inner>,
}

struct Inner {
    posts: JsonLines<Post>,
    users: JsonLines<UserRecord>,
    post_index: BTreeMap<PostId, Post>,
    user_index: BTreeMap<UserId, UserRecord>,
}

impl PostStore {
    pub fn open(root: &Path, sync: SyncPolicy) -> Result<Self, StoreError> {
        let mut inner = Inner {
            posts: JsonLines::open(root.join("posts.jsonl"))?,
            users: JsonLines::open(root.join("users.jsonl"))?,
            post_index: BTreeMap::new(),
            user_index: BTreeMap::new(),
        };
        inner.reload()?;
        Ok(Self {
            sync,
            inner: Mutex::new(inner),
        })
    }

    /// Registers `user_id`, or the next free id when `None`. Registering an
    /// existing id returns the existing record.
    pub fn register_user(&self, user_id: Option<UserId>, created_at: u64) -> Result<UserRecord, StoreError> {
        let mut inner = self.inner.lock();
        inner.reload()?;
        let user_id = user_id.unwrap_or_else(|| {
            UserId(inner.user_index.keys().next_back().map_or(1, |u| u.0 + 1))
        });
        if let Some(existing) = inner.user_index.get(&user_id) {
            return Ok(*existing);
        }
        let record = UserRecord { user_id, created_at };
        inner.users.append(&record, self.sync)?;
        inner.user_index.insert(user_id, record);
        Ok(record)
    }

    pub fn create_post(
        &self,
        author: UserId,
        text: &str,
        url: Option<String>,
        created_at: u64,
    ) -> Result<Post, StoreError> {
        if text.trim().is_empty() {
            return Err(StoreError::EmptyPost);
        }
        let mut inner = self.inner.lock();
        inner.reload()?;
        if !inner.user_index.contains_key(&author) {
            return Err(StoreError::UnknownUser(author));
        }
        let post_id = PostId(inner.post_index.keys().next_back().map_or(1, |p| p.0 + 1));
        let post = Post {
            post_id,
            author_user_id: author,
            text: text.to_owned(),
            url,
            created_at,
        };
        inner.posts.append(&post, self.sync)?;
        inner.post_index.insert(post_id, post.clone());
        Ok(post)
    }

    pub fn get(&self, post_id: PostId) -> Result<Option<Post>, StoreError> {
        let mut inner = self.inner.lock();
        if !inner.post_index.contains_key(&post_id) {
            inner.reload()?;
        }
        Ok(inner.post_index.get(&post_id).cloned())
    }

    pub fn author_of(&self, post_id: PostId) -> Option<UserId> {
        self.get(post_id).ok().flatten().map(|p| p.author_user_id)
    }

    pub fn user_exists(&self, user_id: UserId) -> Result<bool, StoreError> {
        let mut inner = self.inner.lock();
        if !inner.user_index.contains_key(&user_id) {
            inner.reload()?;
        }
        Ok(inner.user_index.contains_key(&user_id))
    }

    pub fn require_user(&self, user_id: UserId) -> Result<(), StoreError> {
        if self.user_exists(user_id)? {
            Ok(())
        } else {
            Err(StoreError::UnknownUser(user_id))
        }
    }

    pub fn require_post(&self, post_id: PostId) -> Result<Post, StoreError> {
        self.get(post_id)?.ok_or(StoreError::UnknownPost(post_id))
    }

    /// All registered users in id order.
    pub fn users(&self) -> Vec<UserId> {
        let mut inner = self.inner.lock();
        let _ = inner.reload();
        inner.user_index.keys().copied().collect()
    }

    pub fn user_count(&self) -> usize {
        self.inner.lock().user_index.len()
    }

    /// All posts in id order.
    pub fn posts(&self) -> Vec<Post> {
        let mut inner = self.inner.lock();
        let _ = inner.reload();
        inner.post_index.values().cloned().collect()
    }

    pub fn post_count(&self) -> usize {
        self.inner.lock().post_index.len()
    }
}

impl Inner {
    fn reload(&mut self) -> Result<(), StoreError> {
        for post in self.posts.read_new()? {
            self.post_index.insert(post.post_id, post);
        }
        for user in self.users.read_new()? {
            self.user_index.insert(user.user_id, user);
        }
        Ok(())
    }
}

struct JsonLines<T> {
    path: PathBuf,
    file: File,
    /// Bytes consumed so far; always at a line boundary.
    read_to: u64,
    _record: std::marker::PhantomData<fn() -> T>,
}

impl<T: Serialize + DeserializeOwned> JsonLines<T> {
    fn open(path: PathBuf) -> Result<Self, StoreError> {
        let file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        Ok(Self {
            path,
            file,
            read_to: 0,
            _record: std::marker::PhantomData,
        })
    }

    fn read_new(&mut self) -> Result<Vec<T>, StoreError> {
        let len = self.file.metadata()?.len();
        if len <= self.read_to {
            return Ok(Vec::new());
        }
        self.file.seek(SeekFrom::Start(self.read_to))?;
        let mut buf = Vec::new();
        (&self.file).take(len - self.read_to).read_to_end(&mut buf)?;
        // Only complete lines; a partial last line is picked up once finished.
        let complete = match buf.iter().rposition(|&b| b == b'\n') {
            Some(i) => i + 1,
            None => return Ok(Vec::new()),
        };
        let mut out = Vec::new();
        for line in buf[..complete].split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
            let record = serde_json::from_slice(line)
                .map_err(|e| StoreError::Corrupt(format!("{}: {e}", self.path.display())))?;
            out.push(record);
        }
        self.read_to += complete as u64;
        Ok(out)
    }

    fn append(&mut self, record: &T, sync: SyncPolicy) -> Result<(), StoreError> {
        // read_to is left alone: the next read_new picks this line up again,
        // which keeps it aligned even if another process appended meanwhile.
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        if sync == SyncPolicy::Always {
            self.file.sync_data()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posts_and_users_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let (u, p) = {
            let store = PostStore::open(dir.path(), SyncPolicy::Always).unwrap();
            let u = store.register_user(None, 10).unwrap().user_id;
            let p = store.create_post(u, "hello world", Some("https://x".into()), 11).unwrap();
            (u, p)
        };
        let store = PostStore::open(dir.path(), SyncPolicy::Always).unwrap();
        assert!(store.user_exists(u).unwrap());
        assert_eq!(store.get(p.post_id).unwrap(), Some(p));
    }

    #[test]
    fn ids_are_sequential_and_unique() {
        let dir = tempfile::tempdir().unwrap();
        let store = PostStore::open(dir.path(), SyncPolicy::Never).unwrap();
        let a = store.register_user(None, 0).unwrap().user_id;
        let b = store.register_user(None, 0).unwrap().user_id;
        assert_ne!(a, b);
        assert_eq!(store.register_user(Some(a), 5).unwrap().created_at, 0);
        let p1 = store.create_post(a, "one", None, 0).unwrap().post_id;
        let p2 = store.create_post(b, "two", None, 0).unwrap().post_id;
        assert!(p2 > p1);
        assert_eq!(store.users(), vec![a, b]);
    }

    #[test]
    fn rejects_empty_text_and_unknown_author() {
        let dir = tempfile::tempdir().unwrap();
        let store = PostStore::open(dir.path(), SyncPolicy::Never).unwrap();
        let u = store.register_user(None, 0).unwrap().user_id;
        assert!(matches!(store.create_post(u, "  ", None, 0), Err(StoreError::EmptyPost)));
        assert!(matches!(
            store.create_post(UserId(99), "hi", None, 0),
            Err(StoreError::UnknownUser(UserId(99)))
        ));
        assert_eq!(store.post_count(), 0);
    }

    #[test]
    fn second_handle_sees_new_records() {
        let dir = tempfile::tempdir().unwrap();
        let writer = PostStore::open(dir.path(), SyncPolicy::Never).unwrap();
        let reader = PostStore::open(dir.path(), SyncPolicy::Never).unwrap();
        let u = writer.register_user(None, 0).unwrap().user_id;
        let p = writer.create_post(u, "fresh", None, 1).unwrap();
        assert_eq!(reader.get(p.post_id).unwrap().unwrap().text, "fresh");
        assert!(reader.user_exists(u).unwrap());
    }
}
