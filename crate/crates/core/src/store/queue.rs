//! Append-only record log with named, independently persisted reader cursors.
//!
//! On-disk record framing is `[len: u32 LE][crc32: u32 LE][payload]`, payload
//! being one JSON document. A torn tail (short or checksum-failing record) is
//! ignored by readers and cut off by the next append.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{write_atomic, StoreError, SyncPolicy};

const HEADER_LEN: u64 = 8;
/// How often a blocked poll re-reads the file for records appended by another process.
const REFRESH_INTERVAL: Duration = Duration::from_millis(50);

/// How long [`DurableQueue::poll`] may wait for a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wait {
    No,
    Timeout(Duration),
    Forever,
}

impl From<bool> for Wait {
    fn from(block: bool) -> Self {
        if block {
            Wait::Forever
        } else {
            Wait::No
        }
    }
}

pub struct DurableQueue<T> {
    name: String,
    log_path: PathBuf,
    cursor_path: PathBuf,
    sync: SyncPolicy,
    inner: Mutex<Inner>,
    arrived: Condvar,
    _record: PhantomData<fn() -> T>,
}

struct Inner {
    file: File,
    /// Start offset of every valid record.
    offsets: Vec<u64>,
    /// End of the last valid record.
    end: u64,
    cursors: BTreeMap<String, u64>,
}

impl<T: Serialize + DeserializeOwned> DurableQueue<T> {
    /// Opens (creating if needed) `queues/<name>.log` and `cursors/<name>.json` under `root`.
    pub fn open(root: &Path, name: &str, sync: SyncPolicy) -> Result<Self, StoreError> {
        let queues = root.join("queues");
        let cursor_dir = root.join("cursors");
        fs::create_dir_all(&queues)?;
        fs::create_dir_all(&cursor_dir)?;
        let log_path = queues.join(format!("{name}.log"));
        let cursor_path = cursor_dir.join(format!("{name}.json"));

        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&log_path)?;
        let mut inner = Inner {
            file,
            offsets: Vec::new(),
            end: 0,
            cursors: BTreeMap::new(),
        };
        inner.scan()?;
        if cursor_path.exists() {
            let bytes = fs::read(&cursor_path)?;
            inner.cursors = serde_json::from_slice(&bytes)
                .map_err(|e| StoreError::Corrupt(format!("{}: {e}", cursor_path.display())))?;
        }
        let len = inner.offsets.len() as u64;
        for (cursor, &pos) in &inner.cursors {
            if pos > len {
                return Err(StoreError::Corrupt(format!(
                    "cursor {cursor} of queue {name} is at {pos} but the log holds {len} records"
                )));
            }
        }
        Ok(Self {
            name: name.to_owned(),
            log_path,
            cursor_path,
            sync,
            inner: Mutex::new(inner),
            arrived: Condvar::new(),
            _record: PhantomData,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn path(&self) -> &Path {
        &self.log_path
    }

    pub fn len(&self) -> u64 {
        self.inner.lock().offsets.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends `record`; its id is its position in the log.
    pub fn append(&self, record: &T) -> Result<u64, StoreError> {
        self.append_with(|_| Ok::<_, StoreError>(record))
            .map(|(id, _)| id)
    }

    /// Appends the record built from the id it is about to receive.
    pub fn append_with<R, E, F>(&self, build: F) -> Result<(u64, R), E>
    where
        R: std::borrow::Borrow<T>,
        F: FnOnce(u64) -> Result<R, E>,
        E: From<StoreError>,
    {
        let mut inner = self.inner.lock();
        inner.refresh().map_err(E::from)?;
        let id = inner.offsets.len() as u64;
        let record = build(id)?;
        let payload = serde_json::to_vec(record.borrow()).map_err(StoreError::from)?;
        let len = u32::try_from(payload.len())
            .map_err(|_| StoreError::Corrupt(format!("record of {} bytes is too large", payload.len())))?;
        let mut frame = Vec::with_capacity(payload.len() + HEADER_LEN as usize);
        frame.extend_from_slice(&len.to_le_bytes());
        frame.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        frame.extend_from_slice(&payload);

        let start = inner.end;
        let file_len = inner.file.metadata().map_err(StoreError::from)?.len();
        if file_len > start {
            // Drop a torn tail left by an interrupted append.
            inner.file.set_len(start).map_err(StoreError::from)?;
        }
        inner.file.seek(SeekFrom::Start(start)).map_err(StoreError::from)?;
        inner.file.write_all(&frame).map_err(StoreError::from)?;
        if self.sync == SyncPolicy::Always {
            inner.file.sync_data().map_err(StoreError::from)?;
        }
        inner.offsets.push(start);
        inner.end = start + frame.len() as u64;
        drop(inner);
        self.arrived.notify_all();
        Ok((id, record))
    }

    /// Creates `cursor` at position 0 unless it already exists.
    pub fn register_cursor(&self, cursor: &str) -> Result<u64, StoreError> {
        let mut inner = self.inner.lock();
        if let Some(&pos) = inner.cursors.get(cursor) {
            return Ok(pos);
        }
        inner.cursors.insert(cursor.to_owned(), 0);
        self.persist_cursors(&inner)?;
        Ok(0)
    }

    /// Number of records acknowledged through `cursor`.
    pub fn cursor(&self, cursor: &str) -> Result<u64, StoreError> {
        self.inner
            .lock()
            .cursors
            .get(cursor)
            .copied()
            .ok_or_else(|| StoreError::UnknownCursor(cursor.to_owned()))
    }

    /// Records not yet acknowledged through `cursor`.
    pub fn backlog(&self, cursor: &str) -> Result<u64, StoreError> {
        let inner = self.inner.lock();
        let pos = inner
            .cursors
            .get(cursor)
            .copied()
            .ok_or_else(|| StoreError::UnknownCursor(cursor.to_owned()))?;
        Ok(inner.offsets.len() as u64 - pos)
    }

    /// Returns the first record `cursor` has not acknowledged, without advancing it.
    ///
    /// Polling again before [`ack`](Self::ack) yields the same record.
    pub fn poll(&self, cursor: &str, wait: impl Into<Wait>) -> Result<Option<(u64, T)>, StoreError> {
        let wait = wait.into();
        let deadline = match wait {
            Wait::Timeout(d) => Some(Instant::now() + d),
            _ => None,
        };
        let mut inner = self.inner.lock();
        loop {
            let pos = inner
                .cursors
                .get(cursor)
                .copied()
                .ok_or_else(|| StoreError::UnknownCursor(cursor.to_owned()))?;
            if (pos as usize) >= inner.offsets.len() {
                inner.refresh()?;
            }
            if (pos as usize) < inner.offsets.len() {
                let record = inner.read(pos as usize)?;
                return Ok(Some((pos, record)));
            }
            let pause = match (wait, deadline) {
                (Wait::No, _) => return Ok(None),
                (_, Some(deadline)) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return Ok(None);
                    }
                    (deadline - now).min(REFRESH_INTERVAL)
                }
                (_, None) => REFRESH_INTERVAL,
            };
            self.arrived.wait_for(&mut inner, pause);
        }
    }

    /// Marks record `id` as processed by `cursor`. Acks must arrive in log order.
    pub fn ack(&self, cursor: &str, id: u64) -> Result<(), StoreError> {
        let mut inner = self.inner.lock();
        let pos = inner
            .cursors
            .get(cursor)
            .copied()
            .ok_or_else(|| StoreError::UnknownCursor(cursor.to_owned()))?;
        if id != pos || id >= inner.offsets.len() as u64 {
            return Err(StoreError::AckOutOfOrder { expected: pos, got: id });
        }
        inner.cursors.insert(cursor.to_owned(), pos + 1);
        self.persist_cursors(&inner)
    }

    /// Moves `cursor` forward to `pos`, e.g. to the position recorded in a checkpoint.
    pub fn advance_cursor(&self, cursor: &str, pos: u64) -> Result<(), StoreError> {
        let mut inner = self.inner.lock();
        let current = inner
            .cursors
            .get(cursor)
            .copied()
            .ok_or_else(|| StoreError::UnknownCursor(cursor.to_owned()))?;
        if pos < current || pos > inner.offsets.len() as u64 {
            return Err(StoreError::AckOutOfOrder {
                expected: current,
                got: pos,
            });
        }
        inner.cursors.insert(cursor.to_owned(), pos);
        self.persist_cursors(&inner)
    }

    /// Reads the record at position `id`, acknowledged or not.
    pub fn read(&self, id: u64) -> Result<Option<T>, StoreError> {
        let mut inner = self.inner.lock();
        if id as usize >= inner.offsets.len() {
            inner.refresh()?;
        }
        if id as usize >= inner.offsets.len() {
            return Ok(None);
        }
        inner.read(id as usize).map(Some)
    }

    /// Wakes every blocked poller so it can re-check its stop condition.
    pub fn notify(&self) {
        self.arrived.notify_all();
    }

    fn persist_cursors(&self, inner: &Inner) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec(&inner.cursors)?;
        write_atomic(&self.cursor_path, &bytes, self.sync)
    }
}

impl Inner {
    fn scan(&mut self) -> Result<(), StoreError> {
        self.offsets.clear();
        self.end = 0;
        self.refresh()
    }

    /// Picks up complete records appended past `end`, possibly by another process.
    fn refresh(&mut self) -> Result<(), StoreError> {
        let file_len = self.file.metadata()?.len();
        if file_len <= self.end {
            return Ok(());
        }
        self.file.seek(SeekFrom::Start(self.end))?;
        let mut tail = Vec::with_capacity((file_len - self.end) as usize);
        (&self.file).take(file_len - self.end).read_to_end(&mut tail)?;
        let mut at = 0usize;
        while tail.len() - at >= HEADER_LEN as usize {
            let len = u32::from_le_bytes(tail[at..at + 4].try_into().unwrap()) as usize;
            let crc = u32::from_le_bytes(tail[at + 4..at + 8].try_into().unwrap());
            let body = at + HEADER_LEN as usize;
            if tail.len() - body < len || crc32fast::hash(&tail[body..body + len]) != crc {
                break;
            }
            self.offsets.push(self.end + at as u64);
            at = body + len;
        }
        self.end += at as u64;
        Ok(())
    }

    fn read<T: DeserializeOwned>(&mut self, index: usize) -> Result<T, StoreError> {
        let start = self.offsets[index];
        self.file.seek(SeekFrom::Start(start))?;
        let mut header = [0u8; HEADER_LEN as usize];
        self.file.read_exact(&mut header)?;
        let len = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
        let mut payload = vec![0u8; len];
        self.file.read_exact(&mut payload)?;
        Ok(serde_json::from_slice(&payload)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open(dir: &Path) -> DurableQueue<String> {
        DurableQueue::open(dir, "q", SyncPolicy::Always).unwrap()
    }

    #[test]
    fn append_assigns_positions() {
        let dir = tempfile::tempdir().unwrap();
        let q = open(dir.path());
        assert!(q.is_empty());
        assert_eq!(q.append(&"a".to_owned()).unwrap(), 0);
        assert_eq!(q.len(), 1);
        assert_eq!(q.append(&"b".to_owned()).unwrap(), 1);
        assert_eq!(q.read(0).unwrap().as_deref(), Some("a"));
        assert_eq!(q.read(1).unwrap().as_deref(), Some("b"));
        assert_eq!(q.read(2).unwrap(), None);
    }

    #[test]
    fn poll_ack_poll() {
        let dir = tempfile::tempdir().unwrap();
        let q = open(dir.path());
        q.register_cursor("c").unwrap();
        assert!(q.poll("c", false).unwrap().is_none());
        q.append(&"x".to_owned()).unwrap();
        let (id, rec) = q.poll("c", false).unwrap().unwrap();
        assert_eq!((id, rec.as_str()), (0, "x"));
        // Unacked records are handed out again.
        assert_eq!(q.poll("c", false).unwrap().unwrap().0, 0);
        q.ack("c", 0).unwrap();
        assert!(q.poll("c", false).unwrap().is_none());
        assert_eq!(q.cursor("c").unwrap(), 1);
    }

    #[test]
    fn unknown_cursor() {
        let dir = tempfile::tempdir().unwrap();
        let q = open(dir.path());
        assert!(matches!(q.poll("nope", false), Err(StoreError::UnknownCursor(_))));
        assert!(matches!(q.ack("nope", 0), Err(StoreError::UnknownCursor(_))));
    }

    #[test]
    fn acks_must_follow_log_order() {
        let dir = tempfile::tempdir().unwrap();
        let q = open(dir.path());
        q.register_cursor("c").unwrap();
        q.append(&"a".to_owned()).unwrap();
        q.append(&"b".to_owned()).unwrap();
        assert!(matches!(q.ack("c", 1), Err(StoreError::AckOutOfOrder { expected: 0, got: 1 })));
        q.ack("c", 0).unwrap();
        assert!(q.ack("c", 0).is_err());
        q.ack("c", 1).unwrap();
        assert!(q.ack("c", 2).is_err());
    }

    #[test]
    fn independent_cursors() {
        let dir = tempfile::tempdir().unwrap();
        let q = open(dir.path());
        q.register_cursor("a").unwrap();
        q.register_cursor("b").unwrap();
        q.append(&"r".to_owned()).unwrap();
        q.ack("a", 0).unwrap();
        assert!(q.poll("a", false).unwrap().is_none());
        assert_eq!(q.poll("b", false).unwrap().unwrap().0, 0);
    }

    #[test]
    fn unacked_record_is_redelivered_after_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let q = open(dir.path());
            q.register_cursor("c").unwrap();
            q.append(&"first".to_owned()).unwrap();
            q.append(&"second".to_owned()).unwrap();
            q.ack("c", 0).unwrap();
            assert_eq!(q.poll("c", false).unwrap().unwrap().0, 1);
        }
        let q = open(dir.path());
        let (id, rec) = q.poll("c", false).unwrap().unwrap();
        assert_eq!((id, rec.as_str()), (1, "second"));
    }

    #[test]
    fn torn_tail_is_ignored_then_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        {
            let q = open(dir.path());
            q.append(&"keep".to_owned()).unwrap();
            q.append(&"torn".to_owned()).unwrap();
        }
        let path = dir.path().join("queues/q.log");
        let len = fs::metadata(&path).unwrap().len();
        OpenOptions::new().write(true).open(&path).unwrap().set_len(len - 3).unwrap();

        let q = open(dir.path());
        assert_eq!(q.len(), 1);
        assert_eq!(q.append(&"next".to_owned()).unwrap(), 1);
        drop(q);
        let q = open(dir.path());
        assert_eq!(q.len(), 2);
        assert_eq!(q.read(1).unwrap().as_deref(), Some("next"));
    }

    #[test]
    fn corrupted_payload_ends_the_log() {
        let dir = tempfile::tempdir().unwrap();
        {
            let q = open(dir.path());
            q.append(&"one".to_owned()).unwrap();
            q.append(&"two".to_owned()).unwrap();
        }
        let path = dir.path().join("queues/q.log");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 2;
        bytes[last] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert_eq!(open(dir.path()).len(), 1);
    }

    #[test]
    fn blocking_poll_sees_append_from_another_thread() {
        let dir = tempfile::tempdir().unwrap();
        let q = std::sync::Arc::new(open(dir.path()));
        q.register_cursor("c").unwrap();
        let writer = {
            let q = q.clone();
            std::thread::spawn(move || {
                std::thread::sleep(Duration::from_millis(20));
                q.append(&"late".to_owned()).unwrap();
            })
        };
        let got = q.poll("c", true).unwrap().unwrap();
        assert_eq!(got.1, "late");
        writer.join().unwrap();
        assert!(q.poll("c", Wait::Timeout(Duration::from_millis(10))).unwrap().is_some());
    }

    #[test]
    fn reader_handle_picks_up_foreign_appends() {
        let dir = tempfile::tempdir().unwrap();
        let writer = open(dir.path());
        let reader = open(dir.path());
        reader.register_cursor("c").unwrap();
        writer.append(&"cross".to_owned()).unwrap();
        let got = reader.poll("c", Wait::Timeout(Duration::from_millis(200))).unwrap();
        assert_eq!(got.unwrap().1, "cross");
    }
}
