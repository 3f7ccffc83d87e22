//! Canonical binary checkpoint format.
//!
//! ```text
//! "DRCKPT\0\0"  u32 format_version
//! repeated sections: [tag: 4 bytes][len: u64][payload]
//!   DIMS  n, m, p, h                              (u32 each)
//!   HYPR  eta_w, eta_emb, l2 (f32), seed (u64)
//!   CURS  training cursor, steps, skipped         (u64 each)
//!   WGHT  w1, b1, w2, b2                          (flat f32)
//!   UEMB  count, then (id u64, n x f32) per row   (ascending id)
//!   DEMB  same for documents
//!   LIKE  count, then (user u64, k u32, k x post u64)
//! u32 crc32 of everything above
//! ```
//!
//! All integers and reals are little-endian. Every map is written in key
//! order, so `load -> save` reproduces the input byte for byte.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_atomic, EmbeddingTable, ModelState, StoreError, SyncPolicy};
use crate::ids::{PostId, UserId};
use crate::model::{Dims, EntityKind, ModelWeights, CONTEXT_DIM};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DRCKPT\0\0";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub eta_w: f32,
    pub eta_emb: f32,
    pub l2: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub hyper: Hyperparameters,
    /// Number of training-queue records reflected in `state`.
    pub training_cursor: u64,
    pub steps: u64,
    pub skipped: u64,
    pub state: ModelState,
}

impl ModelCheckpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        let state = &self.state;
        let dims = state.dims;

        section(&mut out, b"DIMS", |b| {
            for v in [dims.user, dims.doc, CONTEXT_DIM, dims.hidden] {
                put_u32(b, v as u32);
            }
        });
        section(&mut out, b"HYPR", |b| {
            put_f32s(b, &[self.hyper.eta_w, self.hyper.eta_emb, self.hyper.l2]);
            put_u64(b, state.seed);
        });
        section(&mut out, b"CURS", |b| {
            put_u64(b, self.training_cursor);
            put_u64(b, self.steps);
            put_u64(b, self.skipped);
        });
        section(&mut out, b"WGHT", |b| {
            let w = &state.weights;
            put_f32s(b, w.w1());
            put_f32s(b, w.b1());
            put_f32s(b, w.w2());
            put_f32s(b, &[w.b2()]);
        });
        for (tag, table) in [(b"UEMB", &state.users), (b"DEMB", &state.docs)] {
            section(&mut out, tag, |b| {
                put_u64(b, table.len() as u64);
                for (id, row) in table.iter() {
                    put_u64(b, id);
                    put_f32s(b, row);
                }
            });
        }
        section(&mut out, b"LIKE", |b| {
            put_u64(b, state.liked.len() as u64);
            for (user, posts) in &state.liked {
                put_u64(b, user.0);
                put_u32(b, posts.len() as u32);
                for p in posts {
                    put_u64(b, p.0);
                }
            }
        });
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a checkpoint. When `expected` is given, its dimensions must match.
    pub fn decode(bytes: &[u8], expected: Option<Dims>) -> Result<Self, StoreError> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("missing checkpoint header"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader { bytes: &body[MAGIC.len()..] };
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(StoreError::VersionMismatch {
                found: format_version,
                expected: FORMAT_VERSION,
            });
        }
        if crc32fast::hash(body).to_le_bytes() != trailer {
            return Err(corrupt("checksum mismatch"));
        }

        let mut s = r.section(b"DIMS")?;
        let dims = Dims {
            user: s.u32()? as usize,
            doc: s.u32()? as usize,
            hidden: {
                let p = s.u32()? as usize;
                if p != CONTEXT_DIM {
                    return Err(corrupt("unsupported context width"));
                }
                s.u32()? as usize
            },
        };
        s.finish()?;
        if let Some(expected) = expected {
            if expected != dims {
                return Err(StoreError::DimensionMismatch { found: dims, expected });
            }
        }

        let mut s = r.section(b"HYPR")?;
        let hyper = Hyperparameters {
            eta_w: s.f32()?,
            eta_emb: s.f32()?,
            l2: s.f32()?,
        };
        let seed = s.u64()?;
        s.finish()?;

        let mut s = r.section(b"CURS")?;
        let (training_cursor, steps, skipped) = (s.u64()?, s.u64()?, s.u64()?);
        s.finish()?;

        let mut s = r.section(b"WGHT")?;
        let w1 = s.f32s(dims.hidden * dims.input())?;
        let b1 = s.f32s(dims.hidden)?;
        let w2 = s.f32s(dims.hidden)?;
        let b2 = s.f32()?;
        s.finish()?;
        let weights = ModelWeights::from_parts(dims, w1, b1, w2, b2)?;

        let mut tables = Vec::new();
        for (tag, kind) in [(b"UEMB", EntityKind::User), (b"DEMB", EntityKind::Document)] {
            let mut s = r.section(tag)?;
            let dim = dims.embedding(kind);
            let mut table = EmbeddingTable::new(kind, dim);
            let count = s.u64()?;
            let mut last = None;
            for _ in 0..count {
                let id = s.u64()?;
                if last.is_some_and(|l| l >= id) {
                    return Err(corrupt("embedding rows out of order"));
                }
                last = Some(id);
                table.insert(id, s.f32s(dim)?)?;
            }
            s.finish()?;
            tables.push(table);
        }
        let docs = tables.pop().unwrap();
        let users = tables.pop().unwrap();

        let mut s = r.section(b"LIKE")?;
        let mut liked = BTreeMap::new();
        for _ in 0..s.u64()? {
            let user = UserId(s.u64()?);
            let k = s.u32()? as usize;
            let mut posts = VecDeque::with_capacity(k);
            for _ in 0..k {
                posts.push_back(PostId(s.u64()?));
            }
            liked.insert(user, posts);
        }
        s.finish()?;
        if !r.bytes.is_empty() {
            return Err(corrupt("trailing bytes"));
        }

        Ok(Self {
            format_version,
            hyper,
            training_cursor,
            steps,
            skipped,
            state: ModelState {
                dims,
                seed,
                weights,
                users,
                docs,
                liked,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_atomic(path, &self.encode(), SyncPolicy::Always)
    }

    pub fn load(path: &Path, expected: Option<Dims>) -> Result<Self, StoreError> {
        Self::decode(&fs::read(path)?, expected)
    }
}

/// Highest-numbered `*.ckpt` file in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>, StoreError> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ckpt") {
            continue;
        }
        let Some(n) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn corrupt(msg: &str) -> StoreError {
    StoreError::Corrupt(msg.to_owned())
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], fill: impl FnOnce(&mut Vec<u8>)) {
    let mut body = Vec::new();
    fill(&mut body);
    out.extend_from_slice(tag);
    put_u64(out, body.len() as u64);
    out.extend_from_slice(&body);
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(b: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        if self.bytes.len() < n {
            return Err(corrupt("unexpected end of checkpoint"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, StoreError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, StoreError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| corrupt("length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<Reader<'a>, StoreError> {
        if self.take(4)? != tag {
            return Err(StoreError::Corrupt(format!(
                "expected section {}",
                String::from_utf8_lossy(tag)
            )));
        }
        let len = usize::try_from(self.u64()?).map_err(|_| corrupt("section too large"))?;
        Ok(Reader { bytes: self.take(len)? })
    }

    fn finish(self) -> Result<(), StoreError> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(corrupt("section has trailing bytes"))
        }
    }
}
