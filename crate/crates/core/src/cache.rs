//! Append-only store of coarse visual tokens keyed by `(episode, t, camera)`.
//!
//! File layout, little-endian:
//!
//! ```text
//! header : "NFC1" | version u32 | C u32
//! record : key_len u16 | key bytes | t u32 | cam u16 | payload f32 x 4 x C | crc32 u32
//! ```
//!
//! The checksum covers every record byte before it. The index is rebuilt by
//! scanning on open; a torn trailing record is cut off, while a record with a
//! bad checksum stays indexed so that reading it reports the damage. One writer appends
//! while any number of readers look up entries: a record becomes visible only
//! after it is fully written, and readers never take the writer lock.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::FeatureMatrix;
use crate::COARSE_TOKENS_PER_FRAME;

const MAGIC: &[u8; 4] = b"NFC1";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 12;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a feature cache or unsupported version: {0}")]
    VersionMismatch(String),
    #[error("store holds C={stored}, caller expects C={expected}")]
    DimensionMismatch { stored: usize, expected: usize },
    #[error("no entry for {0}")]
    NotFound(CacheKey),
    #[error("checksum mismatch for {0}")]
    ChecksumFailure(CacheKey),
    #[error("entry for {0} already exists")]
    DuplicateKey(CacheKey),
    #[error("only coarse entries ({COARSE_TOKENS_PER_FRAME} tokens) are cached, got {0} tokens")]
    NotCoarse(usize),
    #[error("episode id is {0} bytes, limit is 65535")]
    KeyTooLong(usize),
    #[error("store is damaged at byte offset {offset}")]
    Corrupt { offset: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub episode: String,
    pub t: u32,
    pub camera: u16,
}

impl CacheKey {
    pub fn new(episode: impl Into<String>, t: u32, camera: u16) -> Self {
        Self { episode: episode.into(), t, camera }
    }

    /// Parses the `episode/t/camera` form used in episode `data_ref`s.
    pub fn parse(s: &str) -> Option<Self> {
        let mut parts = s.rsplitn(3, '/');
        let camera = parts.next()?.parse().ok()?;
        let t = parts.next()?.parse().ok()?;
        let episode = parts.next()?;
        Some(Self::new(episode, t, camera))
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.episode, self.t, self.camera)
    }
}

/// Four coarse tokens for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    tokens: FeatureMatrix,
}

impl CacheEntry {
    pub fn new(tokens: FeatureMatrix) -> Result<Self, CacheError> {
        if tokens.rows() != COARSE_TOKENS_PER_FRAME {
            return Err(CacheError::NotCoarse(tokens.rows()));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &FeatureMatrix {
        &self.tokens
    }

    pub fn into_tokens(self) -> FeatureMatrix {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Debug, Clone, Copy)]
struct Location {
    offset: u64,
    len: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: usize,
    pub payload_bytes: u64,
    pub file_bytes: u64,
    pub per_episode: BTreeMap<String, usize>,
}

pub struct CacheStore {
    path: PathBuf,
    dim: usize,
    reader: File,
    writer: Mutex<(File, u64)>,
    index: RwLock<HashMap<CacheKey, Location>>,
}

impl fmt::Debug for CacheStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CacheStore").field("path", &self.path).field("dim", &self.dim).finish_non_exhaustive()
    }
}

fn payload_len(dim: usize) -> usize {
    COARSE_TOKENS_PER_FRAME * dim * 4
}

fn record_len(key_len: usize, dim: usize) -> usize {
    2 + key_len + 4 + 2 + payload_len(dim) + 4
}

/// True when `frag` is a complete, intact record except for its key length.
fn misframed_record(frag: &[u8], dim: usize) -> bool {
    let Some(key_len) = frag.len().checked_sub(record_len(0, dim)) else {
        return false;
    };
    let Ok(key_len) = u16::try_from(key_len) else {
        return false;
    };
    let (body, crc) = frag.split_at(frag.len() - 4);
    let mut h = crc32fast::Hasher::new();
    h.update(&key_len.to_le_bytes());
    h.update(&body[2..]);
    h.finalize() == u32::from_le_bytes(crc.try_into().unwrap())
}

impl CacheStore {
    /// Creates a new, empty store. Fails if the file already exists.
    pub fn create(path: impl AsRef<Path>, dim: usize) -> Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let mut f = OpenOptions::new().read(true).write(true).create_new(true).open(&path)?;
        let mut header = Vec::with_capacity(HEADER_LEN as usize);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        header.extend_from_slice(&(dim as u32).to_le_bytes());
        f.write_all(&header)?;
        f.sync_all()?;
        Self::open_expecting(path, dim)
    }

    /// Opens an existing store and checks its token dimension.
    pub fn open_expecting(path: impl AsRef<Path>, dim: usize) -> Result<Self, CacheError> {
        let store = Self::open(path)?;
        if store.dim != dim {
            return Err(CacheError::DimensionMismatch { stored: store.dim, expected: dim });
        }
        Ok(store)
    }

    /// Opens an existing store with whatever dimension its header declares.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let mut f = OpenOptions::new().read(true).write(true).open(&path)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        if bytes.len() < HEADER_LEN as usize || &bytes[..4] != MAGIC {
            return Err(CacheError::VersionMismatch("bad or truncated header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CacheError::VersionMismatch(format!("version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(CacheError::VersionMismatch("zero token dimension".into()));
        }

        let mut index = HashMap::new();
        let mut pos = HEADER_LEN as usize;
        let mut damaged: Option<usize> = None;
        let mut longest = 0;
        while pos + 2 <= bytes.len() {
            let key_len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
            let len = record_len(key_len, dim);
            if pos + len > bytes.len() {
                break;
            }
            let rec = &bytes[pos..pos + len];
            let (body, crc) = rec.split_at(len - 4);
            if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
                damaged.get_or_insert(pos);
            }
            let Ok(episode) = std::str::from_utf8(&rec[2..2 + key_len]) else {
                return Err(CacheError::Corrupt { offset: damaged.unwrap_or(pos) as u64 });
            };
            let t = u32::from_le_bytes(rec[2 + key_len..6 + key_len].try_into().unwrap());
            let camera = u16::from_le_bytes(rec[6 + key_len..8 + key_len].try_into().unwrap());
            index.insert(CacheKey::new(episode, t, camera), Location { offset: pos as u64, len });
            longest = longest.max(len);
            pos += len;
        }
        if pos < bytes.len() {
            // Only a short fragment left by an interrupted append is dropped.
            // Anything that could hold a whole record means a damaged length.
            let frag = bytes.len() - pos;
            if damaged.is_some() || (longest > 0 && frag >= longest) || misframed_record(&bytes[pos..], dim) {
                return Err(CacheError::Corrupt { offset: damaged.unwrap_or(pos) as u64 });
            }
        }
        let end = pos as u64;
        if end < bytes.len() as u64 {
            f.set_len(end)?;
        }
        f.seek(SeekFrom::Start(end))?;
        let reader = File::open(&path)?;
        Ok(Self { path, dim, reader, writer: Mutex::new((f, end)), index: RwLock::new(index) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.index.read().contains_key(key)
    }

    pub fn keys(&self) -> Vec<CacheKey> {
        let mut keys: Vec<CacheKey> = self.index.read().keys().cloned().collect();
        keys.sort();
        keys
    }

    pub fn put(&self, key: &CacheKey, entry: &CacheEntry) -> Result<(), CacheError> {
        if entry.dim() != self.dim {
            return Err(CacheError::DimensionMismatch { stored: self.dim, expected: entry.dim() });
        }
        let kb = key.episode.as_bytes();
        if kb.len() > u16::MAX as usize {
            return Err(CacheError::KeyTooLong(kb.len()));
        }
        let len = record_len(kb.len(), self.dim);
        let mut rec = Vec::with_capacity(len);
        rec.extend_from_slice(&(kb.len() as u16).to_le_bytes());
        rec.extend_from_slice(kb);
        rec.extend_from_slice(&key.t.to_le_bytes());
        rec.extend_from_slice(&key.camera.to_le_bytes());
        for x in entry.tokens.as_slice() {
            rec.extend_from_slice(&x.to_le_bytes());
        }
        let crc = crc32fast::hash(&rec);
        rec.extend_from_slice(&crc.to_le_bytes());

        let mut w = self.writer.lock();
        if self.contains(key) {
            return Err(CacheError::DuplicateKey(key.clone()));
        }
        let offset = w.1;
        w.0.write_all(&rec)?;
        w.0.flush()?;
        w.1 += len as u64;
        self.index.write().insert(key.clone(), Location { offset, len });
        Ok(())
    }

    pub fn get(&self, key: &CacheKey) -> Result<CacheEntry, CacheError> {
        let loc = *self.index.read().get(key).ok_or_else(|| CacheError::NotFound(key.clone()))?;
        let mut rec = vec![0u8; loc.len];
        self.reader.read_exact_at(&mut rec, loc.offset)?;
        let (body, crc) = rec.split_at(loc.len - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(CacheError::ChecksumFailure(key.clone()));
        }
        let payload = &body[body.len() - payload_len(self.dim)..];
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let tokens = FeatureMatrix::new(COARSE_TOKENS_PER_FRAME, self.dim, data).expect("payload sized by dim");
        CacheEntry::new(tokens)
    }

    /// Flushes appended records to stable storage.
    pub fn sync(&self) -> Result<(), CacheError> {
        self.writer.lock().0.sync_data()?;
        Ok(())
    }

    pub fn stats(&self) -> CacheStats {
        let index = self.index.read();
        let mut per_episode = BTreeMap::new();
        for key in index.keys() {
            *per_episode.entry(key.episode.clone()).or_insert(0) += 1;
        }
        let entries = index.len();
        drop(index);
        CacheStats {
            entries,
            payload_bytes: (entries * payload_len(self.dim)) as u64,
            file_bytes: self.writer.lock().1,
            per_episode,
        }
    }
}
