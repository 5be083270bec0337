//! Turns frame references into pooled features.

use std::path::Path;

use navtoken_core::cache::{CacheKey, CacheStore};
use navtoken_core::organizer::{FeatureBank, PooledFrame};
use navtoken_core::sim::synthetic_grid;
use navtoken_core::types::{FeatureMatrix, PatchFeatureGrid, PATCHES_PER_FRAME};
use navtoken_core::wire::FeatureSourceKind;

use crate::error::ApiError;

const CACHE_PREFIX: &str = "cache:";

#[derive(Debug, Clone, PartialEq)]
pub enum DataRef<'a> {
    Cache(CacheKey),
    File(&'a Path),
}

pub fn parse_ref(s: &str) -> Result<DataRef<'_>, ApiError> {
    match s.strip_prefix(CACHE_PREFIX) {
        Some(key) => CacheKey::parse(key)
            .map(DataRef::Cache)
            .ok_or_else(|| ApiError::invalid(format!("bad cache reference {s:?}, expected cache:<episode>/<t>/<cam>"))),
        None => Ok(DataRef::File(Path::new(s))),
    }
}

/// Reads a raw little-endian `f32` patch grid of `576 x channels`.
pub fn read_grid(path: &Path, t: u32, camera: usize, channels: usize) -> Result<PatchFeatureGrid, ApiError> {
    let bytes = std::fs::read(path).map_err(|e| ApiError::invalid(format!("{}: {e}", path.display())))?;
    let expected = PATCHES_PER_FRAME * channels * 4;
    if bytes.len() != expected {
        return Err(ApiError::invalid(format!(
            "{}: {} bytes, a 576 x {channels} f32 grid has {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let grid = FeatureMatrix::new(PATCHES_PER_FRAME, channels, data)?;
    Ok(PatchFeatureGrid::new(t, camera, grid)?)
}

/// Frame-level loader shared by one-shot organize calls and sessions.
pub struct Loader<'a> {
    pub kind: FeatureSourceKind,
    pub seed: u64,
    pub channels: usize,
    pub cache: Option<&'a CacheStore>,
}

impl Loader<'_> {
    /// Pools one frame into `bank`. Fine tokens are kept only when `fine`.
    pub fn load(&self, bank: &mut FeatureBank, t: u32, camera: usize, data_ref: &str, fine: bool) -> Result<(), ApiError> {
        if self.kind == FeatureSourceKind::Synthetic {
            return Ok(bank.ingest_grid(&synthetic_grid(self.seed, t, camera, self.channels), fine)?);
        }
        match parse_ref(data_ref)? {
            DataRef::Cache(key) => {
                if fine {
                    return Err(ApiError::invalid(format!(
                        "t={t} camera {camera} is the latest frame and needs a full grid, not {data_ref}"
                    )));
                }
                let store = self.cache.ok_or_else(|| ApiError::not_found("the service has no feature cache"))?;
                let entry = store.get(&key)?;
                if entry.dim() != self.channels {
                    return Err(ApiError::invalid(format!("cache holds C={}, indicators use C={}", entry.dim(), self.channels)));
                }
                bank.insert(t, camera, PooledFrame { coarse: entry.into_tokens(), fine: None });
                Ok(())
            }
            DataRef::File(path) => Ok(bank.ingest_grid(&read_grid(path, t, camera, self.channels)?, fine)?),
        }
    }
}
