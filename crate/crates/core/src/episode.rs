//! JSONL episode files.
//!
//! An episode file holds one JSON object per line. The optional first line is
//! a header naming the episode and its rig:
//!
//! ```text
//! {"episode": "ep-001", "rig": [{"azimuth": 0.0, "hfov": 1.57, "height": 1.2}, ...]}
//! ```
//!
//! Every other line is one step:
//!
//! ```text
//! {"t": 1, "frames": [{"cam": 0, "data_ref": "cache:ep-001/1/0"}, ...], "text_len": 24}
//! ```
//!
//! Without a header the episode id is empty and the rig is `N` evenly spaced
//! cameras, `N` taken from the first step. Timesteps start at 1 and strictly
//! increase; every step carries exactly one frame per camera.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{CameraRig, CameraSpec, RigError};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: step t={t} {detail}")]
    RigMismatch { line: usize, t: u32, detail: String },
    #[error("line {line}: timestep {got} does not follow {prev}")]
    NonMonotonicTimestep { line: usize, prev: u32, got: u32 },
    #[error("line {line}: {source}")]
    InvalidRig { line: usize, source: RigError },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl EpisodeError {
    /// Line number for parse errors; 0 means the file had no records.
    pub fn parse_line(&self) -> Option<usize> {
        match self {
            Self::Parse { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub cam: usize,
    pub data_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub t: u32,
    pub frames: Vec<FrameRef>,
    pub text_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    episode: String,
    rig: Vec<CameraSpec>,
}

/// A validated episode: rig plus per-step frame references, ordered by
/// timestep with frames ordered by camera index.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStream {
    pub episode_id: String,
    pub rig: CameraRig,
    pub steps: Vec<EpisodeStep>,
}

impl EpisodeStream {
    pub fn frame_count(&self) -> usize {
        self.steps.iter().map(|s| s.frames.len()).sum()
    }

    pub fn latest_t(&self) -> Option<u32> {
        self.steps.last().map(|s| s.t)
    }

    /// Instruction length in tokens at the latest step.
    pub fn instruction_tokens(&self) -> usize {
        self.steps.last().map_or(0, |s| s.text_len)
    }

    pub fn step(&self, t: u32) -> Option<&EpisodeStep> {
        self.steps.binary_search_by_key(&t, |s| s.t).ok().map(|i| &self.steps[i])
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header = Header { episode: self.episode_id.clone(), rig: self.rig.cameras().to_vec() };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for step in &self.steps {
            serde_json::to_writer(&mut w, step)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

pub fn ingest_path(path: impl AsRef<Path>) -> Result<EpisodeStream, EpisodeError> {
    let file = File::open(path)?;
    ingest_episode(BufReader::new(file))
}

pub fn ingest_str(text: &str) -> Result<EpisodeStream, EpisodeError> {
    ingest_episode(text.as_bytes())
}

pub fn ingest_episode<R: BufRead>(reader: R) -> Result<EpisodeStream, EpisodeError> {
    let mut header: Option<(usize, Header)> = None;
    let mut steps: Vec<(usize, EpisodeStep)> = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(trimmed)
            .map_err(|e| EpisodeError::Parse { line: lineno, message: e.to_string() })?;
        let is_step = value.get("t").is_some();
        if !is_step {
            if header.is_some() || !steps.is_empty() {
                return Err(EpisodeError::Parse {
                    line: lineno,
                    message: "header must be the first record".into(),
                });
            }
            let h: Header = serde_json::from_value(value)
                .map_err(|e| EpisodeError::Parse { line: lineno, message: e.to_string() })?;
            header = Some((lineno, h));
            continue;
        }
        let step: EpisodeStep = serde_json::from_value(value)
            .map_err(|e| EpisodeError::Parse { line: lineno, message: e.to_string() })?;
        steps.push((lineno, step));
    }

    if steps.is_empty() {
        return Err(EpisodeError::Parse { line: 0, message: "episode has no steps".into() });
    }

    let (episode_id, rig) = match header {
        Some((line, h)) => {
            let rig = CameraRig::new(h.rig).map_err(|source| EpisodeError::InvalidRig { line, source })?;
            (h.episode, rig)
        }
        None => {
            let (line, first) = &steps[0];
            let rig = CameraRig::evenly_spaced(first.frames.len())
                .map_err(|source| EpisodeError::InvalidRig { line: *line, source })?;
            (String::new(), rig)
        }
    };

    let n = rig.len();
    let mut prev: Option<u32> = None;
    let mut out = Vec::with_capacity(steps.len());
    for (line, mut step) in steps {
        match prev {
            None if step.t != 1 => {
                return Err(EpisodeError::NonMonotonicTimestep { line, prev: 0, got: step.t })
            }
            Some(p) if step.t <= p => {
                return Err(EpisodeError::NonMonotonicTimestep { line, prev: p, got: step.t })
            }
            _ => {}
        }
        prev = Some(step.t);

        step.frames.sort_by_key(|f| f.cam);
        let cams: Vec<usize> = step.frames.iter().map(|f| f.cam).collect();
        if cams != (0..n).collect::<Vec<_>>() {
            let missing: Vec<usize> = (0..n).filter(|c| !cams.contains(c)).collect();
            let detail = if !missing.is_empty() {
                format!("is missing camera(s) {missing:?}")
            } else {
                format!("has cameras {cams:?}, rig has {n}")
            };
            return Err(EpisodeError::RigMismatch { line, t: step.t, detail });
        }
        out.push(step);
    }

    Ok(EpisodeStream { episode_id, rig, steps: out })
}
