//! Grid pooling, channel fusion and token-sequence assembly.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bats::SamplePlan;
use crate::tvi::{tvi_token, TviError, TviParams};
use crate::types::{CameraRig, FeatureMatrix, PatchFeatureGrid, TaskMode, PATCHES_PER_FRAME, PATCH_GRID_SIDE};
use crate::{COARSE_TOKENS_PER_FRAME, FINE_TOKENS_PER_FRAME};

/// Bumped whenever the order of regions in a sequence changes.
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum OrganizerError {
    #[error("patch count mismatch: {left} vs {right}")]
    PatchCountMismatch { left: usize, right: usize },
    #[error("expected {expected} patches, got {got}")]
    BadPatchCount { expected: usize, got: usize },
    #[error("pool target {0} is not 64 or 4")]
    BadTarget(usize),
    #[error("no {kind} features for t={t}, camera {camera}")]
    MissingFeature { kind: &'static str, t: u32, camera: usize },
    #[error("{what} has {got} tokens, expected {expected}")]
    WrongTokenCount { what: String, expected: usize, got: usize },
    #[error("{what} has dimension {got}, indicators have {expected}")]
    DimensionMismatch { what: String, expected: usize, got: usize },
    #[error("plan is inconsistent: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Tvi(#[from] TviError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Indicator,
    VisualFine,
    VisualCoarse,
    Text,
    ActionSlot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Frame {
        #[serde(skip_serializing_if = "Option::is_none")]
        t: Option<u32>,
        #[serde(skip_serializing_if = "Option::is_none")]
        camera: Option<usize>,
        #[serde(skip_serializing_if = "Option::is_none")]
        image: Option<usize>,
        /// Pooled patch block; absent on indicators.
        #[serde(skip_serializing_if = "Option::is_none")]
        group: Option<usize>,
    },
    Text {
        index: usize,
    },
    Slot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub role: TokenRole,
    pub vector: Vec<f32>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub mode: TaskMode,
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn total_count(&self) -> usize {
        self.tokens.len()
    }

    /// Tokens before the first text token.
    pub fn visual_region_count(&self) -> usize {
        self.tokens.iter().filter(|t| matches!(t.role, TokenRole::Indicator | TokenRole::VisualFine | TokenRole::VisualCoarse)).count()
    }

    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout {
            layout_version: LAYOUT_VERSION,
            mode: self.mode,
            total_count: self.total_count(),
            counts: count_tokens(self),
            tokens: self.tokens.iter().map(|t| LayoutEntry { role: t.role, provenance: t.provenance.clone() }).collect(),
        }
    }

    /// Little-endian dump of roles and vectors; equal sequences give equal bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in &self.tokens {
            out.push(t.role as u8);
            out.extend_from_slice(&(t.vector.len() as u32).to_le_bytes());
            for x in &t.vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleCounts {
    pub indicator: usize,
    pub visual_fine: usize,
    pub visual_coarse: usize,
    pub text: usize,
    pub action_slot: usize,
}

impl RoleCounts {
    pub fn total(&self) -> usize {
        self.indicator + self.visual_fine + self.visual_coarse + self.text + self.action_slot
    }

    pub fn visual(&self) -> usize {
        self.indicator + self.visual_fine + self.visual_coarse
    }
}

pub fn count_tokens(seq: &TokenSequence) -> RoleCounts {
    let mut c = RoleCounts::default();
    for t in &seq.tokens {
        match t.role {
            TokenRole::Indicator => c.indicator += 1,
            TokenRole::VisualFine => c.visual_fine += 1,
            TokenRole::VisualCoarse => c.visual_coarse += 1,
            TokenRole::Text => c.text += 1,
            TokenRole::ActionSlot => c.action_slot += 1,
        }
    }
    c
}

/// Inspection view of a sequence without the vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub layout_version: u32,
    pub mode: TaskMode,
    pub total_count: usize,
    pub counts: RoleCounts,
    pub tokens: Vec<LayoutEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub role: TokenRole,
    pub provenance: Provenance,
}

/// Concatenates two feature sources patch by patch, `a` first.
pub fn fuse_channels(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<FeatureMatrix, OrganizerError> {
    if a.rows() != b.rows() {
        return Err(OrganizerError::PatchCountMismatch { left: a.rows(), right: b.rows() });
    }
    let cols = a.cols() + b.cols();
    let mut data = Vec::with_capacity(a.rows() * cols);
    for r in 0..a.rows() {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Ok(FeatureMatrix::new(a.rows(), cols, data).expect("shape computed above"))
}

/// Average-pools the 24×24 patch layout into `target` (64 or 4) tokens,
/// emitted in raster order of the pooling blocks.
pub fn grid_pool(grid: &FeatureMatrix, target: usize) -> Result<FeatureMatrix, OrganizerError> {
    if grid.rows() != PATCHES_PER_FRAME {
        return Err(OrganizerError::BadPatchCount { expected: PATCHES_PER_FRAME, got: grid.rows() });
    }
    let out_side = match target {
        FINE_TOKENS_PER_FRAME => 8,
        COARSE_TOKENS_PER_FRAME => 2,
        other => return Err(OrganizerError::BadTarget(other)),
    };
    let block = PATCH_GRID_SIDE / out_side;
    let c = grid.cols();
    let mut sums = vec![0f64; target * c];
    for py in 0..PATCH_GRID_SIDE {
        for px in 0..PATCH_GRID_SIDE {
            let cell = (py / block) * out_side + px / block;
            let row = grid.row(py * PATCH_GRID_SIDE + px);
            for (acc, v) in sums[cell * c..(cell + 1) * c].iter_mut().zip(row) {
                *acc += *v as f64;
            }
        }
    }
    let inv = 1.0 / (block * block) as f64;
    let data = sums.into_iter().map(|s| (s * inv) as f32).collect();
    Ok(FeatureMatrix::new(target, c, data).expect("shape computed above"))
}

/// Pooled tokens for one captured frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFrame {
    pub coarse: FeatureMatrix,
    pub fine: Option<FeatureMatrix>,
}

/// Supplies pooled tokens to the assemblers.
pub trait FeatureSource {
    fn coarse(&self, t: u32, camera: usize) -> Option<FeatureMatrix>;
    fn fine(&self, t: u32, camera: usize) -> Option<FeatureMatrix>;
}

/// In-memory pooled features keyed by `(t, camera)`.
#[derive(Debug, Clone, Default)]
pub struct FeatureBank {
    frames: HashMap<(u32, usize), PooledFrame>,
}

impl FeatureBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, t: u32, camera: usize, frame: PooledFrame) {
        self.frames.insert((t, camera), frame);
    }

    /// Pools a grid into both resolutions and stores them.
    pub fn ingest_grid(&mut self, grid: &PatchFeatureGrid, keep_fine: bool) -> Result<(), OrganizerError> {
        let coarse = grid_pool(grid.grid(), COARSE_TOKENS_PER_FRAME)?;
        let fine = if keep_fine { Some(grid_pool(grid.grid(), FINE_TOKENS_PER_FRAME)?) } else { None };
        self.insert(grid.t, grid.camera, PooledFrame { coarse, fine });
        Ok(())
    }

    /// Fine tokens are only needed for the latest step.
    pub fn drop_fine(&mut self, t: u32) {
        for ((ft, _), frame) in self.frames.iter_mut() {
            if *ft == t {
                frame.fine = None;
            }
        }
    }

    /// Moves every frame of `other` in, replacing frames already present.
    pub fn merge(&mut self, other: FeatureBank) {
        self.frames.extend(other.frames);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

impl FeatureSource for FeatureBank {
    fn coarse(&self, t: u32, camera: usize) -> Option<FeatureMatrix> {
        self.frames.get(&(t, camera)).map(|f| f.coarse.clone())
    }

    fn fine(&self, t: u32, camera: usize) -> Option<FeatureMatrix> {
        self.frames.get(&(t, camera)).and_then(|f| f.fine.clone())
    }
}

fn check_tokens(what: impl Fn() -> String, m: &FeatureMatrix, rows: usize, dim: usize) -> Result<(), OrganizerError> {
    if m.rows() != rows {
        return Err(OrganizerError::WrongTokenCount { what: what(), expected: rows, got: m.rows() });
    }
    if m.cols() != dim {
        return Err(OrganizerError::DimensionMismatch { what: what(), expected: dim, got: m.cols() });
    }
    Ok(())
}

fn push_visual(
    tokens: &mut Vec<Token>,
    role: TokenRole,
    m: &FeatureMatrix,
    t: Option<u32>,
    camera: Option<usize>,
    image: Option<usize>,
) {
    for (g, row) in m.iter_rows().enumerate() {
        tokens.push(Token {
            role,
            vector: row.to_vec(),
            provenance: Provenance::Frame { t, camera, image, group: Some(g) },
        });
    }
}

fn push_text(tokens: &mut Vec<Token>, text: &[Vec<f32>], dim: usize) -> Result<(), OrganizerError> {
    for (i, v) in text.iter().enumerate() {
        if v.len() != dim {
            return Err(OrganizerError::DimensionMismatch { what: format!("text token {i}"), expected: dim, got: v.len() });
        }
        tokens.push(Token { role: TokenRole::Text, vector: v.clone(), provenance: Provenance::Text { index: i } });
    }
    Ok(())
}

fn check_plan(plan: &SamplePlan) -> Result<(), OrganizerError> {
    if plan.latest == 0 {
        return Err(OrganizerError::PlanMismatch("latest timestep is 0".into()));
    }
    if plan.history.first() == Some(&0) {
        return Err(OrganizerError::PlanMismatch("timestep 0 in history".into()));
    }
    if plan.history.windows(2).any(|w| w[0] >= w[1]) {
        return Err(OrganizerError::PlanMismatch("history is not strictly ascending".into()));
    }
    if plan.history.last().is_some_and(|&t| t >= plan.latest) {
        return Err(OrganizerError::PlanMismatch("history reaches the latest timestep".into()));
    }
    Ok(())
}

/// Navigation layout: every kept historical frame (ascending `t`, cameras in
/// rig order) as indicator + 4 coarse tokens, then the latest frame per camera
/// as indicator + 64 fine tokens, then text, then one action slot.
pub fn assemble_navigation(
    plan: &SamplePlan,
    rig: &CameraRig,
    features: &impl FeatureSource,
    text: &[Vec<f32>],
    tvi: &TviParams,
) -> Result<TokenSequence, OrganizerError> {
    check_plan(plan)?;
    let dim = tvi.embed_dim;
    let n = rig.len();
    let mut tokens = Vec::with_capacity((5 * plan.history.len() + 65) * n + text.len() + 1);
    let mut time_terms: HashMap<u32, Vec<f32>> = HashMap::new();
    let angle_terms: Vec<Vec<f32>> = rig.cameras().iter().map(|c| tvi.angle_term(c.azimuth)).collect::<Result<_, _>>()?;

    let mut indicator = |t: u32, cam: usize| -> Result<Token, OrganizerError> {
        let time = match time_terms.get(&t) {
            Some(v) => v.clone(),
            None => {
                let v = tvi.time_term(t)?;
                time_terms.insert(t, v.clone());
                v
            }
        };
        let vector = tvi.base.iter().zip(&time).zip(&angle_terms[cam]).map(|((b, ti), a)| b + ti + a).collect();
        Ok(Token {
            role: TokenRole::Indicator,
            vector,
            provenance: Provenance::Frame { t: Some(t), camera: Some(cam), image: None, group: None },
        })
    };

    for &t in &plan.history {
        for cam in 0..n {
            let coarse = features.coarse(t, cam).ok_or(OrganizerError::MissingFeature { kind: "coarse", t, camera: cam })?;
            check_tokens(|| format!("coarse frame t={t} camera {cam}"), &coarse, COARSE_TOKENS_PER_FRAME, dim)?;
            tokens.push(indicator(t, cam)?);
            push_visual(&mut tokens, TokenRole::VisualCoarse, &coarse, Some(t), Some(cam), None);
        }
    }
    let latest = plan.latest;
    for cam in 0..n {
        let fine = features.fine(latest, cam).ok_or(OrganizerError::MissingFeature { kind: "fine", t: latest, camera: cam })?;
        check_tokens(|| format!("fine frame t={latest} camera {cam}"), &fine, FINE_TOKENS_PER_FRAME, dim)?;
        tokens.push(indicator(latest, cam)?);
        push_visual(&mut tokens, TokenRole::VisualFine, &fine, Some(latest), Some(cam), None);
    }
    push_text(&mut tokens, text, dim)?;
    tokens.push(Token { role: TokenRole::ActionSlot, vector: vec![0.0; dim], provenance: Provenance::Slot });
    Ok(TokenSequence { mode: TaskMode::Navigation, tokens })
}

/// Video QA layout: per frame (ascending `t`) a time-only indicator and 4
/// coarse tokens, then text.
pub fn assemble_video_qa(
    frames: &[(u32, FeatureMatrix)],
    text: &[Vec<f32>],
    tvi: &TviParams,
) -> Result<TokenSequence, OrganizerError> {
    let dim = tvi.embed_dim;
    let mut order: Vec<&(u32, FeatureMatrix)> = frames.iter().collect();
    order.sort_by_key(|(t, _)| *t);
    let mut tokens = Vec::new();
    for (t, coarse) in order {
        check_tokens(|| format!("video frame t={t}"), coarse, COARSE_TOKENS_PER_FRAME, dim)?;
        let ind = tvi_token(tvi, TaskMode::VideoQa, Some(*t), None)?;
        tokens.push(Token {
            role: TokenRole::Indicator,
            vector: ind.vector,
            provenance: Provenance::Frame { t: Some(*t), camera: None, image: None, group: None },
        });
        push_visual(&mut tokens, TokenRole::VisualCoarse, coarse, Some(*t), None, None);
    }
    push_text(&mut tokens, text, dim)?;
    Ok(TokenSequence { mode: TaskMode::VideoQa, tokens })
}

/// Image QA layout: per image a base-only indicator and 64 fine tokens, then text.
pub fn assemble_image_qa(
    images: &[FeatureMatrix],
    text: &[Vec<f32>],
    tvi: &TviParams,
) -> Result<TokenSequence, OrganizerError> {
    if images.is_empty() {
        return Err(OrganizerError::MissingFeature { kind: "image", t: 0, camera: 0 });
    }
    let dim = tvi.embed_dim;
    let mut tokens = Vec::new();
    for (i, fine) in images.iter().enumerate() {
        check_tokens(|| format!("image {i}"), fine, FINE_TOKENS_PER_FRAME, dim)?;
        let ind = tvi_token(tvi, TaskMode::ImageQa, None, None)?;
        tokens.push(Token {
            role: TokenRole::Indicator,
            vector: ind.vector,
            provenance: Provenance::Frame { t: None, camera: None, image: Some(i), group: None },
        });
        push_visual(&mut tokens, TokenRole::VisualFine, fine, None, None, Some(i));
    }
    push_text(&mut tokens, text, dim)?;
    Ok(TokenSequence { mode: TaskMode::ImageQa, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::CameraRig;

    fn matrix(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> FeatureMatrix {
        let data = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
        FeatureMatrix::new(rows, cols, data).unwrap()
    }

    fn bank(latest: u32, cams: usize, dim: usize) -> FeatureBank {
        let mut b = FeatureBank::new();
        for t in 1..=latest {
            for cam in 0..cams {
                let fine = (t == latest).then(|| matrix(64, dim, |r, c| (r + c) as f32));
                b.insert(t, cam, PooledFrame { coarse: matrix(4, dim, |r, _| r as f32 + t as f32), fine });
            }
        }
        b
    }

    #[test]
    fn fuse_shapes() {
        let a = matrix(4, 2, |r, c| (r * 10 + c) as f32);
        let b = matrix(4, 3, |r, c| -((r * 10 + c) as f32));
        let f = fuse_channels(&a, &b).unwrap();
        assert_eq!((f.rows(), f.cols()), (4, 5));
        assert_eq!(f.row(2), &[20.0, 21.0, -20.0, -21.0, -22.0]);
        assert_eq!(fuse_channels(&a, &FeatureMatrix::zeros(4, 0)).unwrap(), a);
        assert!(matches!(fuse_channels(&a, &FeatureMatrix::zeros(3, 1)), Err(OrganizerError::PatchCountMismatch { .. })));
    }

    #[test]
    fn pooling_constant_and_mean() {
        let g = matrix(576, 3, |_, _| 2.5);
        assert!(grid_pool(&g, 64).unwrap().as_slice().iter().all(|&v| v == 2.5));
        let g = matrix(576, 2, |r, c| ((r * 7 + c * 13) % 11) as f32);
        for target in [4, 64] {
            let p = grid_pool(&g, target).unwrap();
            let mean_in: f64 = g.as_slice().iter().map(|&v| v as f64).sum::<f64>() / g.as_slice().len() as f64;
            let mean_out: f64 = p.as_slice().iter().map(|&v| v as f64).sum::<f64>() / p.as_slice().len() as f64;
            assert!((mean_in - mean_out).abs() < 1e-5);
        }
        assert!(matches!(grid_pool(&g, 16), Err(OrganizerError::BadTarget(16))));
        assert!(matches!(grid_pool(&FeatureMatrix::zeros(10, 1), 4), Err(OrganizerError::BadPatchCount { .. })));
    }

    #[test]
    fn pooling_single_block_by_explicit_sum() {
        // A 3x3 patch block at rows 12..15, cols 0..3 set to 9: that block lies
        // entirely in the lower-left coarse cell (index 2).
        let g = matrix(576, 1, |r, _| {
            let (y, x) = (r / 24, r % 24);
            if (12..15).contains(&y) && x < 3 { 9.0 } else { 0.0 }
        });
        let p = grid_pool(&g, 4).unwrap();
        let mut oracle = [0f64; 4];
        for r in 0..576 {
            let (y, x) = (r / 24, r % 24);
            oracle[(y / 12) * 2 + x / 12] += g.row(r)[0] as f64;
        }
        for (i, o) in oracle.iter().enumerate() {
            assert!((p.row(i)[0] as f64 - o / 144.0).abs() < 1e-6);
        }
        assert!((p.row(2)[0] - 9.0 * 9.0 / 144.0).abs() < 1e-6);
    }

    #[test]
    fn navigation_counts() {
        let dim = 8;
        let tvi = TviParams::init(dim, 8, 0).unwrap();
        let rig = CameraRig::evenly_spaced(2).unwrap();
        let plan = SamplePlan::keep_all(10, 0);
        let seq = assemble_navigation(&plan, &rig, &bank(10, 2, dim), &[], &tvi).unwrap();
        assert_eq!(seq.visual_region_count(), 220);
        assert_eq!(seq.total_count(), 221);
        let c = count_tokens(&seq);
        assert_eq!(c, RoleCounts { indicator: 20, visual_fine: 128, visual_coarse: 72, text: 0, action_slot: 1 });

        let rig1 = CameraRig::evenly_spaced(1).unwrap();
        let text = vec![vec![0.5; dim]; 3];
        let seq = assemble_navigation(&SamplePlan::keep_all(1, 0), &rig1, &bank(1, 1, dim), &text, &tvi).unwrap();
        assert_eq!(seq.total_count(), 65 + 3 + 1);
        assert_eq!(seq.tokens.last().unwrap().role, TokenRole::ActionSlot);
    }

    #[test]
    fn navigation_missing_feature() {
        let tvi = TviParams::init(8, 8, 0).unwrap();
        let rig = CameraRig::evenly_spaced(3).unwrap();
        let err = assemble_navigation(&SamplePlan::keep_all(4, 0), &rig, &bank(4, 2, 8), &[], &tvi).unwrap_err();
        assert!(matches!(err, OrganizerError::MissingFeature { camera: 2, .. }));
        let bad = SamplePlan { history: vec![3, 2], latest: 4, seed: 0 };
        assert!(matches!(assemble_navigation(&bad, &rig, &bank(4, 3, 8), &[], &tvi), Err(OrganizerError::PlanMismatch(_))));
    }

    #[test]
    fn video_qa_layout() {
        let tvi = TviParams::init(8, 8, 1).unwrap();
        let frames: Vec<(u32, FeatureMatrix)> = [3, 1, 2].iter().map(|&t| (t, matrix(4, 8, |_, _| t as f32))).collect();
        let seq = assemble_video_qa(&frames, &vec![vec![0.0; 8]; 5], &tvi).unwrap();
        assert_eq!(seq.total_count(), 20);
        assert_eq!(count_tokens(&seq).action_slot, 0);
        let first = &seq.tokens[0];
        assert_eq!(first.provenance, Provenance::Frame { t: Some(1), camera: None, image: None, group: None });
        let expected: Vec<f32> = tvi.base.iter().zip(tvi.time_term(1).unwrap()).map(|(b, t)| b + t).collect();
        assert_eq!(first.vector, expected);
        let text_only = assemble_video_qa(&[], &vec![vec![0.0; 8]; 2], &tvi).unwrap();
        assert_eq!(text_only.total_count(), 2);
    }

    #[test]
    fn image_qa_layout() {
        let tvi = TviParams::init(8, 8, 1).unwrap();
        let img = matrix(64, 8, |r, _| r as f32);
        let seq = assemble_image_qa(std::slice::from_ref(&img), &vec![vec![0.0; 8]; 3], &tvi).unwrap();
        assert_eq!(seq.total_count(), 68);
        assert_eq!(seq.tokens[0].vector, tvi.base);
        let two = assemble_image_qa(&[img.clone(), img], &[], &tvi).unwrap();
        assert_eq!(two.total_count(), 130);
    }

    #[test]
    fn empty_sequence_counts() {
        let seq = TokenSequence { mode: TaskMode::VideoQa, tokens: vec![] };
        assert_eq!(count_tokens(&seq), RoleCounts::default());
    }
}
