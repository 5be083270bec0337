//! Request and response bodies of the HTTP service, shared by server and client.

use serde::{Deserialize, Serialize};

use crate::bats::{DecayTable, SamplePlan, SamplingCurve, DEFAULT_EPSILON};
use crate::episode::EpisodeStep;
use crate::metrics::{EpisodeMetrics, EpisodeResult, EvalConfig, MetricsReport};
use crate::organizer::{RoleCounts, SequenceLayout};
use crate::sim::Regime;
use crate::trajectory::{ScalingFactors, Trajectory};
use crate::tvi::{DEFAULT_EMBED_DIM, DEFAULT_PE_DIM};
use crate::types::{CameraSpec, EmbodimentKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    InvalidRequest,
    /// The budget cannot be met, or the curve has no solution and fallback
    /// was not allowed.
    InfeasibleBudget,
    NotFound,
    Conflict,
    Corrupt,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub cache: Option<String>,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub budget: u64,
    pub cameras: u32,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRequest {
    #[serde(flatten)]
    pub budget: BudgetSpec,
    pub latest: u32,
    /// Include `(t, P(t))` for every frame.
    #[serde(default)]
    pub points: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResponse {
    pub curve: SamplingCurve,
    pub max_history: usize,
    pub expected_frames: f64,
    pub history_mean: f64,
    pub history_sd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<(u32, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRequest {
    #[serde(flatten)]
    pub budget: BudgetSpec,
    pub max_latest: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableResponse {
    pub table: DecayTable,
    pub feasibility_boundary: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawRequest {
    #[serde(flatten)]
    pub budget: BudgetSpec,
    pub latest: u32,
    #[serde(default)]
    pub seed: u64,
    /// Sample at the floor and trim when the curve is infeasible, instead of
    /// failing.
    #[serde(default = "yes")]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawResponse {
    pub plan: SamplePlan,
    pub regime: Regime,
    pub trimmed: usize,
    pub visual_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TviSpec {
    pub embed_dim: usize,
    pub pe_dim: usize,
    pub seed: u64,
}

impl Default for TviSpec {
    fn default() -> Self {
        Self { embed_dim: DEFAULT_EMBED_DIM, pe_dim: DEFAULT_PE_DIM, seed: 0 }
    }
}

/// How frame `data_ref`s turn into features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSourceKind {
    /// `cache:<episode>/<t>/<cam>` reads coarse tokens from the service
    /// cache; anything else is a path to a raw little-endian `f32` grid of
    /// `576 x C`.
    #[default]
    Refs,
    /// Seeded pseudo-random grids; `data_ref`s are ignored.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganizeRequest {
    /// Episode in its JSONL file form.
    pub episode: String,
    /// Plan to lay out. Without one, a plan for the last step is drawn from
    /// `budget`.
    #[serde(default)]
    pub plan: Option<SamplePlan>,
    #[serde(default)]
    pub budget: Option<BudgetSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tvi: TviSpec,
    #[serde(default)]
    pub features: FeatureSourceKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganizeResponse {
    pub plan: SamplePlan,
    pub layout: SequenceLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub episodes: Vec<EpisodeResult>,
    #[serde(default)]
    pub config: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResponse {
    pub report: MetricsReport,
    pub episodes: Vec<EpisodeMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitAlphaRequest {
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitAlphaRow {
    pub embodiment: EmbodimentKind,
    pub trajectories: usize,
    pub fitted: ScalingFactors,
    pub reference: ScalingFactors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitAlphaResponse {
    pub rows: Vec<FitAlphaRow>,
}

/// Coarse tokens as four rows of `C` floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheTokens {
    pub tokens: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub rig: Vec<CameraSpec>,
    pub budget: u64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tvi: TviSpec,
    #[serde(default)]
    pub features: FeatureSourceKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: u64,
}

pub type StepRequest = EpisodeStep;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    pub plan: SamplePlan,
    pub regime: Regime,
    pub visual_tokens: u64,
    pub total_tokens: u64,
    pub counts: RoleCounts,
    pub assemble_us: f64,
}
