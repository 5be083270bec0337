//! Synthetic streaming episodes: per step, capture one frame per camera, pick
//! the frames to keep with a sampling strategy, assemble the navigation
//! sequence and record token counts and assembly time.

use std::io;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bats::{self, BatsError, DecayRate, DecayTable, SamplePlan, SamplingCurve};
use crate::organizer::{assemble_navigation, FeatureBank, OrganizerError};
use crate::tvi::{TviError, TviParams, DEFAULT_EMBED_DIM, DEFAULT_PE_DIM};
use crate::types::{CameraRig, FeatureMatrix, PatchFeatureGrid, PATCHES_PER_FRAME};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Budget(#[from] BatsError),
    #[error(transparent)]
    Organizer(#[from] OrganizerError),
    #[error(transparent)]
    Tvi(#[from] TviError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Bats,
    /// Evenly spaced history frames.
    Uniform,
    /// Keep probability proportional to `t`.
    Linear,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bats" => Ok(Self::Bats),
            "uniform" => Ok(Self::Uniform),
            "linear" => Ok(Self::Linear),
            other => Err(format!("unknown strategy {other:?} (bats, uniform, linear)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub t_max: u32,
    pub cameras: u32,
    pub budget: u64,
    pub epsilon: f64,
    pub embed_dim: usize,
    pub pe_dim: usize,
    pub seed: u64,
    pub strategy: Strategy,
    /// Instruction length in tokens, appended after the visual region.
    pub text_tokens: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            t_max: 300,
            cameras: 4,
            budget: 1600,
            epsilon: bats::DEFAULT_EPSILON,
            embed_dim: DEFAULT_EMBED_DIM,
            pe_dim: DEFAULT_PE_DIM,
            seed: 0,
            strategy: Strategy::Bats,
            text_tokens: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.t_max == 0 {
            return Err(SimError::Config("t_max must be at least 1".into()));
        }
        if self.cameras == 0 || self.cameras > u16::MAX as u32 {
            return Err(SimError::Config(format!("camera count {} out of range", self.cameras)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(SimError::Config(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        if self.embed_dim == 0 || self.pe_dim == 0 || self.pe_dim % 4 != 0 {
            return Err(SimError::Config("embed_dim must be positive and pe_dim a multiple of 4".into()));
        }
        bats::budget_cap(self.budget, self.cameras)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// The whole history fits the budget.
    KeepAll,
    Sampled,
    /// The curve was infeasible; sampled at the floor then trimmed.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: u32,
    pub regime: Regime,
    /// Kept timesteps, latest included, ascending.
    pub kept: Vec<u32>,
    pub visual_tokens: u64,
    pub total_tokens: u64,
    /// Oldest frames removed to enforce the budget.
    pub trimmed: usize,
    /// Predicted mean and standard deviation of kept history frames, for
    /// sampled BATS steps.
    pub predicted_history: Option<(f64, f64)>,
    pub assemble_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub steps: usize,
    pub max_visual_tokens: u64,
    pub mean_visual_tokens: f64,
    pub first_over_budget: Option<u32>,
    pub band_checked: usize,
    /// Sampled steps whose kept history fell outside mean ± 3σ.
    pub band_violations: usize,
    pub mean_assemble_us: f64,
    pub p95_assemble_us: f64,
    /// Coefficient of variation of assembly time after the first over-budget step.
    pub assemble_cv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRun {
    pub config: SimConfig,
    pub traces: Vec<StepTrace>,
    pub summary: SimSummary,
}

/// Derives an independent per-step seed (splitmix64 finaliser).
pub fn step_seed(seed: u64, t: u32) -> u64 {
    let mut z = seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded synthetic encoder output for one frame.
pub fn synthetic_grid(seed: u64, t: u32, camera: usize, channels: usize) -> PatchFeatureGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(seed ^ ((camera as u64) << 40), t));
    let data = (0..PATCHES_PER_FRAME * channels).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let m = FeatureMatrix::new(PATCHES_PER_FRAME, channels, data).expect("sized above");
    PatchFeatureGrid::new(t, camera, m).expect("finite synthetic values")
}

fn uniform_history(latest: u32, count: usize) -> Vec<u32> {
    let span = latest - 1;
    match count {
        0 => vec![],
        1 => vec![span],
        n => (0..n)
            .map(|i| 1 + (i as f64 * (span - 1) as f64 / (n - 1) as f64).round() as u32)
            .collect(),
    }
}

/// Slope `c` with `sum_{t < latest} min(1, c t) = cap`.
fn linear_slope(latest: u32, cap: f64) -> f64 {
    let sum = |c: f64| (1..latest).map(|t| (c * t as f64).min(1.0)).sum::<f64>();
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sum(mid) < cap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Comparison strategies. `cap` is the number of history frames to keep
/// (uniform) or to keep in expectation (linear); the latest frame is always
/// added on top.
pub fn baseline_plan(strategy: Strategy, latest: u32, cap: f64, seed: u64) -> Result<SamplePlan, SimError> {
    if latest == 0 {
        return Err(SimError::Config("latest timestep must be at least 1".into()));
    }
    if !(cap >= 1.0) {
        return Err(SimError::Config(format!("baseline cap {cap} must be at least 1")));
    }
    if cap >= (latest - 1) as f64 {
        return Ok(SamplePlan::keep_all(latest, seed));
    }
    let history = match strategy {
        Strategy::Bats => return Err(SimError::Config("bats is not a baseline strategy".into())),
        Strategy::Uniform => uniform_history(latest, cap.floor() as usize),
        Strategy::Linear => {
            let c = linear_slope(latest, cap);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (1..latest).filter(|&t| rng.gen::<f64>() < (c * t as f64).min(1.0)).collect()
        }
    };
    Ok(SamplePlan { history, latest, seed })
}

fn percentile(values: &[f64], pct: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    crate::trajectory::percentile_sorted(&v, pct)
}

/// A budget-enforced plan for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub plan: SamplePlan,
    pub regime: Regime,
    /// Oldest frames removed to enforce the budget.
    pub trimmed: usize,
    /// Mean and standard deviation of the kept history count, when sampled.
    pub predicted_history: Option<(f64, f64)>,
}

/// Keeps everything while it fits, samples from the curve otherwise, and
/// trims to the budget. An infeasible curve is sampled at its floor when
/// `fallback` is set and is an error otherwise.
pub fn bats_step(curve: &SamplingCurve, seed: u64, fallback: bool) -> Result<StepPlan, BatsError> {
    let max_history = bats::max_history_frames(curve.budget, curve.cameras)?;
    let mut predicted_history = None;
    let (regime, plan) = if (curve.latest - 1) as usize <= max_history {
        (Regime::KeepAll, SamplePlan::keep_all(curve.latest, seed))
    } else {
        match curve.rate {
            DecayRate::Infeasible if fallback => (Regime::Fallback, bats::draw_plan_at_floor(curve, seed)),
            _ => {
                let plan = bats::draw_plan(curve, seed)?;
                let (m, v) = curve.history_moments();
                predicted_history = Some((m, v.sqrt()));
                (Regime::Sampled, plan)
            }
        }
    };
    let trimmed_plan = bats::trim_plan(&plan, curve.budget, curve.cameras)?;
    Ok(StepPlan {
        trimmed: plan.history.len() - trimmed_plan.history.len(),
        plan: trimmed_plan,
        regime,
        predicted_history,
    })
}

/// Runs one synthetic episode. Everything but the timings is a pure function
/// of the configuration.
pub fn simulate(cfg: &SimConfig) -> Result<SimRun, SimError> {
    cfg.validate()?;
    let n = cfg.cameras as usize;
    let rig = CameraRig::evenly_spaced(n).map_err(|e| SimError::Config(e.to_string()))?;
    let tvi = TviParams::init(cfg.embed_dim, cfg.pe_dim, cfg.seed)?;
    let cap = bats::budget_cap(cfg.budget, cfg.cameras)?;
    let max_history = cap.floor() as usize;
    let table: Option<DecayTable> = match cfg.strategy {
        Strategy::Bats => Some(bats::precompute_table(cfg.budget, cfg.cameras, cfg.epsilon, cfg.t_max)?),
        _ => None,
    };
    let text: Vec<Vec<f32>> = vec![vec![0.0; cfg.embed_dim]; cfg.text_tokens];

    let mut bank = FeatureBank::new();
    let mut traces = Vec::with_capacity(cfg.t_max as usize);
    for latest in 1..=cfg.t_max {
        if latest > 1 {
            bank.drop_fine(latest - 1);
        }
        for cam in 0..n {
            bank.ingest_grid(&synthetic_grid(cfg.seed, latest, cam, cfg.embed_dim), true)?;
        }

        let seed = step_seed(cfg.seed, latest);
        let step = match &table {
            Some(table) => bats_step(&table.curve(latest).expect("table covers t_max"), seed, true)?,
            None => {
                let (regime, plan) = if (latest - 1) as usize <= max_history {
                    (Regime::KeepAll, SamplePlan::keep_all(latest, seed))
                } else if cfg.strategy == Strategy::Uniform {
                    (Regime::Sampled, baseline_plan(Strategy::Uniform, latest, max_history as f64, seed)?)
                } else {
                    (Regime::Sampled, baseline_plan(Strategy::Linear, latest, cap, seed)?)
                };
                let trimmed_plan = bats::trim_plan(&plan, cfg.budget, cfg.cameras)?;
                StepPlan { trimmed: plan.history.len() - trimmed_plan.history.len(), plan: trimmed_plan, regime, predicted_history: None }
            }
        };
        let StepPlan { plan: trimmed_plan, regime, trimmed, predicted_history: predicted } = step;

        let start = Instant::now();
        let seq = assemble_navigation(&trimmed_plan, &rig, &bank, &text, &tvi)?;
        let assemble_us = start.elapsed().as_secs_f64() * 1e6;

        traces.push(StepTrace {
            t: latest,
            regime,
            kept: trimmed_plan.frames().collect(),
            visual_tokens: seq.visual_region_count() as u64,
            total_tokens: seq.total_count() as u64,
            trimmed,
            predicted_history: predicted,
            assemble_us,
        });
    }

    let summary = summarize(&traces);
    Ok(SimRun { config: cfg.clone(), traces, summary })
}

pub fn summarize(traces: &[StepTrace]) -> SimSummary {
    let steps = traces.len();
    let max_visual_tokens = traces.iter().map(|t| t.visual_tokens).max().unwrap_or(0);
    let mean_visual_tokens = traces.iter().map(|t| t.visual_tokens as f64).sum::<f64>() / steps.max(1) as f64;
    let first_over_budget = traces.iter().find(|t| t.regime != Regime::KeepAll).map(|t| t.t);
    let mut band_checked = 0;
    let mut band_violations = 0;
    for tr in traces {
        if let Some((mean, sd)) = tr.predicted_history {
            band_checked += 1;
            let h = (tr.kept.len() - 1) as f64;
            // Trimming only lowers the count to the budget ceiling.
            if h + tr.trimmed as f64 > mean + 3.0 * sd + 1e-9 || h < mean - 3.0 * sd - 1e-9 {
                band_violations += 1;
            }
        }
    }
    let times: Vec<f64> = traces.iter().map(|t| t.assemble_us).collect();
    let mean_assemble_us = times.iter().sum::<f64>() / steps.max(1) as f64;
    let late: Vec<f64> = match first_over_budget {
        Some(t0) => traces.iter().filter(|t| t.t >= t0).map(|t| t.assemble_us).collect(),
        None => vec![],
    };
    let assemble_cv = (late.len() > 1).then(|| {
        let m = late.iter().sum::<f64>() / late.len() as f64;
        let var = late.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (late.len() - 1) as f64;
        var.sqrt() / m
    });
    SimSummary {
        steps,
        max_visual_tokens,
        mean_visual_tokens,
        first_over_budget,
        band_checked,
        band_violations,
        mean_assemble_us,
        p95_assemble_us: percentile(&times, 95.0),
        assemble_cv,
    }
}

/// CSV with one row per step: `t,regime,kept_frames,visual_tokens,total_tokens,trimmed,assemble_us`.
pub fn write_trace_csv<W: io::Write>(traces: &[StepTrace], w: W) -> Result<(), SimError> {
    if traces.is_empty() {
        return Err(SimError::Config("no traces to report".into()));
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "regime", "kept_frames", "visual_tokens", "total_tokens", "trimmed", "assemble_us"])?;
    for tr in traces {
        let regime = match tr.regime {
            Regime::KeepAll => "keep_all",
            Regime::Sampled => "sampled",
            Regime::Fallback => "fallback",
        };
        out.write_record([
            tr.t.to_string(),
            regime.to_string(),
            tr.kept.len().to_string(),
            tr.visual_tokens.to_string(),
            tr.total_tokens.to_string(),
            tr.trimmed.to_string(),
            format!("{:.3}", tr.assemble_us),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_run_json<W: io::Write>(run: &SimRun, w: W) -> Result<(), SimError> {
    if run.traces.is_empty() {
        return Err(SimError::Config("no traces to report".into()));
    }
    serde_json::to_writer_pretty(w, run).map_err(io::Error::from)?;
    Ok(())
}

pub fn read_run_json<R: io::Read>(r: R) -> Result<SimRun, SimError> {
    Ok(serde_json::from_reader(r).map_err(io::Error::from)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_spacing() {
        let p = baseline_plan(Strategy::Uniform, 11, 5.0, 0).unwrap();
        assert_eq!(p.history, vec![1, 3, 6, 8, 10]);
        assert_eq!(p.latest, 11);
        let all = baseline_plan(Strategy::Uniform, 11, 10.0, 0).unwrap();
        assert_eq!(all, SamplePlan::keep_all(11, 0));
        assert_eq!(baseline_plan(Strategy::Uniform, 11, 1.0, 0).unwrap().history, vec![10]);
    }

    #[test]
    fn baseline_rejects_bad_input() {
        assert!(matches!(baseline_plan(Strategy::Uniform, 11, 0.5, 0), Err(SimError::Config(_))));
        assert!(matches!(baseline_plan(Strategy::Bats, 11, 3.0, 0), Err(SimError::Config(_))));
    }

    #[test]
    fn linear_slope_meets_cap() {
        for (latest, cap) in [(100, 20.0), (100, 80.0), (30, 28.5)] {
            let c = linear_slope(latest, cap);
            let s: f64 = (1..latest).map(|t| (c * t as f64).min(1.0)).sum();
            assert!((s - cap).abs() < 1e-9, "{latest} {cap} {s}");
        }
    }

    #[test]
    fn short_runs_keep_everything() {
        for strategy in [Strategy::Bats, Strategy::Uniform, Strategy::Linear] {
            let cfg = SimConfig { t_max: 40, cameras: 2, budget: 2048, embed_dim: 8, pe_dim: 8, strategy, ..Default::default() };
            let run = simulate(&cfg).unwrap();
            for tr in &run.traces {
                assert_eq!(tr.kept, (1..=tr.t).collect::<Vec<_>>());
                assert_eq!(tr.regime, Regime::KeepAll);
            }
            assert_eq!(run.summary.first_over_budget, None);
        }
    }

    #[test]
    fn config_errors() {
        let cfg = SimConfig { budget: 100, ..Default::default() };
        assert!(matches!(simulate(&cfg), Err(SimError::Budget(BatsError::BudgetTooSmall { .. }))));
        let cfg = SimConfig { t_max: 0, ..Default::default() };
        assert!(matches!(simulate(&cfg), Err(SimError::Config(_))));
    }

    #[test]
    fn reports() {
        let cfg = SimConfig { t_max: 3, cameras: 1, embed_dim: 8, pe_dim: 8, ..Default::default() };
        let run = simulate(&cfg).unwrap();
        let mut csv = Vec::new();
        write_trace_csv(&run.traces, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 4);
        let mut json = Vec::new();
        write_run_json(&run, &mut json).unwrap();
        assert_eq!(read_run_json(json.as_slice()).unwrap(), run);
        assert!(run.summary.p95_assemble_us >= 0.0);
        assert!(write_trace_csv(&[], Vec::new()).is_err());
    }
}
