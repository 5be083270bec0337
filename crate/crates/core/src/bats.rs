//! Budget-aware temporal sampling.
//!
//! Historical frame `t` of a stream whose latest step is `T` is kept with
//! probability
//!
//! ```text
//! P(t) = (1 - eps) * exp(k (t - T) / T) + eps
//! ```
//!
//! The decay rate `k` is solved per `T` so that the expected number of
//! retained frames, `(1 - eps) (1 - e^-k) / k * T + eps * T`, meets the frame
//! cap implied by the token budget: every kept historical frame costs
//! `4 + 1` tokens per camera and the latest frame costs `64 + 1`.

use std::collections::BTreeSet;
use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{COARSE_TOKENS_PER_FRAME, FINE_TOKENS_PER_FRAME};

pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_TOLERANCE: f64 = 1e-9;

/// Initial bracket on the decay rate.
pub const K_MIN: f64 = 1e-6;
pub const K_MAX: f64 = 1e3;
/// The upper end is only widened past `K_MAX` when the cap sits on the
/// feasibility boundary, where the root runs off to infinity.
const K_CEILING: f64 = 1e18;
const MAX_ITERATIONS: usize = 500;

/// Tokens one historical frame costs per camera (coarse tokens plus indicator).
pub const HISTORY_FRAME_COST: u64 = COARSE_TOKENS_PER_FRAME as u64 + 1;
/// Tokens the latest frame costs per camera (fine tokens plus indicator).
pub const LATEST_FRAME_COST: u64 = FINE_TOKENS_PER_FRAME as u64 + 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BatsError {
    #[error("token budget {budget} cannot hold the latest frame of {cameras} camera(s) (needs more than {needed})")]
    BudgetTooSmall { budget: u64, cameras: u32, needed: u64 },
    #[error("decay-rate solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("no decay rate meets the budget at T={latest}; trim the oldest frames instead")]
    InfeasibleCurve { latest: u32 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Visual tokens for `history` kept historical frames plus the latest frame.
pub fn visual_tokens(history: usize, cameras: usize) -> u64 {
    (HISTORY_FRAME_COST * history as u64 + LATEST_FRAME_COST) * cameras as u64
}

/// Largest expected frame count the budget admits: `(B - 65N) / (5N)`.
pub fn budget_cap(budget: u64, cameras: u32) -> Result<f64, BatsError> {
    if cameras == 0 {
        return Err(BatsError::InvalidArgument("camera count must be positive".into()));
    }
    let needed = LATEST_FRAME_COST * cameras as u64;
    if budget <= needed {
        return Err(BatsError::BudgetTooSmall { budget, cameras, needed });
    }
    Ok((budget - needed) as f64 / (HISTORY_FRAME_COST * cameras as u64) as f64)
}

/// Largest number of historical frames whose tokens always fit the budget.
pub fn max_history_frames(budget: u64, cameras: u32) -> Result<usize, BatsError> {
    Ok(budget_cap(budget, cameras)?.floor() as usize)
}

/// `(1 - e^-k) / k`, continuous at zero.
fn retention_fraction(k: f64) -> f64 {
    if k == 0.0 {
        1.0
    } else if k.is_infinite() {
        0.0
    } else {
        -(-k).exp_m1() / k
    }
}

/// Closed-form integral of the sampling curve over `[0, T]`.
pub fn expected_frames(k: f64, latest: u32, epsilon: f64) -> f64 {
    let t = latest as f64;
    (1.0 - epsilon) * retention_fraction(k) * t + epsilon * t
}

/// Keep probability of frame `t` at latest step `latest`. `k = inf` gives the
/// floor curve: `eps` everywhere except the latest frame.
pub fn sampling_probability(t: u32, latest: u32, k: f64, epsilon: f64) -> f64 {
    if t >= latest {
        return 1.0;
    }
    if k.is_infinite() {
        return epsilon;
    }
    let x = k * (t as f64 - latest as f64) / latest as f64;
    (1.0 - epsilon) * x.exp() + epsilon
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "k", rename_all = "snake_case")]
pub enum DecayRate {
    Feasible(f64),
    /// Every frame fits, so nothing is sampled.
    NoSamplingNeeded,
    /// Even the probability floor overshoots the cap.
    Infeasible,
}

impl DecayRate {
    pub fn k(self) -> Option<f64> {
        match self {
            Self::Feasible(k) => Some(k),
            _ => None,
        }
    }

    pub fn is_infeasible(self) -> bool {
        matches!(self, Self::Infeasible)
    }
}

/// Brent's method on a bracket where `f(a)` and `f(b)` differ in sign.
/// Stops once `|f(x)| <= ftol`.
fn brent_root(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, ftol: f64) -> Result<f64, BatsError> {
    let mut fa = f(a);
    let mut fb = f(b);
    if fa.abs() <= ftol {
        return Ok(a);
    }
    if fb.abs() <= ftol {
        return Ok(b);
    }
    debug_assert!(fa * fb < 0.0, "root not bracketed");
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..MAX_ITERATIONS {
        if fb * fc > 0.0 {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs();
        let xm = 0.5 * (c - b);
        if fb.abs() <= ftol {
            return Ok(b);
        }
        if xm.abs() <= tol1 {
            // Bracket exhausted at machine precision.
            return if fb.abs() <= ftol * 16.0 {
                Ok(b)
            } else {
                Err(BatsError::NonConvergence { iterations: MAX_ITERATIONS, residual: fb })
            };
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        fb = f(b);
    }
    Err(BatsError::NonConvergence { iterations: MAX_ITERATIONS, residual: fb })
}

fn check_epsilon(epsilon: f64) -> Result<(), BatsError> {
    if epsilon > 0.0 && epsilon < 1.0 {
        Ok(())
    } else {
        Err(BatsError::InvalidArgument(format!("epsilon {epsilon} outside (0, 1)")))
    }
}

/// Solve for the decay rate that makes the expected frame count equal the
/// budget cap at latest step `latest`.
pub fn solve_decay_rate(
    latest: u32,
    cameras: u32,
    budget: u64,
    epsilon: f64,
    tol: f64,
) -> Result<DecayRate, BatsError> {
    let cap = budget_cap(budget, cameras)?;
    solve_for_cap(latest, cap, epsilon, tol)
}

pub(crate) fn solve_for_cap(latest: u32, cap: f64, epsilon: f64, tol: f64) -> Result<DecayRate, BatsError> {
    check_epsilon(epsilon)?;
    if latest == 0 {
        return Err(BatsError::InvalidArgument("latest timestep must be >= 1".into()));
    }
    if !(tol > 0.0) {
        return Err(BatsError::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    let t = latest as f64;
    if cap >= t {
        return Ok(DecayRate::NoSamplingNeeded);
    }
    // On the boundary itself (eps*T == cap) the root is at k -> inf; it is
    // still reachable within tolerance by widening the bracket.
    if epsilon * t - cap > 0.5 * tol {
        return Ok(DecayRate::Infeasible);
    }
    let f = |k: f64| expected_frames(k, latest, epsilon) - cap;
    let lo = K_MIN;
    if f(lo) <= tol {
        return Ok(DecayRate::Feasible(lo));
    }
    let mut hi = K_MAX;
    while f(hi) > tol && hi < K_CEILING {
        hi *= 10.0;
    }
    let k = brent_root(f, lo, hi, tol)?;
    Ok(DecayRate::Feasible(k))
}

/// A solved forgetting curve for one latest timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingCurve {
    pub latest: u32,
    pub cameras: u32,
    pub budget: u64,
    pub epsilon: f64,
    pub cap: f64,
    pub rate: DecayRate,
}

impl SamplingCurve {
    pub fn solve(latest: u32, cameras: u32, budget: u64, epsilon: f64) -> Result<Self, BatsError> {
        let cap = budget_cap(budget, cameras)?;
        let rate = solve_for_cap(latest, cap, epsilon, DEFAULT_TOLERANCE)?;
        Ok(Self { latest, cameras, budget, epsilon, cap, rate })
    }

    /// Keep probability for frame `t`. No-sampling curves keep everything;
    /// infeasible curves sit on the `eps` floor.
    pub fn probability(&self, t: u32) -> f64 {
        match self.rate {
            DecayRate::Feasible(k) => sampling_probability(t, self.latest, k, self.epsilon),
            DecayRate::NoSamplingNeeded => 1.0,
            DecayRate::Infeasible => sampling_probability(t, self.latest, f64::INFINITY, self.epsilon),
        }
    }

    pub fn expected_frames(&self) -> f64 {
        match self.rate {
            DecayRate::Feasible(k) => expected_frames(k, self.latest, self.epsilon),
            DecayRate::NoSamplingNeeded => self.latest as f64,
            DecayRate::Infeasible => self.epsilon * self.latest as f64,
        }
    }

    /// Mean and variance of the number of kept historical frames under
    /// independent Bernoulli draws.
    pub fn history_moments(&self) -> (f64, f64) {
        (1..self.latest).map(|t| self.probability(t)).fold((0.0, 0.0), |(m, v), p| (m + p, v + p * (1.0 - p)))
    }

    /// `(t, P(t))` for every frame up to the latest.
    pub fn points(&self) -> Vec<(u32, f64)> {
        (1..=self.latest).map(|t| (t, self.probability(t))).collect()
    }
}

/// Frames retained at one inference step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    /// Kept historical timesteps, strictly ascending, all below `latest`.
    pub history: Vec<u32>,
    pub latest: u32,
    pub seed: u64,
}

impl SamplePlan {
    pub fn keep_all(latest: u32, seed: u64) -> Self {
        Self { history: (1..latest).collect(), latest, seed }
    }

    /// History plus the latest frame, ascending.
    pub fn frames(&self) -> impl Iterator<Item = u32> + '_ {
        self.history.iter().copied().chain(std::iter::once(self.latest))
    }

    pub fn frame_count(&self) -> usize {
        self.history.len() + 1
    }

    pub fn visual_tokens(&self, cameras: usize) -> u64 {
        visual_tokens(self.history.len(), cameras)
    }

    /// Builds a plan from any kept set; the largest element is the latest frame.
    pub fn from_frames(frames: &BTreeSet<u32>, seed: u64) -> Option<Self> {
        let latest = *frames.iter().next_back()?;
        Some(Self { history: frames.range(..latest).copied().collect(), latest, seed })
    }
}

/// Independently keeps each historical frame with its curve probability.
pub fn draw_plan(curve: &SamplingCurve, seed: u64) -> Result<SamplePlan, BatsError> {
    if curve.rate.is_infeasible() {
        return Err(BatsError::InfeasibleCurve { latest: curve.latest });
    }
    Ok(bernoulli_plan(curve, seed))
}

/// Draws with the curve's probabilities even when it is infeasible (floor
/// probability `eps`). The result may exceed the cap and must go through
/// [`fallback_trim`].
pub fn draw_plan_at_floor(curve: &SamplingCurve, seed: u64) -> SamplePlan {
    bernoulli_plan(curve, seed)
}

fn bernoulli_plan(curve: &SamplingCurve, seed: u64) -> SamplePlan {
    if matches!(curve.rate, DecayRate::NoSamplingNeeded) {
        return SamplePlan::keep_all(curve.latest, seed);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let history = (1..curve.latest).filter(|&t| rng.gen::<f64>() < curve.probability(t)).collect();
    SamplePlan { history, latest: curve.latest, seed }
}

/// Drops the oldest frames until at most `cap_frames` remain. The newest
/// frame always survives, even with `cap_frames == 0`.
pub fn fallback_trim(kept: &BTreeSet<u32>, cap_frames: usize) -> BTreeSet<u32> {
    let keep = cap_frames.max(1);
    if kept.len() <= keep {
        return kept.clone();
    }
    kept.iter().rev().take(keep).copied().collect()
}

/// Trims a plan's history so its visual tokens fit `budget`.
pub fn trim_plan(plan: &SamplePlan, budget: u64, cameras: u32) -> Result<SamplePlan, BatsError> {
    let max_history = max_history_frames(budget, cameras)?;
    let frames: BTreeSet<u32> = plan.frames().collect();
    let trimmed = fallback_trim(&frames, max_history + 1);
    Ok(SamplePlan::from_frames(&trimmed, plan.seed).expect("latest frame is never trimmed"))
}

/// Decay rates for every `T` in `1..=max_latest` at a fixed budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayTable {
    pub budget: u64,
    pub cameras: u32,
    pub epsilon: f64,
    pub cap: f64,
    pub rates: Vec<DecayRate>,
}

impl DecayTable {
    pub fn get(&self, latest: u32) -> Option<DecayRate> {
        latest.checked_sub(1).and_then(|i| self.rates.get(i as usize)).copied()
    }

    pub fn curve(&self, latest: u32) -> Option<SamplingCurve> {
        let rate = self.get(latest)?;
        Some(SamplingCurve {
            latest,
            cameras: self.cameras,
            budget: self.budget,
            epsilon: self.epsilon,
            cap: self.cap,
            rate,
        })
    }

    pub fn max_latest(&self) -> u32 {
        self.rates.len() as u32
    }

    /// Largest `T` that is not infeasible, if any.
    pub fn feasibility_boundary(&self) -> Option<u32> {
        self.rates.iter().rposition(|r| !r.is_infeasible()).map(|i| i as u32 + 1)
    }

    /// Writes `T,k,feasible,expected_frames`. No-sampling rows report `k = 0`
    /// (the limit that keeps every frame); infeasible rows leave `k` empty.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["T", "k", "feasible", "expected_frames"])?;
        for latest in 1..=self.max_latest() {
            let curve = self.curve(latest).expect("in range");
            let k = match curve.rate {
                DecayRate::Feasible(k) => format!("{k}"),
                DecayRate::NoSamplingNeeded => "0".into(),
                DecayRate::Infeasible => String::new(),
            };
            out.write_record([
                latest.to_string(),
                k,
                (!curve.rate.is_infeasible()).to_string(),
                format!("{}", curve.expected_frames()),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn precompute_table(budget: u64, cameras: u32, epsilon: f64, max_latest: u32) -> Result<DecayTable, BatsError> {
    let cap = budget_cap(budget, cameras)?;
    let rates = (1..=max_latest)
        .map(|latest| solve_for_cap(latest, cap, epsilon, DEFAULT_TOLERANCE))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DecayTable { budget, cameras, epsilon, cap, rates })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain bisection on the decreasing map k -> expected_frames.
    fn bisect_k(latest: u32, cap: f64, eps: f64) -> f64 {
        let (mut lo, mut hi) = (1e-9, 1e4);
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if expected_frames(mid, latest, eps) > cap {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn budget_cap_values() {
        assert!((budget_cap(2048, 4).unwrap() - 89.4).abs() < 1e-12);
        assert!((budget_cap(1600, 4).unwrap() - 67.0).abs() < 1e-12);
        assert!(matches!(budget_cap(260, 4), Err(BatsError::BudgetTooSmall { needed: 260, .. })));
        assert!(budget_cap(261, 4).is_ok());
    }

    #[test]
    fn expected_frames_limits() {
        assert!((expected_frames(1e-12, 100, 0.1) - 100.0).abs() < 1e-9);
        assert_eq!(expected_frames(0.0, 100, 0.1), 100.0);
        assert!((expected_frames(1e9, 100, 0.1) - 10.0).abs() < 1e-6);
        let e = expected_frames(0.81, 125, 0.1);
        assert!((e - 89.4).abs() < 0.5, "{e}");
    }

    #[test]
    fn solves_reference_budget() {
        let rate = solve_decay_rate(125, 4, 2048, 0.1, 1e-9).unwrap();
        let k = rate.k().unwrap();
        let oracle = bisect_k(125, 89.4, 0.1);
        assert!((k - oracle).abs() < 1e-8, "{k} vs {oracle}");
        assert!((k - 0.81).abs() < 0.01);
        assert!((expected_frames(k, 125, 0.1) - 89.4).abs() <= 1e-9);
    }

    #[test]
    fn long_horizons_are_infeasible() {
        assert_eq!(solve_decay_rate(1120, 4, 2048, 0.1, 1e-9).unwrap(), DecayRate::Infeasible);
        assert_eq!(solve_decay_rate(50, 4, 2048, 0.1, 1e-9).unwrap(), DecayRate::NoSamplingNeeded);
        assert!(matches!(solve_decay_rate(50, 4, 100, 0.1, 1e-9), Err(BatsError::BudgetTooSmall { .. })));
    }

    #[test]
    fn boundary_root_is_reached_by_widening() {
        let rate = solve_decay_rate(894, 4, 2048, 0.1, 1e-9).unwrap();
        let k = rate.k().expect("boundary is feasible");
        assert!(k > K_MAX);
        assert!((expected_frames(k, 894, 0.1) - 89.4).abs() <= 1e-9);
    }

    #[test]
    fn probability_shape() {
        assert_eq!(sampling_probability(125, 125, 0.81, 0.1), 1.0);
        let mid = sampling_probability(62, 124, 0.81, 0.1);
        assert!((mid - 0.70).abs() < 0.005, "{mid}");
        let first = sampling_probability(1, 1_000_000, 2.0, 0.1);
        assert!((first - (0.1 + 0.9 * (-2.0f64).exp())).abs() < 1e-5);
    }

    #[test]
    fn fallback_trim_cases() {
        let all: BTreeSet<u32> = (1..=10).collect();
        assert_eq!(fallback_trim(&all, 10), all);
        assert_eq!(fallback_trim(&all, 4), (7..=10).collect());
        let one: BTreeSet<u32> = [42].into();
        assert_eq!(fallback_trim(&one, 1), one);
        assert_eq!(fallback_trim(&all, 0), [10].into());
    }

    #[test]
    fn no_sampling_keeps_everything() {
        let curve = SamplingCurve::solve(50, 4, 2048, 0.1).unwrap();
        let plan = draw_plan(&curve, 7).unwrap();
        assert_eq!(plan.frames().collect::<Vec<_>>(), (1..=50).collect::<Vec<_>>());
    }

    #[test]
    fn plans_are_deterministic() {
        let curve = SamplingCurve::solve(125, 4, 2048, 0.1).unwrap();
        assert_eq!(draw_plan(&curve, 99).unwrap(), draw_plan(&curve, 99).unwrap());
        assert_ne!(draw_plan(&curve, 99).unwrap(), draw_plan(&curve, 100).unwrap());
    }

    #[test]
    fn infeasible_curve_refuses_to_draw() {
        let curve = SamplingCurve::solve(1120, 4, 2048, 0.1).unwrap();
        assert!(matches!(draw_plan(&curve, 1), Err(BatsError::InfeasibleCurve { latest: 1120 })));
        let floor = draw_plan_at_floor(&curve, 1);
        let trimmed = trim_plan(&floor, 2048, 4).unwrap();
        assert!(trimmed.visual_tokens(4) <= 2048);
        assert_eq!(trimmed.latest, 1120);
    }

    #[test]
    fn table_boundary_and_first_entry() {
        let table = precompute_table(2048, 4, 0.1, 1000).unwrap();
        assert_eq!(table.get(1), Some(DecayRate::NoSamplingNeeded));
        assert_eq!(table.feasibility_boundary(), Some(894));
        for latest in 1..=1000 {
            assert_eq!(table.get(latest).unwrap().is_infeasible(), latest > 894, "T={latest}");
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let table = precompute_table(2048, 4, 0.1, 5).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("T,k,feasible,expected_frames"));
        assert_eq!(text.lines().count(), 6);
    }
}
