//! Waypoint trajectories: per-embodiment normalisation, the planning head and
//! its masked loss, discrete-action conversion and scaling-factor fitting.
//!
//! Waypoints are egocentric: expressed in the frame of the pose at which the
//! prediction is made, with yaw relative to that pose. Dimensions that an
//! embodiment does not use (z for ground robots and cars) are stored as 0 and
//! masked out of every loss.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::EmbodimentKind;

pub const WAYPOINTS: usize = 8;
pub const WAYPOINT_DIMS: usize = 4;
pub const HEAD_OUTPUTS: usize = WAYPOINTS * WAYPOINT_DIMS;

/// Weight of the navigation loss against the QA loss.
pub const NAV_LOSS_WEIGHT: f64 = 10.0;

pub const FORWARD_STEP_M: f64 = 0.125;
pub const TURN_STEP_DEG: f64 = 15.0;

/// Minimum dataset size for percentile fitting.
pub const MIN_FIT_TRAJECTORIES: usize = 100;
pub const FIT_PERCENTILE: f64 = 99.0;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("embodiment mismatch: {left} vs {right}")]
    EmbodimentMismatch { left: EmbodimentKind, right: EmbodimentKind },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("action list is empty")]
    EmptyActionList,
    #[error("need at least {needed} trajectories, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("dimension {0} has zero spread; cannot derive a scaling factor")]
    DegenerateDimension(&'static str),
    #[error("trajectory must have {WAYPOINTS} waypoints, got {0}")]
    WaypointCount(usize),
    #[error("non-finite waypoint value")]
    NonFinite,
    #[error("scaling factors must be positive")]
    BadScale,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub theta: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64, z: f64, theta: f64) -> Self {
        Self { x, y, z, theta }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.z, self.theta]
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 4]> for Waypoint {
    fn from(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl From<Waypoint> for [f64; 4] {
    fn from(w: Waypoint) -> Self {
        w.to_array()
    }
}

/// Which of `(x, y, z, theta)` carry signal for an embodiment.
pub fn dim_mask(kind: EmbodimentKind) -> [bool; 4] {
    [true, true, kind.has_z(), true]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub embodiment: EmbodimentKind,
    pub waypoints: Vec<Waypoint>,
}

impl Trajectory {
    /// Checks the waypoint count and finiteness, zeroes masked z and wraps yaw.
    pub fn new(embodiment: EmbodimentKind, waypoints: Vec<Waypoint>) -> Result<Self, TrajectoryError> {
        if waypoints.len() != WAYPOINTS {
            return Err(TrajectoryError::WaypointCount(waypoints.len()));
        }
        if waypoints.iter().any(|w| !w.to_array().iter().all(|v| v.is_finite())) {
            return Err(TrajectoryError::NonFinite);
        }
        let has_z = embodiment.has_z();
        let waypoints = waypoints
            .into_iter()
            .map(|w| Waypoint { z: if has_z { w.z } else { 0.0 }, theta: wrap_angle(w.theta), ..w })
            .collect();
        Ok(Self { embodiment, waypoints })
    }

    pub fn mask(&self) -> [bool; 4] {
        dim_mask(self.embodiment)
    }

    pub fn valid_dims(&self) -> usize {
        self.mask().iter().filter(|&&m| m).count()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.waypoints.iter().map(Waypoint::position).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFactors {
    pub embodiment: EmbodimentKind,
    pub x: f64,
    pub y: f64,
    pub z: Option<f64>,
    pub theta: f64,
}

impl ScalingFactors {
    /// Reference factors per embodiment.
    pub fn reference(kind: EmbodimentKind) -> Self {
        match kind {
            EmbodimentKind::IndoorRobot => Self { embodiment: kind, x: 1.0, y: 0.433, z: None, theta: 2.09 },
            EmbodimentKind::Uav => Self { embodiment: kind, x: 7.93, y: 3.19, z: Some(7.85), theta: 1.04 },
            EmbodimentKind::Car => Self { embodiment: kind, x: 50.8, y: 14.9, z: None, theta: 1.52 },
        }
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let z_ok = match (self.embodiment.has_z(), self.z) {
            (true, Some(z)) => z > 0.0,
            (false, None) => true,
            _ => false,
        };
        if z_ok && self.x > 0.0 && self.y > 0.0 && self.theta > 0.0 {
            Ok(())
        } else {
            Err(TrajectoryError::BadScale)
        }
    }

    /// Per-dimension factors; masked z reports 1 so it passes through.
    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.z.unwrap_or(1.0), self.theta]
    }
}

impl fmt::Display for ScalingFactors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let z = self.z.map_or_else(|| "-".to_string(), |z| format!("{z:.3}"));
        write!(f, "{:<14}{:>9.3}{:>9.3}{:>9}{:>9.3}", self.embodiment.name(), self.x, self.y, z, self.theta)
    }
}

fn check_embodiment(a: EmbodimentKind, b: EmbodimentKind) -> Result<(), TrajectoryError> {
    if a == b {
        Ok(())
    } else {
        Err(TrajectoryError::EmbodimentMismatch { left: a, right: b })
    }
}

/// Normalised trajectory plus whether any component had to be clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub trajectory: Trajectory,
    pub clamped: bool,
}

pub fn normalize(traj: &Trajectory, alpha: &ScalingFactors) -> Result<Normalized, TrajectoryError> {
    check_embodiment(traj.embodiment, alpha.embodiment)?;
    alpha.validate()?;
    let a = alpha.as_array();
    let mask = traj.mask();
    let mut clamped = false;
    let waypoints = traj
        .waypoints
        .iter()
        .map(|w| {
            let mut v = w.to_array();
            for d in 0..4 {
                if !mask[d] {
                    v[d] = 0.0;
                    continue;
                }
                let y = v[d] / a[d];
                if y.abs() > 1.0 {
                    clamped = true;
                }
                v[d] = y.clamp(-1.0, 1.0);
            }
            Waypoint::from(v)
        })
        .collect();
    Ok(Normalized { trajectory: Trajectory { embodiment: traj.embodiment, waypoints }, clamped })
}

pub fn denormalize(norm: &Trajectory, alpha: &ScalingFactors) -> Result<Trajectory, TrajectoryError> {
    check_embodiment(norm.embodiment, alpha.embodiment)?;
    alpha.validate()?;
    let a = alpha.as_array();
    let mask = norm.mask();
    let waypoints = norm
        .waypoints
        .iter()
        .map(|w| {
            let mut v = w.to_array();
            for d in 0..4 {
                v[d] = if mask[d] { v[d] * a[d] } else { 0.0 };
            }
            Waypoint::from(v)
        })
        .collect();
    Ok(Trajectory { embodiment: norm.embodiment, waypoints })
}

/// Mean squared error over the valid dimensions of all waypoints.
pub fn masked_mse(pred: &Trajectory, gt: &Trajectory) -> Result<f64, TrajectoryError> {
    check_embodiment(pred.embodiment, gt.embodiment)?;
    if pred.waypoints.len() != gt.waypoints.len() {
        return Err(TrajectoryError::ShapeMismatch { expected: gt.waypoints.len(), got: pred.waypoints.len() });
    }
    let mask = gt.mask();
    let mut sum = 0.0;
    for (p, g) in pred.waypoints.iter().zip(&gt.waypoints) {
        let (p, g) = (p.to_array(), g.to_array());
        for d in (0..4).filter(|&d| mask[d]) {
            sum += (p[d] - g[d]).powi(2);
        }
    }
    Ok(sum / (gt.waypoints.len() * gt.valid_dims()) as f64)
}

pub fn combined_loss(nav: f64, qa: f64, beta: f64) -> f64 {
    beta * nav + qa
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    /// Row-major `[output][input]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Self { input, output, w: vec![0.0; input * output], b: vec![0.0; output] }
    }

    fn random(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        Self {
            input,
            output,
            w: (0..input * output).map(|_| rng.gen_range(-a..a)).collect(),
            b: (0..output).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .chunks_exact(self.input)
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Three dense layers mapping the action hidden state to `8 × 4` outputs,
/// SiLU between layers and `tanh` on the output so every normalised
/// component lies in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningHead {
    pub layers: [Dense; 3],
}

struct HeadActivations {
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
    y: Vec<f64>,
}

impl PlanningHead {
    pub fn init(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            layers: [
                Dense::random(input, hidden, &mut rng),
                Dense::random(hidden, hidden, &mut rng),
                Dense::random(hidden, HEAD_OUTPUTS, &mut rng),
            ],
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self { layers: [Dense::zeros(input, hidden), Dense::zeros(hidden, hidden), Dense::zeros(hidden, HEAD_OUTPUTS)] }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    fn check(&self, e: &[f64]) -> Result<(), TrajectoryError> {
        if e.len() != self.input_dim() {
            return Err(TrajectoryError::ShapeMismatch { expected: self.input_dim(), got: e.len() });
        }
        let [l1, l2, l3] = &self.layers;
        if l1.output != l2.input || l2.output != l3.input || l3.output != HEAD_OUTPUTS {
            return Err(TrajectoryError::ShapeMismatch { expected: HEAD_OUTPUTS, got: l3.output });
        }
        Ok(())
    }

    fn activations(&self, e: &[f64]) -> HeadActivations {
        let a1 = self.layers[0].forward(e);
        let h1: Vec<f64> = a1.iter().map(|&v| silu(v)).collect();
        let a2 = self.layers[1].forward(&h1);
        let h2: Vec<f64> = a2.iter().map(|&v| silu(v)).collect();
        let y = self.layers[2].forward(&h2).into_iter().map(f64::tanh).collect();
        HeadActivations { a1, h1, a2, h2, y }
    }

    /// Normalised outputs in `[-1, 1]`, waypoint-major `(x, y, z, theta)`.
    pub fn forward_normalized(&self, e: &[f64]) -> Result<Vec<f64>, TrajectoryError> {
        self.check(e)?;
        Ok(self.activations(e).y)
    }
}

fn rescale(y: &[f64], alpha: &ScalingFactors) -> Trajectory {
    let a = alpha.as_array();
    let mask = dim_mask(alpha.embodiment);
    let waypoints = y
        .chunks_exact(WAYPOINT_DIMS)
        .map(|c| {
            let mut v = [0.0; 4];
            for d in 0..4 {
                v[d] = if mask[d] { c[d] * a[d] } else { 0.0 };
            }
            Waypoint::from(v)
        })
        .collect();
    Trajectory { embodiment: alpha.embodiment, waypoints }
}

/// Predicts a trajectory in metres/radians from the action hidden state.
pub fn head_forward(head: &PlanningHead, e: &[f64], alpha: &ScalingFactors) -> Result<Trajectory, TrajectoryError> {
    alpha.validate()?;
    let y = head.forward_normalized(e)?;
    Ok(rescale(&y, alpha))
}

/// Gradients of [`masked_mse`] with respect to every head parameter, laid
/// out like the head itself.
pub fn head_gradient(
    head: &PlanningHead,
    e: &[f64],
    gt: &Trajectory,
    alpha: &ScalingFactors,
) -> Result<PlanningHead, TrajectoryError> {
    check_embodiment(gt.embodiment, alpha.embodiment)?;
    alpha.validate()?;
    head.check(e)?;
    if gt.waypoints.len() != WAYPOINTS {
        return Err(TrajectoryError::WaypointCount(gt.waypoints.len()));
    }
    let act = head.activations(e);
    let a = alpha.as_array();
    let mask = gt.mask();
    let scale = 2.0 / (WAYPOINTS * gt.valid_dims()) as f64;

    // dL/d(pre-tanh output)
    let mut d_out = vec![0.0; HEAD_OUTPUTS];
    for (m, w) in gt.waypoints.iter().enumerate() {
        let g = w.to_array();
        for d in (0..4).filter(|&d| mask[d]) {
            let i = m * WAYPOINT_DIMS + d;
            let y = act.y[i];
            d_out[i] = scale * (a[d] * y - g[d]) * a[d] * (1.0 - y * y);
        }
    }

    let mut grad = PlanningHead::zeros(head.input_dim(), head.layers[0].output);
    let backprop = |layer: &Dense, g: &mut Dense, delta: &[f64], input: &[f64]| -> Vec<f64> {
        let mut d_in = vec![0.0; layer.input];
        for (o, &dv) in delta.iter().enumerate() {
            g.b[o] = dv;
            let row = &layer.w[o * layer.input..(o + 1) * layer.input];
            let grow = &mut g.w[o * layer.input..(o + 1) * layer.input];
            for j in 0..layer.input {
                grow[j] = dv * input[j];
                d_in[j] += row[j] * dv;
            }
        }
        d_in
    };
    let [g1, g2, g3] = &mut grad.layers;
    let d_h2 = backprop(&head.layers[2], g3, &d_out, &act.h2);
    let d_a2: Vec<f64> = d_h2.iter().zip(&act.a2).map(|(d, &a)| d * silu_grad(a)).collect();
    let d_h1 = backprop(&head.layers[1], g2, &d_a2, &act.h1);
    let d_a1: Vec<f64> = d_h1.iter().zip(&act.a1).map(|(d, &a)| d * silu_grad(a)).collect();
    backprop(&head.layers[0], g1, &d_a1, e);
    Ok(grad)
}

impl PlanningHead {
    /// Flat view over all parameters, layer by layer, weights then biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b).copied()).collect()
    }

    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut i = index;
        for l in &mut self.layers {
            if i < l.w.len() {
                return &mut l.w[i];
            }
            i -= l.w.len();
            if i < l.b.len() {
                return &mut l.b[i];
            }
            i -= l.b.len();
        }
        panic!("parameter index {index} out of range");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscreteAction {
    Forward,
    Left,
    Right,
    Stop,
}

impl std::str::FromStr for DiscreteAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "forward" | "move_forward" | "f" => Ok(Self::Forward),
            "left" | "turn_left" | "l" => Ok(Self::Left),
            "right" | "turn_right" | "r" => Ok(Self::Right),
            "stop" | "s" => Ok(Self::Stop),
            other => Err(format!("unknown action {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Pose after every atomic operation, up to (not including) the first Stop.
/// Heading is tracked as an integer number of turn steps.
pub fn accumulate_poses(actions: &[DiscreteAction], step_m: f64, turn_deg: f64) -> Vec<Pose2> {
    let turn = turn_deg.to_radians();
    let (mut x, mut y, mut turns) = (0.0f64, 0.0f64, 0i64);
    let mut out = Vec::new();
    for a in actions {
        match a {
            DiscreteAction::Stop => break,
            DiscreteAction::Forward => {
                let h = turns as f64 * turn;
                x += step_m * h.cos();
                y += step_m * h.sin();
            }
            DiscreteAction::Left => turns += 1,
            DiscreteAction::Right => turns -= 1,
        }
        out.push(Pose2 { x, y, theta: wrap_angle(turns as f64 * turn) });
    }
    out
}

/// Converts discrete actions into an 8-waypoint indoor trajectory: one
/// waypoint per atomic operation, truncated to the first 8 and padded with the
/// final pose.
pub fn discretize_to_trajectory(actions: &[DiscreteAction], step_m: f64, turn_deg: f64) -> Result<Trajectory, TrajectoryError> {
    if actions.is_empty() {
        return Err(TrajectoryError::EmptyActionList);
    }
    let mut poses = accumulate_poses(actions, step_m, turn_deg);
    poses.truncate(WAYPOINTS);
    let last = poses.last().copied().unwrap_or_default();
    poses.resize(WAYPOINTS, last);
    let waypoints = poses.into_iter().map(|p| Waypoint::new(p.x, p.y, 0.0, p.theta)).collect();
    Trajectory::new(EmbodimentKind::IndoorRobot, waypoints)
}

/// Linear-interpolated percentile of already sorted values.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Per-dimension 99th percentile of absolute waypoint values.
pub fn fit_scaling_factors(trajectories: &[Trajectory]) -> Result<ScalingFactors, TrajectoryError> {
    if trajectories.len() < MIN_FIT_TRAJECTORIES {
        return Err(TrajectoryError::InsufficientData { needed: MIN_FIT_TRAJECTORIES, got: trajectories.len() });
    }
    let kind = trajectories[0].embodiment;
    for t in trajectories {
        check_embodiment(kind, t.embodiment)?;
    }
    let names = ["x", "y", "z", "theta"];
    let mut alpha = [0.0; 4];
    for d in (0..4).filter(|&d| dim_mask(kind)[d]) {
        let mut vals: Vec<f64> =
            trajectories.iter().flat_map(|t| t.waypoints.iter().map(move |w| w.to_array()[d].abs())).collect();
        vals.sort_by(f64::total_cmp);
        let p = percentile_sorted(&vals, FIT_PERCENTILE);
        if !(p > 0.0) {
            return Err(TrajectoryError::DegenerateDimension(names[d]));
        }
        alpha[d] = p;
    }
    Ok(ScalingFactors { embodiment: kind, x: alpha[0], y: alpha[1], z: kind.has_z().then_some(alpha[2]), theta: alpha[3] })
}
