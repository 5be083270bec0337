//! Navigation metrics: NE, SR, OS, SPL, nDTW, TR and open-loop L2.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::Trajectory;

/// Success radius used when neither the episode nor the config sets one.
pub const DEFAULT_SUCCESS_DISTANCE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("episode {0}: path is empty")]
    EmptyPath(String),
    #[error("episode {0}: shortest-path length must be positive")]
    ZeroShortestPath(String),
    #[error("episode {0}: no tracking flags")]
    MissingFlags(String),
    #[error("horizon {horizon} out of range for {len} waypoints")]
    HorizonOutOfRange { horizon: usize, len: usize },
    #[error("no episodes to aggregate")]
    EmptySet,
    #[error("success distance must be positive, got {0}")]
    InvalidThreshold(f64),
}

/// 2-D points are accepted in files and padded with z = 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Point(pub [f64; 3]);

impl TryFrom<Vec<f64>> for Point {
    type Error = String;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        match v.as_slice() {
            [x, y] => Ok(Self([*x, *y, 0.0])),
            [x, y, z] => Ok(Self([*x, *y, *z])),
            _ => Err(format!("point needs 2 or 3 coordinates, got {}", v.len())),
        }
    }
}

impl From<Point> for Vec<f64> {
    fn from(p: Point) -> Self {
        p.0.to_vec()
    }
}

impl From<[f64; 3]> for Point {
    fn from(a: [f64; 3]) -> Self {
        Self(a)
    }
}

impl From<[f64; 2]> for Point {
    fn from(a: [f64; 2]) -> Self {
        Self([a[0], a[1], 0.0])
    }
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    a.0.iter().zip(&b.0).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Polyline arc length.
pub fn path_length(path: &[Point]) -> f64 {
    path.windows(2).map(|w| distance(&w[0], &w[1])).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    #[serde(default)]
    pub id: String,
    pub executed: Vec<Point>,
    pub reference: Vec<Point>,
    /// Geodesic shortest-path length from start to goal.
    pub shortest_path_length: f64,
    /// Defaults to the last reference point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracked: Option<Vec<bool>>,
    /// Open-loop planning pair for L2 displacement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<Trajectory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert: Option<Trajectory>,
}

impl EpisodeResult {
    pub fn new(executed: Vec<Point>, reference: Vec<Point>, shortest_path_length: f64) -> Self {
        Self {
            id: String::new(),
            executed,
            reference,
            shortest_path_length,
            goal: None,
            success_distance: None,
            tracked: None,
            predicted: None,
            expert: None,
        }
    }

    pub fn goal(&self) -> Option<Point> {
        self.goal.or_else(|| self.reference.last().copied())
    }

    fn final_point(&self) -> Result<Point, MetricsError> {
        self.executed.last().copied().ok_or_else(|| MetricsError::EmptyPath(self.id.clone()))
    }

    fn goal_point(&self) -> Result<Point, MetricsError> {
        self.goal().ok_or_else(|| MetricsError::EmptyPath(self.id.clone()))
    }

    fn threshold(&self, fallback: f64) -> Result<f64, MetricsError> {
        let d = self.success_distance.unwrap_or(fallback);
        if d > 0.0 && d.is_finite() {
            Ok(d)
        } else {
            Err(MetricsError::InvalidThreshold(d))
        }
    }
}

pub fn navigation_error(r: &EpisodeResult) -> Result<f64, MetricsError> {
    Ok(distance(&r.final_point()?, &r.goal_point()?))
}

pub fn success(r: &EpisodeResult, d_th: f64) -> Result<bool, MetricsError> {
    Ok(navigation_error(r)? <= r.threshold(d_th)?)
}

pub fn oracle_success(r: &EpisodeResult, d_th: f64) -> Result<bool, MetricsError> {
    let goal = r.goal_point()?;
    let th = r.threshold(d_th)?;
    if r.executed.is_empty() {
        return Err(MetricsError::EmptyPath(r.id.clone()));
    }
    Ok(r.executed.iter().any(|p| distance(p, &goal) <= th))
}

/// `S * l / max(p, l)` for one episode.
pub fn spl_term(r: &EpisodeResult, d_th: f64) -> Result<f64, MetricsError> {
    let l = r.shortest_path_length;
    if !(l > 0.0) {
        return Err(MetricsError::ZeroShortestPath(r.id.clone()));
    }
    if !success(r, d_th)? {
        return Ok(0.0);
    }
    Ok(l / path_length(&r.executed).max(l))
}

pub fn spl(results: &[EpisodeResult], d_th: f64) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let total = results.iter().map(|r| spl_term(r, d_th)).sum::<Result<f64, _>>()?;
    Ok(total / results.len() as f64)
}

/// Dynamic time warping with Euclidean point cost and steps
/// `(1,0)`, `(0,1)`, `(1,1)`.
pub fn dtw_cost(a: &[Point], b: &[Point]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for p in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = distance(p, &b[j - 1]) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Some(prev[m])
}

/// `exp(-DTW(executed, reference) / (|reference| * d_th))`.
pub fn ndtw(r: &EpisodeResult, d_th: f64) -> Result<f64, MetricsError> {
    let th = r.threshold(d_th)?;
    let cost = dtw_cost(&r.executed, &r.reference).ok_or_else(|| MetricsError::EmptyPath(r.id.clone()))?;
    Ok((-cost / (r.reference.len() as f64 * th)).exp())
}

pub fn tracking_rate(r: &EpisodeResult) -> Result<f64, MetricsError> {
    match &r.tracked {
        Some(flags) if !flags.is_empty() => Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64),
        _ => Err(MetricsError::MissingFlags(r.id.clone())),
    }
}

/// Mean displacement over waypoints `0..=h` for each horizon index `h`.
pub fn avg_l2(pred: &[Point], gt: &[Point], horizons: &[usize]) -> Result<Vec<f64>, MetricsError> {
    let len = pred.len().min(gt.len());
    horizons
        .iter()
        .map(|&h| {
            if h >= len {
                return Err(MetricsError::HorizonOutOfRange { horizon: h, len });
            }
            let sum: f64 = pred[..=h].iter().zip(&gt[..=h]).map(|(p, g)| distance(p, g)).sum();
            Ok(sum / (h + 1) as f64)
        })
        .collect()
}

pub fn trajectory_l2(pred: &Trajectory, gt: &Trajectory, horizons: &[usize]) -> Result<Vec<f64>, MetricsError> {
    let p: Vec<Point> = pred.positions().into_iter().map(Point).collect();
    let g: Vec<Point> = gt.positions().into_iter().map(Point).collect();
    avg_l2(&p, &g, horizons)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub success_distance: f64,
    /// Waypoint indices at which open-loop L2 is reported.
    pub l2_horizons: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { success_distance: DEFAULT_SUCCESS_DISTANCE, l2_horizons: vec![1, 3, 5, 7] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub id: String,
    pub ne: f64,
    pub success: bool,
    pub oracle_success: bool,
    pub spl: f64,
    pub ndtw: f64,
    pub path_length: f64,
    pub tr: Option<f64>,
    pub l2: Option<Vec<f64>>,
}

pub fn evaluate_episode(r: &EpisodeResult, cfg: &EvalConfig) -> Result<EpisodeMetrics, MetricsError> {
    let d = cfg.success_distance;
    let l2 = match (&r.predicted, &r.expert) {
        (Some(p), Some(g)) => Some(trajectory_l2(p, g, &cfg.l2_horizons)?),
        _ => None,
    };
    Ok(EpisodeMetrics {
        id: r.id.clone(),
        ne: navigation_error(r)?,
        success: success(r, d)?,
        oracle_success: oracle_success(r, d)?,
        spl: spl_term(r, d)?,
        ndtw: ndtw(r, d)?,
        path_length: path_length(&r.executed),
        tr: r.tracked.as_ref().map(|_| tracking_rate(r)).transpose()?,
        l2,
    })
}

/// Episode means. Ratios are in `[0, 1]`; distances in metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    pub ne: f64,
    pub sr: f64,
    pub os: f64,
    pub spl: f64,
    pub ndtw: f64,
    /// Mean over episodes that carry tracking flags.
    pub tr: Option<f64>,
    /// Per-horizon mean over episodes with planning pairs.
    pub avg_l2: Option<Vec<f64>>,
    pub l2_horizons: Vec<usize>,
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn aggregate_metrics(per_episode: &[EpisodeMetrics], cfg: &EvalConfig) -> Result<MetricsReport, MetricsError> {
    if per_episode.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let l2_rows: Vec<&Vec<f64>> = per_episode.iter().filter_map(|m| m.l2.as_ref()).collect();
    let avg_l2 = (!l2_rows.is_empty()).then(|| {
        (0..cfg.l2_horizons.len()).map(|h| l2_rows.iter().map(|r| r[h]).sum::<f64>() / l2_rows.len() as f64).collect()
    });
    Ok(MetricsReport {
        episodes: per_episode.len(),
        ne: mean(per_episode.iter().map(|m| m.ne)).expect("non-empty"),
        sr: mean(per_episode.iter().map(|m| flag(m.success))).expect("non-empty"),
        os: mean(per_episode.iter().map(|m| flag(m.oracle_success))).expect("non-empty"),
        spl: mean(per_episode.iter().map(|m| m.spl)).expect("non-empty"),
        ndtw: mean(per_episode.iter().map(|m| m.ndtw)).expect("non-empty"),
        tr: mean(per_episode.iter().filter_map(|m| m.tr)),
        avg_l2,
        l2_horizons: cfg.l2_horizons.clone(),
    })
}

pub fn aggregate(results: &[EpisodeResult], cfg: &EvalConfig) -> Result<MetricsReport, MetricsError> {
    let per: Vec<EpisodeMetrics> = results.iter().map(|r| evaluate_episode(r, cfg)).collect::<Result<_, _>>()?;
    aggregate_metrics(&per, cfg)
}

/// One CSV row per episode: `id,ne,success,oracle_success,spl,ndtw,path_length,tr`.
pub fn write_episode_csv<W: std::io::Write>(rows: &[EpisodeMetrics], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id", "ne", "success", "oracle_success", "spl", "ndtw", "path_length", "tr"])?;
    for m in rows {
        out.write_record([
            m.id.clone(),
            m.ne.to_string(),
            u8::from(m.success).to_string(),
            u8::from(m.oracle_success).to_string(),
            m.spl.to_string(),
            m.ndtw.to_string(),
            m.path_length.to_string(),
            m.tr.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
