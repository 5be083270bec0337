//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails or overruns its time limit.
//!
//! Reference values come from independent oracles written here (adaptive
//! quadrature, exhaustive alignment, finite differences, enumeration), never
//! from the code under test.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use navtoken_core::bats::{self, DecayRate, SamplingCurve};
use navtoken_core::cache::{CacheEntry, CacheError, CacheKey, CacheStore};
use navtoken_core::metrics::{self, EpisodeResult, EvalConfig, Point};
use navtoken_core::organizer::{assemble_navigation, FeatureBank, PooledFrame, TokenRole};
use navtoken_core::sim::{self, Regime, SimConfig};
use navtoken_core::trajectory::{
    self, DiscreteAction, PlanningHead, ScalingFactors, Trajectory, Waypoint, FORWARD_STEP_M, TURN_STEP_DEG, WAYPOINTS,
};
use navtoken_core::tvi::{angle_pe, l2_distance, tvi_token, TviParams};
use navtoken_core::types::FeatureMatrix;
use navtoken_core::{CameraRig, EmbodimentKind, SamplePlan, TaskMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "expected-frames closed form vs quadrature", limit: secs(5), run: closed_form_vs_quadrature },
        Criterion { name: "budget feasibility boundary", limit: secs(1), run: feasibility_boundary },
        Criterion { name: "monte-carlo kept frames", limit: secs(30), run: monte_carlo_kept_frames },
        Criterion { name: "hard budget and plateau band", limit: secs(120), run: hard_budget },
        Criterion { name: "indicator token algebra", limit: secs(5), run: tvi_algebra },
        Criterion { name: "navigation token-count formula", limit: secs(10), run: token_count_formula },
        Criterion { name: "trajectory codec, masking, gradients", limit: secs(30), run: trajectory_checks },
        Criterion { name: "discrete action conversion", limit: secs(5), run: discrete_conversion },
        Criterion { name: "navigation metrics", limit: secs(60), run: metric_checks },
        Criterion { name: "feature cache durability and concurrency", limit: secs(60), run: cache_checks },
    ];

    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| Err(panic_message(p)));
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > c.limit => Err(format!("{detail}; exceeded {:?}", c.limit)),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} {:>2} {:<44} {:>7.2}s  {detail}", i + 1, c.name, took.as_secs_f64());
        failed += outcome.is_err() as usize;
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 50)
}

fn closed_form_vs_quadrature() -> Outcome {
    let ks: Vec<f64> = (0..20).map(|i| 10f64.powf(-3.0 + 5.0 * i as f64 / 19.0)).collect();
    let ts: Vec<u32> = (0..20).map(|i| (10f64.powf(3.0 * i as f64 / 19.0)).round() as u32).collect();
    let mut worst: f64 = 0.0;
    for &k in &ks {
        for &t in &ts {
            for eps in [0.05, 0.1, 0.3] {
                let tf = t as f64;
                let p = |x: f64| (1.0 - eps) * (k * (x - tf) / tf).exp() + eps;
                let reference = adaptive_simpson(&p, 0.0, tf, 1e-13 * tf);
                let closed = bats::expected_frames(k, t, eps);
                worst = worst.max((closed - reference).abs() / reference);
            }
        }
    }
    ensure!(worst <= 1e-6, "max relative error {worst:.3e}");
    Ok(format!("1200 points, max rel err {worst:.2e}"))
}

fn feasibility_boundary() -> Outcome {
    let (budget, cams, eps) = (2048, 4, 0.1);
    let cap = bats::budget_cap(budget, cams).map_err(|e| e.to_string())?;
    let mut feasible = 0;
    for t in 1..=2000u32 {
        let rate = bats::solve_decay_rate(t, cams, budget, eps, bats::DEFAULT_TOLERANCE).map_err(|e| e.to_string())?;
        ensure!(rate.is_infeasible() == (t > 894), "T={t} gave {rate:?}");
        if let DecayRate::Feasible(k) = rate {
            let resid = bats::expected_frames(k, t, eps) - cap;
            ensure!(resid.abs() <= 1e-9, "T={t}: E(k)-cap = {resid:.3e}");
            feasible += 1;
        }
        if eps * (t as f64) < cap && cap < t as f64 {
            ensure!(rate.k().is_some(), "T={t} should be feasible");
        }
    }
    let long_run = bats::solve_decay_rate(1120, cams, budget, eps, bats::DEFAULT_TOLERANCE).map_err(|e| e.to_string())?;
    ensure!(long_run.is_infeasible(), "T=1120 gave {long_run:?}");
    Ok(format!("cap {cap:.1}, infeasible exactly for T>894, {feasible} solved roots"))
}

fn monte_carlo_kept_frames() -> Outcome {
    let mut report = Vec::new();
    for budget in [1600, 2048] {
        let curve = SamplingCurve::solve(125, 4, budget, 0.1).map_err(|e| e.to_string())?;
        let expected = curve.expected_frames();
        let total: usize = (0..10_000u64).map(|s| bats::draw_plan(&curve, s).unwrap().frame_count()).sum();
        let mean = total as f64 / 10_000.0;
        let rel = (mean - expected).abs() / expected;
        ensure!(rel <= 0.02, "B={budget}: mean {mean:.3} vs expected {expected:.3}");
        report.push(format!("B={budget} {mean:.2}/{expected:.2}"));
    }
    Ok(report.join(", "))
}

fn hard_budget() -> Outcome {
    let mut checked = 0;
    let mut violations = 0;
    let mut worst_fill: f64 = 0.0;
    for budget in [1024u64, 1600, 2048] {
        for cameras in [1u32, 2, 4, 6, 8] {
            let cfg = SimConfig { t_max: 400, cameras, budget, seed: budget ^ cameras as u64, ..SimConfig::default() };
            let run = sim::simulate(&cfg).map_err(|e| e.to_string())?;
            for tr in &run.traces {
                ensure!(tr.visual_tokens <= budget, "B={budget} N={cameras} t={} used {}", tr.t, tr.visual_tokens);
                let h = tr.kept.len() as u64 - 1;
                ensure!(tr.visual_tokens == (5 * h + 65) * cameras as u64, "t={} count disagrees with kept set", tr.t);
            }
            if let Some(t0) = run.summary.first_over_budget {
                let late: Vec<u64> = run.traces.iter().filter(|t| t.t >= t0).map(|t| t.visual_tokens).collect();
                let min = *late.iter().min().unwrap() as f64;
                worst_fill = worst_fill.max(1.0 - min / budget as f64);
            }
            checked += run.summary.band_checked;
            violations += run.summary.band_violations;
            let sampled = run.traces.iter().filter(|t| t.regime == Regime::Sampled).count();
            ensure!(sampled == run.summary.band_checked, "band skipped sampled steps");
        }
    }
    let rate = violations as f64 / checked.max(1) as f64;
    ensure!(checked > 0, "no sampled steps");
    ensure!(rate <= 0.01, "{violations}/{checked} sampled steps outside the 3-sigma band");
    Ok(format!("15 configs within budget, {violations}/{checked} outside 3σ, lowest post-cap fill {:.0}%", 100.0 * (1.0 - worst_fill)))
}

fn tvi_algebra() -> Outcome {
    let params = TviParams::init(64, 64, 7).map_err(|e| e.to_string())?;
    let image = tvi_token(&params, TaskMode::ImageQa, None, None).map_err(|e| e.to_string())?;
    ensure!(
        image.vector.iter().zip(&params.base).all(|(a, b)| a.to_bits() == b.to_bits()),
        "image indicator differs from the base embedding"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_diff: f64 = 0.0;
    for _ in 0..64 {
        let t = rng.gen_range(1..5000);
        let phi = rng.gen_range(-TAU..TAU);
        let nav = tvi_token(&params, TaskMode::Navigation, Some(t), Some(phi)).map_err(|e| e.to_string())?.vector;
        let video = tvi_token(&params, TaskMode::VideoQa, Some(t), None).map_err(|e| e.to_string())?.vector;
        let angle = params.angle_term(phi).map_err(|e| e.to_string())?;
        for ((n, v), a) in nav.iter().zip(&video).zip(&angle) {
            ensure!(n.to_bits() == (v + a).to_bits(), "navigation != video + angle at t={t}");
            worst_diff = worst_diff.max(((n - v) - a).abs() as f64);
        }
    }
    ensure!(worst_diff <= 1e-5, "navigation - video deviates from angle term by {worst_diff:.2e}");
    let mut worst_period: f64 = 0.0;
    for i in 0..64 {
        let phi = TAU * i as f64 / 64.0;
        let base = angle_pe(phi, 64).unwrap();
        for shift in [TAU, -TAU, 2.0 * TAU] {
            worst_period = worst_period.max(l2_distance(&base, &angle_pe(phi + shift, 64).unwrap()));
        }
        let near = l2_distance(&base, &angle_pe(phi + 0.1, 64).unwrap());
        let far = l2_distance(&base, &angle_pe(phi + PI, 64).unwrap());
        ensure!(near < far, "phi={phi:.3}: d(phi, phi+0.1)={near:.4} >= d(phi, phi+pi)={far:.4}");
    }
    ensure!(worst_period <= 1e-5, "2π shift moves encoding by {worst_period:.2e}");
    Ok(format!("image==base bit-exact, nav-video residual {worst_diff:.1e}, periodicity residual {worst_period:.1e}"))
}

fn token_count_formula() -> Outcome {
    let dim = 8;
    let params = TviParams::init(dim, 8, 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..200 {
        let n = rng.gen_range(1..=8usize);
        let latest = rng.gen_range(1..=120u32);
        let history: BTreeSet<u32> = (1..latest).filter(|_| rng.gen_bool(0.4)).collect();
        let plan = SamplePlan { history: history.iter().copied().collect(), latest, seed: case };
        let rig = CameraRig::evenly_spaced(n).map_err(|e| e.to_string())?;
        let mut bank = FeatureBank::new();
        for t in plan.frames() {
            for cam in 0..n {
                let fine = (t == latest).then(|| FeatureMatrix::zeros(64, dim));
                bank.insert(t, cam, PooledFrame { coarse: FeatureMatrix::zeros(4, dim), fine });
            }
        }
        let text_len = rng.gen_range(0..20);
        let text = vec![vec![0.0; dim]; text_len];
        let seq = assemble_navigation(&plan, &rig, &bank, &text, &params).map_err(|e| e.to_string())?;
        let enumerated = seq
            .tokens
            .iter()
            .filter(|t| matches!(t.role, TokenRole::Indicator | TokenRole::VisualCoarse | TokenRole::VisualFine))
            .count();
        let h = history.len();
        let formula = ((4 + 1) * h + (64 + 1)) * n;
        ensure!(enumerated == formula, "case {case}: H={h} N={n} enumerated {enumerated}, formula {formula}");
        ensure!(seq.tokens.len() == formula + text_len + 1, "case {case}: total length");
    }
    Ok("200 cases match".into())
}

fn random_in_range(kind: EmbodimentKind, rng: &mut ChaCha8Rng) -> Trajectory {
    let a = ScalingFactors::reference(kind).as_array();
    let wps = (0..WAYPOINTS)
        .map(|_| {
            let v: [f64; 4] = std::array::from_fn(|d| rng.gen_range(-a[d]..=a[d]));
            Waypoint::from(v)
        })
        .collect();
    Trajectory::new(kind, wps).unwrap()
}

fn ulps(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    if a.signum() != b.signum() {
        return u64::MAX;
    }
    a.to_bits().abs_diff(b.to_bits())
}

fn trajectory_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut exact, mut total, mut worst_ulp) = (0usize, 0usize, 0u64);
    for kind in EmbodimentKind::ALL {
        let alpha = ScalingFactors::reference(kind);
        for _ in 0..2000 {
            let traj = random_in_range(kind, &mut rng);
            let norm = trajectory::normalize(&traj, &alpha).map_err(|e| e.to_string())?;
            ensure!(!norm.clamped, "in-range input was clamped");
            let back = trajectory::denormalize(&norm.trajectory, &alpha).map_err(|e| e.to_string())?;
            for (w, b) in traj.waypoints.iter().zip(&back.waypoints) {
                for (x, y) in w.to_array().into_iter().zip(b.to_array()) {
                    let u = ulps(x, y);
                    worst_ulp = worst_ulp.max(u);
                    exact += (u == 0) as usize;
                    total += 1;
                }
            }
        }
    }
    ensure!(worst_ulp <= 1, "round trip off by {worst_ulp} ulp");

    for kind in [EmbodimentKind::IndoorRobot, EmbodimentKind::Car] {
        let gt = random_in_range(kind, &mut rng);
        let pred = random_in_range(kind, &mut rng);
        let base = trajectory::masked_mse(&pred, &gt).map_err(|e| e.to_string())?;
        let mut noisy = pred.clone();
        for w in &mut noisy.waypoints {
            w.z = rng.gen_range(-100.0..100.0);
        }
        let shifted = trajectory::masked_mse(&noisy, &gt).map_err(|e| e.to_string())?;
        ensure!(base.to_bits() == shifted.to_bits(), "{kind}: z changed the loss");
    }
    let uav = random_in_range(EmbodimentKind::Uav, &mut rng);
    let mut lifted = uav.clone();
    lifted.waypoints[0].z += 1.0;
    ensure!(trajectory::masked_mse(&lifted, &uav).unwrap() > 0.0, "uav z is ignored");

    // Five-point central differences; components far below the largest
    // gradient entry are compared against that scale instead of themselves.
    let mut worst_rel: f64 = 0.0;
    let h = 1e-3;
    for i in 0..100u64 {
        let kind = EmbodimentKind::ALL[i as usize % 3];
        let alpha = ScalingFactors::reference(kind);
        let mut head = PlanningHead::init(12, 16, i);
        let e: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gt = random_in_range(kind, &mut rng);
        let grad = trajectory::head_gradient(&head, &e, &gt, &alpha).map_err(|e| e.to_string())?.params();
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for (p, &g) in grad.iter().enumerate() {
            let orig = *head.param_mut(p);
            let mut loss_at = |d: f64| {
                *head.param_mut(p) = orig + d;
                let y = trajectory::head_forward(&head, &e, &alpha).unwrap();
                *head.param_mut(p) = orig;
                trajectory::masked_mse(&y, &gt).unwrap()
            };
            let fd = (8.0 * (loss_at(h) - loss_at(-h)) - (loss_at(2.0 * h) - loss_at(-2.0 * h))) / (12.0 * h);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6 * scale);
            worst_rel = worst_rel.max(rel);
        }
    }
    ensure!(worst_rel <= 1e-4, "gradient relative error {worst_rel:.2e}");
    Ok(format!(
        "round trip {exact}/{total} bit-exact, max {worst_ulp} ulp; z masked; grad rel err {worst_rel:.1e}"
    ))
}

fn discrete_conversion() -> Outcome {
    use DiscreteAction::*;
    let fwd = trajectory::discretize_to_trajectory(&[Forward, Forward], FORWARD_STEP_M, TURN_STEP_DEG).map_err(|e| e.to_string())?;
    let end = fwd.waypoints[1].position();
    ensure!(end == [0.25, 0.0, 0.0], "forward x2 ended at {end:?}");
    ensure!(fwd.waypoints.iter().skip(1).all(|w| w.position() == end), "padding does not hold the last pose");
    let turn = trajectory::discretize_to_trajectory(&[Left; 6], FORWARD_STEP_M, TURN_STEP_DEG).map_err(|e| e.to_string())?;
    let theta = turn.waypoints[5].theta;
    ensure!((theta - PI / 2.0).abs() < 1e-12, "left x6 heading {theta}");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let choices = [Forward, Left, Right, Stop];
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.gen_range(1..40);
        let actions: Vec<DiscreteAction> = (0..len)
            .map(|_| {
                let upper = if rng.gen_bool(0.05) { 4 } else { 3 };
                choices[rng.gen_range(0..upper)]
            })
            .collect();
        let forwards = actions.iter().take_while(|a| **a != Stop).filter(|a| **a == Forward).count();
        let poses = trajectory::accumulate_poses(&actions, FORWARD_STEP_M, TURN_STEP_DEG);
        let mut pts = vec![Point([0.0; 3])];
        pts.extend(poses.iter().map(|p| Point([p.x, p.y, 0.0])));
        let err = (metrics::path_length(&pts) - forwards as f64 * FORWARD_STEP_M).abs();
        worst = worst.max(err);
        ensure!(err < 1e-9, "{actions:?}: path length off by {err:.2e}");
    }
    Ok(format!("fixed cases exact, 1000 strings conserve length (max err {worst:.1e})"))
}

fn exhaustive_dtw(a: &[Point], b: &[Point]) -> f64 {
    fn walk(a: &[Point], b: &[Point], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + metrics::distance(&a[i], &b[j]);
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

fn random_path(rng: &mut ChaCha8Rng, len: usize) -> Vec<Point> {
    (0..len).map(|_| Point([rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), 0.0])).collect()
}

fn metric_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for len in 1..=10 {
        let path = random_path(&mut rng, len);
        let r = EpisodeResult::new(path.clone(), path, 1.0);
        let v = metrics::ndtw(&r, 3.0).map_err(|e| e.to_string())?;
        ensure!(v == 1.0, "identical paths of length {len} gave nDTW {v}");
    }
    let mut pairs = 0;
    for m in 1..=6 {
        for n in 1..=6 {
            for _ in 0..20 {
                let a = random_path(&mut rng, m);
                let b = random_path(&mut rng, n);
                let dp = metrics::dtw_cost(&a, &b).unwrap();
                let brute = exhaustive_dtw(&a, &b);
                ensure!((dp - brute).abs() <= 1e-9 * brute.max(1.0), "m={m} n={n}: dp {dp} vs exhaustive {brute}");
                pairs += 1;
            }
        }
    }
    let cfg = EvalConfig::default();
    for set in 0..1000 {
        let episodes: Vec<EpisodeResult> = (0..rng.gen_range(1..25))
            .map(|_| {
                let (ref_len, exec_len) = (rng.gen_range(2..10), rng.gen_range(1..12));
                let reference = random_path(&mut rng, ref_len);
                let executed = random_path(&mut rng, exec_len);
                let start = reference[0];
                let geodesic = metrics::distance(&start, reference.last().unwrap()).max(0.1);
                EpisodeResult::new(executed, reference, geodesic)
            })
            .collect();
        let report = metrics::aggregate(&episodes, &cfg).map_err(|e| e.to_string())?;
        ensure!(report.os >= report.sr, "set {set}: OS {} < SR {}", report.os, report.sr);
        ensure!(report.spl <= report.sr + 1e-12, "set {set}: SPL {} > SR {}", report.spl, report.sr);
    }
    Ok(format!("nDTW(identical)=1, {pairs} DTW pairs match exhaustive alignment, 1000 sets satisfy OS>=SR>=SPL"))
}

fn coarse_entry(rng: &mut ChaCha8Rng, dim: usize) -> CacheEntry {
    let data = (0..4 * dim).map(|_| f32::from_bits(rng.gen::<u32>() & 0xBFFF_FFFF)).collect();
    CacheEntry::new(FeatureMatrix::new(4, dim, data).unwrap()).unwrap()
}

fn cache_checks() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dim = 32;
    let path = dir.path().join("features.nfc");
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut written = Vec::new();
    {
        let store = CacheStore::create(&path, dim).map_err(|e| e.to_string())?;
        for i in 0..500u32 {
            let key = CacheKey::new(format!("ep{:03}", i % 37), i, (i % 4) as u16);
            let entry = coarse_entry(&mut rng, dim);
            store.put(&key, &entry).map_err(|e| e.to_string())?;
            written.push((key, entry));
        }
        store.sync().map_err(|e| e.to_string())?;
    }
    let reopened = CacheStore::open_expecting(&path, dim).map_err(|e| e.to_string())?;
    ensure!(reopened.len() == written.len(), "reopen lost entries");
    for (key, entry) in &written {
        let got = reopened.get(key).map_err(|e| e.to_string())?;
        let same = got.tokens().as_slice().iter().zip(entry.tokens().as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(same, "{key} not bit-exact after reopen");
    }
    drop(reopened);

    let clean = std::fs::read(&path).map_err(|e| e.to_string())?;
    let corrupt_path = dir.path().join("corrupt.nfc");
    let trials = 400;
    for trial in 0..trials {
        let mut bytes = clean.clone();
        let at = rng.gen_range(0..bytes.len());
        bytes[at] ^= rng.gen_range(1..=255u8);
        std::fs::write(&corrupt_path, &bytes).map_err(|e| e.to_string())?;
        let Ok(store) = CacheStore::open_expecting(&corrupt_path, dim) else {
            continue;
        };
        let mut detected = false;
        for (key, entry) in &written {
            match store.get(key) {
                Ok(got) => ensure!(&got == entry, "trial {trial}: byte {at} silently changed {key}"),
                Err(CacheError::ChecksumFailure(_) | CacheError::NotFound(_)) => detected = true,
                Err(e) => return Err(format!("trial {trial}: unexpected {e}")),
            }
        }
        ensure!(detected, "trial {trial}: corruption at byte {at} went unnoticed");
    }

    let stress = Arc::new(CacheStore::create(dir.path().join("stress.nfc"), 16).map_err(|e| e.to_string())?);
    let total = 10_000u32;
    let value = |i: u32| {
        let data = (0..64).map(|j| (i as f32) + j as f32 / 64.0).collect();
        CacheEntry::new(FeatureMatrix::new(4, 16, data).unwrap()).unwrap()
    };
    let done = Arc::new(AtomicBool::new(false));
    let readers: Vec<_> = (0..4)
        .map(|r| {
            let store = Arc::clone(&stress);
            let done = Arc::clone(&done);
            std::thread::spawn(move || -> Result<usize, String> {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + r);
                let mut hits = 0;
                while !done.load(Ordering::Acquire) || hits == 0 {
                    let i = rng.gen_range(0..total);
                    match store.get(&CacheKey::new("stress", i, 0)) {
                        Ok(e) if e == value(i) => hits += 1,
                        Ok(_) => return Err(format!("reader {r} saw a wrong value for {i}")),
                        Err(CacheError::NotFound(_)) => {}
                        Err(e) => return Err(format!("reader {r}: {e}")),
                    }
                }
                Ok(hits)
            })
        })
        .collect();
    for i in 0..total {
        stress.put(&CacheKey::new("stress", i, 0), &value(i)).map_err(|e| e.to_string())?;
    }
    done.store(true, Ordering::Release);
    let mut hits = 0;
    for r in readers {
        hits += r.join().map_err(panic_message)??;
    }
    ensure!(stress.len() == total as usize, "writer finished with {} entries", stress.len());
    for i in (0..total).step_by(97) {
        ensure!(stress.get(&CacheKey::new("stress", i, 0)).map_err(|e| e.to_string())? == value(i), "entry {i} after stress");
    }
    Ok(format!("500 entries bit-exact after reopen, {trials} single-byte corruptions caught, 4 readers made {hits} consistent reads"))
}
