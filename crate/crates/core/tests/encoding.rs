use std::path::PathBuf;

use navtoken_core::trajectory::{self, PlanningHead, ScalingFactors, Trajectory, Waypoint};
use navtoken_core::tvi::{time_pe, TviParams};
use navtoken_core::EmbodimentKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against a stored golden file, or records it when
/// `NAVTOKEN_BLESS` is set.
fn check_golden(name: &str, bits: Vec<u64>) {
    let path = golden_path(name);
    if std::env::var_os("NAVTOKEN_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&bits).unwrap()).unwrap();
        return;
    }
    let stored: Vec<u64> = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(stored, bits, "{name} drifted");
}

#[test]
fn time_encodings_are_pairwise_distinct() {
    let dim = 64;
    let codes: Vec<Vec<f32>> = (0..=10_000).map(|t| time_pe(t, dim).unwrap()).collect();
    let mut min = f32::INFINITY;
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            let d: f32 = codes[i].iter().zip(&codes[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            min = min.min(d);
        }
    }
    assert!(min > 0.0, "two timesteps share an encoding");
}

#[test]
fn seeded_projector_output_is_stable() {
    let params = TviParams::init(64, 64, 42).unwrap();
    let mut bits: Vec<u64> = params.time_term(7).unwrap().iter().map(|v| v.to_bits() as u64).collect();
    bits.extend(params.angle_term(1.0).unwrap().iter().map(|v| v.to_bits() as u64));
    check_golden("projector_seed42.json", bits);
}

#[test]
fn seeded_planning_head_is_stable() {
    let head = PlanningHead::init(16, 32, 42);
    let e: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
    let traj = trajectory::head_forward(&head, &e, &ScalingFactors::reference(EmbodimentKind::Uav)).unwrap();
    let bits = traj.waypoints.iter().flat_map(|w| w.to_array()).map(f64::to_bits).collect();
    check_golden("planning_head_seed42.json", bits);
}

fn x_only(kind: EmbodimentKind, xs: &[f64]) -> Trajectory {
    let wps = xs.iter().map(|&x| Waypoint::new(x, 0.1, 0.1, 0.1)).collect();
    Trajectory::new(kind, wps).unwrap()
}

#[test]
fn fitted_scale_follows_the_sorted_percentile() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let kind = EmbodimentKind::Uav;
    let trajs: Vec<Trajectory> =
        (0..12_500).map(|_| x_only(kind, &(0..8).map(|_| rng.gen_range(-1.0..=1.0)).collect::<Vec<_>>())).collect();
    let alpha = trajectory::fit_scaling_factors(&trajs).unwrap();
    let mut abs: Vec<f64> = trajs.iter().flat_map(|t| t.waypoints.iter().map(|w| w.x.abs())).collect();
    abs.sort_by(f64::total_cmp);
    let rank = 0.99 * (abs.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    let oracle = abs[lo] + (abs[hi] - abs[lo]) * (rank - lo as f64);
    assert_eq!(alpha.x, oracle);
    assert!((alpha.x - 0.99).abs() <= 0.01, "{}", alpha.x);
}

#[test]
fn one_outlier_does_not_set_the_scale() {
    let kind = EmbodimentKind::Car;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut trajs: Vec<Trajectory> =
        (0..1250).map(|_| x_only(kind, &(0..8).map(|_| rng.gen_range(-2.0..=2.0)).collect::<Vec<_>>())).collect();
    trajs[17].waypoints[3].x = 1e6;
    let alpha = trajectory::fit_scaling_factors(&trajs).unwrap();
    assert!(alpha.x < 2.0, "{}", alpha.x);
    assert!(alpha.z.is_none());
}
