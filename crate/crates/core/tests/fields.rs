mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use common::BruteBackbone;
use opwalk_core::annealed::field_seed;
use opwalk_core::cluster::{
    compute_backbone, horizon_disagreement, intersection_time, reaches, survival_gap,
};
use opwalk_core::environment::{sample_environment, EnvironmentWindow};
use opwalk_core::geometry::unit_ball_offsets;
use opwalk_core::stats::{linear_fit, mean};
use opwalk_core::{Boundary, SpaceTimePoint, SpatialBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn open_fraction_concentrates() {
    let env = EnvironmentWindow::generate(
        SpatialBox::new(vec![0], vec![99]).unwrap(),
        (0, 99),
        0.6,
        21,
        Boundary::Open,
        &[0],
        0,
    )
    .unwrap();
    assert_eq!(env.site_count(), 10_000);
    let sd = (0.6f64 * 0.4 / 10_000.0).sqrt();
    assert!((env.open_fraction() - 0.6).abs() <= 4.0 * sd);
}

#[test]
fn shifted_view_reads_shifted_sites() {
    let env = sample_environment(2, &[10, 10], (0, 20), 0.5, 8, Boundary::Open).unwrap();
    let view = env.shift_view(&[2, 1], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let x = [rng.gen_range(-8..=7), rng.gen_range(-8..=8)];
        let n = rng.gen_range(0..20);
        assert_eq!(view.is_open_at(&x, n).unwrap(), env.is_open_at(&[x[0] + 2, x[1] + 1], n + 1).unwrap());
    }
}

#[test]
fn bulk_export_matches_point_queries() {
    let env = sample_environment(1, &[15], (0, 12), 0.45, 5, Boundary::Open).unwrap();
    let exported: BTreeSet<(Vec<i64>, i64)> = env.open_sites().into_iter().map(|p| (p.x, p.n)).collect();
    for n in 0..=12 {
        for x in env.domain().iter() {
            assert_eq!(env.is_open_at(&x, n).unwrap(), exported.contains(&(x, n)));
        }
    }
}

#[test]
fn small_windows_match_path_enumeration() {
    for i in 0..50 {
        let env = sample_environment(1, &[3], (0, 5), 0.65, field_seed(40, i), Boundary::Open).unwrap();
        let field = compute_backbone(env.clone(), 5).unwrap();
        let mut brute = BruteBackbone::new(&env, 5);
        for t in 0..=5 {
            for x in env.domain().iter() {
                assert_eq!(field.xi(&x, t).unwrap(), brute.xi(&x, t));
            }
        }
    }
}

fn brute_reaches(env: &EnvironmentWindow, x: &[i64], m: i64, y: &[i64], n: i64) -> bool {
    if !env.domain().contains(x) || !env.is_open_at(x, m).unwrap() {
        return false;
    }
    if m == n {
        return x == y;
    }
    unit_ball_offsets(1)
        .iter()
        .any(|o| brute_reaches(env, &[x[0] + o[0]], m + 1, y, n))
}

#[test]
fn reachability_matches_path_enumeration() {
    let env = sample_environment(1, &[4], (0, 7), 0.6, 77, Boundary::Open).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let m = rng.gen_range(0..=7);
        let n = rng.gen_range(m..=7);
        let x = [rng.gen_range(-4..=4)];
        let y = [rng.gen_range(-4..=4)];
        let got = reaches(&env, &SpaceTimePoint::new(x.to_vec(), m), &SpaceTimePoint::new(y.to_vec(), n)).unwrap();
        assert_eq!(got, brute_reaches(&env, &x, m, &y, n), "{x:?}@{m} -> {y:?}@{n}");
    }
}

// At p = 0.8 in d = 1 these events are already unobservable at the second
// scale, so the decays are measured closer to p_c (about 0.54).
#[test]
fn horizon_disagreement_decays() {
    let ss = [5i64, 10, 20, 40];
    let mut acc = vec![Vec::new(); ss.len()];
    for i in 0..20 {
        let env = Arc::new(sample_environment(1, &[2000], (0, 80), 0.6, field_seed(3, i), Boundary::Open).unwrap());
        for (j, &s) in ss.iter().enumerate() {
            acc[j].push(horizon_disagreement(&env, 0, s, 20).unwrap());
        }
    }
    let ys: Vec<f64> = acc.iter().map(|v| mean(v).ln()).collect();
    let xs: Vec<f64> = ss.iter().map(|&s| s as f64).collect();
    assert!(linear_fit(&xs, &ys).slope < 0.0, "{ys:?}");
}

#[test]
fn survival_gap_decays() {
    let ns = [10i64, 20, 40];
    let est: Vec<f64> = ns
        .iter()
        .map(|&n| survival_gap(0.6, 1, n, 100, 5000, 3).unwrap().value)
        .collect();
    assert!(est.windows(2).all(|w| w[1] < w[0]), "{est:?}");
    let ys: Vec<f64> = est.iter().map(|v| v.ln()).collect();
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    assert!(linear_fit(&xs, &ys).slope < 0.0);
}

#[test]
fn non_intersection_becomes_rarer() {
    let mut freq = Vec::new();
    for m in [2i64, 4, 8] {
        let (mut none, mut total) = (0u32, 0u32);
        for i in 0..300 {
            let env = sample_environment(1, &[100], (0, 150), 0.65, field_seed(4, i), Boundary::Open).unwrap();
            let f = compute_backbone(env, 150).unwrap();
            for x in -40..40 {
                if f.xi(&[x], 0).unwrap() && f.xi(&[x + m], 0).unwrap() {
                    total += 1;
                    none += intersection_time(&f, &[x], &[x + m], 0, 4 * m).unwrap().is_none() as u32;
                }
            }
        }
        freq.push(none as f64 / total as f64);
    }
    assert!(freq.windows(2).all(|w| w[1] < w[0]), "{freq:?}");
}
