mod common;

use std::collections::HashMap;

use common::{enumerate_paths, trinomial, BruteBackbone};
use opwalk_core::annealed::{annealed_checkpoints, annealed_checkpoints_with, exact_annealed, field_seed, Estimator, ModelParams};
use opwalk_core::cluster::compute_backbone;
use opwalk_core::environment::sample_environment;
use opwalk_core::experiments::{
    build_coupling, derivative_estimates, integer_root, pair_tv, quenched_joint, tv_on_boxes, DerivativeKind, ScaleLadder,
};
use opwalk_core::measures::{ann_times_pre, qlclt_error};
use opwalk_core::prefactor::{check_harmonicity, compute_prefactor};
use opwalk_core::walk::{propagate_quenched, sample_path};
use opwalk_core::{Boundary, BoxPartition, SpaceTimePoint, SpatialBox};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn backbone_matches_path_search() {
    for i in 0..20 {
        let d = 1 + (i % 2) as usize;
        let ext = if d == 1 { 12 } else { 5 };
        let env = sample_environment(d, &vec![ext; d], (0, 14), 0.6, field_seed(90, i), Boundary::Open).unwrap();
        let field = compute_backbone(env.clone(), 14).unwrap();
        let mut brute = BruteBackbone::new(&env, 14);
        for t in 0..=14 {
            for x in env.domain().iter() {
                assert_eq!(field.xi(&x, t).unwrap(), brute.xi(&x, t), "seed {i} site {x:?} t {t}");
            }
        }
    }
}

#[test]
fn quenched_law_matches_path_enumeration() {
    for i in 0..100u64 {
        let d = 1 + (i % 2) as usize;
        let n: i64 = if d == 1 { 8 } else { 4 };
        let p = [0.55, 0.7, 0.85][(i % 3) as usize];
        let env = sample_environment(d, &vec![n + 3; d], (0, n + 6), p, field_seed(91, i), Boundary::Open).unwrap();
        let field = compute_backbone(env.clone(), n + 6).unwrap();
        let start = SpaceTimePoint::origin(d);
        let law = propagate_quenched(&field, &start, n).unwrap();
        let mut brute = BruteBackbone::new(&env, n + 6);
        let paths = enumerate_paths(&mut brute, &start.x, 0, n);
        for x in SpatialBox::ball(&start.x, n).iter() {
            let want = paths.get(&x).copied().unwrap_or(0.0);
            assert!((law.mass(&x) - want).abs() < 1e-12, "seed {i} site {x:?}");
        }
    }
}

#[test]
fn degenerate_environments_are_exact() {
    let n = 20;
    for d in [1, 2] {
        for p in [0.0, 1.0] {
            let params = ModelParams::new(d, p);
            let start = SpaceTimePoint::origin(d);
            let field = params.plan(&start, n, 0).unwrap().sample_field(&params, 1).unwrap();
            let q = propagate_quenched(&field, &start, n).unwrap();
            let a = exact_annealed(&params, &start, n).unwrap();
            for side in [1, 3] {
                let part = BoxPartition::cubes(d, side).unwrap();
                assert!(tv_on_boxes(&q.grid, &a.grid, &part) < 1e-10);
            }
            let psi = compute_prefactor(&field, n, n, Some(&SpatialBox::ball(&start.x, n + 1))).unwrap();
            assert!(psi.grid.values().iter().all(|v| (v - 1.0).abs() < 1e-10));
            assert!(qlclt_error(&q, &a, &psi).unwrap() < 1e-10);
            let (_, z) = ann_times_pre(&a, &psi).unwrap();
            assert!((z - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn monte_carlo_annealed_matches_enumeration() {
    let params = ModelParams::new(1, 0.7).with_horizon_margin(0);
    let start = SpaceTimePoint::origin(1);
    let exact = exact_annealed(&params, &start, 3).unwrap();
    let mc = annealed_checkpoints(&params, &start, &[3], 100_000, 5).unwrap().pop().unwrap();
    assert!((exact.total_mass() - 1.0).abs() < 1e-12);
    for x in SpatialBox::ball(&[0], 3).iter() {
        let se = mc.std_error_at(&x);
        assert!((mc.mass(&x) - exact.mass(&x)).abs() <= 4.0 * se + 1e-12, "site {x:?}");
    }
}

#[test]
fn prefactor_control_variate_agrees_with_the_plain_mean() {
    let start = SpaceTimePoint::origin(1);
    let cv = Estimator::PrefactorControl { depth: 8 };
    let full = ModelParams::new(1, 1.0).with_horizon_margin(4);
    let a = annealed_checkpoints(&full, &start, &[6], 20, 1).unwrap();
    let b = annealed_checkpoints_with(&full, &start, &[6], 20, 1, cv).unwrap();
    assert_eq!(a, b);
    let params = ModelParams::new(1, 0.8).with_horizon_margin(30).with_spatial_margin(10);
    let plain = annealed_checkpoints(&params, &start, &[12], 4000, 3).unwrap().pop().unwrap();
    let ctl = annealed_checkpoints_with(&params, &start, &[12], 4000, 3, cv).unwrap().pop().unwrap();
    let (mut se_plain, mut se_ctl) = (0.0, 0.0);
    for x in SpatialBox::ball(&[0], 12).iter() {
        let se = plain.std_error_at(&x);
        assert!((plain.mass(&x) - ctl.mass(&x)).abs() <= 4.0 * se + 1e-12, "site {x:?}");
        se_plain += se;
        se_ctl += ctl.std_error_at(&x);
    }
    assert!(se_ctl < 0.8 * se_plain, "{se_ctl} vs {se_plain}");
}

#[test]
fn prefactor_equals_direct_sum() {
    for i in 0..50u64 {
        let depth = 1 + (i % 10) as i64;
        let t = 12;
        let env = sample_environment(1, &[30], (0, 40), 0.75, field_seed(92, i), Boundary::Open).unwrap();
        let field = compute_backbone(env, 40).unwrap();
        let region = SpatialBox::ball(&[0], 6);
        let psi = compute_prefactor(&field, t, depth, Some(&region)).unwrap();
        let mut direct: HashMap<Vec<i64>, f64> = HashMap::new();
        for y in region.expand(depth).unwrap().iter() {
            let law = propagate_quenched(&field, &SpaceTimePoint::new(y, t - depth), depth).unwrap();
            for (x, v) in law.grid.nonzero() {
                *direct.entry(x).or_insert(0.0) += v;
            }
        }
        for x in region.iter() {
            assert!((psi.value(&x) - direct.get(&x).copied().unwrap_or(0.0)).abs() < 1e-10);
        }
        assert!(check_harmonicity(&field, t, depth, Some(&region)).unwrap() < 1e-10);

        let env = sample_environment(1, &[20], (0, 60), 0.75, field_seed(93, i), Boundary::Periodic).unwrap();
        let field = compute_backbone(env, 60).unwrap();
        let psi = compute_prefactor(&field, 20, depth, None).unwrap();
        assert!((psi.mean() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn sampled_paths_follow_the_quenched_law() {
    let env = sample_environment(1, &[20], (0, 60), 0.7, 17, Boundary::Open).unwrap();
    let field = compute_backbone(env, 60).unwrap();
    let start = SpaceTimePoint::origin(1);
    let n = 6;
    let law = propagate_quenched(&field, &start, n).unwrap();
    let mut counts = vec![0u64; (2 * n + 1) as usize];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples = 100_000;
    for _ in 0..samples {
        let path = sample_path(&field, &start, n, &mut rng).unwrap();
        counts[(path[n as usize][0] + n) as usize] += 1;
    }
    let mut chi2 = 0.0;
    let mut cells = 0;
    for (i, &c) in counts.iter().enumerate() {
        let e = law.mass(&[i as i64 - n]) * samples as f64;
        if e == 0.0 {
            assert_eq!(c, 0);
            continue;
        }
        chi2 += (c as f64 - e).powi(2) / e;
        cells += 1;
    }
    let pval = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(chi2);
    assert!(pval > 1e-4, "chi2 {chi2} on {cells} cells");
}

#[test]
fn coupling_of_free_walks_matches_convolution() {
    let (n, m) = (12i64, 3i64);
    let params = ModelParams::new(1, 1.0);
    let start = SpaceTimePoint::origin(1);
    let field = params.plan(&start, n, 0).unwrap().sample_field(&params, 4).unwrap();
    let q = quenched_joint(&field, &start, n, m).unwrap();
    let summary = build_coupling(&q, &q, n, m).unwrap();
    assert!(summary.residual_annealed < 1e-10 && summary.residual_quenched < 1e-10);

    // theta = sum over boxes of q(box) * sum_x c(x | box)^2
    let mid = trinomial((n - m) as usize);
    let step = trinomial(m as usize);
    let mut want = 0.0;
    let mut boxes: HashMap<i64, Vec<(i64, f64)>> = HashMap::new();
    for (i, w) in mid.iter().enumerate() {
        let y = i as i64 - (n - m);
        boxes.entry(y.div_euclid(m)).or_default().push((y, *w));
    }
    for members in boxes.values() {
        let mass: f64 = members.iter().map(|(_, w)| w).sum();
        let mut cond: HashMap<i64, f64> = HashMap::new();
        for (y, w) in members {
            for (j, s) in step.iter().enumerate() {
                *cond.entry(y + j as i64 - m).or_insert(0.0) += w * s / mass;
            }
        }
        want += mass * cond.values().map(|c| c * c).sum::<f64>();
    }
    assert!((summary.theta_lambda - want).abs() < 1e-12);
    assert!((summary.diagonal_box_mass - 1.0).abs() < 1e-12);
}

#[test]
fn free_pair_tv_matches_shifted_trinomials() {
    let params = ModelParams::new(1, 1.0);
    let start = SpaceTimePoint::origin(1);
    let mut prev = f64::INFINITY;
    for n in [5i64, 10, 20, 40] {
        let field = params.plan(&start, n, 0).unwrap().sample_field(&params, 2).unwrap();
        let tv = pair_tv(&field, &start, &[1], n).unwrap();
        let t = trinomial(n as usize);
        let mut want = 0.0;
        for i in 0..=t.len() {
            let a = t.get(i).copied().unwrap_or(0.0);
            let b = if i == 0 { 0.0 } else { t[i - 1] };
            want += 0.5 * (a - b).abs();
        }
        assert!((tv - want).abs() < 1e-12);
        assert!(tv < prev);
        prev = tv;
    }
}

#[test]
fn ladder_arithmetic() {
    assert_eq!([2, 4, 8].map(|k| integer_root(256, k)), [16, 4, 2]);
    let l = ScaleLadder::new(256, 0.4, 2.0).unwrap();
    assert_eq!(l.scales, vec![256, 16, 4]);
    assert_eq!(l.r, 2);
    let l = ScaleLadder::new(256, 0.4, 1.5).unwrap();
    assert_eq!(l.scales, vec![256, 16, 4, 2]);
    assert_eq!(l.r, 3);
    assert_eq!(*l.checkpoints.last().unwrap(), 256);
    let l = ScaleLadder::new(4096, 0.4, 2.0).unwrap();
    assert_eq!(l.scales, vec![4096, 64, 8, 2]);
    assert_eq!(l.checkpoints, vec![4022, 4086, 4094, 4096]);
    assert_eq!(l.sides, vec![27, 5, 2, 1]);
}

#[test]
fn free_walk_derivatives_match_closed_form() {
    let params = ModelParams::new(1, 0.0);
    let ns = [25i64, 50, 100];
    let rows = derivative_estimates(&params, &ns, 2, 1, 0.25).unwrap();
    for &n in &ns {
        let t = trinomial(n as usize);
        let prev = trinomial(n as usize - 1);
        let at = |v: &[f64], k: i64, x: i64| -> f64 {
            let i = x + k;
            if i < 0 || i as usize >= v.len() {
                0.0
            } else {
                v[i as usize]
            }
        };
        let mut shift = 0.0f64;
        let mut time = 0.0f64;
        for x in -n - 1..=n + 1 {
            shift = shift.max((at(&t, n, x) - at(&t, n, x - 1)).abs());
            time = time.max((at(&t, n, x) - at(&prev, n - 1, x)).abs());
        }
        for r in rows.iter().filter(|r| r.n == n) {
            let want = match r.kind {
                Some(DerivativeKind::StartShift) | Some(DerivativeKind::TargetShift) => shift,
                Some(DerivativeKind::StartTime) | Some(DerivativeKind::EndTime) => time,
                None => continue,
            };
            assert!((r.raw - want).abs() < 1e-12, "{:?} n={n}", r.kind);
        }
    }
    let sup = |kind| {
        rows.iter()
            .filter(|r| r.kind == Some(kind))
            .map(|r| r.scaled)
            .collect::<Vec<_>>()
    };
    for kind in [DerivativeKind::StartShift, DerivativeKind::EndTime] {
        let s = sup(kind);
        let (lo, hi) = s.iter().fold((f64::MAX, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(hi / lo < 3.0, "{kind:?} {s:?}");
    }
}
