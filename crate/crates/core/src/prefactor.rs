//! Prefactor fields `psi_N(x, n) = sum_y P^{(y, n-N)}(X_n = x)` and their
//! Cesaro averages, which approximate the density of the invariant measure
//! for the environment seen from the walker.

use std::io::Write;

use crate::cluster::{BackboneField, Estimate};
use crate::error::{Error, Result};
use crate::geometry::{unit_ball_offsets, Boundary, Grid, SpaceTimePoint, SpatialBox};
use crate::stats::OnlineStats;
use crate::walk::{step_distribution, write_grid_csv, DistributionSlice, KernelRow, Stepper};

#[derive(Debug, Clone, PartialEq)]
pub struct PrefactorSlice {
    pub time: i64,
    /// Lookback `N`; for Cesaro slices, `N_max`.
    pub depth: i64,
    pub cesaro: bool,
    pub grid: Grid,
    pub horizon: i64,
    pub boundary: Boundary,
}

impl PrefactorSlice {
    pub fn value(&self, x: &[i64]) -> f64 {
        self.grid.get(x)
    }

    pub fn region(&self) -> &SpatialBox {
        self.grid.region()
    }

    pub fn mean(&self) -> f64 {
        self.grid.total() / self.grid.values().len() as f64
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        write_grid_csv(w, &self.grid, "value", false)
    }

    pub fn metadata(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n", self.time.to_string()),
            ("N", self.depth.to_string()),
            ("cesaro", self.cesaro.to_string()),
            ("horizon", self.horizon.to_string()),
            ("boundary", self.boundary.as_str().to_string()),
        ]
    }
}

/// Largest target region whose `depth`-step backward cone (plus one site for
/// kernel lookups) stays inside the window.
pub fn default_region(field: &BackboneField, depth: i64) -> Result<SpatialBox> {
    let dom = field.domain();
    if field.boundary() == Boundary::Periodic {
        return Ok(dom.clone());
    }
    let lo: Vec<i64> = dom.lo().iter().map(|v| v + depth + 1).collect();
    let hi: Vec<i64> = dom.hi().iter().map(|v| v - depth - 1).collect();
    SpatialBox::new(lo, hi).map_err(|_| {
        Error::geometry(format!("window {dom} too small for prefactor depth {depth}"))
    })
}

fn target_region(field: &BackboneField, depth: i64, region: Option<&SpatialBox>) -> Result<SpatialBox> {
    match (field.boundary(), region) {
        (Boundary::Periodic, Some(r)) if r != field.domain() => {
            Err(Error::geometry("periodic prefactors cover the full torus"))
        }
        (_, Some(r)) => Ok(r.clone()),
        (_, None) => default_region(field, depth),
    }
}

fn check_times(field: &BackboneField, n: i64, depth: i64) -> Result<()> {
    let (t_lo, horizon) = field.time_range();
    if depth < 0 {
        return Err(Error::config("prefactor depth must be non-negative"));
    }
    if n - depth < t_lo || n > horizon {
        return Err(Error::range(format!(
            "prefactor at n={n} with depth {depth} needs times [{}, {n}] inside [{t_lo}, {horizon}]",
            n - depth
        )));
    }
    Ok(())
}

/// Forward pass over `[n - depth, n]` on shrinking regions `R + (n - t)`.
/// With `cesaro`, one unit of fresh mass is added at every slice so the
/// result at `n` is `sum_{N < depth} psi_N` (plus `psi_0` at the start slice).
fn forward_sum(field: &BackboneField, n: i64, depth: i64, target: &SpatialBox, cesaro: bool) -> Result<Grid> {
    let periodic = field.boundary() == Boundary::Periodic;
    let at = |t: i64| -> Result<SpatialBox> {
        if periodic {
            Ok(field.domain().clone())
        } else {
            target.expand(n - t)
        }
    };
    let st = Stepper::new(field);
    let mut cur = Grid::filled(at(n - depth)?, 1.0);
    for t in n - depth..n {
        cur = st.push_forward(&cur, t, &at(t + 1)?)?;
        if cesaro {
            cur.values_mut().iter_mut().for_each(|v| *v += 1.0);
        }
    }
    Ok(cur)
}

/// `psi_N(., n)` on `region` (default: the largest region the window supports).
pub fn compute_prefactor(
    field: &BackboneField,
    n: i64,
    depth: i64,
    region: Option<&SpatialBox>,
) -> Result<PrefactorSlice> {
    check_times(field, n, depth)?;
    let target = target_region(field, depth, region)?;
    let grid = forward_sum(field, n, depth, &target, false)?;
    Ok(PrefactorSlice {
        time: n,
        depth,
        cesaro: false,
        grid,
        horizon: field.horizon(),
        boundary: field.boundary(),
    })
}

/// `(1 / N_max) sum_{N=0}^{N_max - 1} psi_N(., n)`.
pub fn cesaro_prefactor(
    field: &BackboneField,
    n: i64,
    n_max: i64,
    region: Option<&SpatialBox>,
) -> Result<PrefactorSlice> {
    if n_max < 1 {
        return Err(Error::config("N_max must be at least 1"));
    }
    check_times(field, n, n_max - 1)?;
    let target = target_region(field, n_max - 1, region)?;
    let mut grid = forward_sum(field, n, n_max - 1, &target, true)?;
    let inv = 1.0 / n_max as f64;
    grid.values_mut().iter_mut().for_each(|v| *v *= inv);
    Ok(PrefactorSlice {
        time: n,
        depth: n_max,
        cesaro: true,
        grid,
        horizon: field.horizon(),
        boundary: field.boundary(),
    })
}

/// Point-of-view kernel `g` at `(x, n)`, computed from `omega(x, n)` and
/// `xi_{n+1}` directly.
pub fn pov_weights(field: &BackboneField, at: &SpaceTimePoint) -> Result<KernelRow> {
    if at.n + 1 > field.horizon() || at.n < field.time_range().0 {
        return Err(Error::range(format!("{at} has no successor slice in the backbone range")));
    }
    let env = field.env();
    let offsets = unit_ball_offsets(field.dim());
    let s = env
        .resolve(&at.x)
        .ok_or_else(|| Error::range(format!("{at} outside window")))?;
    let mut next = Vec::with_capacity(offsets.len());
    for o in &offsets {
        let y: Vec<i64> = at.x.iter().zip(o).map(|(a, b)| a + b).collect();
        next.push(field.xi(&y, at.n + 1)?);
    }
    let count = next.iter().filter(|&&b| b).count();
    let probs = if field.omega_flat(s, at.n) && count > 0 {
        next.iter().map(|&b| if b { 1.0 / count as f64 } else { 0.0 }).collect()
    } else {
        vec![1.0 / offsets.len() as f64; offsets.len()]
    };
    Ok(KernelRow {
        origin: at.clone(),
        offsets,
        probs,
    })
}

/// Max over the region of `|psi_N(x, n) - sum_y K((y, n-1))[x] psi_{N-1}(y, n-1)|`,
/// with both slices and the kernel rows built independently.
pub fn check_harmonicity(field: &BackboneField, n: i64, depth: i64, region: Option<&SpatialBox>) -> Result<f64> {
    if depth < 1 {
        return Err(Error::config("harmonicity needs N >= 1"));
    }
    let now = compute_prefactor(field, n, depth, region)?;
    let before_region = match field.boundary() {
        Boundary::Open => now.region().expand(1)?,
        Boundary::Periodic => field.domain().clone(),
    };
    let before = compute_prefactor(field, n - 1, depth - 1, Some(&before_region))?;
    let offsets = unit_ball_offsets(field.dim());
    let mut worst = 0.0f64;
    for (i, v) in now.grid.values().iter().enumerate() {
        let x = now.region().coords_of(i);
        let mut acc = 0.0;
        for o in &offsets {
            let mut y: Vec<i64> = x.iter().zip(o).map(|(a, b)| a - b).collect();
            if field.boundary() == Boundary::Periodic {
                y = field.domain().wrap(&y);
            }
            let row = step_distribution(field, &SpaceTimePoint::new(y.clone(), n - 1))?;
            acc += row.prob(o) * before.value(&y);
        }
        worst = worst.max((v - acc).abs());
    }
    Ok(worst)
}

/// Deviations `|box average - 1|` over the complete side-`m` boxes tiling the
/// slice region from its lower corner.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxConcentration {
    pub side: i64,
    pub deviations: Vec<f64>,
}

impl BoxConcentration {
    pub fn exceedance(&self, eps: f64) -> f64 {
        if self.deviations.is_empty() {
            return 0.0;
        }
        self.deviations.iter().filter(|&&d| d > eps).count() as f64 / self.deviations.len() as f64
    }

    pub fn max_deviation(&self) -> f64 {
        self.deviations.iter().copied().fold(0.0, f64::max)
    }
}

pub fn box_concentration(slice: &PrefactorSlice, side: i64) -> Result<BoxConcentration> {
    if side < 1 {
        return Err(Error::config("box side must be at least 1"));
    }
    let region = slice.region();
    let d = region.dim();
    let counts: Vec<i64> = (0..d).map(|a| region.width(a) / side).collect();
    let mut deviations = Vec::new();
    if counts.contains(&0) {
        return Ok(BoxConcentration { side, deviations });
    }
    let index_box = SpatialBox::new(vec![0; d], counts.iter().map(|c| c - 1).collect())?;
    for b in index_box.iter() {
        let lo: Vec<i64> = (0..d).map(|a| region.lo()[a] + b[a] * side).collect();
        let hi: Vec<i64> = lo.iter().map(|v| v + side - 1).collect();
        let cell = SpatialBox::new(lo, hi)?;
        let sum: f64 = cell.iter().map(|x| slice.value(&x)).sum();
        deviations.push((sum / cell.len() as f64 - 1.0).abs());
    }
    Ok(BoxConcentration { side, deviations })
}

/// Bounded local functional of the backbone field near a space-time site.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalFunctional {
    Constant(f64),
    /// `xi_{n + dt}(x + dx)`.
    XiAt { dx: Vec<i64>, dt: i64 },
    /// Fraction of backbone sites in the radius-`r` ball at time `n`.
    XiPatchDensity { radius: i64 },
}

impl LocalFunctional {
    pub fn eval(&self, field: &BackboneField, x: &[i64], n: i64) -> Result<f64> {
        let site = |y: &[i64]| -> Vec<i64> {
            if field.boundary() == Boundary::Periodic {
                field.domain().wrap(y)
            } else {
                y.to_vec()
            }
        };
        match self {
            LocalFunctional::Constant(c) => Ok(*c),
            LocalFunctional::XiAt { dx, dt } => {
                let y: Vec<i64> = x.iter().zip(dx).map(|(a, b)| a + b).collect();
                Ok(field.xi(&site(&y), n + dt)? as u8 as f64)
            }
            LocalFunctional::XiPatchDensity { radius } => {
                let ball = SpatialBox::ball(x, *radius);
                let mut on = 0usize;
                for y in ball.iter() {
                    on += field.xi(&site(&y), n)? as usize;
                }
                Ok(on as f64 / ball.len() as f64)
            }
        }
    }

    /// Reach of the functional beyond `(x, n)`: (spatial, temporal).
    pub fn reach(&self) -> (i64, i64) {
        match self {
            LocalFunctional::Constant(_) => (0, 0),
            LocalFunctional::XiAt { dx, dt } => (dx.iter().map(|v| v.abs()).max().unwrap_or(0), (*dt).max(0)),
            LocalFunctional::XiPatchDensity { radius } => (*radius, 0),
        }
    }
}

/// Spatial average over `region` of `psi_N(x, n) [(Nf)(x, n) - f(x, n)]`,
/// where `(Nf)(x, n) = sum_y g(y) f(x + y, n + 1)`. Returns the absolute
/// average with the standard error of the site average.
pub fn invariance_gap(
    field: &BackboneField,
    f: &LocalFunctional,
    n: i64,
    depth: i64,
    region: Option<&SpatialBox>,
) -> Result<Estimate> {
    let (reach, _) = f.reach();
    let region = match region {
        Some(r) => r.clone(),
        None if field.boundary() == Boundary::Periodic => field.domain().clone(),
        None => {
            let dom = field.domain();
            let pad = (depth + 1).max(reach + 1);
            SpatialBox::new(
                dom.lo().iter().map(|v| v + pad).collect(),
                dom.hi().iter().map(|v| v - pad).collect(),
            )
            .map_err(|_| Error::geometry("window too small for the invariance probe"))?
        }
    };
    let psi = compute_prefactor(field, n, depth, Some(&region))?;
    let mut stats = OnlineStats::default();
    for (i, &w) in psi.grid.values().iter().enumerate() {
        let x = region.coords_of(i);
        let g = pov_weights(field, &SpaceTimePoint::new(x.clone(), n))?;
        let mut nf = 0.0;
        for (o, &pr) in g.offsets.iter().zip(&g.probs) {
            if pr > 0.0 {
                let y: Vec<i64> = x.iter().zip(o).map(|(a, b)| a + b).collect();
                nf += pr * f.eval(field, &y, n + 1)?;
            }
        }
        stats.push(w * (nf - f.eval(field, &x, n)?));
    }
    let e = Estimate::from_stats(&stats);
    Ok(Estimate {
        value: e.value.abs(),
        ..e
    })
}

/// `sum_x P(X_n = x) |psi_A(x) - psi_B(x)|` over the annealed support.
pub fn uniqueness_probe(annealed: &DistributionSlice, a: &PrefactorSlice, b: &PrefactorSlice) -> Result<f64> {
    if a.time != b.time || a.time != annealed.time {
        return Err(Error::config("uniqueness probe needs slices at the same time"));
    }
    let mut gap = 0.0;
    for (x, m) in annealed.grid.nonzero() {
        if !a.region().contains(&x) || !b.region().contains(&x) {
            return Err(Error::geometry(format!("annealed support site {x:?} outside a prefactor slice")));
        }
        gap += m * (a.value(&x) - b.value(&x)).abs();
    }
    Ok(gap)
}

/// Empirical moments `mean_x psi(x)^k` for `k = 1..=k_max`.
pub fn prefactor_moments(slice: &PrefactorSlice, k_max: u32) -> Vec<f64> {
    let n = slice.grid.values().len() as f64;
    (1..=k_max)
        .map(|k| slice.grid.values().iter().map(|v| v.powi(k as i32)).sum::<f64>() / n)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::compute_backbone;
    use crate::environment::sample_environment;

    fn field(p: f64, seed: u64, ext: i64, t: (i64, i64), b: Boundary) -> BackboneField {
        let env = sample_environment(1, &[ext], t, p, seed, b).unwrap();
        compute_backbone(env, t.1).unwrap()
    }

    #[test]
    fn depth_zero_is_ones() {
        let f = field(0.7, 1, 20, (0, 30), Boundary::Open);
        let s = compute_prefactor(&f, 10, 0, None).unwrap();
        assert!(s.grid.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn periodic_degenerate_is_ones() {
        for p in [0.0, 1.0] {
            let f = field(p, 1, 10, (0, 30), Boundary::Periodic);
            let s = compute_prefactor(&f, 20, 15, None).unwrap();
            assert!(s.grid.values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn periodic_mean_is_one() {
        let f = field(0.7, 4, 10, (0, 40), Boundary::Periodic);
        let s = compute_prefactor(&f, 25, 20, None).unwrap();
        assert!((s.mean() - 1.0).abs() < 1e-12);
        assert!(s.grid.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn cesaro_one_is_ones() {
        let f = field(0.7, 2, 20, (0, 30), Boundary::Open);
        let s = cesaro_prefactor(&f, 10, 1, None).unwrap();
        assert!(s.grid.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cesaro_is_average_of_depths() {
        let f = field(0.7, 3, 30, (0, 40), Boundary::Open);
        let region = SpatialBox::ball(&[0], 5);
        let c = cesaro_prefactor(&f, 12, 6, Some(&region)).unwrap();
        let mut avg = Grid::zeros(region.clone());
        for n in 0..6 {
            let s = compute_prefactor(&f, 12, n, Some(&region)).unwrap();
            for (a, v) in avg.values_mut().iter_mut().zip(s.grid.values()) {
                *a += v / 6.0;
            }
        }
        for (a, b) in avg.values().iter().zip(c.grid.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pov_matches_kernel() {
        let f = field(0.6, 5, 15, (0, 20), Boundary::Open);
        for x in -10..=10 {
            for n in 0..19 {
                let pt = SpaceTimePoint::new([x], n);
                assert_eq!(pov_weights(&f, &pt).unwrap().probs, step_distribution(&f, &pt).unwrap().probs);
            }
        }
    }

    #[test]
    fn harmonicity_small() {
        let f = field(0.75, 6, 30, (0, 40), Boundary::Open);
        assert!(check_harmonicity(&f, 15, 8, Some(&SpatialBox::ball(&[0], 6))).unwrap() < 1e-10);
    }

    #[test]
    fn full_box_has_zero_deviation() {
        let f = field(0.7, 4, 10, (0, 40), Boundary::Periodic);
        let s = compute_prefactor(&f, 25, 20, None).unwrap();
        let c = box_concentration(&s, 21).unwrap();
        assert_eq!(c.deviations.len(), 1);
        assert!(c.deviations[0] < 1e-12);
    }

    #[test]
    fn constant_functional_has_zero_gap() {
        let f = field(0.7, 7, 30, (0, 40), Boundary::Open);
        let g = invariance_gap(&f, &LocalFunctional::Constant(1.0), 10, 5, None).unwrap();
        assert_eq!(g.value, 0.0);
    }

    #[test]
    fn moments_of_ones() {
        let f = field(1.0, 1, 10, (0, 20), Boundary::Periodic);
        let s = compute_prefactor(&f, 10, 5, None).unwrap();
        for m in prefactor_moments(&s, 4) {
            assert!((m - 1.0).abs() < 1e-12);
        }
    }
}
