//! The quenched transition kernel and exact propagation of walk laws.
//!
//! From a backbone site the walk jumps uniformly to one of its backbone
//! neighbours at the next time; from any other site it jumps uniformly over
//! the `3^d` sup-norm neighbours.

use std::io::Write;

use rand::Rng;

use crate::cluster::BackboneField;
use crate::error::{Error, Result};
use crate::geometry::{unit_ball_offsets, Boundary, Grid, SpaceTimePoint, SpatialBox, MAX_DIM};

/// Transition probabilities out of one site, indexed like [`unit_ball_offsets`].
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRow {
    pub origin: SpaceTimePoint,
    pub offsets: Vec<Vec<i64>>,
    pub probs: Vec<f64>,
}

impl KernelRow {
    pub fn prob(&self, offset: &[i64]) -> f64 {
        self.offsets
            .iter()
            .position(|o| o == offset)
            .map_or(0.0, |k| self.probs[k])
    }
}

/// Shared neighbour bookkeeping for one field.
pub(crate) struct Stepper<'a> {
    field: &'a BackboneField,
    d: usize,
    offsets: Vec<[i64; MAX_DIM]>,
    env_deltas: Vec<isize>,
    uniform: f64,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(field: &'a BackboneField) -> Self {
        let d = field.dim();
        let domain = field.domain();
        let offsets: Vec<[i64; MAX_DIM]> = unit_ball_offsets(d)
            .into_iter()
            .map(|o| {
                let mut a = [0; MAX_DIM];
                a[..d].copy_from_slice(&o);
                a
            })
            .collect();
        let env_deltas = offsets
            .iter()
            .map(|o| (0..d).map(|i| o[i] as isize * domain.strides()[i] as isize).sum())
            .collect();
        Stepper {
            field,
            d,
            uniform: 1.0 / offsets.len() as f64,
            offsets,
            env_deltas,
        }
    }

    pub(crate) fn offsets(&self) -> &[[i64; MAX_DIM]] {
        &self.offsets
    }

    #[inline]
    fn neighbor(&self, s: usize, x: &[i64], k: usize) -> usize {
        match self.field.boundary() {
            Boundary::Open => (s as isize + self.env_deltas[k]) as usize,
            Boundary::Periodic => {
                let mut y = [0i64; MAX_DIM];
                for i in 0..self.d {
                    y[i] = x[i] + self.offsets[k][i];
                }
                self.field.domain().wrap_index(&y[..self.d])
            }
        }
    }

    /// Calls `f(k, weight)` for every offset with positive probability out of
    /// `(x, t)`; `s` is the resolved spatial index of `x`. All neighbours must
    /// be indexable and `t + 1 <= horizon`.
    #[inline]
    pub(crate) fn for_each_step(&self, s: usize, x: &[i64], t: i64, mut f: impl FnMut(usize, f64)) {
        if self.field.xi_flat(s, t) {
            let mut mask = 0u32;
            let mut count = 0u32;
            for k in 0..self.offsets.len() {
                if self.field.xi_flat(self.neighbor(s, x, k), t + 1) {
                    mask |= 1 << k;
                    count += 1;
                }
            }
            debug_assert!(count > 0, "backbone site without successor");
            let w = 1.0 / count as f64;
            for k in 0..self.offsets.len() {
                if mask & (1 << k) != 0 {
                    f(k, w);
                }
            }
        } else {
            for k in 0..self.offsets.len() {
                f(k, self.uniform);
            }
        }
    }

    /// Check that a walk at `region` at time `t` can take one step.
    pub(crate) fn check_step(&self, region: &SpatialBox, t: i64) -> Result<()> {
        let (t_lo, horizon) = self.field.time_range();
        if t < t_lo || t + 1 > horizon {
            return Err(Error::range(format!(
                "step from time {t} needs times [{t}, {}] inside backbone range [{t_lo}, {horizon}]",
                t + 1
            )));
        }
        if self.field.boundary() == Boundary::Open && !self.field.domain().contains_box(&region.expand(1)?) {
            return Err(Error::geometry(format!(
                "walk region {region} at time {t} plus one step leaves window {}",
                self.field.domain()
            )));
        }
        Ok(())
    }

    /// Push `src` (at time `t`) one step forward onto `dst_region`; mass landing
    /// outside `dst_region` is dropped. Under periodic boundaries both regions
    /// must be the full domain.
    pub(crate) fn push_forward(&self, src: &Grid, t: i64, dst_region: &SpatialBox) -> Result<Grid> {
        let domain = self.field.domain();
        let periodic = self.field.boundary() == Boundary::Periodic;
        if periodic && (src.region() != domain || dst_region != domain) {
            return Err(Error::geometry("periodic propagation runs on the full torus"));
        }
        self.check_step(src.region(), t)?;
        let mut dst = Grid::zeros(dst_region.clone());
        let d = self.d;
        let mut y = [0i64; MAX_DIM];
        for (i, &m) in src.values().iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let x = src.region().coords_of(i);
            let s = domain.index_of(&x).expect("source inside window");
            let out = dst.values_mut();
            self.for_each_step(s, &x, t, |k, w| {
                for a in 0..d {
                    y[a] = x[a] + self.offsets[k][a];
                }
                let j = if periodic {
                    Some(dst_region.wrap_index(&y[..d]))
                } else {
                    dst_region.index_of(&y[..d])
                };
                if let Some(j) = j {
                    out[j] += m * w;
                }
            });
        }
        Ok(dst)
    }
}

/// One-step kernel out of `pt`.
pub fn step_distribution(field: &BackboneField, pt: &SpaceTimePoint) -> Result<KernelRow> {
    let st = Stepper::new(field);
    let s = field
        .env()
        .resolve(&pt.x)
        .ok_or_else(|| Error::range(format!("{pt} outside window")))?;
    st.check_step(&SpatialBox::ball(&pt.x, 0), pt.n)
        .map_err(|e| match e {
            Error::Geometry(m) => Error::Range(m),
            other => other,
        })?;
    let offsets = unit_ball_offsets(field.dim());
    let mut probs = vec![0.0; offsets.len()];
    st.for_each_step(s, &pt.x, pt.n, |k, w| probs[k] = w);
    Ok(KernelRow {
        origin: pt.clone(),
        offsets,
        probs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LawKind {
    Quenched,
    Annealed,
    Hybrid,
}

impl LawKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LawKind::Quenched => "quenched",
            LawKind::Annealed => "annealed",
            LawKind::Hybrid => "hybrid",
        }
    }
}

/// Where a slice came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    /// Exact computation in one environment with this seed.
    Exact { seed: u64 },
    /// Exact average over all environments of a finite slab.
    Enumerated { sites: usize },
    /// Monte Carlo average over `reps` fields derived from `base_seed`.
    MonteCarlo { base_seed: u64, reps: u64 },
    Derived(String),
}

impl Provenance {
    pub fn describe(&self) -> String {
        match self {
            Provenance::Exact { seed } => format!("exact seed={seed}"),
            Provenance::Enumerated { sites } => format!("enumerated sites={sites}"),
            Provenance::MonteCarlo { base_seed, reps } => format!("mc base_seed={base_seed} reps={reps}"),
            Provenance::Derived(s) => s.clone(),
        }
    }
}

/// Probability mass function of the walk position at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionSlice {
    pub time: i64,
    pub grid: Grid,
    pub label: LawKind,
    pub provenance: Provenance,
    /// Per-site Monte Carlo standard errors, when estimated.
    pub std_error: Option<Grid>,
}

impl DistributionSlice {
    pub fn point_mass(pt: &SpaceTimePoint, label: LawKind, provenance: Provenance) -> Self {
        let mut grid = Grid::zeros(SpatialBox::ball(&pt.x, 0));
        grid.set(&pt.x, 1.0).expect("centre of its own ball");
        DistributionSlice {
            time: pt.n,
            grid,
            label,
            provenance,
            std_error: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.grid.region().dim()
    }

    pub fn mass(&self, x: &[i64]) -> f64 {
        self.grid.get(x)
    }

    pub fn std_error_at(&self, x: &[i64]) -> f64 {
        self.std_error.as_ref().map_or(0.0, |g| g.get(x))
    }

    pub fn total_mass(&self) -> f64 {
        self.grid.total()
    }

    pub fn support(&self) -> Vec<Vec<i64>> {
        self.grid.nonzero().map(|(x, _)| x).collect()
    }

    /// CSV with columns `x1..xd,mass`, nonzero sites only, in index order.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        write_grid_csv(w, &self.grid, "mass", true)
    }
}

pub(crate) fn write_grid_csv<W: Write>(w: &mut W, grid: &Grid, value_name: &str, skip_zero: bool) -> Result<()> {
    let d = grid.region().dim();
    let header: Vec<String> = (1..=d).map(|i| format!("x{i}")).chain([value_name.to_string()]).collect();
    writeln!(w, "{}", header.join(","))?;
    for (i, v) in grid.values().iter().enumerate() {
        if skip_zero && *v == 0.0 {
            continue;
        }
        let x = grid.region().coords_of(i);
        let cols: Vec<String> = x.iter().map(|c| c.to_string()).chain([format!("{v:e}")]).collect();
        writeln!(w, "{}", cols.join(","))?;
    }
    Ok(())
}

/// Push a law forward `steps` times, growing the region by one per step.
pub fn propagate_grid(field: &BackboneField, start: &Grid, t0: i64, steps: i64) -> Result<Grid> {
    let st = Stepper::new(field);
    let mut cur = start.clone();
    for k in 0..steps {
        let next_region = match field.boundary() {
            Boundary::Open => cur.region().expand(1)?,
            Boundary::Periodic => field.domain().clone(),
        };
        cur = st.push_forward(&cur, t0 + k, &next_region)?;
    }
    Ok(cur)
}

fn start_grid(field: &BackboneField, start: &SpaceTimePoint) -> Result<Grid> {
    if start.dim() != field.dim() {
        return Err(Error::config("start point dimension mismatch"));
    }
    match field.boundary() {
        Boundary::Open => {
            let mut g = Grid::zeros(SpatialBox::ball(&start.x, 0));
            g.set(&start.x, 1.0)?;
            Ok(g)
        }
        Boundary::Periodic => {
            let mut g = Grid::zeros(field.domain().clone());
            let x = field.domain().wrap(&start.x);
            g.set(&x, 1.0)?;
            Ok(g)
        }
    }
}

/// Exact quenched law of `X_{m + n_steps}` for the walk started at `start = (y, m)`.
pub fn propagate_quenched(field: &BackboneField, start: &SpaceTimePoint, n_steps: i64) -> Result<DistributionSlice> {
    Ok(propagate_checkpoints(field, start, &[n_steps])?.pop().expect("one checkpoint"))
}

/// Quenched laws after each number of steps in `checkpoints` (ascending), from one pass.
pub fn propagate_checkpoints(
    field: &BackboneField,
    start: &SpaceTimePoint,
    checkpoints: &[i64],
) -> Result<Vec<DistributionSlice>> {
    if checkpoints.windows(2).any(|w| w[1] < w[0]) || checkpoints.first().is_some_and(|&c| c < 0) {
        return Err(Error::config("checkpoints must be non-negative and ascending"));
    }
    let mut cur = start_grid(field, start)?;
    let mut done = 0i64;
    let mut out = Vec::with_capacity(checkpoints.len());
    for &c in checkpoints {
        cur = propagate_grid(field, &cur, start.n + done, c - done)?;
        done = c;
        out.push(DistributionSlice {
            time: start.n + c,
            grid: cur.clone(),
            label: LawKind::Quenched,
            provenance: Provenance::Exact {
                seed: field.env().seed(),
            },
            std_error: None,
        });
    }
    Ok(out)
}

/// One sampled trajectory `X_m, ..., X_{m + n_steps}`.
pub fn sample_path<R: Rng + ?Sized>(
    field: &BackboneField,
    start: &SpaceTimePoint,
    n_steps: i64,
    rng: &mut R,
) -> Result<Vec<Vec<i64>>> {
    let st = Stepper::new(field);
    let mut path = vec![start.x.clone()];
    let mut x = start.x.clone();
    let mut weights = Vec::with_capacity(27);
    for k in 0..n_steps {
        let t = start.n + k;
        st.check_step(&SpatialBox::ball(&x, 0), t)?;
        let s = field.env().resolve(&x).expect("checked above");
        weights.clear();
        st.for_each_step(s, &x, t, |k, w| weights.push((k, w)));
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = weights.last().expect("nonempty row").0;
        for &(k, w) in &weights {
            acc += w;
            if u < acc {
                chosen = k;
                break;
            }
        }
        let o = st.offsets()[chosen];
        for (a, v) in x.iter_mut().enumerate() {
            *v += o[a];
        }
        if field.boundary() == Boundary::Periodic {
            x = field.domain().wrap(&x);
        }
        path.push(x.clone());
    }
    Ok(path)
}

/// `P_omega(xi_i(X_i) = 0 for i = 1..n)` for the walk from `start`, by a
/// killed forward pass.
pub fn avoidance_probability(field: &BackboneField, start: &SpaceTimePoint, n: i64) -> Result<f64> {
    Ok(*avoidance_profile(field, start, n)?.last().expect("n + 1 entries"))
}

/// Avoidance probabilities after `0..=n_max` steps.
pub fn avoidance_profile(field: &BackboneField, start: &SpaceTimePoint, n_max: i64) -> Result<Vec<f64>> {
    let st = Stepper::new(field);
    let mut cur = start_grid(field, start)?;
    let mut out = vec![1.0];
    for k in 0..n_max {
        let t = start.n + k;
        let next_region = match field.boundary() {
            Boundary::Open => cur.region().expand(1)?,
            Boundary::Periodic => field.domain().clone(),
        };
        cur = st.push_forward(&cur, t, &next_region)?;
        let region = cur.region().clone();
        for (i, v) in cur.values_mut().iter_mut().enumerate() {
            if *v != 0.0 {
                let s = field.env().resolve(&region.coords_of(i)).expect("inside window");
                if field.xi_flat(s, t + 1) {
                    *v = 0.0;
                }
            }
        }
        out.push(cur.total());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::compute_backbone;
    use crate::environment::{sample_environment, EnvironmentWindow};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(d: usize, p: f64, seed: u64, ext: i64, t_hi: i64) -> BackboneField {
        let env = sample_environment(d, &vec![ext; d], (0, t_hi), p, seed, Boundary::Open).unwrap();
        compute_backbone(env, t_hi).unwrap()
    }

    #[test]
    fn off_cluster_row_is_uniform() {
        let f = field(1, 0.0, 1, 4, 4);
        let row = step_distribution(&f, &SpaceTimePoint::new([0], 0)).unwrap();
        assert_eq!(row.probs, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn on_cluster_row_with_two_backbone_neighbours() {
        // open column at x=0 and x=1 for all times, everything else closed
        let env = EnvironmentWindow::from_fn(SpatialBox::symmetric(&[3]).unwrap(), (0, 3), Boundary::Open, |x, _| {
            x[0] == 0 || x[0] == 1
        })
        .unwrap();
        let f = compute_backbone(env, 3).unwrap();
        let row = step_distribution(&f, &SpaceTimePoint::new([0], 0)).unwrap();
        assert_eq!(row.probs, vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn full_field_row_is_uniform_in_2d() {
        let f = field(2, 1.0, 1, 3, 3);
        let row = step_distribution(&f, &SpaceTimePoint::new([0, 0], 1)).unwrap();
        assert_eq!(row.probs, vec![1.0 / 9.0; 9]);
    }

    #[test]
    fn step_at_horizon_is_range_error() {
        let f = field(1, 0.5, 1, 4, 4);
        assert!(matches!(
            step_distribution(&f, &SpaceTimePoint::new([0], 4)),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn two_steps_of_uniform_kernel() {
        let f = field(1, 1.0, 1, 5, 5);
        let s = propagate_quenched(&f, &SpaceTimePoint::new([0], 0), 2).unwrap();
        let expect = [1.0, 2.0, 3.0, 2.0, 1.0];
        for (x, e) in (-2..=2).zip(expect) {
            assert!((s.mass(&[x]) - e / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_steps_is_point_mass() {
        let f = field(2, 0.5, 2, 3, 3);
        let s = propagate_quenched(&f, &SpaceTimePoint::new([1, -1], 1), 0).unwrap();
        assert_eq!(s.support(), vec![vec![1, -1]]);
        assert_eq!(s.total_mass(), 1.0);
    }

    #[test]
    fn cone_leaving_window_is_geometry_error() {
        let f = field(1, 0.5, 1, 3, 10);
        assert!(matches!(
            propagate_quenched(&f, &SpaceTimePoint::new([0], 0), 5),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn paths_respect_support() {
        let f = field(2, 0.6, 5, 12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let path = sample_path(&f, &SpaceTimePoint::new([0, 0], 0), 10, &mut rng).unwrap();
            for w in path.windows(2) {
                assert!(crate::geometry::sup_dist(&w[0], &w[1]) <= 1);
            }
            for (t, x) in path.iter().enumerate().skip(1) {
                let prev = &path[t - 1];
                if f.xi(prev, t as i64 - 1).unwrap() {
                    assert!(f.xi(x, t as i64).unwrap(), "left the backbone");
                }
            }
        }
    }

    #[test]
    fn avoidance_degenerate() {
        let full = field(1, 1.0, 1, 8, 8);
        let empty = field(1, 0.0, 1, 8, 8);
        let o = SpaceTimePoint::new([0], 0);
        assert_eq!(avoidance_probability(&full, &o, 5).unwrap(), 0.0);
        assert!((avoidance_probability(&empty, &o, 5).unwrap() - 1.0).abs() < 1e-14);
    }
}
