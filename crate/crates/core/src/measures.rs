//! Hybrid measures mixing annealed laws, quenched laws and prefactors,
//! space-time convolutions, L1 distances and local limit errors.

use crate::cluster::BackboneField;
use crate::error::{Error, Result};
use crate::geometry::{bounding_box, BoxPartition, Grid, SpaceTimePoint, SpatialBox};
use crate::prefactor::{cesaro_prefactor, PrefactorSlice};
use crate::stats::linear_fit;
use crate::walk::{propagate_checkpoints, propagate_grid, DistributionSlice, LawKind, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HybridKind {
    AnnTimesPre,
    Quenched,
    BoxQueTimesPre,
    Convolution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridMeasure {
    pub slice: DistributionSlice,
    pub kind: HybridKind,
    pub partition: Option<BoxPartition>,
    pub normalizer: Option<f64>,
    /// Boxes with positive quenched mass but zero prefactor sum, whose mass
    /// was spread uniformly instead.
    pub degenerate_boxes: usize,
}

impl HybridMeasure {
    pub fn grid(&self) -> &Grid {
        &self.slice.grid
    }

    pub fn time(&self) -> i64 {
        self.slice.time
    }

    pub fn quenched(slice: DistributionSlice) -> Self {
        HybridMeasure {
            slice,
            kind: HybridKind::Quenched,
            partition: None,
            normalizer: None,
            degenerate_boxes: 0,
        }
    }
}

fn hybrid_slice(time: i64, grid: Grid, note: String) -> DistributionSlice {
    DistributionSlice {
        time,
        grid,
        label: LawKind::Hybrid,
        provenance: Provenance::Derived(note),
        std_error: None,
    }
}

fn psi_at(psi: &PrefactorSlice, x: &[i64]) -> Result<f64> {
    if !psi.region().contains(x) {
        return Err(Error::geometry(format!(
            "site {x:?} outside prefactor region {}",
            psi.region()
        )));
    }
    Ok(psi.value(x))
}

/// `P(X_n = x) psi(x) / Z` and `Z = sum_x P(X_n = x) psi(x)`.
pub fn ann_times_pre(annealed: &DistributionSlice, psi: &PrefactorSlice) -> Result<(HybridMeasure, f64)> {
    if annealed.time != psi.time {
        return Err(Error::config("annealed slice and prefactor at different times"));
    }
    let mut grid = Grid::zeros(annealed.grid.region().clone());
    let mut z = 0.0;
    for (i, &m) in annealed.grid.values().iter().enumerate() {
        if m != 0.0 {
            let x = annealed.grid.region().coords_of(i);
            let w = m * psi_at(psi, &x)?;
            grid.values_mut()[i] = w;
            z += w;
        }
    }
    if z <= 0.0 {
        return Err(Error::Degenerate("prefactor vanishes on the annealed support".into()));
    }
    grid.values_mut().iter_mut().for_each(|v| *v /= z);
    let measure = HybridMeasure {
        slice: hybrid_slice(annealed.time, grid, format!("ann x pre ({})", annealed.provenance.describe())),
        kind: HybridKind::AnnTimesPre,
        partition: None,
        normalizer: Some(z),
        degenerate_boxes: 0,
    };
    Ok((measure, z))
}

/// `P_omega(X_n in Delta_x) psi(x) / sum_{y in Delta_x} psi(y)`.
pub fn box_que_times_pre(
    quenched: &DistributionSlice,
    psi: &PrefactorSlice,
    partition: &BoxPartition,
) -> Result<HybridMeasure> {
    if quenched.time != psi.time {
        return Err(Error::config("quenched slice and prefactor at different times"));
    }
    let support = quenched
        .grid
        .support_box()
        .ok_or_else(|| Error::Degenerate("empty quenched slice".into()))?;
    let region = partition.cover(&support);
    let mut grid = Grid::zeros(region);
    let mut degenerate = 0;
    for (b, q) in partition.box_masses(&quenched.grid) {
        let cell = partition.box_region(&b);
        let mut sum = 0.0;
        for y in cell.iter() {
            sum += psi_at(psi, &y)?;
        }
        for y in cell.iter() {
            let v = if sum > 0.0 {
                q * psi.value(&y) / sum
            } else {
                q / cell.len() as f64
            };
            grid.set(&y, v)?;
        }
        if sum <= 0.0 {
            degenerate += 1;
        }
    }
    let mut note = format!("box-que x pre side={}", partition.side());
    if degenerate > 0 {
        note.push_str(&format!(" DEGENERATE_BOXES={degenerate}"));
    }
    Ok(HybridMeasure {
        slice: hybrid_slice(quenched.time, grid, note),
        kind: HybridKind::BoxQueTimesPre,
        partition: Some(partition.clone()),
        normalizer: None,
        degenerate_boxes: degenerate,
    })
}

/// `sum_y nu(y, n - k) P_omega^{(y, n-k)}(X_n = .)`.
pub fn convolve(nu: &HybridMeasure, field: &BackboneField, k: i64) -> Result<HybridMeasure> {
    if k < 0 {
        return Err(Error::config("convolution length must be non-negative"));
    }
    let grid = propagate_grid(field, nu.grid(), nu.time(), k)?;
    Ok(HybridMeasure {
        slice: hybrid_slice(nu.time() + k, grid, format!("convolution k={k}")),
        kind: HybridKind::Convolution,
        partition: nu.partition.clone(),
        normalizer: nu.normalizer,
        degenerate_boxes: nu.degenerate_boxes,
    })
}

/// `sum_x |a(x) - b(x)|` over the union of both regions.
pub fn l1_grids(a: &Grid, b: &Grid) -> f64 {
    let mut s = 0.0;
    for (x, v) in a.nonzero() {
        s += (v - b.get(&x)).abs();
    }
    for (x, v) in b.nonzero() {
        if a.get(&x) == 0.0 {
            s += v.abs();
        }
    }
    s
}

pub fn l1_distance(a: &DistributionSlice, b: &DistributionSlice) -> Result<f64> {
    if a.time != b.time {
        return Err(Error::config(format!("slices at times {} and {}", a.time, b.time)));
    }
    Ok(l1_grids(&a.grid, &b.grid))
}

/// `sum_x |P_omega(X_n = x) - P(X_n = x) psi(x, n)|`.
pub fn qlclt_error(quenched: &DistributionSlice, annealed: &DistributionSlice, psi: &PrefactorSlice) -> Result<f64> {
    if quenched.time != annealed.time || annealed.time != psi.time {
        return Err(Error::config("qlclt error needs slices at one time"));
    }
    let mut s = 0.0;
    for (x, a) in annealed.grid.nonzero() {
        s += (quenched.mass(&x) - a * psi_at(psi, &x)?).abs();
    }
    for (x, q) in quenched.grid.nonzero() {
        if annealed.mass(&x) == 0.0 {
            s += q;
        }
    }
    Ok(s)
}

/// Centred Gaussian with covariance `sigma2 * n * I_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianReference {
    pub d: usize,
    pub sigma2: f64,
    pub n: i64,
}

impl GaussianReference {
    pub fn new(d: usize, sigma2: f64, n: i64) -> Result<Self> {
        if sigma2.is_nan() || sigma2 <= 0.0 {
            return Err(Error::config(format!("sigma^2 = {sigma2} must be positive")));
        }
        if n < 1 {
            return Err(Error::Degenerate(format!("Gaussian reference needs n >= 1, got {n}")));
        }
        Ok(GaussianReference { d, sigma2, n })
    }

    pub fn density(&self, x: &[i64]) -> f64 {
        let v = self.sigma2 * self.n as f64;
        let r2: f64 = x.iter().map(|&c| (c * c) as f64).sum();
        (2.0 * std::f64::consts::PI * v).powf(-(self.d as f64) / 2.0) * (-r2 / (2.0 * v)).exp()
    }
}

/// `sum_x |P(X_n = x) - density(x - y)|`, where `y` is the centre of the
/// slice region, summed over the slice region grown to cover twelve
/// standard deviations.
pub fn lclt_error(annealed: &DistributionSlice, gauss: &GaussianReference) -> Result<f64> {
    let region = annealed.grid.region();
    if region.dim() != gauss.d {
        return Err(Error::config("dimension mismatch"));
    }
    let centre: Vec<i64> = region.lo().iter().zip(region.hi()).map(|(a, b)| (a + b) / 2).collect();
    let reach = (12.0 * (gauss.sigma2 * gauss.n as f64).sqrt()).ceil() as i64;
    let outer = bounding_box(region, &SpatialBox::ball(&centre, reach));
    let mut s = 0.0;
    for x in outer.iter() {
        let rel: Vec<i64> = x.iter().zip(&centre).map(|(a, b)| a - b).collect();
        s += (annealed.mass(&x) - gauss.density(&rel)).abs();
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sigma2Estimate {
    pub sigma2: f64,
    pub per_axis: Vec<f64>,
    /// `max |axis - mean| / mean` across axes.
    pub anisotropy: f64,
}

/// Per-axis variance of each slice about its mean.
pub fn slice_variances(slice: &DistributionSlice) -> Vec<f64> {
    let d = slice.dim();
    let mut m1 = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    let mut tot = 0.0;
    for (x, v) in slice.grid.nonzero() {
        tot += v;
        for a in 0..d {
            m1[a] += v * x[a] as f64;
            m2[a] += v * (x[a] * x[a]) as f64;
        }
    }
    (0..d).map(|a| m2[a] / tot - (m1[a] / tot).powi(2)).collect()
}

/// Least-squares slope of per-axis variance against time.
pub fn estimate_sigma2(slices: &[DistributionSlice]) -> Result<Sigma2Estimate> {
    let mut times: Vec<i64> = slices.iter().map(|s| s.time).collect();
    times.sort_unstable();
    times.dedup();
    if times.len() < 2 {
        return Err(Error::config("sigma^2 needs slices at two or more times"));
    }
    let d = slices[0].dim();
    let xs: Vec<f64> = slices.iter().map(|s| s.time as f64).collect();
    let vars: Vec<Vec<f64>> = slices.iter().map(slice_variances).collect();
    let per_axis: Vec<f64> = (0..d)
        .map(|a| {
            let ys: Vec<f64> = vars.iter().map(|v| v[a]).collect();
            linear_fit(&xs, &ys).slope
        })
        .collect();
    let sigma2 = per_axis.iter().sum::<f64>() / d as f64;
    let anisotropy = per_axis
        .iter()
        .map(|v| (v - sigma2).abs() / sigma2)
        .fold(0.0, f64::max);
    Ok(Sigma2Estimate {
        sigma2,
        per_axis,
        anisotropy,
    })
}

/// The three limits of the hybrid-measure decomposition at time `n`, with
/// the normalizer term closing the triangle inequality for the quenched
/// local limit error.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridLimits {
    pub n: i64,
    pub k: i64,
    pub ell: i64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    /// `||nu^{ann x pre}(n) - P psi(n)||_1 = |1 - Z_n|`.
    pub normalizer_term: f64,
    pub z: f64,
    pub qlclt: f64,
    pub degenerate_boxes: usize,
}

impl HybridLimits {
    pub fn triangle_bound(&self) -> f64 {
        self.l1 + self.l2 + self.l3 + self.normalizer_term
    }
}

/// `k = ceil(n^eps)`, `ell = ceil(n^delta)`; requires `0 < 2 delta < eps < 1/4`.
pub fn hybrid_scales(n: i64, eps: f64, delta: f64) -> Result<(i64, i64)> {
    if !(0.0 < 2.0 * delta && 2.0 * delta < eps && eps < 0.25) {
        return Err(Error::config(format!("need 0 < 2 delta < eps < 1/4, got eps={eps} delta={delta}")));
    }
    let nf = n as f64;
    Ok((nf.powf(eps).ceil() as i64, nf.powf(delta).ceil() as i64))
}

/// Hybrid limits for the walk from `start` in `field`, with annealed laws at
/// `n - k` and `n` steps supplied by the caller and Cesaro prefactors of
/// depth `n_max`. `ell_override` replaces `ceil(n^delta)` when given.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_limits(
    field: &BackboneField,
    start: &SpaceTimePoint,
    n: i64,
    eps: f64,
    delta: f64,
    n_max: i64,
    annealed_nk: &DistributionSlice,
    annealed_n: &DistributionSlice,
    ell_override: Option<i64>,
) -> Result<HybridLimits> {
    let (k, ell) = hybrid_scales(n, eps, delta)?;
    let ell = ell_override.unwrap_or(ell);
    if k > n {
        return Err(Error::config("convolution length exceeds n"));
    }
    let t_n = start.n + n;
    let t_nk = t_n - k;
    if annealed_nk.time != t_nk || annealed_n.time != t_n {
        return Err(Error::config("annealed slices at the wrong times"));
    }
    let partition = BoxPartition::cubes(start.dim(), ell)?;
    let region = partition.cover(&SpatialBox::ball(&start.x, n)).expand(1)?;
    let psi_n = cesaro_prefactor(field, t_n, n_max, Some(&region))?;
    let psi_nk = cesaro_prefactor(field, t_nk, n_max, Some(&region))?;
    let quenched = propagate_checkpoints(field, start, &[n - k, n])?;
    let (q_nk, q_n) = (&quenched[0], &quenched[1]);

    let (axp_nk, _) = ann_times_pre(annealed_nk, &psi_nk)?;
    let (axp_n, z) = ann_times_pre(annealed_n, &psi_n)?;
    let box_nk = box_que_times_pre(q_nk, &psi_nk, &partition)?;
    let conv_axp = convolve(&axp_nk, field, k)?;
    let conv_box = convolve(&box_nk, field, k)?;

    let l1 = l1_grids(axp_n.grid(), conv_axp.grid());
    let l2 = l1_grids(conv_axp.grid(), conv_box.grid());
    let l3 = l1_grids(conv_box.grid(), &q_n.grid);
    Ok(HybridLimits {
        n,
        k,
        ell,
        l1,
        l2,
        l3,
        normalizer_term: (1.0 - z).abs(),
        z,
        qlclt: qlclt_error(q_n, annealed_n, &psi_n)?,
        degenerate_boxes: box_nk.degenerate_boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Boundary;

    fn slice(region: SpatialBox, vals: Vec<f64>, time: i64) -> DistributionSlice {
        DistributionSlice {
            time,
            grid: Grid::from_values(region, vals).unwrap(),
            label: LawKind::Quenched,
            provenance: Provenance::Exact { seed: 0 },
            std_error: None,
        }
    }

    fn ones(region: SpatialBox, time: i64) -> PrefactorSlice {
        PrefactorSlice {
            time,
            depth: 0,
            cesaro: false,
            grid: Grid::filled(region, 1.0),
            horizon: time,
            boundary: Boundary::Open,
        }
    }

    #[test]
    fn hand_l1() {
        let r = SpatialBox::new(vec![0], vec![2]).unwrap();
        let a = slice(r.clone(), vec![0.6, 0.4, 0.0], 0);
        let b = slice(r, vec![0.5, 0.0, 0.5], 0);
        assert!((l1_distance(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_point_masses() {
        let a = DistributionSlice::point_mass(&SpaceTimePoint::new([0], 3), LawKind::Quenched, Provenance::Enumerated { sites: 0 });
        let b = DistributionSlice::point_mass(&SpaceTimePoint::new([5], 3), LawKind::Quenched, Provenance::Enumerated { sites: 0 });
        assert_eq!(l1_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn ones_prefactor_keeps_annealed() {
        let r = SpatialBox::ball(&[0], 2);
        let a = slice(r.clone(), vec![0.1, 0.2, 0.4, 0.2, 0.1], 4);
        let (h, z) = ann_times_pre(&a, &ones(r, 4)).unwrap();
        assert!((z - 1.0).abs() < 1e-15);
        assert!(l1_grids(h.grid(), &a.grid) < 1e-15);
    }

    #[test]
    fn zero_prefactor_is_degenerate() {
        let r = SpatialBox::ball(&[0], 1);
        let a = slice(r.clone(), vec![0.3, 0.4, 0.3], 1);
        let mut psi = ones(r, 1);
        psi.grid.values_mut().fill(0.0);
        assert!(matches!(ann_times_pre(&a, &psi), Err(Error::Degenerate(_))));
    }

    #[test]
    fn box_hybrid_spreads_uniformly_for_flat_prefactor() {
        let r = SpatialBox::new(vec![0], vec![3]).unwrap();
        let q = slice(r.clone(), vec![0.5, 0.1, 0.4, 0.0], 2);
        let p = BoxPartition::cubes(1, 2).unwrap();
        let h = box_que_times_pre(&q, &ones(SpatialBox::ball(&[0], 6), 2), &p).unwrap();
        let expect = [0.3, 0.3, 0.2, 0.2];
        for (x, e) in (0..4).zip(expect) {
            assert!((h.grid().get(&[x]) - e).abs() < 1e-15);
        }
    }

    #[test]
    fn box_hybrid_flags_degenerate_boxes() {
        let r = SpatialBox::new(vec![0], vec![1]).unwrap();
        let q = slice(r.clone(), vec![0.5, 0.5], 2);
        let mut psi = ones(SpatialBox::ball(&[0], 3), 2);
        psi.grid.values_mut().fill(0.0);
        let h = box_que_times_pre(&q, &psi, &BoxPartition::cubes(1, 2).unwrap()).unwrap();
        assert_eq!(h.degenerate_boxes, 1);
        assert!((h.grid().total() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn srw_gaussian_error_small() {
        // trinomial law by repeated convolution
        let n = 100i64;
        let mut v = vec![1.0];
        for _ in 0..n {
            let mut w = vec![0.0; v.len() + 2];
            for (i, m) in v.iter().enumerate() {
                for j in 0..3 {
                    w[i + j] += m / 3.0;
                }
            }
            v = w;
        }
        let s = slice(SpatialBox::ball(&[0], n), v, n);
        let g = GaussianReference::new(1, 2.0 / 3.0, n).unwrap();
        assert!(lclt_error(&s, &g).unwrap() < 0.05);
        let est = estimate_sigma2(&[s.clone(), slice(SpatialBox::ball(&[0], 0), vec![1.0], 0)]).unwrap();
        assert!((est.sigma2 - 2.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn scales_follow_exponents() {
        assert_eq!(hybrid_scales(256, 0.24, 0.1).unwrap(), (4, 2));
        assert!(hybrid_scales(256, 0.3, 0.1).is_err());
        assert!(hybrid_scales(256, 0.2, 0.1).is_err());
    }
}
