//! Box-level comparisons of quenched and annealed laws: TV on partitions, the
//! multiscale ladder, good and social boxes, the two-stage coupling, pair
//! mixing and annealed derivative estimates.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::annealed::{annealed_checkpoints, annealed_seed, ModelParams};
use crate::cluster::BackboneField;
use crate::error::{Error, Result};
use crate::geometry::{Boundary, BoxPartition, Grid, SpaceTimePoint, SpatialBox};
use crate::measures::l1_grids;
use crate::walk::{propagate_checkpoints, propagate_grid, propagate_quenched, DistributionSlice, Stepper};

/// `sum_Delta |a(Delta) - b(Delta)|`.
pub fn tv_on_boxes(a: &Grid, b: &Grid, partition: &BoxPartition) -> f64 {
    let ma = partition.box_masses(a);
    let mb = partition.box_masses(b);
    let mut s = 0.0;
    for (k, v) in &ma {
        s += (v - mb.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, v) in &mb {
        if !ma.contains_key(k) {
            s += v.abs();
        }
    }
    s
}

/// Largest `a` with `a^k <= n`.
pub fn integer_root(n: i64, k: u32) -> i64 {
    if n <= 1 || k == 1 {
        return n;
    }
    let pow_le = |a: i64| -> bool {
        let mut acc: i128 = 1;
        for _ in 0..k {
            acc *= a as i128;
            if acc > n as i128 {
                return false;
            }
        }
        true
    };
    let mut a = (n as f64).powf(1.0 / k as f64).floor() as i64;
    while a > 1 && !pow_le(a) {
        a -= 1;
    }
    while pow_le(a + 1) {
        a += 1;
    }
    a.max(1)
}

/// Scales `n_j = floor(N^{1/2^j})` for `j = 0..=r`, checkpoints `N_0..N_r`
/// and partition sides `floor(n_k^theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleLadder {
    pub n_total: i64,
    pub theta: f64,
    pub m: f64,
    pub r: usize,
    pub scales: Vec<i64>,
    pub checkpoints: Vec<i64>,
    pub sides: Vec<i64>,
    pub lambdas: Vec<f64>,
}

impl ScaleLadder {
    /// Smallest `r >= 1` with `n_r^theta <= M`.
    pub fn new(n_total: i64, theta: f64, m: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0 && m >= 1.0) {
            return Err(Error::config("need 0 < theta < 1 and M >= 1"));
        }
        if n_total < 4 {
            return Err(Error::config(format!("N = {n_total} too small for a ladder")));
        }
        let mut scales = vec![n_total];
        let mut r = 0;
        for j in 1..=62u32 {
            let nj = integer_root(n_total, 1u32.checked_shl(j).unwrap_or(u32::MAX));
            scales.push(nj);
            if (nj as f64).powf(theta) <= m {
                r = j as usize;
                break;
            }
        }
        if r == 0 {
            return Err(Error::config("ladder did not terminate"));
        }
        let n0 = n_total - scales[1..].iter().sum::<i64>();
        if n0 < 0 {
            return Err(Error::config(format!("N = {n_total} too small: N_0 would be negative")));
        }
        let mut checkpoints = vec![n0];
        for k in 1..=r {
            checkpoints.push(checkpoints[k - 1] + scales[k]);
        }
        let sides = scales.iter().map(|&n| ((n as f64).powf(theta).floor() as i64).max(1)).collect();
        Ok(ScaleLadder {
            n_total,
            theta,
            m,
            r,
            scales,
            checkpoints,
            sides,
            lambdas: Vec::new(),
        })
    }

    pub fn partition(&self, k: usize, d: usize) -> Result<BoxPartition> {
        BoxPartition::cubes(d, self.sides[k])
    }

    /// Indices `k >= 1` where `lambda_k > lambda_{k-1} + c n_k^{-alpha}`.
    pub fn violations(&self, c: f64, alpha: f64) -> Vec<usize> {
        (1..self.lambdas.len())
            .filter(|&k| self.lambdas[k] > self.lambdas[k - 1] + c * (self.scales[k] as f64).powf(-alpha))
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "k,n_k,N_k,lambda_k")?;
        for (k, lam) in self.lambdas.iter().enumerate() {
            writeln!(w, "{k},{},{},{lam:e}", self.scales[k], self.checkpoints[k])?;
        }
        Ok(())
    }
}

/// Fill `lambdas` for the walk from `start`; `annealed[k]` is the annealed law
/// after `checkpoints[k]` steps.
pub fn scale_ladder(
    field: &BackboneField,
    start: &SpaceTimePoint,
    ladder: &ScaleLadder,
    annealed: &[DistributionSlice],
) -> Result<ScaleLadder> {
    if annealed.len() != ladder.checkpoints.len() {
        return Err(Error::config("one annealed slice per ladder checkpoint required"));
    }
    let quenched = propagate_checkpoints(field, start, &ladder.checkpoints)?;
    let mut out = ladder.clone();
    out.lambdas = quenched
        .iter()
        .zip(annealed)
        .enumerate()
        .map(|(k, (q, a))| Ok(tv_on_boxes(&q.grid, &a.grid, &ladder.partition(k, start.dim())?)))
        .collect::<Result<_>>()?;
    Ok(out)
}

/// Per-box verdicts, in sorted box order.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxClassification {
    pub boxes: Vec<(Vec<i64>, bool)>,
}

impl BoxClassification {
    pub fn fraction_true(&self) -> f64 {
        if self.boxes.is_empty() {
            return f64::NAN;
        }
        self.boxes.iter().filter(|b| b.1).count() as f64 / self.boxes.len() as f64
    }
}

fn boxes_covering(partition: &BoxPartition, region: &SpatialBox) -> Vec<Vec<i64>> {
    let lo = partition.box_of(region.lo());
    let hi = partition.box_of(region.hi());
    SpatialBox::new(lo, hi).expect("ordered corners").iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoodParams {
    pub theta: f64,
    pub eps: f64,
    pub c_big: f64,
    pub c_small: f64,
}

impl Default for GoodParams {
    fn default() -> Self {
        GoodParams {
            theta: 0.4,
            eps: 0.01,
            c_big: 1.0,
            c_small: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteVerdict {
    pub on_cluster: bool,
    /// `sup_Delta' |P_omega - P|` minus the Monte Carlo error of the box.
    pub box_deviation: f64,
    pub escape: f64,
    pub good: bool,
}

/// Escape radius `sqrt(n) log^3 n`.
pub fn escape_radius(n_k: i64) -> f64 {
    let n = n_k as f64;
    n.sqrt() * n.ln().powi(3)
}

/// `P_omega(max_{s <= n} ||X_s - x|| > radius)` from `start`.
pub fn escape_probability(field: &BackboneField, start: &SpaceTimePoint, n: i64, radius: f64) -> Result<f64> {
    if radius >= n as f64 {
        return Ok(0.0);
    }
    let st = Stepper::new(field);
    let r = radius.floor() as i64;
    let keep = SpatialBox::ball(&start.x, r);
    let mut cur = Grid::zeros(SpatialBox::ball(&start.x, 0));
    cur.set(&start.x, 1.0)?;
    for t in 0..n {
        let next = cur.region().expand(1)?.intersect(&keep).expect("contains start");
        cur = st.push_forward(&cur, start.n + t, &next)?;
    }
    Ok((1.0 - cur.total()).max(0.0))
}

/// Good-site test at `(x, m)`; `annealed` is the law after `n_k` steps from
/// the origin at time 0, shifted to `x` by translation invariance.
pub fn classify_site(
    field: &BackboneField,
    site: &SpaceTimePoint,
    n_k: i64,
    params: &GoodParams,
    annealed: &DistributionSlice,
) -> Result<SiteVerdict> {
    if !field.xi_at(site)? {
        return Ok(SiteVerdict {
            on_cluster: false,
            box_deviation: 0.0,
            escape: 0.0,
            good: true,
        });
    }
    let d = site.dim();
    let side = ((n_k as f64).powf(params.theta).floor() as i64).max(1);
    let fine = BoxPartition::cubes(d, side)?;
    let q = propagate_quenched(field, site, n_k)?;
    let shifted = Grid::from_values(annealed.grid.region().translate(&site.x), annealed.grid.values().to_vec())?;
    let se = annealed
        .std_error
        .as_ref()
        .map(|g| Grid::from_values(g.region().translate(&site.x), g.values().to_vec()))
        .transpose()?;
    let mq = fine.box_masses(&q.grid);
    let ma = fine.box_masses(&shifted);
    let mse = se.as_ref().map(|g| fine.box_masses(g)).unwrap_or_default();
    let mut dev = 0.0f64;
    for k in mq.keys().chain(ma.keys()) {
        let diff = (mq.get(k).copied().unwrap_or(0.0) - ma.get(k).copied().unwrap_or(0.0)).abs();
        dev = dev.max((diff - mse.get(k).copied().unwrap_or(0.0)).max(0.0));
    }
    let nk = n_k as f64;
    let bound = nk.powf(params.theta * d as f64 - d as f64 / 2.0 - params.eps);
    let escape = escape_probability(field, site, n_k, escape_radius(n_k))?;
    let escape_bound = params.c_big * nk.powf(-params.c_small * nk.ln());
    Ok(SiteVerdict {
        on_cluster: true,
        box_deviation: dev,
        escape,
        good: dev <= bound && escape <= escape_bound,
    })
}

/// A box of `partition` at time `m` is good when all its sites are.
pub fn classify_good(
    field: &BackboneField,
    partition: &BoxPartition,
    region: &SpatialBox,
    m: i64,
    n_k: i64,
    params: &GoodParams,
    annealed: &DistributionSlice,
) -> Result<BoxClassification> {
    if annealed.time != n_k {
        return Err(Error::config("annealed reference must be the law after n_k steps from time 0"));
    }
    let boxes = boxes_covering(partition, region);
    let verdicts: Vec<Result<(Vec<i64>, bool)>> = boxes
        .into_par_iter()
        .map(|b| {
            for x in partition.box_region(&b).iter() {
                if !classify_site(field, &SpaceTimePoint::new(x, m), n_k, params, annealed)?.good {
                    return Ok((b, false));
                }
            }
            Ok((b, true))
        })
        .collect();
    Ok(BoxClassification {
        boxes: verdicts.into_iter().collect::<Result<_>>()?,
    })
}

/// Sites reachable with positive quenched probability after `steps` steps.
pub fn support_after(field: &BackboneField, start: &SpaceTimePoint, steps: i64) -> Result<(SpatialBox, Vec<bool>)> {
    if field.boundary() == Boundary::Periodic {
        return Err(Error::geometry("support DP runs on open windows"));
    }
    let st = Stepper::new(field);
    let mut region = SpatialBox::ball(&start.x, 0);
    let mut cur = vec![true];
    for t in 0..steps {
        st.check_step(&region, start.n + t)?;
        let next_region = region.expand(1)?;
        let mut next = vec![false; next_region.len()];
        for (i, &on) in cur.iter().enumerate() {
            if !on {
                continue;
            }
            let x = region.coords_of(i);
            let s = field.domain().index_of(&x).expect("checked");
            let offs = st.offsets();
            st.for_each_step(s, &x, start.n + t, |k, _| {
                let y: Vec<i64> = x.iter().zip(&offs[k]).map(|(a, b)| a + b).collect();
                next[next_region.index_of(&y).expect("one step")] = true;
            });
        }
        region = next_region;
        cur = next;
    }
    Ok((region, cur))
}

/// A box is social at time `n` when every pair of its sites shares a site
/// reachable by both after `ceil(C M)` steps.
pub fn classify_social(
    field: &BackboneField,
    side: i64,
    c: f64,
    region: &SpatialBox,
    n: i64,
) -> Result<BoxClassification> {
    let partition = BoxPartition::cubes(region.dim(), side)?;
    let steps = (c * side as f64).ceil() as i64;
    let boxes = boxes_covering(&partition, region);
    let verdicts: Vec<Result<(Vec<i64>, bool)>> = boxes
        .into_par_iter()
        .map(|b| {
            let cell = partition.box_region(&b);
            let common = cell.expand(steps)?;
            let supports: Vec<Vec<bool>> = cell
                .iter()
                .map(|x| {
                    let (r, s) = support_after(field, &SpaceTimePoint::new(x, n), steps)?;
                    Ok(Grid::from_values(r, s.iter().map(|&v| v as u8 as f64).collect())?
                        .restricted_to(&common)
                        .values()
                        .iter()
                        .map(|&v| v > 0.0)
                        .collect())
                })
                .collect::<Result<_>>()?;
            for i in 0..supports.len() {
                for j in i + 1..supports.len() {
                    if !supports[i].iter().zip(&supports[j]).any(|(a, b)| *a && *b) {
                        return Ok((b, false));
                    }
                }
            }
            Ok((b, true))
        })
        .collect();
    Ok(BoxClassification {
        boxes: verdicts.into_iter().collect::<Result<_>>()?,
    })
}

/// Box law at time `N - M` and, per box, the joint `J(Delta, x)` of being in
/// `Delta` at `N - M` and at `x` at `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxJoint {
    pub partition: BoxPartition,
    pub box_mass: BTreeMap<Vec<i64>, f64>,
    pub continuation: BTreeMap<Vec<i64>, Grid>,
    /// Law at time `N`, propagated directly.
    pub endpoint: Grid,
}

fn add_into(acc: &mut Grid, g: &Grid, w: f64) -> Result<()> {
    if acc.region() != g.region() {
        return Err(Error::config("grid regions differ"));
    }
    acc.values_mut().iter_mut().zip(g.values()).for_each(|(a, b)| *a += w * b);
    Ok(())
}

/// Exact quenched box joint for the walk from `start`, `n` total steps, box side `m`.
pub fn quenched_joint(field: &BackboneField, start: &SpaceTimePoint, n: i64, m: i64) -> Result<BoxJoint> {
    if m < 1 || m > n {
        return Err(Error::config("need 1 <= M <= N"));
    }
    let partition = BoxPartition::cubes(start.dim(), m)?;
    let laws = propagate_checkpoints(field, start, &[n - m, n])?;
    let mid = &laws[0].grid;
    let end_region = SpatialBox::ball(&start.x, n);
    let mut box_mass = BTreeMap::new();
    let mut continuation = BTreeMap::new();
    for (b, mass) in partition.box_masses(mid) {
        let cell = partition.box_region(&b);
        let restricted = mid.restricted_to(&cell.intersect(mid.region()).expect("box meets support"));
        let cont = propagate_grid(field, &restricted, start.n + n - m, m)?.restricted_to(&end_region);
        box_mass.insert(b.clone(), mass);
        continuation.insert(b, cont);
    }
    Ok(BoxJoint {
        partition,
        box_mass,
        continuation,
        endpoint: laws[1].grid.restricted_to(&end_region),
    })
}

/// Monte Carlo average of [`quenched_joint`] over annealed replicas.
pub fn annealed_joint(
    params: &ModelParams,
    start: &SpaceTimePoint,
    n: i64,
    m: i64,
    reps: u64,
    base_seed: u64,
) -> Result<BoxJoint> {
    if reps == 0 {
        return Err(Error::config("reps must be at least 1"));
    }
    let plan = params.plan(start, n, 0)?;
    let end_region = SpatialBox::ball(&start.x, n);
    let parts: Vec<Result<BoxJoint>> = (0..reps)
        .into_par_iter()
        .map(|r| quenched_joint(&plan.sample_field(params, annealed_seed(base_seed, r))?, start, n, m))
        .collect();
    let w = 1.0 / reps as f64;
    let mut out = BoxJoint {
        partition: BoxPartition::cubes(start.dim(), m)?,
        box_mass: BTreeMap::new(),
        continuation: BTreeMap::new(),
        endpoint: Grid::zeros(end_region.clone()),
    };
    for part in parts {
        let part = part?;
        for (b, v) in part.box_mass {
            *out.box_mass.entry(b).or_insert(0.0) += w * v;
        }
        for (b, g) in part.continuation {
            let acc = out
                .continuation
                .entry(b)
                .or_insert_with(|| Grid::zeros(end_region.clone()));
            add_into(acc, &g, w)?;
        }
        add_into(&mut out.endpoint, &part.endpoint, w)?;
    }
    Ok(out)
}

/// TV-optimal coupling of two laws on the same keys: the common part on the
/// diagonal, residuals matched greedily in key order.
pub fn tv_optimal_coupling(a: &BTreeMap<Vec<i64>, f64>, b: &BTreeMap<Vec<i64>, f64>) -> Vec<(Vec<i64>, Vec<i64>, f64)> {
    let mut pairs = Vec::new();
    let mut ra = Vec::new();
    let mut rb = Vec::new();
    let keys: std::collections::BTreeSet<&Vec<i64>> = a.keys().chain(b.keys()).collect();
    for k in keys {
        let va = a.get(k).copied().unwrap_or(0.0);
        let vb = b.get(k).copied().unwrap_or(0.0);
        let common = va.min(vb);
        if common > 0.0 {
            pairs.push((k.clone(), k.clone(), common));
        }
        if va > common {
            ra.push((k.clone(), va - common));
        }
        if vb > common {
            rb.push((k.clone(), vb - common));
        }
    }
    let (mut i, mut j) = (0, 0);
    while i < ra.len() && j < rb.len() {
        let w = ra[i].1.min(rb[j].1);
        if w > 0.0 {
            pairs.push((ra[i].0.clone(), rb[j].0.clone(), w));
        }
        ra[i].1 -= w;
        rb[j].1 -= w;
        if ra[i].1 <= 1e-300 {
            i += 1;
        }
        if rb[j].1 <= 1e-300 {
            j += 1;
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSummary {
    pub n: i64,
    pub m: i64,
    /// Stage-one mass on equal boxes.
    pub diagonal_box_mass: f64,
    /// Probability that both walks sit at the same site at time `N`.
    pub theta_lambda: f64,
    /// L1 residual of the first (annealed) marginal at time `N`.
    pub residual_annealed: f64,
    /// L1 residual of the second (quenched) marginal at time `N`.
    pub residual_quenched: f64,
    pub box_tv: f64,
}

/// Two-stage coupling of the annealed law (first walk) and quenched law
/// (second walk) at time `N`.
pub fn build_coupling(annealed: &BoxJoint, quenched: &BoxJoint, n: i64, m: i64) -> Result<CouplingSummary> {
    if annealed.partition != quenched.partition {
        return Err(Error::config("joints use different partitions"));
    }
    let stage1 = tv_optimal_coupling(&annealed.box_mass, &quenched.box_mass);
    let region = annealed.endpoint.region().clone();
    let mut first = Grid::zeros(region.clone());
    let mut second = Grid::zeros(quenched.endpoint.region().clone());
    let mut theta = 0.0;
    let mut diag = 0.0;
    for (da, dq, w) in &stage1 {
        if da == dq {
            diag += w;
        }
        let (ja, jq) = (&annealed.continuation[da], &quenched.continuation[dq]);
        let (ma, mq) = (annealed.box_mass[da], quenched.box_mass[dq]);
        add_into(&mut first, ja, w / ma)?;
        add_into(&mut second, jq, w / mq)?;
        let mut overlap = 0.0;
        for (x, a) in ja.nonzero() {
            overlap += a * jq.get(&x);
        }
        theta += w * overlap / (ma * mq);
    }
    Ok(CouplingSummary {
        n,
        m,
        diagonal_box_mass: diag,
        theta_lambda: theta,
        residual_annealed: l1_grids(&first, &annealed.endpoint),
        residual_quenched: l1_grids(&second, &quenched.endpoint),
        box_tv: tv_on_boxes_maps(&annealed.box_mass, &quenched.box_mass),
    })
}

fn tv_on_boxes_maps(a: &BTreeMap<Vec<i64>, f64>, b: &BTreeMap<Vec<i64>, f64>) -> f64 {
    let keys: std::collections::BTreeSet<&Vec<i64>> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .map(|k| (a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)).abs())
        .sum()
}

/// Total variation between the quenched laws after `n` steps from `(x, m)`
/// and `(y, m)`.
pub fn pair_tv(field: &BackboneField, x: &SpaceTimePoint, y: &[i64], n: i64) -> Result<f64> {
    if x.x.as_slice() == y {
        return Ok(0.0);
    }
    let a = propagate_quenched(field, x, n)?;
    let b = propagate_quenched(field, &SpaceTimePoint::new(y.to_vec(), x.n), n)?;
    Ok(0.5 * l1_grids(&a.grid, &b.grid))
}

/// First pair of adjacent backbone sites `(x, x + e_1)` at time `m`, scanning
/// outward from `centre` along the first axis.
pub fn adjacent_backbone_pair(field: &BackboneField, centre: &[i64], m: i64, max_scan: i64) -> Result<Option<Vec<i64>>> {
    for s in 0..=max_scan {
        for sign in [1, -1] {
            let mut x = centre.to_vec();
            x[0] += sign * s;
            let mut y = x.clone();
            y[0] += 1;
            if field.domain().contains(&x) && field.domain().contains(&y) && field.xi(&x, m)? && field.xi(&y, m)? {
                return Ok(Some(x));
            }
            if s == 0 {
                break;
            }
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeKind {
    StartShift,
    StartTime,
    TargetShift,
    EndTime,
}

impl DerivativeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DerivativeKind::StartShift => "start_shift",
            DerivativeKind::StartTime => "start_time",
            DerivativeKind::TargetShift => "target_shift",
            DerivativeKind::EndTime => "end_time",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeRow {
    pub n: i64,
    pub kind: Option<DerivativeKind>,
    /// Raw sup of the differences (or the raw partition sum).
    pub raw: f64,
    /// `raw * n^{(d+1)/2}` (or `raw * n^{1/2 - 3 d eps}` for the partition sum).
    pub scaled: f64,
    /// Monte Carlo error of `raw` at the maximizing site, scaled alike.
    pub scaled_stderr: f64,
}

fn sup_diff(a: &DistributionSlice, b: &DistributionSlice, shift_b: &[i64]) -> (f64, f64) {
    let region = crate::geometry::bounding_box(a.grid.region(), &b.grid.region().translate(shift_b));
    let mut best = (0.0, 0.0);
    for x in region.iter() {
        let xb: Vec<i64> = x.iter().zip(shift_b).map(|(u, v)| u - v).collect();
        let diff = (a.mass(&x) - b.mass(&xb)).abs();
        if diff > best.0 {
            let se = (a.std_error_at(&x).powi(2) + b.std_error_at(&xb).powi(2)).sqrt();
            best = (diff, se);
        }
    }
    best
}

/// `sum_Delta sum_{x in Delta} max_{y in Delta} [P(y) - P(x)]` over a partition.
pub fn partition_oscillation(slice: &DistributionSlice, partition: &BoxPartition) -> f64 {
    let support = match slice.grid.support_box() {
        Some(b) => b,
        None => return 0.0,
    };
    let mut total = 0.0;
    for b in boxes_covering(partition, &support) {
        let cell = partition.box_region(&b);
        let vals: Vec<f64> = cell.iter().map(|x| slice.mass(&x)).collect();
        let mx = vals.iter().copied().fold(f64::MIN, f64::max);
        total += vals.iter().map(|v| mx - v).sum::<f64>();
    }
    total
}

/// Annealed derivative estimates from paired-seed Monte Carlo laws (the
/// parameters should use [`crate::annealed::Anchor::Absolute`] so shifted
/// starts read the same fields). `eps` sets the partition side `floor(n^eps)`.
pub fn derivative_estimates(
    params: &ModelParams,
    ns: &[i64],
    reps: u64,
    base_seed: u64,
    eps: f64,
) -> Result<Vec<DerivativeRow>> {
    let d = params.d;
    let origin = SpaceTimePoint::origin(d);
    let mut rows = Vec::new();
    for &n in ns {
        if n < 2 {
            return Err(Error::config("derivative estimates need n >= 2"));
        }
        let base = annealed_checkpoints(params, &origin, &[n - 1, n], reps, base_seed)?;
        let (prev, cur) = (&base[0], &base[1]);
        let later = annealed_checkpoints(params, &SpaceTimePoint::new(vec![0; d], 1), &[n - 1], reps, base_seed)?;
        let scale = (n as f64).powf((d as f64 + 1.0) / 2.0);
        let mut push = |kind, (raw, se): (f64, f64)| {
            rows.push(DerivativeRow {
                n,
                kind: Some(kind),
                raw,
                scaled: raw * scale,
                scaled_stderr: se * scale,
            })
        };
        let mut start_shift = (0.0, 0.0);
        let mut target_shift = (0.0, 0.0);
        for j in 0..d {
            let mut e = vec![0; d];
            e[j] = 1;
            let shifted = annealed_checkpoints(params, &SpaceTimePoint::new(e.clone(), 0), &[n], reps, base_seed)?;
            let s = sup_diff(cur, &shifted[0], &vec![0; d]);
            if s.0 >= start_shift.0 {
                start_shift = s;
            }
            let t = sup_diff(cur, cur, &e);
            if t.0 >= target_shift.0 {
                target_shift = t;
            }
        }
        push(DerivativeKind::StartShift, start_shift);
        push(DerivativeKind::StartTime, sup_diff(cur, &later[0], &vec![0; d]));
        push(DerivativeKind::TargetShift, target_shift);
        push(DerivativeKind::EndTime, sup_diff(cur, prev, &vec![0; d]));
        let side = ((n as f64).powf(eps).floor() as i64).max(1);
        let osc = partition_oscillation(cur, &BoxPartition::cubes(d, side)?);
        let pscale = (n as f64).powf(0.5 - 3.0 * d as f64 * eps);
        rows.push(DerivativeRow {
            n,
            kind: None,
            raw: osc,
            scaled: osc * pscale,
            scaled_stderr: f64::NAN,
        });
    }
    Ok(rows)
}
