//! Model parameters, window planning and annealed (environment-averaged) laws.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;

use crate::cluster::{compute_backbone, BackboneField, Estimate};
use crate::environment::EnvironmentWindow;
use crate::error::{Error, Result};
use crate::geometry::{Boundary, Grid, SpaceTimePoint, SpatialBox, MAX_DIM};
use crate::prefactor::compute_prefactor;
use crate::rng::{self, derive_seed};
use crate::stats::OnlineStats;
use crate::walk::{avoidance_profile, propagate_checkpoints, DistributionSlice, LawKind, Provenance};

pub const DEFAULT_SPATIAL_MARGIN: i64 = 50;
pub const EXACT_SITE_LIMIT: usize = 24;

/// Which field coordinates a sampled window reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Anchor {
    /// Site `(x, n)` reads the field at `(x, n)`.
    #[default]
    Absolute,
    /// Site `(x, n)` reads the field at `(x - y, n - m)` for a walk started at
    /// `(y, m)`, so every start sees the same field relative to itself.
    RelativeToStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub d: usize,
    pub p: f64,
    /// Backbone horizon beyond the last walk time; `None` picks
    /// [`default_horizon_margin`].
    pub horizon_margin: Option<i64>,
    /// Extra spatial room beyond the walk cone on each side.
    pub spatial_margin: i64,
    pub anchor: Anchor,
}

impl ModelParams {
    pub fn new(d: usize, p: f64) -> Self {
        ModelParams {
            d,
            p,
            horizon_margin: None,
            spatial_margin: DEFAULT_SPATIAL_MARGIN,
            anchor: Anchor::Absolute,
        }
    }

    pub fn with_horizon_margin(mut self, m: i64) -> Self {
        self.horizon_margin = Some(m);
        self
    }

    pub fn with_spatial_margin(mut self, m: i64) -> Self {
        self.spatial_margin = m;
        self
    }

    pub fn with_anchor(mut self, a: Anchor) -> Self {
        self.anchor = a;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d > MAX_DIM {
            return Err(Error::config(format!("dimension {} outside 1..={MAX_DIM}", self.d)));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config(format!("open probability {} outside [0,1]", self.p)));
        }
        if self.horizon_margin.is_some_and(|m| m < 0) || self.spatial_margin < 0 {
            return Err(Error::config("margins must be non-negative"));
        }
        Ok(())
    }

    pub fn horizon_margin_for(&self, n_steps: i64) -> i64 {
        self.horizon_margin
            .unwrap_or_else(|| default_horizon_margin(self.d, n_steps))
    }

    /// Window for walks of `n_steps` from `start`, with `lookback` extra
    /// times before the start (prefactor recursions) and matching spatial room.
    pub fn plan(&self, start: &SpaceTimePoint, n_steps: i64, lookback: i64) -> Result<WindowPlan> {
        self.validate()?;
        if start.dim() != self.d {
            return Err(Error::config("start point dimension mismatch"));
        }
        if n_steps < 0 || lookback < 0 {
            return Err(Error::config("step counts must be non-negative"));
        }
        let radius = n_steps + 1 + lookback + self.spatial_margin;
        let horizon = start.n + n_steps + self.horizon_margin_for(n_steps);
        Ok(WindowPlan {
            domain: SpatialBox::ball(&start.x, radius),
            time_range: (start.n - lookback, horizon),
            horizon,
            start: start.clone(),
        })
    }
}

/// `max(50, 20 * ceil(log2 V))` with `V = (2(n+1)+1)^d (n+1)` the walk-cone slab volume.
pub fn default_horizon_margin(d: usize, n_steps: i64) -> i64 {
    let n1 = (n_steps.max(0) + 1) as f64;
    let vol = (2.0 * n1 + 1.0).powi(d as i32) * n1;
    (20 * vol.log2().ceil() as i64).max(50)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowPlan {
    pub domain: SpatialBox,
    pub time_range: (i64, i64),
    pub horizon: i64,
    pub start: SpaceTimePoint,
}

impl WindowPlan {
    pub fn sample_env(&self, params: &ModelParams, seed: u64) -> Result<EnvironmentWindow> {
        let (off, toff) = match params.anchor {
            Anchor::Absolute => (vec![0; params.d], 0),
            Anchor::RelativeToStart => (self.start.x.iter().map(|v| -v).collect(), -self.start.n),
        };
        EnvironmentWindow::generate(
            self.domain.clone(),
            self.time_range,
            params.p,
            seed,
            Boundary::Open,
            &off,
            toff,
        )
    }

    pub fn sample_field(&self, params: &ModelParams, seed: u64) -> Result<BackboneField> {
        compute_backbone(self.sample_env(params, seed)?, self.horizon)
    }
}

/// Seed of the `i`-th quenched field in a paired-seed experiment.
pub fn field_seed(base: u64, i: u64) -> u64 {
    derive_seed(base, "field", i)
}

/// Seed of the `r`-th annealed Monte Carlo replica.
pub fn annealed_seed(base: u64, r: u64) -> u64 {
    derive_seed(base, "annealed", r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnealedMode {
    Exact,
    MonteCarlo,
}

/// Annealed law of `X_{m + n_steps}` from `start`.
pub fn estimate_annealed(
    params: &ModelParams,
    start: &SpaceTimePoint,
    n_steps: i64,
    mode: AnnealedMode,
    reps: u64,
    base_seed: u64,
) -> Result<DistributionSlice> {
    match mode {
        AnnealedMode::Exact => exact_annealed(params, start, n_steps),
        AnnealedMode::MonteCarlo => Ok(annealed_checkpoints(params, start, &[n_steps], reps, base_seed)?
            .pop()
            .expect("one checkpoint")),
    }
}

/// Space-time sites whose bits can influence the walk law up to the horizon.
pub fn dependency_slab(start: &SpaceTimePoint, horizon: i64) -> Vec<SpaceTimePoint> {
    let mut out = Vec::new();
    for s in start.n..=horizon {
        for x in SpatialBox::ball(&start.x, s - start.n).iter() {
            out.push(SpaceTimePoint::new(x, s));
        }
    }
    out
}

/// Exact average over all `2^sites` configurations of the dependency slab
/// (for `p` in `{0, 1}` only the one configuration of positive weight).
pub fn exact_annealed(params: &ModelParams, start: &SpaceTimePoint, n_steps: i64) -> Result<DistributionSlice> {
    params.validate()?;
    if start.dim() != params.d || n_steps < 0 {
        return Err(Error::config("bad start point or step count"));
    }
    let horizon = start.n + n_steps + params.horizon_margin_for(n_steps);
    if params.p == 0.0 || params.p == 1.0 {
        // a single configuration carries all the weight
        let p = params.p;
        let top = start.n + n_steps + 1;
        let env = EnvironmentWindow::from_fn(
            SpatialBox::ball(&start.x, n_steps + 1),
            (start.n, top),
            Boundary::Open,
            |_, _| p == 1.0,
        )?;
        let field = compute_backbone(env, top)?;
        let mut law = propagate_checkpoints(&field, start, &[n_steps])?.pop().expect("one");
        law.label = LawKind::Annealed;
        let sites = (0..=horizon - start.n).map(|s| ((2 * s + 1) as usize).pow(params.d as u32)).sum();
        law.provenance = Provenance::Enumerated { sites };
        return Ok(law);
    }
    let slab = dependency_slab(start, horizon);
    if slab.len() > EXACT_SITE_LIMIT {
        return Err(Error::Capacity(format!(
            "dependency slab has {} sites, exact enumeration allows at most {EXACT_SITE_LIMIT} (use a smaller horizon margin or mc mode)",
            slab.len()
        )));
    }
    let domain = SpatialBox::ball(&start.x, (horizon - start.n).max(1));
    let base = EnvironmentWindow::from_fn(domain.clone(), (start.n, horizon), Boundary::Open, |_, _| false)?;
    let flat: Vec<usize> = slab
        .iter()
        .map(|pt| base.bits().flat(domain.index_of(&pt.x).expect("slab inside domain"), pt.n))
        .collect();
    let k_sites = slab.len();
    let total: u64 = 1 << k_sites;
    let region = SpatialBox::ball(&start.x, n_steps);
    let p = params.p;
    let chunk = 1u64 << 10.min(k_sites);
    let n_chunks = total.div_ceil(chunk);
    let partial: Vec<Result<Vec<f64>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; region.len()];
            for mask in c * chunk..((c + 1) * chunk).min(total) {
                let ones = mask.count_ones() as i32;
                let w = p.powi(ones) * (1.0 - p).powi(k_sites as i32 - ones);
                if w == 0.0 {
                    continue;
                }
                let mut env = base.clone();
                for (j, &i) in flat.iter().enumerate() {
                    if mask >> j & 1 == 1 {
                        env.bits_mut().set(i, true);
                    }
                }
                let field = compute_backbone(env, horizon)?;
                let law = propagate_checkpoints(&field, start, &[n_steps])?.pop().expect("one");
                for (a, v) in acc.iter_mut().zip(law.grid.restricted_to(&region).values()) {
                    *a += w * v;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut sum = vec![0.0; region.len()];
    for part in partial {
        for (s, v) in sum.iter_mut().zip(part?) {
            *s += v;
        }
    }
    Ok(DistributionSlice {
        time: start.n + n_steps,
        grid: Grid::from_values(region, sum)?,
        label: LawKind::Annealed,
        provenance: Provenance::Enumerated { sites: k_sites },
        std_error: None,
    })
}

const MC_CHUNK: u64 = 8;

/// Monte Carlo annealed laws after each of `checkpoints` steps, with per-site
/// standard errors. Each replica is one sampled field; replicas are merged in
/// index order so the result does not depend on the thread count.
pub fn annealed_checkpoints(
    params: &ModelParams,
    start: &SpaceTimePoint,
    checkpoints: &[i64],
    reps: u64,
    base_seed: u64,
) -> Result<Vec<DistributionSlice>> {
    annealed_checkpoints_with(params, start, checkpoints, reps, base_seed, Estimator::Plain)
}

/// How replicate laws are combined into an annealed estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Estimator {
    /// Sample mean of the quenched laws.
    #[default]
    Plain,
    /// Sample mean corrected by the prefactor field `psi` (which has mean
    /// exactly 1) as a control variate: `q - beta (psi - 1)` per site, with
    /// `beta = Cov(q, psi) / Var(psi)`. `psi` uses the given depth, capped by
    /// the step count and the spatial margin.
    PrefactorControl { depth: i64 },
}

pub fn annealed_checkpoints_with(
    params: &ModelParams,
    start: &SpaceTimePoint,
    checkpoints: &[i64],
    reps: u64,
    base_seed: u64,
    estimator: Estimator,
) -> Result<Vec<DistributionSlice>> {
    if reps == 0 {
        return Err(Error::config("reps must be at least 1"));
    }
    let n_max = *checkpoints.iter().max().ok_or_else(|| Error::config("no checkpoints"))?;
    let plan = params.plan(start, n_max, 0)?;
    let regions: Vec<SpatialBox> = checkpoints.iter().map(|&c| SpatialBox::ball(&start.x, c)).collect();
    let depths: Vec<i64> = match estimator {
        Estimator::Plain => Vec::new(),
        Estimator::PrefactorControl { depth } => {
            if depth < 1 {
                return Err(Error::config("control variate depth must be at least 1"));
            }
            checkpoints.iter().map(|&c| depth.min(c).min(params.spatial_margin + 1)).collect()
        }
    };
    let control = !depths.is_empty();
    let n_chunks = reps.div_ceil(MC_CHUNK);
    // per site: sum q, sum q^2, then (control only) sum m, sum m^2, sum q m with m = psi - 1
    type Acc = Vec<[Vec<f64>; 5]>;
    let zero = || -> Acc { regions.iter().map(|r| std::array::from_fn(|_| vec![0.0; r.len()])).collect() };
    let partial: Vec<Result<Acc>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = zero();
            for r in c * MC_CHUNK..((c + 1) * MC_CHUNK).min(reps) {
                let field = plan.sample_field(params, annealed_seed(base_seed, r))?;
                let laws = propagate_checkpoints(&field, start, checkpoints)?;
                for (k, (a, law)) in acc.iter_mut().zip(&laws).enumerate() {
                    let q = law.grid.values();
                    for (i, v) in q.iter().enumerate() {
                        a[0][i] += v;
                        a[1][i] += v * v;
                    }
                    if control {
                        let psi = compute_prefactor(&field, law.time, depths[k], Some(&regions[k]))?;
                        for (i, (v, m)) in q.iter().zip(psi.grid.values()).enumerate() {
                            let m = m - 1.0;
                            a[2][i] += m;
                            a[3][i] += m * m;
                            a[4][i] += v * m;
                        }
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = zero();
    for part in partial {
        for (t, p) in total.iter_mut().zip(part?) {
            for (tv, pv) in t.iter_mut().zip(p) {
                tv.iter_mut().zip(pv).for_each(|(a, b)| *a += b);
            }
        }
    }
    let rf = reps as f64;
    let mut out = Vec::with_capacity(checkpoints.len());
    for (a, (region, &c)) in total.into_iter().zip(regions.into_iter().zip(checkpoints)) {
        let mut mean: Vec<f64> = a[0].iter().map(|s| s / rf).collect();
        let mut se = vec![0.0; mean.len()];
        if reps >= 2 {
            for (i, m) in mean.iter_mut().enumerate() {
                let var_q = (a[1][i] - rf * *m * *m).max(0.0) / (rf - 1.0);
                let mut var = var_q;
                if control {
                    let mbar = a[2][i] / rf;
                    let var_m = (a[3][i] - rf * mbar * mbar).max(0.0) / (rf - 1.0);
                    let cov = (a[4][i] - rf * *m * mbar) / (rf - 1.0);
                    if var_m > 0.0 {
                        *m -= cov / var_m * mbar;
                        var = (var_q - cov * cov / var_m).max(0.0);
                    }
                }
                se[i] = (var / rf).sqrt();
            }
        }
        out.push(DistributionSlice {
            time: start.n + c,
            grid: Grid::from_values(region.clone(), mean)?,
            label: LawKind::Annealed,
            provenance: Provenance::MonteCarlo { base_seed, reps },
            std_error: Some(Grid::from_values(region, se)?),
        });
    }
    Ok(out)
}

/// Average over `reps` fields of the exact quenched probability that the walk
/// from the origin avoids the backbone at times `1..=n`, for each `n` in `ns`.
pub fn hitting_profile(params: &ModelParams, ns: &[i64], reps: u64, base_seed: u64) -> Result<Vec<Estimate>> {
    if reps == 0 {
        return Err(Error::config("reps must be at least 1"));
    }
    let n_max = *ns.iter().max().ok_or_else(|| Error::config("no step counts"))?;
    if ns.iter().any(|&n| n < 0) {
        return Err(Error::config("step counts must be non-negative"));
    }
    let origin = SpaceTimePoint::origin(params.d);
    let plan = params.plan(&origin, n_max, 0)?;
    let profiles: Vec<Result<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let field = plan.sample_field(params, derive_seed(base_seed, "hits", r))?;
            avoidance_profile(&field, &origin, n_max)
        })
        .collect();
    let mut stats = vec![OnlineStats::default(); ns.len()];
    for prof in profiles {
        let prof = prof?;
        for (s, &n) in stats.iter_mut().zip(ns) {
            s.push(prof[n as usize]);
        }
    }
    Ok(stats.iter().map(Estimate::from_stats).collect())
}

pub fn hitting_tail(params: &ModelParams, n: i64, reps: u64, base_seed: u64) -> Result<Estimate> {
    Ok(hitting_profile(params, &[n], reps, base_seed)?[0])
}

/// Memory and optional on-disk cache of Monte Carlo annealed laws.
#[derive(Debug, Default)]
pub struct AnnealedCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, Vec<DistributionSlice>>>,
    hits: Mutex<u64>,
}

const CACHE_MAGIC: &[u8; 4] = b"OPA1";

impl AnnealedCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(AnnealedCache {
            dir: Some(dir),
            ..Self::default()
        })
    }

    /// Directory from `OPWALK_CACHE`, else `fallback`, else memory only.
    pub fn from_env(fallback: Option<&Path>) -> Result<Self> {
        match std::env::var_os("OPWALK_CACHE").map(PathBuf::from).or(fallback.map(Path::to_path_buf)) {
            Some(dir) => Self::on_disk(dir),
            None => Ok(Self::in_memory()),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn hits(&self) -> u64 {
        *self.hits.lock().expect("cache lock")
    }

    pub fn key(
        params: &ModelParams,
        start: &SpaceTimePoint,
        checkpoints: &[i64],
        reps: u64,
        base_seed: u64,
        estimator: Estimator,
    ) -> String {
        let n_max = checkpoints.iter().copied().max().unwrap_or(0);
        let mut key = format!(
            "d={} p={:016x} start={:?}@{} n={:?} reps={} seed={} hm={} sm={} anchor={:?}",
            params.d,
            params.p.to_bits(),
            start.x,
            start.n,
            checkpoints,
            reps,
            base_seed,
            params.horizon_margin_for(n_max),
            params.spatial_margin,
            params.anchor
        );
        if let Estimator::PrefactorControl { depth } = estimator {
            key.push_str(&format!(" cv={depth}"));
        }
        key
    }

    fn path_for(&self, key: &str) -> Option<PathBuf> {
        let h = key.bytes().fold(0x243f_6a88_85a3_08d3u64, |h, b| rng::absorb(h, b as i64));
        self.dir.as_ref().map(|d| d.join(format!("annealed-{h:016x}.bin")))
    }

    pub fn get_or_compute(
        &self,
        params: &ModelParams,
        start: &SpaceTimePoint,
        checkpoints: &[i64],
        reps: u64,
        base_seed: u64,
    ) -> Result<Vec<DistributionSlice>> {
        self.get_or_compute_with(params, start, checkpoints, reps, base_seed, Estimator::Plain)
    }

    pub fn get_or_compute_with(
        &self,
        params: &ModelParams,
        start: &SpaceTimePoint,
        checkpoints: &[i64],
        reps: u64,
        base_seed: u64,
        estimator: Estimator,
    ) -> Result<Vec<DistributionSlice>> {
        let key = Self::key(params, start, checkpoints, reps, base_seed, estimator);
        if let Some(v) = self.memory.lock().expect("cache lock").get(&key) {
            *self.hits.lock().expect("cache lock") += 1;
            return Ok(v.clone());
        }
        if let Some(path) = self.path_for(&key) {
            if path.exists() {
                let mut f = fs::File::open(&path)?;
                if let Some(v) = read_cache_file(&mut f, &key)? {
                    *self.hits.lock().expect("cache lock") += 1;
                    self.memory.lock().expect("cache lock").insert(key, v.clone());
                    return Ok(v);
                }
            }
        }
        let v = annealed_checkpoints_with(params, start, checkpoints, reps, base_seed, estimator)?;
        if let Some(path) = self.path_for(&key) {
            let tmp = path.with_extension("tmp");
            let mut f = fs::File::create(&tmp)?;
            write_cache_file(&mut f, &key, &v)?;
            f.sync_all()?;
            fs::rename(&tmp, &path)?;
        }
        self.memory.lock().expect("cache lock").insert(key, v.clone());
        Ok(v)
    }
}

fn write_grid<W: Write>(w: &mut W, g: &Grid) -> Result<()> {
    let r = g.region();
    w.write_all(&(r.dim() as u32).to_le_bytes())?;
    for a in 0..r.dim() {
        w.write_all(&r.lo()[a].to_le_bytes())?;
        w.write_all(&r.hi()[a].to_le_bytes())?;
    }
    for v in g.values() {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_grid<R: Read>(r: &mut R) -> Result<Grid> {
    let d = read_u32(r)? as usize;
    if d == 0 || d > MAX_DIM {
        return Err(Error::Format(format!("bad dimension {d} in cache file")));
    }
    let (mut lo, mut hi) = (Vec::with_capacity(d), Vec::with_capacity(d));
    for _ in 0..d {
        lo.push(crate::environment::read_i64(r)?);
        hi.push(crate::environment::read_i64(r)?);
    }
    let region = SpatialBox::new(lo, hi)?;
    let mut vals = Vec::with_capacity(region.len());
    for _ in 0..region.len() {
        vals.push(f64::from_bits(crate::environment::read_i64(r)? as u64));
    }
    Grid::from_values(region, vals)
}

fn write_cache_file<W: Write>(w: &mut W, key: &str, slices: &[DistributionSlice]) -> Result<()> {
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&(key.len() as u32).to_le_bytes())?;
    w.write_all(key.as_bytes())?;
    w.write_all(&(slices.len() as u32).to_le_bytes())?;
    for s in slices {
        let Provenance::MonteCarlo { base_seed, reps } = s.provenance else {
            return Err(Error::Format("only Monte Carlo slices are cached".into()));
        };
        w.write_all(&s.time.to_le_bytes())?;
        w.write_all(&base_seed.to_le_bytes())?;
        w.write_all(&reps.to_le_bytes())?;
        write_grid(w, &s.grid)?;
        let se = s.std_error.as_ref().ok_or_else(|| Error::Format("missing standard errors".into()))?;
        write_grid(w, se)?;
    }
    Ok(())
}

/// `None` when the file belongs to a different key (hash collision).
fn read_cache_file<R: Read>(r: &mut R, key: &str) -> Result<Option<Vec<DistributionSlice>>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Format("not an annealed cache file".into()));
    }
    let klen = read_u32(r)? as usize;
    let mut kbuf = vec![0u8; klen];
    r.read_exact(&mut kbuf)?;
    if kbuf != key.as_bytes() {
        return Ok(None);
    }
    let count = read_u32(r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let time = crate::environment::read_i64(r)?;
        let base_seed = crate::environment::read_i64(r)? as u64;
        let reps = crate::environment::read_i64(r)? as u64;
        let grid = read_grid(r)?;
        let se = read_grid(r)?;
        out.push(DistributionSlice {
            time,
            grid,
            label: LawKind::Annealed,
            provenance: Provenance::MonteCarlo { base_seed, reps },
            std_error: Some(se),
        });
    }
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_margin_grows_with_volume() {
        assert_eq!(default_horizon_margin(1, 0), 50);
        assert_eq!(default_horizon_margin(1, 200), 20 * 17);
        assert!(default_horizon_margin(2, 200) > default_horizon_margin(1, 200));
    }

    #[test]
    fn plan_covers_cone() {
        let params = ModelParams::new(2, 0.7).with_spatial_margin(3).with_horizon_margin(5);
        let plan = params.plan(&SpaceTimePoint::new([4, -2], 10), 6, 2).unwrap();
        assert_eq!(plan.domain, SpatialBox::ball(&[4, -2], 12));
        assert_eq!(plan.time_range, (8, 21));
        assert_eq!(plan.horizon, 21);
    }

    #[test]
    fn slab_count_matches_cone() {
        assert_eq!(dependency_slab(&SpaceTimePoint::origin(1), 3).len(), 16);
        assert_eq!(dependency_slab(&SpaceTimePoint::origin(2), 1).len(), 10);
    }

    #[test]
    fn exact_capacity_error() {
        let params = ModelParams::new(1, 0.5).with_horizon_margin(2);
        assert!(matches!(
            exact_annealed(&params, &SpaceTimePoint::origin(1), 3),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn exact_degenerate_laws() {
        let o = SpaceTimePoint::origin(1);
        for p in [0.0, 1.0] {
            let params = ModelParams::new(1, p).with_horizon_margin(0);
            let a = exact_annealed(&params, &o, 3).unwrap();
            // both degenerate laws are the 3-fold trinomial convolution
            let expect = [1.0, 3.0, 6.0, 7.0, 6.0, 3.0, 1.0];
            for (x, e) in (-3..=3).zip(expect) {
                assert!((a.mass(&[x]) - e / 27.0).abs() < 1e-14, "p={p} x={x}");
            }
        }
    }

    #[test]
    fn mc_mass_is_one_and_deterministic() {
        let params = ModelParams::new(1, 0.7).with_spatial_margin(5).with_horizon_margin(10);
        let o = SpaceTimePoint::origin(1);
        let a = annealed_checkpoints(&params, &o, &[2, 5], 20, 9).unwrap();
        let b = annealed_checkpoints(&params, &o, &[2, 5], 20, 9).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!((s.total_mass() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let params = ModelParams::new(1, 0.7).with_spatial_margin(5).with_horizon_margin(10);
        let o = SpaceTimePoint::origin(1);
        let cold = AnnealedCache::on_disk(dir.path()).unwrap();
        let a = cold.get_or_compute(&params, &o, &[4], 10, 1).unwrap();
        let warm = AnnealedCache::on_disk(dir.path()).unwrap();
        let b = warm.get_or_compute(&params, &o, &[4], 10, 1).unwrap();
        assert_eq!(warm.hits(), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn hitting_degenerate() {
        let full = hitting_tail(&ModelParams::new(1, 1.0).with_horizon_margin(5), 4, 3, 1).unwrap();
        let empty = hitting_tail(&ModelParams::new(1, 0.0).with_horizon_margin(5), 4, 3, 1).unwrap();
        assert_eq!(full.value, 0.0);
        assert!((empty.value - 1.0).abs() < 1e-14);
    }
}
