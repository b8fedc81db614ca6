//! The truncated backbone field `xi^(T)` and open-path reachability.
//!
//! `xi^(T)_t(x) = 1` iff there is a directed open path from `(x, t)` to time
//! `T`. The field is computed by a backward pass over time slices, one slice
//! of state at a time. Sites outside an open-boundary window count as closed.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::environment::{read_i64, read_slab_header, write_slab_header, BitSlab, EnvironmentWindow};
use crate::error::{Error, Result};
use crate::geometry::{Boundary, SpaceTimePoint, SpatialBox};
use crate::rng;
use crate::stats::OnlineStats;

/// Sup-norm dilation by one site: `out[x] = max_{|y-x|<=1} inp[y]`.
fn dilate(domain: &SpatialBox, boundary: Boundary, inp: &[u8], out: &mut Vec<u8>) {
    out.clear();
    out.extend_from_slice(inp);
    let mut tmp = vec![0u8; inp.len()];
    for axis in 0..domain.dim() {
        let stride = domain.strides()[axis];
        let width = domain.width(axis) as usize;
        for (i, t) in tmp.iter_mut().enumerate() {
            let c = (i / stride) % width;
            let mut v = out[i];
            if c > 0 {
                v |= out[i - stride];
            } else if boundary == Boundary::Periodic && width > 1 {
                v |= out[i + (width - 1) * stride];
            }
            if c + 1 < width {
                v |= out[i + stride];
            } else if boundary == Boundary::Periodic && width > 1 {
                v |= out[i - (width - 1) * stride];
            }
            *t = v;
        }
        std::mem::swap(out, &mut tmp);
    }
}

fn env_slice(env: &EnvironmentWindow, n: i64) -> Vec<u8> {
    let bits = env.bits();
    let s = bits.slice_len();
    let base = bits.flat(0, n);
    (0..s).map(|i| bits.get(base + i) as u8).collect()
}

/// `xi^(T)` over every window site with `t <= T`.
#[derive(Debug, Clone)]
pub struct BackboneField {
    env: Arc<EnvironmentWindow>,
    horizon: i64,
    bits: BitSlab,
}

/// Backward pass: `xi_T = omega(., T)`, `xi_t = omega(., t) * max_{|y-x|<=1} xi_{t+1}(y)`.
pub fn compute_backbone(env: impl Into<Arc<EnvironmentWindow>>, horizon: i64) -> Result<BackboneField> {
    let env = env.into();
    let (t_lo, t_hi) = env.time_range();
    if horizon < t_lo || horizon > t_hi {
        return Err(Error::range(format!(
            "horizon {horizon} outside window time range [{t_lo}, {t_hi}]"
        )));
    }
    let domain = env.domain().clone();
    let mut bits = BitSlab::new(domain.clone(), t_lo, horizon)?;
    let s = domain.len();
    let mut cur = env_slice(&env, horizon);
    let mut dil = Vec::with_capacity(s);
    for t in (t_lo..=horizon).rev() {
        if t < horizon {
            dilate(&domain, env.boundary(), &cur, &mut dil);
            let omega = env.bits();
            let base = omega.flat(0, t);
            for (i, c) in cur.iter_mut().enumerate() {
                *c = dil[i] & omega.get(base + i) as u8;
            }
        }
        let base = bits.flat(0, t);
        for (i, &c) in cur.iter().enumerate() {
            if c != 0 {
                bits.set(base + i, true);
            }
        }
    }
    Ok(BackboneField { env, horizon, bits })
}

/// Field equal to "reaches slice `cutoff`"; the finite-range surrogate.
pub fn truncated_surrogate(env: impl Into<Arc<EnvironmentWindow>>, cutoff: i64) -> Result<BackboneField> {
    compute_backbone(env, cutoff)
}

impl BackboneField {
    pub fn env(&self) -> &EnvironmentWindow {
        &self.env
    }

    pub fn env_arc(&self) -> &Arc<EnvironmentWindow> {
        &self.env
    }

    pub fn horizon(&self) -> i64 {
        self.horizon
    }

    /// Always true: the field is a finite-horizon approximation.
    pub fn truncated(&self) -> bool {
        true
    }

    pub fn dim(&self) -> usize {
        self.env.dim()
    }

    pub fn domain(&self) -> &SpatialBox {
        self.env.domain()
    }

    pub fn boundary(&self) -> Boundary {
        self.env.boundary()
    }

    pub fn time_range(&self) -> (i64, i64) {
        (self.env.time_range().0, self.horizon)
    }

    pub fn bits(&self) -> &BitSlab {
        &self.bits
    }

    /// Bit at a resolved spatial index; the caller guarantees `t` is in range.
    #[inline]
    pub fn xi_flat(&self, spatial: usize, t: i64) -> bool {
        self.bits.get(self.bits.flat(spatial, t))
    }

    #[inline]
    pub fn omega_flat(&self, spatial: usize, t: i64) -> bool {
        let b = self.env.bits();
        b.get(b.flat(spatial, t))
    }

    pub fn xi(&self, x: &[i64], t: i64) -> Result<bool> {
        let (t_lo, _) = self.time_range();
        if t < t_lo || t > self.horizon {
            return Err(Error::range(format!(
                "time {t} outside backbone range [{t_lo}, {}]",
                self.horizon
            )));
        }
        let s = self
            .env
            .resolve(x)
            .ok_or_else(|| Error::range(format!("{x:?} outside window {}", self.domain())))?;
        Ok(self.xi_flat(s, t))
    }

    pub fn xi_at(&self, pt: &SpaceTimePoint) -> Result<bool> {
        self.xi(&pt.x, pt.n)
    }

    /// Fraction of sites with `xi_t = 1` in slice `t`.
    pub fn slice_density(&self, t: i64) -> Result<f64> {
        let (t_lo, _) = self.time_range();
        if t < t_lo || t > self.horizon {
            return Err(Error::range(format!("slice {t} outside backbone range")));
        }
        let s = self.bits.slice_len();
        let ones = (0..s).filter(|&i| self.xi_flat(i, t)).count();
        Ok(ones as f64 / s as f64)
    }

    /// Binary dump with magic `OPB1`: the environment header, the horizon,
    /// then the packed `xi` bits over `[t_lo, horizon]`.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        write_slab_header(w, *b"OPB1", &self.bits, self.env.p(), self.env.seed(), self.env.boundary())?;
        w.write_all(&self.horizon.to_le_bytes())?;
        w.write_all(&self.bits.to_bytes())?;
        Ok(())
    }
}

/// Contents of an `OPB1` dump.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneDump {
    pub bits: BitSlab,
    pub p: f64,
    pub seed: u64,
    pub boundary: Boundary,
    pub horizon: i64,
}

impl BackboneDump {
    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let (mut bits, p, seed, boundary) = read_slab_header(r, *b"OPB1")?;
        let horizon = read_i64(r)?;
        if horizon != bits.time_range().1 {
            return Err(Error::Format("horizon does not match slab time range".into()));
        }
        let mut payload = vec![0u8; bits.site_count().div_ceil(8)];
        r.read_exact(&mut payload)?;
        bits.fill_from_bytes(&payload)?;
        Ok(BackboneDump {
            bits,
            p,
            seed,
            boundary,
            horizon,
        })
    }
}

/// Forward open-path sets from one start site: `slices[k]` marks the sites
/// `z` with `(x, m) -> (z, m + k)`.
#[derive(Debug, Clone)]
pub struct ReachSets {
    pub start: SpaceTimePoint,
    pub slices: Vec<Vec<u8>>,
}

impl ReachSets {
    pub fn alive(&self, k: usize) -> bool {
        self.slices.get(k).is_some_and(|s| s.iter().any(|&v| v != 0))
    }
}

/// Forward reachability from `(x, m)` up to time `n_end` (clipped at the
/// first empty slice, after which all later slices are empty too).
pub fn forward_reach(env: &EnvironmentWindow, start: &SpaceTimePoint, n_end: i64) -> Result<ReachSets> {
    let (t_lo, t_hi) = env.time_range();
    if start.n < t_lo || n_end > t_hi || n_end < start.n {
        return Err(Error::range(format!(
            "reach from time {} to {n_end} outside window [{t_lo}, {t_hi}]",
            start.n
        )));
    }
    let domain = env.domain().clone();
    let s0 = env
        .resolve(&start.x)
        .ok_or_else(|| Error::range(format!("{} outside window", start)))?;
    let mut cur = vec![0u8; domain.len()];
    cur[s0] = env.is_open_at(&start.x, start.n)? as u8;
    let mut slices = vec![cur.clone()];
    let mut dil = Vec::with_capacity(domain.len());
    let mut alive = cur[s0] != 0;
    for t in start.n + 1..=n_end {
        if !alive {
            slices.push(vec![0u8; domain.len()]);
            continue;
        }
        dilate(&domain, env.boundary(), &cur, &mut dil);
        let omega = env.bits();
        let base = omega.flat(0, t);
        alive = false;
        for (i, c) in cur.iter_mut().enumerate() {
            *c = dil[i] & omega.get(base + i) as u8;
            alive |= *c != 0;
        }
        slices.push(cur.clone());
    }
    Ok(ReachSets {
        start: start.clone(),
        slices,
    })
}

/// Whether a directed open path joins `from` to `to` (endpoints included).
pub fn reaches(env: &EnvironmentWindow, from: &SpaceTimePoint, to: &SpaceTimePoint) -> Result<bool> {
    if to.n < from.n {
        return Err(Error::range("target time precedes start time"));
    }
    let target = env
        .resolve(&to.x)
        .ok_or_else(|| Error::range(format!("{to} outside window")))?;
    let sets = forward_reach(env, from, to.n)?;
    Ok(sets.slices[(to.n - from.n) as usize][target] != 0)
}

/// First time `t <= max_t` at which some backbone site `z` is reachable from
/// both `(x, start)` and `(y, start)`; the witness is the first such `z` in
/// index order.
pub fn intersection_time(
    field: &BackboneField,
    x: &[i64],
    y: &[i64],
    start: i64,
    max_t: i64,
) -> Result<Option<(Vec<i64>, i64)>> {
    if !field.xi(x, start)? || !field.xi(y, start)? {
        return Err(Error::config("both start points must be on the backbone"));
    }
    let end = max_t.min(field.horizon());
    let rx = forward_reach(field.env(), &SpaceTimePoint::new(x, start), end)?;
    let ry = forward_reach(field.env(), &SpaceTimePoint::new(y, start), end)?;
    for (k, (sx, sy)) in rx.slices.iter().zip(&ry.slices).enumerate() {
        let t = start + k as i64;
        if let Some(i) = (0..sx.len()).find(|&i| sx[i] != 0 && sy[i] != 0 && field.xi_flat(i, t)) {
            return Ok(Some((field.domain().coords_of(i), t)));
        }
    }
    Ok(None)
}

/// Fraction of slice-`t` sites where the backbones for horizons `s` and
/// `s + delta` disagree.
pub fn horizon_disagreement(env: &Arc<EnvironmentWindow>, t: i64, s: i64, delta: i64) -> Result<f64> {
    let short = compute_backbone(env.clone(), s)?;
    let long = compute_backbone(env.clone(), s + delta)?;
    if t > s {
        return Err(Error::range("comparison slice beyond the shorter horizon"));
    }
    let n = short.bits().slice_len();
    let diff = (0..n).filter(|&i| short.xi_flat(i, t) != long.xi_flat(i, t)).count();
    Ok(diff as f64 / n as f64)
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub reps: u64,
}

impl Estimate {
    pub fn from_stats(s: &OnlineStats) -> Self {
        Estimate {
            value: s.mean(),
            std_error: s.std_error(),
            reps: s.count(),
        }
    }
}

/// Origin cone window `[-T, T]^d x [0, T]`: exact for paths started at the origin.
fn origin_cone(p: f64, d: usize, depth: i64, seed: u64) -> Result<EnvironmentWindow> {
    let ext = vec![depth.max(1); d];
    crate::environment::sample_environment(d, &ext, (0, depth), p, seed, Boundary::Open)
}

/// Fraction of origins with an open path to depth `n` but none to depth
/// `n + deep_margin`.
pub fn survival_gap(p: f64, d: usize, n: i64, deep_margin: i64, reps: u64, seed: u64) -> Result<Estimate> {
    if reps == 0 {
        return Err(Error::config("reps must be at least 1"));
    }
    let deep = n + deep_margin;
    let mut stats = OnlineStats::default();
    for r in 0..reps {
        let env = origin_cone(p, d, deep, rng::derive_seed(seed, "survival", r))?;
        let sets = forward_reach(&env, &SpaceTimePoint::origin(d), deep)?;
        let gap = sets.alive(n as usize) && !sets.alive(deep as usize);
        stats.push(gap as u8 as f64);
    }
    Ok(Estimate::from_stats(&stats))
}

/// Fraction of origins with an open path to depth `n`.
pub fn survival_probability(p: f64, d: usize, n: i64, reps: u64, seed: u64) -> Result<Estimate> {
    if reps == 0 {
        return Err(Error::config("reps must be at least 1"));
    }
    let mut stats = OnlineStats::default();
    for r in 0..reps {
        let env = origin_cone(p, d, n, rng::derive_seed(seed, "survival", r))?;
        let sets = forward_reach(&env, &SpaceTimePoint::origin(d), n)?;
        stats.push(sets.alive(n as usize) as u8 as f64);
    }
    Ok(Estimate::from_stats(&stats))
}

/// Bisection over `p` for the critical value: `p` counts as supercritical
/// when `P(survive 2n) / P(survive n) >= ratio_threshold`.
pub fn estimate_pc(d: usize, n: i64, reps: u64, seed: u64, ratio_threshold: f64, iters: u32) -> Result<f64> {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        let short = survival_probability(mid, d, n, reps, seed)?.value;
        let long = survival_probability(mid, d, 2 * n, reps, seed)?.value;
        let supercritical = short > 0.0 && long / short >= ratio_threshold;
        if supercritical {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::sample_environment;

    fn env1(p: f64, seed: u64, ext: i64, t_hi: i64) -> Arc<EnvironmentWindow> {
        Arc::new(sample_environment(1, &[ext], (0, t_hi), p, seed, Boundary::Open).unwrap())
    }

    #[test]
    fn degenerate_fields() {
        let one = compute_backbone(env1(1.0, 1, 5, 6), 6).unwrap();
        let zero = compute_backbone(env1(0.0, 1, 5, 6), 6).unwrap();
        assert_eq!(one.bits().count_ones(), one.bits().site_count());
        assert_eq!(zero.bits().count_ones(), 0);
    }

    #[test]
    fn horizon_outside_window_is_range_error() {
        assert!(matches!(compute_backbone(env1(0.5, 1, 5, 6), 7), Err(Error::Range(_))));
    }

    #[test]
    fn successor_guarantee_and_sub_omega() {
        for seed in 0..20 {
            let env = Arc::new(sample_environment(2, &[6, 6], (0, 8), 0.6, seed, Boundary::Open).unwrap());
            let f = compute_backbone(env.clone(), 8).unwrap();
            for t in 0..8 {
                for x in f.domain().iter() {
                    if f.xi(&x, t).unwrap() {
                        assert!(env.is_open_at(&x, t).unwrap());
                        let has_succ = SpatialBox::ball(&x, 1)
                            .iter()
                            .filter(|z| f.domain().contains(z))
                            .any(|z| f.xi(&z, t + 1).unwrap());
                        assert!(has_succ, "no successor at {x:?},{t}");
                    }
                }
            }
        }
    }

    #[test]
    fn longer_horizon_prunes() {
        let env = env1(0.6, 3, 30, 40);
        let short = compute_backbone(env.clone(), 20).unwrap();
        let long = compute_backbone(env, 40).unwrap();
        for t in 0..=20 {
            for x in short.domain().iter() {
                if long.xi(&x, t).unwrap() {
                    assert!(short.xi(&x, t).unwrap());
                }
            }
        }
    }

    #[test]
    fn reaches_trivial_cases() {
        let env = env1(1.0, 1, 6, 6);
        assert!(reaches(&env, &SpaceTimePoint::new([0], 0), &SpaceTimePoint::new([3], 4)).unwrap());
        assert!(!reaches(&env, &SpaceTimePoint::new([0], 0), &SpaceTimePoint::new([5], 4)).unwrap());
        let e = env1(0.5, 9, 6, 6);
        for x in -6..=6 {
            let open = e.is_open_at(&[x], 2).unwrap();
            let pt = SpaceTimePoint::new([x], 2);
            assert_eq!(reaches(&e, &pt, &pt).unwrap(), open);
        }
    }

    #[test]
    fn intersection_trivial_cases() {
        let f = compute_backbone(env1(1.0, 1, 10, 10), 10).unwrap();
        assert_eq!(intersection_time(&f, &[2], &[2], 0, 5).unwrap(), Some((vec![2], 0)));
        let (z, t) = intersection_time(&f, &[0], &[2], 0, 5).unwrap().unwrap();
        assert_eq!((z, t), (vec![1], 1));
    }

    #[test]
    fn survival_gap_degenerate() {
        assert_eq!(survival_gap(1.0, 1, 5, 10, 20, 1).unwrap().value, 0.0);
        assert_eq!(survival_gap(0.0, 1, 5, 10, 20, 1).unwrap().value, 0.0);
    }

    #[test]
    fn periodic_backbone_is_translation_covariant() {
        let env = Arc::new(sample_environment(1, &[7], (0, 9), 0.55, 4, Boundary::Periodic).unwrap());
        let shifted = Arc::new(env.shift_view(&[3], 0).materialize().unwrap());
        let a = compute_backbone(env, 9).unwrap();
        let b = compute_backbone(shifted, 9).unwrap();
        for t in 0..=9 {
            for x in -7..=7 {
                assert_eq!(b.xi(&[x], t).unwrap(), a.xi(&[x + 3], t).unwrap());
            }
        }
    }

    #[test]
    fn backbone_dump_roundtrip() {
        let f = compute_backbone(env1(0.7, 2, 4, 6), 5).unwrap();
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"OPB1");
        let dump = BackboneDump::read(&mut buf.as_slice()).unwrap();
        assert_eq!(dump.horizon, 5);
        assert_eq!(&dump.bits, f.bits());
    }
}
