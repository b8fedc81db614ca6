//! Finite windows of the i.i.d. Bernoulli space-time field.
//!
//! A window stores one bit per site of `domain x [t_lo, t_hi]`. Bits are a
//! pure function of `(seed, n + time_offset, x + field_offset)` (wrapped onto
//! the domain first under periodic boundaries), so two windows cut from the
//! same seed agree wherever they overlap.

use std::io::{self, BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::geometry::{Boundary, SpaceTimePoint, SpatialBox};
use crate::rng;

/// Bit-packed storage over `box x [t_lo, t_hi]`, time slowest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitSlab {
    domain: SpatialBox,
    t_lo: i64,
    t_hi: i64,
    words: Vec<u64>,
}

impl BitSlab {
    pub fn new(domain: SpatialBox, t_lo: i64, t_hi: i64) -> Result<Self> {
        if t_hi < t_lo {
            return Err(Error::config(format!("empty time range [{t_lo}, {t_hi}]")));
        }
        let sites = domain.len() * (t_hi - t_lo + 1) as usize;
        Ok(BitSlab {
            domain,
            t_lo,
            t_hi,
            words: vec![0; sites.div_ceil(64)],
        })
    }

    pub fn domain(&self) -> &SpatialBox {
        &self.domain
    }

    pub fn time_range(&self) -> (i64, i64) {
        (self.t_lo, self.t_hi)
    }

    pub fn slice_len(&self) -> usize {
        self.domain.len()
    }

    pub fn site_count(&self) -> usize {
        self.domain.len() * (self.t_hi - self.t_lo + 1) as usize
    }

    #[inline]
    pub fn flat(&self, spatial: usize, n: i64) -> usize {
        (n - self.t_lo) as usize * self.domain.len() + spatial
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        (self.words[i >> 6] >> (i & 63)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        let mask = 1u64 << (i & 63);
        if v {
            self.words[i >> 6] |= mask;
        } else {
            self.words[i >> 6] &= !mask;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn contains_time(&self, n: i64) -> bool {
        self.t_lo <= n && n <= self.t_hi
    }

    /// Packed little-endian byte stream: bit `i` is bit `i % 8` of byte `i / 8`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let nbytes = self.site_count().div_ceil(8);
        self.words
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(nbytes)
            .collect()
    }

    pub fn fill_from_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        if bytes.len() != self.site_count().div_ceil(8) {
            return Err(Error::Format("bit payload length mismatch".into()));
        }
        for (k, w) in self.words.iter_mut().enumerate() {
            let mut buf = [0u8; 8];
            let start = k * 8;
            let end = (start + 8).min(bytes.len());
            buf[..end - start].copy_from_slice(&bytes[start..end]);
            *w = u64::from_le_bytes(buf);
        }
        Ok(())
    }
}

/// A seeded finite slab of the Bernoulli field `omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentWindow {
    bits: BitSlab,
    p: f64,
    seed: u64,
    boundary: Boundary,
    field_offset: Vec<i64>,
    time_offset: i64,
}

/// Sample a window centred at the spatial origin with half-widths `extents`.
pub fn sample_environment(
    d: usize,
    extents: &[i64],
    time_range: (i64, i64),
    p: f64,
    seed: u64,
    boundary: Boundary,
) -> Result<EnvironmentWindow> {
    if extents.len() != d {
        return Err(Error::config(format!(
            "expected {d} spatial extents, got {}",
            extents.len()
        )));
    }
    let domain = SpatialBox::symmetric(extents)?;
    EnvironmentWindow::generate(domain, time_range, p, seed, boundary, &vec![0; d], 0)
}

impl EnvironmentWindow {
    /// Sample `domain x [t_lo, t_hi]`, reading the field at `(x + field_offset, n + time_offset)`.
    pub fn generate(
        domain: SpatialBox,
        (t_lo, t_hi): (i64, i64),
        p: f64,
        seed: u64,
        boundary: Boundary,
        field_offset: &[i64],
        time_offset: i64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(format!("open probability {p} outside [0,1]")));
        }
        if field_offset.len() != domain.dim() {
            return Err(Error::config("field offset dimension mismatch"));
        }
        let mut bits = BitSlab::new(domain.clone(), t_lo, t_hi)?;
        let d = domain.dim();
        let last = d - 1;
        let prefix_box = if d == 1 {
            None
        } else {
            Some(SpatialBox::new(domain.lo()[..last].to_vec(), domain.hi()[..last].to_vec())?)
        };
        let hash_coord = |axis: usize, v: i64| -> i64 {
            let shifted = v + field_offset[axis];
            match boundary {
                Boundary::Open => shifted,
                Boundary::Periodic => {
                    let lo = domain.lo()[axis];
                    lo + (shifted - lo).rem_euclid(domain.width(axis))
                }
            }
        };
        let last_coords: Vec<i64> = (domain.lo()[last]..=domain.hi()[last])
            .map(|v| hash_coord(last, v))
            .collect();
        let prefixes: Vec<Vec<i64>> = match &prefix_box {
            None => vec![vec![]],
            Some(b) => b.iter().collect(),
        };
        let mut idx = 0usize;
        for n in t_lo..=t_hi {
            let tk = rng::time_key(seed, n + time_offset);
            for pre in &prefixes {
                let h = pre
                    .iter()
                    .enumerate()
                    .fold(tk, |h, (axis, &v)| rng::absorb(h, hash_coord(axis, v)));
                for &c in &last_coords {
                    if rng::bernoulli(rng::absorb(h, c), p) {
                        bits.set(idx, true);
                    }
                    idx += 1;
                }
            }
        }
        Ok(EnvironmentWindow {
            bits,
            p,
            seed,
            boundary,
            field_offset: field_offset.to_vec(),
            time_offset,
        })
    }

    /// Window with explicitly given bits (used for exhaustive enumeration).
    /// The open probability is recorded as NaN.
    pub fn from_fn(
        domain: SpatialBox,
        (t_lo, t_hi): (i64, i64),
        boundary: Boundary,
        mut open: impl FnMut(&[i64], i64) -> bool,
    ) -> Result<Self> {
        let d = domain.dim();
        let mut bits = BitSlab::new(domain.clone(), t_lo, t_hi)?;
        let mut idx = 0;
        for n in t_lo..=t_hi {
            for x in domain.iter() {
                bits.set(idx, open(&x, n));
                idx += 1;
            }
        }
        Ok(EnvironmentWindow {
            bits,
            p: f64::NAN,
            seed: 0,
            boundary,
            field_offset: vec![0; d],
            time_offset: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.bits.domain.dim()
    }

    pub fn domain(&self) -> &SpatialBox {
        &self.bits.domain
    }

    /// Per-axis half-widths when the domain is symmetric about the origin.
    pub fn extents(&self) -> Option<Vec<i64>> {
        let b = self.domain();
        b.lo()
            .iter()
            .zip(b.hi())
            .all(|(l, h)| *l == -h)
            .then(|| b.hi().to_vec())
    }

    pub fn time_range(&self) -> (i64, i64) {
        self.bits.time_range()
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn field_offset(&self) -> (&[i64], i64) {
        (&self.field_offset, self.time_offset)
    }

    pub fn bits(&self) -> &BitSlab {
        &self.bits
    }

    pub(crate) fn bits_mut(&mut self) -> &mut BitSlab {
        &mut self.bits
    }

    pub fn site_count(&self) -> usize {
        self.bits.site_count()
    }

    pub fn open_fraction(&self) -> f64 {
        self.bits.count_ones() as f64 / self.site_count() as f64
    }

    /// Spatial index of `x` after boundary resolution, if indexable.
    #[inline]
    pub fn resolve(&self, x: &[i64]) -> Option<usize> {
        match self.boundary {
            Boundary::Open => self.domain().index_of(x),
            Boundary::Periodic => Some(self.domain().wrap_index(x)),
        }
    }

    pub fn is_open_at(&self, x: &[i64], n: i64) -> Result<bool> {
        if x.len() != self.dim() {
            return Err(Error::range(format!("point {x:?} has wrong dimension")));
        }
        match self.resolve(x) {
            Some(s) if self.bits.contains_time(n) => Ok(self.bits.get(self.bits.flat(s, n))),
            _ => Err(Error::range(format!(
                "({x:?},{n}) outside window {} x [{}, {}]",
                self.domain(),
                self.bits.t_lo,
                self.bits.t_hi
            ))),
        }
    }

    pub fn is_open(&self, pt: &SpaceTimePoint) -> Result<bool> {
        self.is_open_at(&pt.x, pt.n)
    }

    /// View with `view(x, n) = self(x + y, n + m)`.
    pub fn shift_view(&self, y: &[i64], m: i64) -> ShiftView<'_> {
        ShiftView {
            env: self,
            y: y.to_vec(),
            m,
        }
    }

    /// All open sites in index order.
    pub fn open_sites(&self) -> Vec<SpaceTimePoint> {
        let (t_lo, t_hi) = self.time_range();
        let mut out = Vec::new();
        let mut idx = 0;
        for n in t_lo..=t_hi {
            for x in self.domain().iter() {
                if self.bits.get(idx) {
                    out.push(SpaceTimePoint::new(x, n));
                }
                idx += 1;
            }
        }
        out
    }

    /// Binary dump: magic `OPW1`, then the header and the packed bits.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        write_slab_header(w, *b"OPW1", &self.bits, self.p, self.seed, self.boundary)?;
        write_offsets(w, &self.field_offset, self.time_offset)?;
        w.write_all(&self.bits.to_bytes())?;
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let (mut bits, p, seed, boundary) = read_slab_header(r, *b"OPW1")?;
        let (field_offset, time_offset) = read_offsets(r, bits.domain.dim())?;
        let mut payload = vec![0u8; bits.site_count().div_ceil(8)];
        r.read_exact(&mut payload)?;
        bits.fill_from_bytes(&payload)?;
        Ok(EnvironmentWindow {
            bits,
            p,
            seed,
            boundary,
            field_offset,
            time_offset,
        })
    }

    /// Plain text, one open site per line: `x_1 ... x_d n`.
    pub fn write_sparse_text<W: Write>(&self, w: &mut W) -> Result<()> {
        for pt in self.open_sites() {
            let mut line = String::new();
            for v in &pt.x {
                line.push_str(&v.to_string());
                line.push(' ');
            }
            line.push_str(&pt.n.to_string());
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Rebuild a window from the sparse text format; unlisted sites are closed.
    pub fn read_sparse_text<R: BufRead>(
        r: R,
        domain: SpatialBox,
        time_range: (i64, i64),
        boundary: Boundary,
    ) -> Result<Self> {
        let d = domain.dim();
        let mut open = std::collections::HashSet::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<i64> = line
                .split_whitespace()
                .map(|t| t.parse::<i64>().map_err(|e| Error::Format(e.to_string())))
                .collect::<Result<_>>()?;
            if vals.len() != d + 1 {
                return Err(Error::Format(format!("expected {} columns: `{line}`", d + 1)));
            }
            open.insert((vals[..d].to_vec(), vals[d]));
        }
        EnvironmentWindow::from_fn(domain, time_range, boundary, |x, n| {
            open.contains(&(x.to_vec(), n))
        })
    }
}

/// Lightweight shifted view; reads go to the underlying window.
#[derive(Debug, Clone)]
pub struct ShiftView<'a> {
    env: &'a EnvironmentWindow,
    y: Vec<i64>,
    m: i64,
}

impl<'a> ShiftView<'a> {
    pub fn offset(&self) -> (&[i64], i64) {
        (&self.y, self.m)
    }

    /// Compose with a further shift; offsets add.
    pub fn shift(&self, y: &[i64], m: i64) -> ShiftView<'a> {
        ShiftView {
            env: self.env,
            y: self.y.iter().zip(y).map(|(a, b)| a + b).collect(),
            m: self.m + m,
        }
    }

    pub fn is_open_at(&self, x: &[i64], n: i64) -> Result<bool> {
        let xs: Vec<i64> = x.iter().zip(&self.y).map(|(a, b)| a + b).collect();
        self.env.is_open_at(&xs, n + self.m)
    }

    pub fn is_open(&self, pt: &SpaceTimePoint) -> Result<bool> {
        self.is_open_at(&pt.x, pt.n)
    }

    /// Copy the view into a standalone window. Under open boundaries the
    /// domain moves by `-y`; under periodic boundaries it stays put.
    pub fn materialize(&self) -> Result<EnvironmentWindow> {
        let (t_lo, t_hi) = self.env.time_range();
        let domain = match self.env.boundary {
            Boundary::Open => self.env.domain().translate(&self.y.iter().map(|v| -v).collect::<Vec<_>>()),
            Boundary::Periodic => self.env.domain().clone(),
        };
        let mut out = EnvironmentWindow::from_fn(
            domain,
            (t_lo - self.m, t_hi - self.m),
            self.env.boundary,
            |x, n| self.is_open_at(x, n).expect("materialized view stays in slab"),
        )?;
        out.p = self.env.p;
        out.seed = self.env.seed;
        out.field_offset = self.env.field_offset.iter().zip(&self.y).map(|(a, b)| a + b).collect();
        out.time_offset = self.env.time_offset + self.m;
        Ok(out)
    }
}

pub(crate) fn write_slab_header<W: Write>(
    w: &mut W,
    magic: [u8; 4],
    bits: &BitSlab,
    p: f64,
    seed: u64,
    boundary: Boundary,
) -> io::Result<()> {
    w.write_all(&magic)?;
    w.write_all(&(bits.domain.dim() as u32).to_le_bytes())?;
    for (l, h) in bits.domain.lo().iter().zip(bits.domain.hi()) {
        w.write_all(&l.to_le_bytes())?;
        w.write_all(&h.to_le_bytes())?;
    }
    w.write_all(&bits.t_lo.to_le_bytes())?;
    w.write_all(&bits.t_hi.to_le_bytes())?;
    w.write_all(&p.to_bits().to_le_bytes())?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&[match boundary {
        Boundary::Open => 0u8,
        Boundary::Periodic => 1u8,
    }])
}

fn write_offsets<W: Write>(w: &mut W, offset: &[i64], t_off: i64) -> io::Result<()> {
    for v in offset {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&t_off.to_le_bytes())
}

fn read_offsets<R: Read>(r: &mut R, d: usize) -> Result<(Vec<i64>, i64)> {
    let offset = (0..d).map(|_| read_i64(r)).collect::<Result<Vec<_>>>()?;
    Ok((offset, read_i64(r)?))
}

pub(crate) fn read_i64<R: Read>(r: &mut R) -> Result<i64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(i64::from_le_bytes(b))
}

pub(crate) fn read_slab_header<R: Read>(
    r: &mut R,
    magic: [u8; 4],
) -> Result<(BitSlab, f64, u64, Boundary)> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let d = u32::from_le_bytes(b4) as usize;
    let mut lo = Vec::with_capacity(d);
    let mut hi = Vec::with_capacity(d);
    for _ in 0..d {
        lo.push(read_i64(r)?);
        hi.push(read_i64(r)?);
    }
    let t_lo = read_i64(r)?;
    let t_hi = read_i64(r)?;
    let p = f64::from_bits(read_i64(r)? as u64);
    let seed = read_i64(r)? as u64;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let boundary = match flag[0] {
        0 => Boundary::Open,
        1 => Boundary::Periodic,
        f => return Err(Error::Format(format!("bad boundary flag {f}"))),
    };
    let bits = BitSlab::new(SpatialBox::new(lo, hi)?, t_lo, t_hi)?;
    Ok((bits, p, seed, boundary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(p: f64, seed: u64, boundary: Boundary) -> EnvironmentWindow {
        sample_environment(2, &[4, 3], (-2, 5), p, seed, boundary).unwrap()
    }

    #[test]
    fn degenerate_probabilities_fill_or_clear() {
        let full = window(1.0, 3, Boundary::Open);
        let empty = window(0.0, 3, Boundary::Open);
        assert_eq!(full.open_fraction(), 1.0);
        assert_eq!(empty.open_fraction(), 0.0);
        assert!(full.is_open_at(&[4, -3], 5).unwrap());
        assert!(!empty.is_open_at(&[0, 0], 0).unwrap());
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let a = window(0.37, 99, Boundary::Open);
        let b = window(0.37, 99, Boundary::Open);
        assert_eq!(a.bits().to_bytes(), b.bits().to_bytes());
        assert_ne!(a.bits().to_bytes(), window(0.37, 100, Boundary::Open).bits().to_bytes());
    }

    #[test]
    fn overlapping_windows_agree() {
        let small = window(0.5, 11, Boundary::Open);
        let big = sample_environment(2, &[9, 9], (-4, 9), 0.5, 11, Boundary::Open).unwrap();
        for pt in small.domain().iter() {
            for n in -2..=5 {
                assert_eq!(
                    small.is_open_at(&pt, n).unwrap(),
                    big.is_open_at(&pt, n).unwrap()
                );
            }
        }
    }

    #[test]
    fn invalid_geometry_is_a_config_error() {
        assert!(matches!(
            sample_environment(1, &[0], (0, 3), 0.5, 1, Boundary::Open),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            sample_environment(1, &[3], (4, 3), 0.5, 1, Boundary::Open),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            sample_environment(1, &[3], (0, 3), 1.5, 1, Boundary::Open),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn periodic_wraps_space_but_not_time() {
        let env = window(0.5, 5, Boundary::Periodic);
        assert_eq!(
            env.is_open_at(&[4 + 9, -3], 1).unwrap(),
            env.is_open_at(&[4, -3], 1).unwrap()
        );
        assert_eq!(
            env.is_open_at(&[-5, 4], 0).unwrap(),
            env.is_open_at(&[4, -3], 0).unwrap()
        );
        assert!(matches!(env.is_open_at(&[0, 0], 6), Err(Error::Range(_))));
        let open = window(0.5, 5, Boundary::Open);
        assert!(matches!(open.is_open_at(&[5, 0], 0), Err(Error::Range(_))));
    }

    #[test]
    fn shift_identity_inverse_and_composition() {
        let env = window(0.5, 8, Boundary::Periodic);
        let id = env.shift_view(&[0, 0], 0);
        let round = env.shift_view(&[2, -1], 3).shift(&[-2, 1], -3);
        for x in env.domain().iter() {
            for n in -2..=5 {
                let direct = env.is_open_at(&x, n).unwrap();
                assert_eq!(id.is_open_at(&x, n).unwrap(), direct);
                assert_eq!(round.is_open_at(&x, n).unwrap(), direct);
            }
        }
        assert_eq!(round.offset(), (&[0i64, 0][..], 0));
    }

    #[test]
    fn shifted_view_out_of_slab_is_range_error() {
        let env = window(0.5, 8, Boundary::Open);
        let v = env.shift_view(&[3, 0], 0);
        assert!(v.is_open_at(&[1, 0], 0).is_ok());
        assert!(matches!(v.is_open_at(&[2, 0], 0), Err(Error::Range(_))));
    }

    #[test]
    fn materialized_shift_matches_regeneration() {
        for boundary in [Boundary::Open, Boundary::Periodic] {
            let env = window(0.45, 21, boundary);
            let mat = env.shift_view(&[1, -2], 2).materialize().unwrap();
            let regen = EnvironmentWindow::generate(
                mat.domain().clone(),
                mat.time_range(),
                0.45,
                21,
                boundary,
                &[1, -2],
                2,
            )
            .unwrap();
            assert_eq!(mat.bits().to_bytes(), regen.bits().to_bytes());
        }
    }

    #[test]
    fn binary_dump_roundtrip_and_magic() {
        let env = window(0.3, 17, Boundary::Periodic);
        let mut buf = Vec::new();
        env.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"OPW1");
        let back = EnvironmentWindow::read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(back, env);
        buf[0] = b'X';
        assert!(matches!(
            EnvironmentWindow::read_binary(&mut buf.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn sparse_text_roundtrip() {
        let env = sample_environment(1, &[3], (0, 2), 0.5, 4, Boundary::Open).unwrap();
        let mut buf = Vec::new();
        env.write_sparse_text(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), env.bits().count_ones());
        let back = EnvironmentWindow::read_sparse_text(
            buf.as_slice(),
            env.domain().clone(),
            env.time_range(),
            Boundary::Open,
        )
        .unwrap();
        assert_eq!(back.bits(), env.bits());
    }
}
