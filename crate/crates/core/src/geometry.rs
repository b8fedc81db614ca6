//! Lattice geometry: axis-aligned boxes of `Z^d`, space-time points and
//! dense value grids over a box.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Boundary {
    #[default]
    Open,
    Periodic,
}

impl Boundary {
    pub fn as_str(self) -> &'static str {
        match self {
            Boundary::Open => "open",
            Boundary::Periodic => "periodic",
        }
    }
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(Boundary::Open),
            "periodic" => Ok(Boundary::Periodic),
            other => Err(Error::config(format!("unknown boundary mode `{other}`"))),
        }
    }
}

/// A space-time site `(x, n)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpaceTimePoint {
    pub x: Vec<i64>,
    pub n: i64,
}

impl SpaceTimePoint {
    pub fn new(x: impl Into<Vec<i64>>, n: i64) -> Self {
        SpaceTimePoint { x: x.into(), n }
    }

    pub fn origin(d: usize) -> Self {
        SpaceTimePoint { x: vec![0; d], n: 0 }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn shifted(&self, y: &[i64], m: i64) -> Self {
        SpaceTimePoint {
            x: self.x.iter().zip(y).map(|(a, b)| a + b).collect(),
            n: self.n + m,
        }
    }
}

impl fmt::Display for SpaceTimePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:?},{})", self.x, self.n)
    }
}

/// Closed axis-aligned box `[lo_1,hi_1] x ... x [lo_d,hi_d]`, indexed row-major
/// with the first axis slowest.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpatialBox {
    lo: Vec<i64>,
    hi: Vec<i64>,
    strides: Vec<usize>,
    len: usize,
}

impl SpatialBox {
    pub fn new(lo: Vec<i64>, hi: Vec<i64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || lo.len() > MAX_DIM {
            return Err(Error::config(format!(
                "box bounds must share a dimension in 1..={MAX_DIM}"
            )));
        }
        if lo.iter().zip(&hi).any(|(l, h)| h < l) {
            return Err(Error::config(format!("empty box {lo:?}..{hi:?}")));
        }
        let d = lo.len();
        let mut strides = vec![1usize; d];
        for i in (0..d - 1).rev() {
            strides[i] = strides[i + 1] * (hi[i + 1] - lo[i + 1] + 1) as usize;
        }
        let len = strides[0] * (hi[0] - lo[0] + 1) as usize;
        Ok(SpatialBox { lo, hi, strides, len })
    }

    /// `[-e_i, e_i]` on every axis.
    pub fn symmetric(extents: &[i64]) -> Result<Self> {
        if extents.iter().any(|&e| e < 1) {
            return Err(Error::config("spatial extents must be positive"));
        }
        SpatialBox::new(extents.iter().map(|e| -e).collect(), extents.to_vec())
    }

    /// The sup-norm ball of radius `r` around `center`.
    pub fn ball(center: &[i64], r: i64) -> Self {
        SpatialBox::new(
            center.iter().map(|c| c - r).collect(),
            center.iter().map(|c| c + r).collect(),
        )
        .expect("ball with non-negative radius")
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[i64] {
        &self.lo
    }

    pub fn hi(&self) -> &[i64] {
        &self.hi
    }

    pub fn width(&self, axis: usize) -> i64 {
        self.hi[axis] - self.lo[axis] + 1
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| l <= v && v <= h)
    }

    pub fn contains_box(&self, other: &SpatialBox) -> bool {
        self.contains(&other.lo) && self.contains(&other.hi)
    }

    pub fn index_of(&self, x: &[i64]) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        Some(
            x.iter()
                .zip(&self.lo)
                .zip(&self.strides)
                .map(|((v, l), s)| (v - l) as usize * s)
                .sum(),
        )
    }

    pub fn coords_of(&self, mut idx: usize) -> Vec<i64> {
        let mut x = vec![0; self.dim()];
        for (i, s) in self.strides.iter().enumerate() {
            x[i] = self.lo[i] + (idx / s) as i64;
            idx %= s;
        }
        x
    }

    /// Grow (or shrink, for negative `r`) by `r` on every side.
    pub fn expand(&self, r: i64) -> Result<Self> {
        SpatialBox::new(
            self.lo.iter().map(|l| l - r).collect(),
            self.hi.iter().map(|h| h + r).collect(),
        )
    }

    pub fn translate(&self, y: &[i64]) -> Self {
        SpatialBox::new(
            self.lo.iter().zip(y).map(|(l, v)| l + v).collect(),
            self.hi.iter().zip(y).map(|(h, v)| h + v).collect(),
        )
        .expect("translation preserves shape")
    }

    pub fn intersect(&self, other: &SpatialBox) -> Option<SpatialBox> {
        let lo: Vec<i64> = self.lo.iter().zip(&other.lo).map(|(a, b)| *a.max(b)).collect();
        let hi: Vec<i64> = self.hi.iter().zip(&other.hi).map(|(a, b)| *a.min(b)).collect();
        SpatialBox::new(lo, hi).ok()
    }

    /// Wrap `x` onto this box viewed as a torus.
    pub fn wrap(&self, x: &[i64]) -> Vec<i64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| self.lo[i] + (v - self.lo[i]).rem_euclid(self.width(i)))
            .collect()
    }

    pub fn wrap_index(&self, x: &[i64]) -> usize {
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.lo[i]).rem_euclid(self.width(i)) as usize * self.strides[i])
            .sum()
    }

    pub fn iter(&self) -> BoxIter<'_> {
        BoxIter {
            bx: self,
            next: Some(self.lo.clone()),
        }
    }
}

impl fmt::Display for SpatialBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}..={:?}", self.lo, self.hi)
    }
}

/// Odometer over the sites of a box in index order.
pub struct BoxIter<'a> {
    bx: &'a SpatialBox,
    next: Option<Vec<i64>>,
}

impl Iterator for BoxIter<'_> {
    type Item = Vec<i64>;

    fn next(&mut self) -> Option<Vec<i64>> {
        let cur = self.next.take()?;
        let mut succ = cur.clone();
        let mut axis = self.bx.dim();
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            if succ[axis] < self.bx.hi[axis] {
                succ[axis] += 1;
                self.next = Some(succ);
                break;
            }
            succ[axis] = self.bx.lo[axis];
        }
        Some(cur)
    }
}

/// All offsets in `{-1,0,1}^d`, first axis slowest.
pub fn unit_ball_offsets(d: usize) -> Vec<Vec<i64>> {
    SpatialBox::ball(&vec![0; d], 1).iter().collect()
}

pub fn sup_norm(x: &[i64]) -> i64 {
    x.iter().map(|v| v.abs()).max().unwrap_or(0)
}

pub fn sup_dist(x: &[i64], y: &[i64]) -> i64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).max().unwrap_or(0)
}

/// Dense `f64` values over a box; reads outside the box return 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    region: SpatialBox,
    values: Vec<f64>,
}

impl Grid {
    pub fn zeros(region: SpatialBox) -> Self {
        let values = vec![0.0; region.len()];
        Grid { region, values }
    }

    pub fn filled(region: SpatialBox, v: f64) -> Self {
        let values = vec![v; region.len()];
        Grid { region, values }
    }

    pub fn from_values(region: SpatialBox, values: Vec<f64>) -> Result<Self> {
        if values.len() != region.len() {
            return Err(Error::config("grid value count does not match its region"));
        }
        Ok(Grid { region, values })
    }

    pub fn region(&self) -> &SpatialBox {
        &self.region
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, x: &[i64]) -> f64 {
        self.region.index_of(x).map_or(0.0, |i| self.values[i])
    }

    pub fn set(&mut self, x: &[i64], v: f64) -> Result<()> {
        let i = self
            .region
            .index_of(x)
            .ok_or_else(|| Error::range(format!("{x:?} outside grid region {}", self.region)))?;
        self.values[i] = v;
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `(site, value)` for every nonzero entry, in index order.
    pub fn nonzero(&self) -> impl Iterator<Item = (Vec<i64>, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (self.region.coords_of(i), *v))
    }

    /// Copy onto another region; entries outside the new region are dropped.
    pub fn restricted_to(&self, region: &SpatialBox) -> Grid {
        let mut out = Grid::zeros(region.clone());
        if let Some(common) = self.region.intersect(region) {
            for x in common.iter() {
                let v = self.get(&x);
                if v != 0.0 {
                    out.set(&x, v).expect("inside target");
                }
            }
        }
        out
    }

    /// Smallest box containing every nonzero entry, if any.
    pub fn support_box(&self) -> Option<SpatialBox> {
        let d = self.region.dim();
        let mut lo = vec![i64::MAX; d];
        let mut hi = vec![i64::MIN; d];
        let mut any = false;
        for (x, _) in self.nonzero() {
            any = true;
            for i in 0..d {
                lo[i] = lo[i].min(x[i]);
                hi[i] = hi[i].max(x[i]);
            }
        }
        any.then(|| SpatialBox::new(lo, hi).expect("nonempty support"))
    }
}

/// Smallest box containing both.
pub fn bounding_box(a: &SpatialBox, b: &SpatialBox) -> SpatialBox {
    SpatialBox::new(
        a.lo().iter().zip(b.lo()).map(|(x, y)| *x.min(y)).collect(),
        a.hi().iter().zip(b.hi()).map(|(x, y)| *x.max(y)).collect(),
    )
    .expect("union of boxes")
}

/// Tiling of `Z^d` by cubes of side `side`, with one corner at `offset`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoxPartition {
    side: i64,
    offset: Vec<i64>,
}

impl BoxPartition {
    pub fn new(side: i64, offset: Vec<i64>) -> Result<Self> {
        if side < 1 {
            return Err(Error::config(format!("box side {side} must be at least 1")));
        }
        if offset.is_empty() || offset.len() > MAX_DIM {
            return Err(Error::config("partition dimension outside 1..=4"));
        }
        Ok(BoxPartition { side, offset })
    }

    pub fn cubes(d: usize, side: i64) -> Result<Self> {
        Self::new(side, vec![0; d])
    }

    pub fn side(&self) -> i64 {
        self.side
    }

    pub fn offset(&self) -> &[i64] {
        &self.offset
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    /// Index of the box containing `x`.
    pub fn box_of(&self, x: &[i64]) -> Vec<i64> {
        x.iter()
            .zip(&self.offset)
            .map(|(v, o)| (v - o).div_euclid(self.side))
            .collect()
    }

    pub fn box_region(&self, idx: &[i64]) -> SpatialBox {
        let lo: Vec<i64> = idx.iter().zip(&self.offset).map(|(i, o)| o + i * self.side).collect();
        let hi = lo.iter().map(|v| v + self.side - 1).collect();
        SpatialBox::new(lo, hi).expect("side >= 1")
    }

    /// Mass of `grid` per box, keyed by box index in sorted order.
    pub fn box_masses(&self, grid: &Grid) -> BTreeMap<Vec<i64>, f64> {
        let mut out = BTreeMap::new();
        for (x, v) in grid.nonzero() {
            *out.entry(self.box_of(&x)).or_insert(0.0) += v;
        }
        out
    }

    /// Union of the boxes meeting `region`.
    pub fn cover(&self, region: &SpatialBox) -> SpatialBox {
        let lo = self.box_region(&self.box_of(region.lo()));
        let hi = self.box_region(&self.box_of(region.hi()));
        bounding_box(&lo, &hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip_row_major() {
        let b = SpatialBox::new(vec![-1, 2], vec![1, 4]).unwrap();
        assert_eq!(b.len(), 9);
        assert_eq!(b.index_of(&[-1, 2]), Some(0));
        assert_eq!(b.index_of(&[-1, 3]), Some(1));
        assert_eq!(b.index_of(&[0, 2]), Some(3));
        for i in 0..b.len() {
            assert_eq!(b.index_of(&b.coords_of(i)), Some(i));
        }
        assert_eq!(b.iter().count(), 9);
        assert_eq!(b.iter().nth(4), Some(vec![0, 3]));
    }

    #[test]
    fn wrap_is_periodic_per_axis() {
        let b = SpatialBox::symmetric(&[2]).unwrap();
        assert_eq!(b.wrap(&[3]), vec![-2]);
        assert_eq!(b.wrap(&[-3]), vec![2]);
        assert_eq!(b.wrap_index(&[7]), b.index_of(&[2]).unwrap());
    }

    #[test]
    fn unit_ball_has_3_pow_d_offsets() {
        assert_eq!(unit_ball_offsets(1), vec![vec![-1], vec![0], vec![1]]);
        assert_eq!(unit_ball_offsets(2).len(), 9);
        assert_eq!(unit_ball_offsets(3).len(), 27);
    }

    #[test]
    fn rejects_empty_boxes() {
        assert!(SpatialBox::new(vec![1], vec![0]).is_err());
        assert!(SpatialBox::symmetric(&[0]).is_err());
    }

    #[test]
    fn partition_boxes() {
        let p = BoxPartition::cubes(1, 3).unwrap();
        assert_eq!(p.box_of(&[-1]), vec![-1]);
        assert_eq!(p.box_of(&[2]), vec![0]);
        assert_eq!(p.box_region(&[-1]), SpatialBox::new(vec![-3], vec![-1]).unwrap());
        assert_eq!(p.cover(&SpatialBox::ball(&[0], 4)), SpatialBox::new(vec![-6], vec![5]).unwrap());
        let g = Grid::filled(SpatialBox::ball(&[0], 2), 0.2);
        let m = p.box_masses(&g);
        assert_eq!(m.len(), 2);
        assert!((m[&vec![-1]] - 0.4).abs() < 1e-15);
    }
}
