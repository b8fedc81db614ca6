//! Brute-force reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::HashMap;

use opwalk_core::environment::EnvironmentWindow;
use opwalk_core::geometry::unit_ball_offsets;
use opwalk_core::Grid;

fn add(x: &[i64], o: &[i64]) -> Vec<i64> {
    x.iter().zip(o).map(|(a, b)| a + b).collect()
}

/// `xi^(T)` by memoised recursion over open paths; sites outside the window are closed.
pub struct BruteBackbone<'a> {
    env: &'a EnvironmentWindow,
    horizon: i64,
    offsets: Vec<Vec<i64>>,
    memo: HashMap<(Vec<i64>, i64), bool>,
}

impl<'a> BruteBackbone<'a> {
    pub fn new(env: &'a EnvironmentWindow, horizon: i64) -> Self {
        BruteBackbone {
            env,
            horizon,
            offsets: unit_ball_offsets(env.dim()),
            memo: HashMap::new(),
        }
    }

    fn open(&self, x: &[i64], t: i64) -> bool {
        self.env.domain().contains(x) && self.env.is_open_at(x, t).unwrap()
    }

    pub fn xi(&mut self, x: &[i64], t: i64) -> bool {
        if let Some(&v) = self.memo.get(&(x.to_vec(), t)) {
            return v;
        }
        let v = if !self.open(x, t) {
            false
        } else if t == self.horizon {
            true
        } else {
            let offs = self.offsets.clone();
            offs.iter().any(|o| self.xi(&add(x, o), t + 1))
        };
        self.memo.insert((x.to_vec(), t), v);
        v
    }

    /// Quenched transition row at `(x, t)` as `(offset, probability)` pairs.
    pub fn kernel(&mut self, x: &[i64], t: i64) -> Vec<(Vec<i64>, f64)> {
        let offs = self.offsets.clone();
        let on: Vec<bool> = offs.iter().map(|o| self.xi(&add(x, o), t + 1)).collect();
        let count = on.iter().filter(|&&b| b).count();
        if self.xi(x, t) && count > 0 {
            offs.into_iter()
                .zip(on)
                .map(|(o, b)| (o, if b { 1.0 / count as f64 } else { 0.0 }))
                .collect()
        } else {
            let w = 1.0 / offs.len() as f64;
            offs.into_iter().map(|o| (o, w)).collect()
        }
    }
}

/// Law of `X_{m+n}` by summing the weights of all `3^{dn}` paths.
pub fn enumerate_paths(brute: &mut BruteBackbone, x0: &[i64], m: i64, n: i64) -> HashMap<Vec<i64>, f64> {
    fn rec(b: &mut BruteBackbone, x: Vec<i64>, t: i64, left: i64, w: f64, out: &mut HashMap<Vec<i64>, f64>) {
        if left == 0 {
            *out.entry(x).or_insert(0.0) += w;
            return;
        }
        for (o, p) in b.kernel(&x, t) {
            rec(b, add(&x, &o), t + 1, left - 1, w * p, out);
        }
    }
    let mut out = HashMap::new();
    rec(brute, x0.to_vec(), m, n, 1.0, &mut out);
    out
}

/// Uniform-kernel (simple random walk) law after `n` steps in `d = 1`, on `[-n, n]`.
pub fn trinomial(n: usize) -> Vec<f64> {
    let mut cur = vec![1.0];
    for _ in 0..n {
        let mut next = vec![0.0; cur.len() + 2];
        for (i, v) in cur.iter().enumerate() {
            for k in 0..3 {
                next[i + k] += v / 3.0;
            }
        }
        cur = next;
    }
    cur
}

/// `max |a - b|` over the union of the supports of two grids.
pub fn sup_diff(a: &Grid, b: &Grid) -> f64 {
    let mut worst = 0.0f64;
    for (x, v) in a.nonzero() {
        worst = worst.max((v - b.get(&x)).abs());
    }
    for (x, v) in b.nonzero() {
        worst = worst.max((v - a.get(&x)).abs());
    }
    worst
}
