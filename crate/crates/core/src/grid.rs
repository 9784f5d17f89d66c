//! Partition of the unit cube into `K^p` half-open blocks, and the multi-index
//! set of centered monomials attached to each block.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, Result};

/// Blocks `∏_j ((k_j - 1)/K, k_j/K]` for `k ∈ [K]^p`.
///
/// Blocks are addressed by a flat index in row-major order over the 0-based
/// multi-index, the last coordinate varying fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionGrid {
    k: usize,
    p: usize,
}

impl PartitionGrid {
    pub fn new(k: usize, p: usize) -> Result<Self> {
        if k == 0 || p == 0 {
            return Err(config_err(format!("partition needs K >= 1 and p >= 1, got K={k}, p={p}")));
        }
        if (k as f64).powi(p as i32) > 1e7 {
            return Err(config_err(format!("K^p too large (K={k}, p={p})")));
        }
        Ok(Self { k, p })
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn n_blocks(&self) -> usize {
        self.k.pow(self.p as u32)
    }

    /// 0-based multi-index of a flat block index.
    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.p];
        let mut rem = flat;
        for j in (0..self.p).rev() {
            idx[j] = rem % self.k;
            rem /= self.k;
        }
        idx
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().fold(0, |acc, &m| acc * self.k + m)
    }

    /// Center coordinate `(2k - 1) / (2K)` for 0-based block coordinate `k0`.
    #[inline]
    pub fn center_coord(&self, k0: usize) -> f64 {
        (2 * k0 + 1) as f64 / (2 * self.k) as f64
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat).into_iter().map(|k0| self.center_coord(k0)).collect()
    }

    /// 0-based block coordinate containing `x` in `(0, 1]`; zero maps to the
    /// first block.
    #[inline]
    pub fn block_coord(&self, x: f64) -> usize {
        let c = (x * self.k as f64).ceil() as isize - 1;
        c.clamp(0, self.k as isize - 1) as usize
    }

    /// Flat index of the block containing `x`.
    pub fn locate(&self, x: &[f64]) -> Result<usize> {
        check_point(x, self.p)?;
        Ok(x.iter().fold(0, |acc, &xj| acc * self.k + self.block_coord(xj)))
    }

    /// Range of 0-based block coordinates whose closed block intersects the
    /// open interval `(lo, hi)` along one axis.
    #[inline]
    pub(crate) fn coord_range(&self, lo: f64, hi: f64) -> (usize, usize) {
        let kf = self.k as f64;
        let first = ((lo * kf).floor() as isize).clamp(0, self.k as isize - 1) as usize;
        let last = ((hi * kf).ceil() as isize - 1).clamp(0, self.k as isize - 1) as usize;
        (first, last.max(first))
    }
}

/// Validates that `x` has `p` finite coordinates in `[0, 1]`.
pub(crate) fn check_point(x: &[f64], p: usize) -> Result<()> {
    if x.len() != p {
        return Err(domain_err(format!("expected a point of dimension {p}, got {}", x.len())));
    }
    for &c in x {
        if !(c.is_finite() && (0.0..=1.0).contains(&c)) {
            return Err(domain_err(format!("coordinate {c} outside (0, 1]")));
        }
    }
    Ok(())
}

/// All `s ∈ {0..m}^p` with `|s| <= m`, ordered by total degree and then
/// lexicographically (descending in the first coordinate). The zero index
/// comes first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiIndexSet {
    p: usize,
    m: usize,
    indices: Vec<Vec<usize>>,
}

impl MultiIndexSet {
    pub fn new(p: usize, m: usize) -> Self {
        let mut indices = Vec::new();
        for total in 0..=m {
            let mut cur = vec![0; p];
            compositions(total, 0, &mut cur, &mut indices);
        }
        Self { p, m, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.indices[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.indices.iter().map(|v| v.as_slice())
    }

    pub fn position(&self, s: &[usize]) -> Option<usize> {
        self.indices.iter().position(|v| v.as_slice() == s)
    }

    /// Values of every monomial `∏_j d_j^{s_j}` at displacement `d`.
    pub fn monomials(&self, d: &[f64], out: &mut Vec<f64>) {
        out.clear();
        if self.p == 1 {
            let mut v = 1.0;
            for _ in 0..=self.m {
                out.push(v);
                v *= d[0];
            }
            return;
        }
        for s in &self.indices {
            out.push(s.iter().zip(d).map(|(&e, &dj)| dj.powi(e as i32)).product());
        }
    }
}

fn compositions(remaining: usize, j: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    let p = cur.len();
    if j == p - 1 {
        cur[j] = remaining;
        out.push(cur.clone());
        return;
    }
    for e in (0..=remaining).rev() {
        cur[j] = e;
        compositions(remaining - e, j + 1, cur, out);
    }
    cur[j] = 0;
}

#[cfg(test)]
fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multi_index_cardinality() {
        for p in 1..=3 {
            for m in 0..=4 {
                let set = MultiIndexSet::new(p, m);
                assert_eq!(set.len(), binomial(p + m, m), "p={p} m={m}");
                assert!(set.get(0).iter().all(|&e| e == 0));
                assert!(set.iter().all(|s| s.iter().sum::<usize>() <= m));
            }
        }
    }

    #[test]
    fn univariate_monomial_order() {
        let set = MultiIndexSet::new(1, 3);
        let mut out = Vec::new();
        set.monomials(&[2.0], &mut out);
        assert_eq!(out, vec![1.0, 2.0, 4.0, 8.0]);
        for (i, s) in set.iter().enumerate() {
            assert_eq!(s, &[i]);
        }
    }

    #[test]
    fn blocks_tile_the_cube() {
        let g = PartitionGrid::new(4, 1).unwrap();
        assert_eq!(g.block_coord(0.25), 0);
        assert_eq!(g.block_coord(0.2500001), 1);
        assert_eq!(g.block_coord(1.0), 3);
        assert_eq!(g.block_coord(0.0), 0);
        for k0 in 0..4 {
            let c = g.center_coord(k0);
            assert_eq!(g.block_coord(c), k0);
        }
    }

    #[test]
    fn flat_and_multi_round_trip() {
        let g = PartitionGrid::new(3, 3).unwrap();
        for flat in 0..g.n_blocks() {
            let mi = g.multi_index(flat);
            assert_eq!(g.flat_index(&mi), flat);
            let c = g.center(flat);
            assert_eq!(g.locate(&c).unwrap(), flat);
        }
    }

    #[test]
    fn out_of_domain_points() {
        let g = PartitionGrid::new(3, 2).unwrap();
        assert!(g.locate(&[0.5, 1.2]).is_err());
        assert!(g.locate(&[0.5]).is_err());
        assert!(g.locate(&[f64::NAN, 0.5]).is_err());
    }
}
