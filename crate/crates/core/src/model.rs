//! Kernel mixture weights, the kernel mixture of polynomials basis, and
//! evaluation of regression functions built from it.
//!
//! For a block `k` with kernel center `μ_k` the weight is
//! `w_k(x) = φ_h(x - μ_k) / Σ_l φ_h(x - μ_l)` and the basis functions are
//! `ψ_ks(x) = w_k(x) · ∏_j (x_j - μ*_kj)^{s_j}` where `μ*_k` is the block
//! center. A regression function is `f(x) = Σ_k Σ_s ξ_ks ψ_ks(x)`.
//!
//! Weights are formed from log-kernel values shifted by their maximum, so the
//! denominator never underflows. Only blocks whose center lies within
//! sup-distance `h` of `x` are visited; with `Kh` bounded this is `O(1)` per
//! point in `K`.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, KmpError, Result};
use crate::grid::{check_point, MultiIndexSet, PartitionGrid};
use crate::kernel::KernelFamily;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmpParams {
    pub grid: PartitionGrid,
    pub multi: MultiIndexSet,
    pub kernel: KernelFamily,
    /// Bandwidth `h` (not the scaled `Kh`).
    pub bandwidth: f64,
    /// Kernel centers, `n_blocks × p`, row-major.
    pub centers: Vec<f64>,
    /// Coefficients `ξ`, `n_blocks × n_multi`, row-major.
    pub coefs: Vec<f64>,
    pub sigma: f64,
}

/// Reusable buffers for basis evaluation in hot loops.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    active: Vec<(usize, f64)>,
    mono: Vec<f64>,
    disp: Vec<f64>,
    ranges: Vec<(usize, usize)>,
    cursor: Vec<usize>,
}

impl KmpParams {
    pub fn new(
        grid: PartitionGrid,
        degree: usize,
        kernel: KernelFamily,
        bandwidth: f64,
        centers: Vec<f64>,
        coefs: Vec<f64>,
        sigma: f64,
    ) -> Result<Self> {
        let multi = MultiIndexSet::new(grid.dim(), degree);
        let params = Self { grid, multi, kernel, bandwidth, centers, coefs, sigma };
        params.check_shape()?;
        Ok(params)
    }

    /// Parameters with centers at the block centers and all coefficients zero.
    pub fn centered(grid: PartitionGrid, degree: usize, kernel: KernelFamily, kh: f64, sigma: f64) -> Result<Self> {
        let centers = (0..grid.n_blocks()).flat_map(|b| grid.center(b)).collect();
        let n_coef = grid.n_blocks() * MultiIndexSet::new(grid.dim(), degree).len();
        Self::new(grid, degree, kernel, kh / grid.k() as f64, centers, vec![0.0; n_coef], sigma)
    }

    pub fn check_shape(&self) -> Result<()> {
        let nb = self.grid.n_blocks();
        if self.multi.dim() != self.grid.dim() {
            return Err(config_err("multi-index dimension does not match the grid"));
        }
        if self.centers.len() != nb * self.grid.dim() {
            return Err(config_err(format!(
                "expected {} center coordinates, got {}",
                nb * self.grid.dim(),
                self.centers.len()
            )));
        }
        if self.coefs.len() != nb * self.multi.len() {
            return Err(config_err(format!("expected {} coefficients, got {}", nb * self.multi.len(), self.coefs.len())));
        }
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(config_err(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(config_err(format!("noise scale must be nonnegative, got {}", self.sigma)));
        }
        Ok(())
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.grid.k()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    #[inline]
    pub fn n_blocks(&self) -> usize {
        self.grid.n_blocks()
    }

    #[inline]
    pub fn n_multi(&self) -> usize {
        self.multi.len()
    }

    #[inline]
    pub fn n_coefs(&self) -> usize {
        self.coefs.len()
    }

    pub fn degree(&self) -> usize {
        self.multi.degree()
    }

    /// Scaled bandwidth `K·h`.
    #[inline]
    pub fn kh(&self) -> f64 {
        self.bandwidth * self.k() as f64
    }

    pub fn set_kh(&mut self, kh: f64) {
        self.bandwidth = kh / self.k() as f64;
    }

    pub fn center(&self, block: usize) -> &[f64] {
        let p = self.dim();
        &self.centers[block * p..(block + 1) * p]
    }

    pub fn coef(&self, block: usize, s: usize) -> f64 {
        self.coefs[block * self.n_multi() + s]
    }

    /// Offset `μ̃_k = 2K(μ_k - μ*_k) ∈ [-1, 1]^p` of every center.
    pub fn offsets(&self) -> Vec<f64> {
        let p = self.dim();
        let two_k = 2.0 * self.k() as f64;
        let mut out = Vec::with_capacity(self.centers.len());
        for b in 0..self.n_blocks() {
            let mi = self.grid.multi_index(b);
            for (j, &kj) in mi.iter().enumerate() {
                out.push(two_k * (self.centers[b * p + j] - self.grid.center_coord(kj)));
            }
        }
        out
    }

    /// Sets `μ_k = μ*_k + μ̃_k / (2K)` from offsets.
    pub fn set_offsets(&mut self, offsets: &[f64]) {
        let p = self.dim();
        for b in 0..self.n_blocks() {
            self.set_block_offset(b, &offsets[b * p..(b + 1) * p]);
        }
    }

    pub fn set_block_offset(&mut self, block: usize, offset: &[f64]) {
        let p = self.dim();
        let two_k = 2.0 * self.k() as f64;
        let mi = self.grid.multi_index(block);
        for j in 0..p {
            self.centers[block * p + j] = self.grid.center_coord(mi[j]) + offset[j] / two_k;
        }
    }

    /// Blocks with `‖x - μ_l‖_∞ < h`, paired with `log φ_h(x - μ_l)`.
    fn active_blocks(&self, x: &[f64], ws: &mut Workspace) {
        ws.active.clear();
        let h = self.bandwidth;
        let p = self.dim();
        if p == 1 {
            let (lo, hi) = self.grid.coord_range(x[0] - h, x[0] + h);
            for b in lo..=hi {
                let r = (x[0] - self.centers[b]).abs() / h;
                if r < 1.0 {
                    ws.active.push((b, self.kernel.log_profile(r)));
                }
            }
            return;
        }
        ws.ranges.clear();
        for &xj in x {
            ws.ranges.push(self.grid.coord_range(xj - h, xj + h));
        }
        ws.cursor.clear();
        ws.cursor.extend(ws.ranges.iter().map(|r| r.0));
        loop {
            let b = self.grid.flat_index(&ws.cursor);
            let c = &self.centers[b * p..(b + 1) * p];
            let r = x.iter().zip(c).fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs())) / h;
            if r < 1.0 {
                ws.active.push((b, self.kernel.log_profile(r)));
            }
            // odometer increment over the per-axis ranges
            let mut j = p;
            loop {
                if j == 0 {
                    return;
                }
                j -= 1;
                if ws.cursor[j] < ws.ranges[j].1 {
                    ws.cursor[j] += 1;
                    break;
                }
                ws.cursor[j] = ws.ranges[j].0;
            }
        }
    }

    /// Nonzero mixture weights at `x` as `(block, weight)` pairs, left in
    /// the workspace. Errors when no kernel covers `x`.
    fn sparse_weights<'w>(&self, x: &[f64], ws: &'w mut Workspace) -> Result<&'w [(usize, f64)]> {
        self.active_blocks(x, ws);
        let max = ws.active.iter().fold(f64::NEG_INFINITY, |m, &(_, lp)| m.max(lp));
        if !max.is_finite() {
            return Err(KmpError::Numerical(format!(
                "kernel mixture denominator vanishes at {x:?} (Kh = {})",
                self.kh()
            )));
        }
        let mut total = 0.0;
        for a in ws.active.iter_mut() {
            a.1 = (a.1 - max).exp();
            total += a.1;
        }
        for a in ws.active.iter_mut() {
            a.1 /= total;
        }
        Ok(&ws.active)
    }

    /// Dense vector of mixture weights over all blocks.
    pub fn mixture_weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_point(x, self.dim())?;
        let mut ws = Workspace::default();
        let mut out = vec![0.0; self.n_blocks()];
        for &(b, w) in self.sparse_weights(x, &mut ws)? {
            out[b] = w;
        }
        Ok(out)
    }

    /// Nonzero basis values at `x` as `(coefficient index, ψ value)`.
    pub fn basis_row(&self, x: &[f64], ws: &mut Workspace, out: &mut Vec<(usize, f64)>) -> Result<()> {
        out.clear();
        self.sparse_weights(x, ws)?;
        let m = self.n_multi();
        let p = self.dim();
        for i in 0..ws.active.len() {
            let (b, w) = ws.active[i];
            ws.disp.clear();
            if p == 1 {
                ws.disp.push(x[0] - self.grid.center_coord(b));
            } else {
                let mi = self.grid.multi_index(b);
                ws.disp.extend(x.iter().zip(&mi).map(|(&xj, &kj)| xj - self.grid.center_coord(kj)));
            }
            self.multi.monomials(&ws.disp, &mut ws.mono);
            for (s, &mono) in ws.mono.iter().enumerate() {
                out.push((b * m + s, w * mono));
            }
        }
        Ok(())
    }

    /// `ψ_ks(x)` for flat block index `block` and multi-index position `s`.
    pub fn eval_basis(&self, block: usize, s: usize, x: &[f64]) -> Result<f64> {
        check_point(x, self.dim())?;
        if block >= self.n_blocks() || s >= self.n_multi() {
            return Err(domain_err(format!("basis index ({block}, {s}) out of range")));
        }
        let w = self.mixture_weights(x)?[block];
        if w == 0.0 {
            return Ok(0.0);
        }
        let mi = self.grid.multi_index(block);
        let mono: f64 = self
            .multi
            .get(s)
            .iter()
            .zip(x.iter().zip(&mi))
            .map(|(&e, (&xj, &kj))| (xj - self.grid.center_coord(kj)).powi(e as i32))
            .product();
        Ok(w * mono)
    }

    /// `f(x)` without domain checks; `x` must lie in the unit cube.
    #[inline]
    pub fn eval_with(&self, x: &[f64], ws: &mut Workspace) -> Result<f64> {
        let m = self.n_multi();
        let p = self.dim();
        self.sparse_weights(x, ws)?;
        let mut f = 0.0;
        for i in 0..ws.active.len() {
            let (b, w) = ws.active[i];
            let coefs = &self.coefs[b * m..(b + 1) * m];
            let local = if p == 1 {
                // Horner on the centered univariate polynomial
                let d = x[0] - self.grid.center_coord(b);
                coefs.iter().rev().fold(0.0, |acc, &c| acc * d + c)
            } else {
                let mi = self.grid.multi_index(b);
                ws.disp.clear();
                ws.disp.extend(x.iter().zip(&mi).map(|(&xj, &kj)| xj - self.grid.center_coord(kj)));
                self.multi.monomials(&ws.disp, &mut ws.mono);
                coefs.iter().zip(&ws.mono).map(|(c, v)| c * v).sum()
            };
            f += w * local;
        }
        Ok(f)
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        check_point(x, self.dim())?;
        self.eval_with(x, &mut Workspace::default())
    }

    /// Evaluates `f` at every row of a row-major `n × p` point array.
    pub fn eval_many(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let p = self.dim();
        let mut ws = Workspace::default();
        xs.chunks(p)
            .map(|x| {
                check_point(x, p)?;
                self.eval_with(x, &mut ws)
            })
            .collect()
    }
}

/// Supplies `D^s f₀` at a point.
pub trait DerivativeOracle {
    fn derivative(&self, x: &[f64], s: &[usize]) -> f64;
}

/// Central finite differences, applied axis by axis.
pub struct FiniteDifference<F> {
    f: F,
}

impl<F: Fn(&[f64]) -> f64> FiniteDifference<F> {
    pub fn new(f: F) -> Self {
        Self { f }
    }

    fn step(order: usize) -> f64 {
        1e-4_f64.max(f64::EPSILON.powf(1.0 / (order as f64 + 2.0)))
    }

    fn diff(&self, x: &mut Vec<f64>, s: &[usize], axis: usize) -> f64 {
        if axis == s.len() {
            return (self.f)(x);
        }
        let n = s[axis];
        if n == 0 {
            return self.diff(x, s, axis + 1);
        }
        let h = Self::step(n);
        let x0 = x[axis];
        let mut acc = 0.0;
        let mut binom = 1.0;
        for i in 0..=n {
            x[axis] = x0 + (n as f64 / 2.0 - i as f64) * h;
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * binom * self.diff(x, s, axis + 1);
            binom = binom * (n - i) as f64 / (i + 1) as f64;
        }
        x[axis] = x0;
        acc / h.powi(n as i32)
    }
}

impl<F: Fn(&[f64]) -> f64> DerivativeOracle for FiniteDifference<F> {
    fn derivative(&self, x: &[f64], s: &[usize]) -> f64 {
        let mut pt = x.to_vec();
        self.diff(&mut pt, s, 0)
    }
}

/// Taylor coefficients `ξ_ks = D^s f₀(μ*_k) / (s_1! ⋯ s_p!)` at every block
/// center, in the coefficient layout of [`KmpParams`].
pub fn taylor_project(f0: &impl DerivativeOracle, grid: PartitionGrid, degree: usize) -> Vec<f64> {
    let multi = MultiIndexSet::new(grid.dim(), degree);
    let mut out = Vec::with_capacity(grid.n_blocks() * multi.len());
    for b in 0..grid.n_blocks() {
        let c = grid.center(b);
        for s in multi.iter() {
            let fact: f64 = s.iter().map(|&e| (1..=e).product::<usize>() as f64).product();
            out.push(f0.derivative(&c, s) / fact);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_block(h: f64) -> KmpParams {
        let grid = PartitionGrid::new(2, 1).unwrap();
        KmpParams::new(grid, 1, KernelFamily::Bump, h, vec![0.25, 0.75], vec![0.0; 4], 1.0).unwrap()
    }

    #[test]
    fn symmetric_weights() {
        let p = two_block(0.75);
        let w = p.mixture_weights(&[0.5]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn weights_at_a_center() {
        // φ(0) / (φ(0) + φ(2/3)), φ(2/3) = exp(-9/5)
        let p = two_block(0.75);
        let w = p.mixture_weights(&[0.25]).unwrap();
        let a = (-1.0f64).exp();
        let b = (-1.8f64).exp();
        assert!((w[0] - a / (a + b)).abs() < 1e-14);
        assert!((w[0] - 0.6899).abs() < 1e-4);
        assert!((w[1] - 0.3101).abs() < 1e-4);
    }

    #[test]
    fn basis_examples() {
        let p = two_block(0.75);
        assert!((p.eval_basis(0, 1, &[0.5]).unwrap() - 0.125).abs() < 1e-15);
        assert_eq!(p.eval_basis(0, 0, &[0.5]).unwrap(), p.mixture_weights(&[0.5]).unwrap()[0]);
        // monomial vanishes at its own block center
        assert_eq!(p.eval_basis(1, 1, &[0.75]).unwrap(), 0.0);
    }

    #[test]
    fn out_of_domain() {
        let p = two_block(0.75);
        assert!(p.mixture_weights(&[1.5]).is_err());
        assert!(p.eval(&[-0.1]).is_err());
        assert!(p.eval_basis(2, 0, &[0.5]).is_err());
    }

    #[test]
    fn constant_coefficients_give_constant_function() {
        let grid = PartitionGrid::new(7, 1).unwrap();
        let mut p = KmpParams::centered(grid, 2, KernelFamily::Bump, 1.5, 1.0).unwrap();
        for b in 0..7 {
            p.coefs[b * 3] = 3.25;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x: f64 = rng.random();
            assert!((p.eval(&[x]).unwrap() - 3.25).abs() < 1e-13);
        }
    }

    #[test]
    fn basis_row_matches_eval() {
        let grid = PartitionGrid::new(3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = KmpParams::centered(grid, 2, KernelFamily::Bump, 1.7, 1.0).unwrap();
        for c in p.coefs.iter_mut() {
            *c = rng.random_range(-1.0..1.0);
        }
        let off: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        p.set_offsets(&off);
        let mut ws = Workspace::default();
        let mut row = Vec::new();
        for _ in 0..100 {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            p.basis_row(&x, &mut ws, &mut row).unwrap();
            let via_row: f64 = row.iter().map(|&(j, v)| p.coefs[j] * v).sum();
            let direct = p.eval(&x).unwrap();
            assert!((via_row - direct).abs() < 1e-12);
            for &(j, v) in &row {
                let (b, s) = (j / p.n_multi(), j % p.n_multi());
                assert!((p.eval_basis(b, s, &x).unwrap() - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn offsets_round_trip() {
        let grid = PartitionGrid::new(5, 1).unwrap();
        let mut p = KmpParams::centered(grid, 0, KernelFamily::Bump, 1.5, 1.0).unwrap();
        let off = vec![-1.0, -0.5, 0.0, 0.5, 1.0];
        p.set_offsets(&off);
        for (a, b) in p.offsets().iter().zip(&off) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p.center(0)[0] - 0.0).abs() < 1e-15);
        assert!((p.center(4)[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn taylor_of_simple_functions() {
        let grid = PartitionGrid::new(4, 1).unwrap();
        let c = taylor_project(&FiniteDifference::new(|_: &[f64]| 2.5), grid, 2);
        for b in 0..4 {
            assert!((c[b * 3] - 2.5).abs() < 1e-12);
            assert!(c[b * 3 + 1].abs() < 1e-8 && c[b * 3 + 2].abs() < 1e-6);
        }
        let c = taylor_project(&FiniteDifference::new(|x: &[f64]| x[0]), grid, 2);
        for b in 0..4 {
            assert!((c[b * 3] - grid.center_coord(b)).abs() < 1e-12);
            assert!((c[b * 3 + 1] - 1.0).abs() < 1e-8);
            assert!(c[b * 3 + 2].abs() < 1e-5);
        }
    }

    #[test]
    fn finite_difference_mixed_partials() {
        let fd = FiniteDifference::new(|x: &[f64]| x[0] * x[0] * x[1]);
        let at = [0.3, 0.7];
        assert!((fd.derivative(&at, &[1, 0]) - 2.0 * 0.3 * 0.7).abs() < 1e-7);
        assert!((fd.derivative(&at, &[1, 1]) - 0.6).abs() < 1e-6);
        assert!((fd.derivative(&at, &[2, 1]) - 2.0).abs() < 1e-4);
    }
}
