//! Metropolis-within-Gibbs sampler for `y_i = f(x_i) + e_i` at fixed `K`.
//!
//! One sweep updates, in order: the coefficients `ξ` (exact Gaussian
//! conditional restricted to the box), the center offsets `μ̃_k` (one
//! reflected random-walk Metropolis step per block), the scaled bandwidth
//! `Kh` (reflected random walk), and the noise scale (exact truncated
//! inverse-gamma conditional).
//!
//! The sampler keeps fitted values current at all times. The sparse basis
//! matrix is rebuilt lazily, only before a coefficient update that follows an
//! accepted center or bandwidth move.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dist::{truncated_inv_gamma, truncated_normal};
use crate::error::{config_err, domain_err, KmpError, Result};
use crate::grid::check_point;
use crate::model::{KmpParams, Workspace};
use crate::prior::{log_prior_density, sample_prior, CoefPrior, PriorConfig, SigmaPrior};

/// How the coefficient vector is refreshed each sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiUpdate {
    /// Joint draw from the untruncated Gaussian conditional, accepted when it
    /// lands inside the box; falls back to a coordinate sweep otherwise.
    #[default]
    Block,
    /// One coordinate-wise sweep of exact truncated-normal conditionals.
    Coordinate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// A draw from the prior.
    #[default]
    Prior,
    /// A prior draw for centers, bandwidth and noise, with coefficients from
    /// box-constrained least squares.
    LeastSquares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub burnin: usize,
    pub samples: usize,
    pub thin: usize,
    pub seed: u64,
    pub xi_update: XiUpdate,
    pub init: InitStrategy,
    /// Tune random-walk steps toward a moderate acceptance rate during
    /// burn-in. Steps are frozen once retained sampling starts.
    pub adapt: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            burnin: 1000,
            samples: 1000,
            thin: 1,
            seed: 0,
            xi_update: XiUpdate::Block,
            init: InitStrategy::Prior,
            adapt: true,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(config_err("samples must be at least 1"));
        }
        if self.thin == 0 {
            return Err(config_err("thin must be at least 1"));
        }
        Ok(())
    }
}

/// Acceptance record over the retained part of a chain.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRates {
    pub offset: f64,
    pub kh: f64,
    /// Fraction of coefficient updates done by the joint draw.
    pub xi_block: f64,
    /// Coordinates whose conditional had no likelihood information and a flat
    /// prior, so they were redrawn from the prior.
    pub xi_degenerate: usize,
    pub step_offset: f64,
    pub step_kh: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Counter {
    tried: u64,
    accepted: u64,
}

impl Counter {
    fn record(&mut self, ok: bool) {
        self.tried += 1;
        self.accepted += ok as u64;
    }

    fn rate(&self) -> f64 {
        if self.tried == 0 {
            0.0
        } else {
            self.accepted as f64 / self.tried as f64
        }
    }
}

/// One retained draw. Centers, coefficients and `β` are stored flat in the
/// layout of [`KmpParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub bandwidth: f64,
    pub centers: Vec<f64>,
    pub coefs: Vec<f64>,
    pub sigma: f64,
    pub beta: Vec<f64>,
    pub loglik: f64,
    pub logpost: f64,
}

/// Ordered retained draws at a fixed `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    /// Structure shared by every draw (grid, degree, kernel).
    pub template: KmpParams,
    pub draws: Vec<Draw>,
    pub acceptance: AcceptanceRates,
    pub beta_names: Vec<String>,
}

impl PosteriorDraws {
    pub fn k(&self) -> usize {
        self.template.k()
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn q(&self) -> usize {
        self.draws.first().map_or(0, |d| d.beta.len())
    }

    pub fn params(&self, t: usize) -> KmpParams {
        let d = &self.draws[t];
        let mut p = self.template.clone();
        p.bandwidth = d.bandwidth;
        p.centers.clone_from(&d.centers);
        p.coefs.clone_from(&d.coefs);
        p.sigma = d.sigma;
        p
    }

    /// `f_t(x)` for every draw `t` and every row of the `G × p` grid, as a
    /// `T × G` row-major matrix.
    pub fn eval_grid(&self, grid: &[f64]) -> Result<Vec<f64>> {
        let p = self.template.dim();
        for x in grid.chunks(p) {
            check_point(x, p)?;
        }
        let g = grid.len() / p;
        let mut out = Vec::with_capacity(self.len() * g);
        let mut ws = Workspace::default();
        let mut params = self.template.clone();
        for d in &self.draws {
            params.bandwidth = d.bandwidth;
            params.centers.clone_from(&d.centers);
            params.coefs.clone_from(&d.coefs);
            for x in grid.chunks(p) {
                out.push(params.eval_with(x, &mut ws)?);
            }
        }
        Ok(out)
    }
}

/// Gaussian log-likelihood `Σ_i log φ_σ(y_i - f(x_i))`, computed point by
/// point.
pub fn loglik(params: &KmpParams, data: &Dataset) -> Result<f64> {
    if !(params.sigma > 0.0) {
        return Err(domain_err(format!("noise scale must be positive, got {}", params.sigma)));
    }
    let mut ws = Workspace::default();
    let s2 = params.sigma * params.sigma;
    let mut ll = 0.0;
    for i in 0..data.n() {
        let x = data.x_row(i);
        check_point(x, params.dim())?;
        let r = data.y[i] - params.eval_with(x, &mut ws)?;
        ll += -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * r * r / s2;
    }
    Ok(ll)
}

#[inline]
pub(crate) fn gaussian_loglik(n: usize, ssr: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    -0.5 * n as f64 * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * ssr / s2
}

/// Reflects `v` into `[lo, hi]`.
#[inline]
pub fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let w = hi - lo;
    if w <= 0.0 {
        return lo;
    }
    if (lo..=hi).contains(&v) {
        return v;
    }
    let mut t = (v - lo).rem_euclid(2.0 * w);
    if t > w {
        t = 2.0 * w - t;
    }
    (lo + t).clamp(lo, hi)
}

/// Sparse `n × d` basis matrix, kept in both row and column layouts.
#[derive(Debug, Clone, Default)]
pub(crate) struct SparseBasis {
    pub d: usize,
    pub row_ptr: Vec<usize>,
    pub row_col: Vec<usize>,
    pub row_val: Vec<f64>,
    pub col_ptr: Vec<usize>,
    pub col_row: Vec<usize>,
    pub col_val: Vec<f64>,
}

impl SparseBasis {
    pub fn build(params: &KmpParams, data: &Dataset, ws: &mut Workspace) -> Result<Self> {
        let n = data.n();
        let d = params.n_coefs();
        let mut b = SparseBasis { d, ..Default::default() };
        b.row_ptr.reserve(n + 1);
        b.row_ptr.push(0);
        let mut row = Vec::new();
        for i in 0..n {
            params.basis_row(data.x_row(i), ws, &mut row)?;
            for &(c, v) in &row {
                b.row_col.push(c);
                b.row_val.push(v);
            }
            b.row_ptr.push(b.row_col.len());
        }
        let nnz = b.row_col.len();
        let mut counts = vec![0usize; d + 1];
        for &c in &b.row_col {
            counts[c + 1] += 1;
        }
        for j in 0..d {
            counts[j + 1] += counts[j];
        }
        b.col_ptr = counts.clone();
        b.col_row = vec![0; nnz];
        b.col_val = vec![0.0; nnz];
        for i in 0..n {
            for k in b.row_ptr[i]..b.row_ptr[i + 1] {
                let c = b.row_col[k];
                let slot = counts[c];
                b.col_row[slot] = i;
                b.col_val[slot] = b.row_val[k];
                counts[c] += 1;
            }
        }
        Ok(b)
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// `Ψᵀ Ψ` (dense) and `Ψᵀ v`.
    pub fn normal_equations(&self, v: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let mut g = DMatrix::zeros(self.d, self.d);
        let mut rhs = DVector::zeros(self.d);
        for (i, &vi) in v.iter().enumerate().take(self.n_rows()) {
            let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
            for a in lo..hi {
                let (ca, va) = (self.row_col[a], self.row_val[a]);
                rhs[ca] += va * vi;
                for b in lo..hi {
                    g[(ca, self.row_col[b])] += va * self.row_val[b];
                }
            }
        }
        (g, rhs)
    }

    pub fn mul(&self, coefs: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for i in 0..self.n_rows() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.row_val[k] * coefs[self.row_col[k]];
            }
            out.push(s);
        }
    }
}

/// Chain state and the individual update steps.
pub struct Sampler<'a> {
    data: &'a Dataset,
    prior: &'a PriorConfig,
    pub params: KmpParams,
    offsets: Vec<f64>,
    target: Vec<f64>,
    fitted: Vec<f64>,
    basis: SparseBasis,
    basis_stale: bool,
    /// Row indices sorted by the first design coordinate, and those
    /// coordinates in the same order.
    order: Vec<usize>,
    sorted_x0: Vec<f64>,
    ws: Workspace,
    scratch: Vec<f64>,
    pub step_offset: f64,
    pub step_kh: f64,
    offset_acc: Counter,
    kh_acc: Counter,
    block_acc: Counter,
    xi_degenerate: usize,
}

impl<'a> Sampler<'a> {
    /// Starts a chain at `params`, modelling `target` (the responses, or
    /// partial residuals in the partial linear model).
    pub fn new(data: &'a Dataset, prior: &'a PriorConfig, params: KmpParams, target: Vec<f64>) -> Result<Self> {
        prior.validate()?;
        data.validate()?;
        params.check_shape()?;
        if params.dim() != data.p {
            return Err(config_err(format!("parameter dimension {} does not match data dimension {}", params.dim(), data.p)));
        }
        if target.len() != data.n() {
            return Err(config_err("target length does not match the data"));
        }
        let mut order: Vec<usize> = (0..data.n()).collect();
        order.sort_by(|&a, &b| data.x_row(a)[0].total_cmp(&data.x_row(b)[0]));
        let sorted_x0 = order.iter().map(|&i| data.x_row(i)[0]).collect();
        let mut ws = Workspace::default();
        let basis = SparseBasis::build(&params, data, &mut ws)?;
        let mut fitted = Vec::new();
        basis.mul(&params.coefs, &mut fitted);
        Ok(Self {
            data,
            prior,
            offsets: params.offsets(),
            params,
            target,
            fitted,
            basis,
            basis_stale: false,
            order,
            sorted_x0,
            ws,
            scratch: Vec::new(),
            step_offset: prior.step_offset,
            step_kh: prior.step_kh(),
            offset_acc: Counter::default(),
            kh_acc: Counter::default(),
            block_acc: Counter::default(),
            xi_degenerate: 0,
        })
    }

    pub fn fitted(&self) -> &[f64] {
        &self.fitted
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn set_target(&mut self, target: Vec<f64>) {
        debug_assert_eq!(target.len(), self.target.len());
        self.target = target;
    }

    pub fn ssr(&self) -> f64 {
        self.target.iter().zip(&self.fitted).map(|(t, f)| (t - f) * (t - f)).sum()
    }

    pub fn loglik(&self) -> f64 {
        gaussian_loglik(self.data.n(), self.ssr(), self.params.sigma)
    }

    pub fn log_posterior(&self) -> f64 {
        self.loglik() + log_prior_density(self.prior, &self.params)
    }

    fn refresh_basis(&mut self) -> Result<()> {
        if self.basis_stale {
            self.basis = SparseBasis::build(&self.params, self.data, &mut self.ws)?;
            self.basis_stale = false;
        }
        Ok(())
    }

    fn refresh_fitted(&mut self) {
        let mut fitted = std::mem::take(&mut self.fitted);
        self.basis.mul(&self.params.coefs, &mut fitted);
        self.fitted = fitted;
    }

    /// Coefficient update in the requested mode.
    pub fn gibbs_xi<R: Rng + ?Sized>(&mut self, rng: &mut R, mode: XiUpdate) -> Result<()> {
        match mode {
            XiUpdate::Coordinate => self.gibbs_xi_coordinate(rng),
            XiUpdate::Block => {
                let ok = self.gibbs_xi_block(rng)?;
                self.block_acc.record(ok);
                if !ok {
                    self.gibbs_xi_coordinate(rng)?;
                }
                Ok(())
            }
        }
    }

    /// One fixed-order sweep of exact conditionals
    /// `ξ_j | rest ~ N(m_j, v_j)` restricted to `[-B, B]`.
    pub fn gibbs_xi_coordinate<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.refresh_basis()?;
        let s2 = self.params.sigma * self.params.sigma;
        let prior_prec = self.prior.coef_sd(self.params.sigma).map_or(0.0, |sd| 1.0 / (sd * sd));
        let bound = self.prior.coef_bound;
        let mut resid: Vec<f64> = self.target.iter().zip(&self.fitted).map(|(t, f)| t - f).collect();
        let b = &self.basis;
        for j in 0..b.d {
            let (lo, hi) = (b.col_ptr[j], b.col_ptr[j + 1]);
            let old = self.params.coefs[j];
            let mut norm2 = 0.0;
            let mut cross = 0.0;
            for k in lo..hi {
                let v = b.col_val[k];
                norm2 += v * v;
                cross += v * resid[b.col_row[k]];
            }
            let prec = norm2 / s2 + prior_prec;
            let new = if prec > 0.0 && prec.is_finite() {
                let mean = (cross + norm2 * old) / s2 / prec;
                truncated_normal(rng, mean, 1.0 / prec.sqrt(), -bound, bound)
            } else {
                self.xi_degenerate += 1;
                if bound > 0.0 {
                    rng.random_range(-bound..=bound)
                } else {
                    0.0
                }
            };
            let delta = new - old;
            if delta != 0.0 {
                for k in lo..hi {
                    resid[b.col_row[k]] -= b.col_val[k] * delta;
                }
            }
            self.params.coefs[j] = new;
        }
        self.refresh_fitted();
        Ok(())
    }

    /// Joint draw from the untruncated Gaussian conditional, retried a few
    /// times; returns whether a draw inside the box was found. On `false`
    /// the coefficients are unchanged.
    pub fn gibbs_xi_block<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<bool> {
        const TRIES: usize = 16;
        self.refresh_basis()?;
        let s2 = self.params.sigma * self.params.sigma;
        let prior_prec = self.prior.coef_sd(self.params.sigma).map_or(0.0, |sd| 1.0 / (sd * sd));
        let (mut prec, rhs) = self.basis.normal_equations(&self.target);
        prec /= s2;
        for j in 0..prec.nrows() {
            prec[(j, j)] += prior_prec;
        }
        let Some(chol) = prec.cholesky() else {
            return Ok(false);
        };
        let mean = chol.solve(&(rhs / s2));
        let lt = chol.l().transpose();
        let bound = self.prior.coef_bound;
        let d = mean.len();
        for _ in 0..TRIES {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let Some(noise) = lt.solve_upper_triangular(&z) else {
                return Ok(false);
            };
            let draw = &mean + noise;
            if draw.iter().all(|v| v.abs() <= bound) {
                self.params.coefs.copy_from_slice(draw.as_slice());
                self.refresh_fitted();
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// One reflected random-walk Metropolis step on each block's offset.
    pub fn mh_mu<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let p = self.params.dim();
        let nb = self.params.n_blocks();
        let h = self.params.bandwidth;
        let s2 = self.params.sigma * self.params.sigma;
        let mut proposal = vec![0.0; p];
        for b in 0..nb {
            let cur = &self.offsets[b * p..(b + 1) * p];
            for j in 0..p {
                let z: f64 = rng.sample(StandardNormal);
                proposal[j] = reflect(cur[j] + self.step_offset * z, -1.0, 1.0);
            }
            if self.step_offset == 0.0 {
                self.offset_acc.record(true);
                continue;
            }
            let old_c0 = self.params.center(b)[0];
            self.params.set_block_offset(b, &proposal);
            let new_c0 = self.params.center(b)[0];
            let lo = old_c0.min(new_c0) - h;
            let hi = old_c0.max(new_c0) + h;
            let first = self.sorted_x0.partition_point(|&v| v <= lo);
            let last = self.sorted_x0.partition_point(|&v| v < hi);
            self.scratch.clear();
            let mut delta = 0.0;
            let mut failed = false;
            for &i in &self.order[first..last] {
                match self.params.eval_with(self.data.x_row(i), &mut self.ws) {
                    Ok(f) => {
                        let (rn, ro) = (self.target[i] - f, self.target[i] - self.fitted[i]);
                        delta += rn * rn - ro * ro;
                        self.scratch.push(f);
                    }
                    Err(_) => {
                        failed = true;
                        break;
                    }
                }
            }
            let accept = !failed && {
                let log_ratio = -0.5 * delta / s2;
                log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
            };
            self.offset_acc.record(accept);
            if accept {
                for (slot, &i) in self.order[first..last].iter().enumerate() {
                    self.fitted[i] = self.scratch[slot];
                }
                self.offsets[b * p..(b + 1) * p].copy_from_slice(&proposal);
                self.basis_stale = true;
            } else {
                let cur = self.offsets[b * p..(b + 1) * p].to_vec();
                self.params.set_block_offset(b, &cur);
            }
        }
        Ok(())
    }

    /// Reflected random-walk Metropolis step on `Kh ∈ [h̲, h̄]`.
    pub fn mh_h<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let z: f64 = rng.sample(StandardNormal);
        if self.step_kh == 0.0 {
            self.kh_acc.record(true);
            return Ok(());
        }
        let old = self.params.kh();
        let new = reflect(old + self.step_kh * z, self.prior.kh_min, self.prior.kh_max);
        self.params.set_kh(new);
        let s2 = self.params.sigma * self.params.sigma;
        self.scratch.clear();
        let mut delta = 0.0;
        for i in 0..self.data.n() {
            let f = self.params.eval_with(self.data.x_row(i), &mut self.ws)?;
            let (rn, ro) = (self.target[i] - f, self.target[i] - self.fitted[i]);
            delta += rn * rn - ro * ro;
            self.scratch.push(f);
        }
        let log_ratio = -0.5 * delta / s2;
        let accept = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
        self.kh_acc.record(accept);
        if accept {
            std::mem::swap(&mut self.fitted, &mut self.scratch);
            self.basis_stale = true;
        } else {
            self.params.set_kh(old);
        }
        Ok(())
    }

    /// Exact draw of the noise scale from its truncated inverse-gamma
    /// conditional on `σ²`. No-op under a fixed noise prior.
    pub fn gibbs_sigma<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let SigmaPrior::InverseGamma { shape, scale } = self.prior.sigma_prior else {
            return Ok(());
        };
        let mut a = shape + 0.5 * self.data.n() as f64;
        let mut b = scale + 0.5 * self.ssr();
        if let CoefPrior::SigmaScaled { scale: c } = self.prior.coef_prior {
            a += 0.5 * self.params.n_coefs() as f64;
            b += 0.5 * self.params.coefs.iter().map(|v| v * v).sum::<f64>() / (c * c);
        }
        let (lo, hi) = (self.prior.sigma_min, self.prior.sigma_max);
        let v = truncated_inv_gamma(rng, a, b, lo * lo, hi * hi);
        self.params.sigma = v.sqrt().clamp(lo, hi);
        Ok(())
    }

    /// One systematic-scan sweep: `ξ`, centers, bandwidth, noise.
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R, mode: XiUpdate) -> Result<()> {
        self.gibbs_xi(rng, mode)?;
        self.mh_mu(rng)?;
        self.mh_h(rng)?;
        self.gibbs_sigma(rng)?;
        Ok(())
    }

    fn adapt_steps(&mut self, window_offset: Counter, window_kh: Counter) {
        const TARGET: f64 = 0.35;
        if window_offset.tried > 0 {
            let r = window_offset.rate();
            self.step_offset = (self.step_offset * (2.0 * (r - TARGET)).exp()).min(2.0);
        }
        if window_kh.tried > 0 {
            let r = window_kh.rate();
            let width = self.prior.kh_max - self.prior.kh_min;
            self.step_kh = (self.step_kh * (2.0 * (r - TARGET)).exp()).min(width);
        }
    }

    fn reset_counters(&mut self) {
        self.offset_acc = Counter::default();
        self.kh_acc = Counter::default();
        self.block_acc = Counter::default();
        self.xi_degenerate = 0;
    }

    pub fn acceptance(&self) -> AcceptanceRates {
        AcceptanceRates {
            offset: self.offset_acc.rate(),
            kh: self.kh_acc.rate(),
            xi_block: self.block_acc.rate(),
            xi_degenerate: self.xi_degenerate,
            step_offset: self.step_offset,
            step_kh: self.step_kh,
        }
    }

    pub(crate) fn snapshot(&self, beta: &[f64], log_beta_prior: f64) -> Result<Draw> {
        let loglik = self.loglik();
        let logpost = loglik + log_prior_density(self.prior, &self.params) + log_beta_prior;
        if !logpost.is_finite() {
            return Err(KmpError::Numerical(format!(
                "non-finite log posterior (loglik {loglik}, sigma {}, Kh {})",
                self.params.sigma,
                self.params.kh()
            )));
        }
        Ok(Draw {
            bandwidth: self.params.bandwidth,
            centers: self.params.centers.clone(),
            coefs: self.params.coefs.clone(),
            sigma: self.params.sigma,
            beta: beta.to_vec(),
            loglik,
            logpost,
        })
    }

    /// Runs burn-in and retained sweeps. `pre_sweep` runs before every sweep
    /// and may replace the target (used for the linear block of the partial
    /// linear model); it returns the current `β` and its log prior density.
    pub(crate) fn run<R, F>(&mut self, cfg: &McmcConfig, rng: &mut R, mut pre_sweep: F) -> Result<Vec<Draw>>
    where
        R: Rng + ?Sized,
        F: FnMut(&mut Self, &mut R) -> Result<(Vec<f64>, f64)>,
    {
        cfg.validate()?;
        const WINDOW: usize = 50;
        let mut last_offset = Counter::default();
        let mut last_kh = Counter::default();
        for it in 0..cfg.burnin {
            pre_sweep(self, rng)?;
            self.sweep(rng, cfg.xi_update)?;
            if cfg.adapt && (it + 1) % WINDOW == 0 {
                let wo = Counter {
                    tried: self.offset_acc.tried - last_offset.tried,
                    accepted: self.offset_acc.accepted - last_offset.accepted,
                };
                let wk = Counter { tried: self.kh_acc.tried - last_kh.tried, accepted: self.kh_acc.accepted - last_kh.accepted };
                self.adapt_steps(wo, wk);
                last_offset = self.offset_acc;
                last_kh = self.kh_acc;
            }
        }
        self.reset_counters();
        let mut draws = Vec::with_capacity(cfg.samples);
        for _ in 0..cfg.samples {
            let mut beta = (Vec::new(), 0.0);
            for _ in 0..cfg.thin {
                beta = pre_sweep(self, rng)?;
                self.sweep(rng, cfg.xi_update)?;
            }
            draws.push(self.snapshot(&beta.0, beta.1)?);
        }
        Ok(draws)
    }
}

/// Initial parameters for a chain at `K`.
pub(crate) fn initial_params<R: Rng + ?Sized>(
    cfg: &McmcConfig,
    prior: &PriorConfig,
    k: usize,
    data: &Dataset,
    target: &[f64],
    rng: &mut R,
) -> Result<KmpParams> {
    let mut params = sample_prior(prior, k, data.p, rng)?;
    if cfg.init == InitStrategy::LeastSquares {
        let shifted = Dataset { y: target.to_vec(), ..data.clone() };
        params.coefs = crate::sieve::solve_xi_box(&shifted, &params, prior.coef_bound)?;
    }
    Ok(params)
}

/// Runs one chain at fixed `K`, initialized per `cfg.init`. Deterministic
/// given `cfg.seed`.
pub fn run_chain(cfg: &McmcConfig, prior: &PriorConfig, k: usize, data: &Dataset) -> Result<PosteriorDraws> {
    cfg.validate()?;
    prior.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = initial_params(cfg, prior, k, data, &data.y, &mut rng)?;
    run_chain_from(cfg, prior, params, data, &mut rng)
}

/// Runs a chain from given starting parameters with a caller-owned
/// generator.
pub fn run_chain_from<R: Rng + ?Sized>(
    cfg: &McmcConfig,
    prior: &PriorConfig,
    params: KmpParams,
    data: &Dataset,
    rng: &mut R,
) -> Result<PosteriorDraws> {
    let mut template = params.clone();
    let mut sampler = Sampler::new(data, prior, params, data.y.clone())?;
    let draws = sampler.run(cfg, rng, |_, _| Ok((Vec::new(), 0.0)))?;
    template.coefs.iter_mut().for_each(|c| *c = 0.0);
    Ok(PosteriorDraws { template, draws, acceptance: sampler.acceptance(), beta_names: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PartitionGrid;
    use crate::kernel::KernelFamily;

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y = x
            .iter()
            .map(|&v| (2.0 * std::f64::consts::PI * v).sin() + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dataset::univariate(x, y).unwrap()
    }

    #[test]
    fn reflection_stays_in_bounds() {
        assert!((reflect(1.2, -1.0, 1.0) - 0.8).abs() < 1e-15);
        assert!((reflect(-3.5, -1.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(reflect(0.3, -1.0, 1.0), 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            let v = rng.random_range(-1.0..1.0) + 3.0 * rng.sample::<f64, _>(StandardNormal);
            assert!(reflect(v, -1.0, 1.0).abs() <= 1.0);
        }
    }

    #[test]
    fn loglik_closed_forms() {
        let grid = PartitionGrid::new(2, 1).unwrap();
        let mut params = KmpParams::centered(grid, 0, KernelFamily::Bump, 1.5, 1.0).unwrap();
        params.coefs = vec![0.3, 0.3];
        let one = Dataset::univariate(vec![0.4], vec![0.3]).unwrap();
        let ll = loglik(&params, &one).unwrap();
        assert!((ll + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        params.sigma = 0.5;
        let two = Dataset::univariate(vec![0.2, 0.9], vec![0.3 + 0.2, 0.3 - 0.2]).unwrap();
        let ll = loglik(&params, &two).unwrap();
        let s2: f64 = 0.25;
        let expect = -(2.0 * std::f64::consts::PI * s2).ln() - 0.04 / s2;
        assert!((ll - expect).abs() < 1e-12);
        params.sigma = 0.0;
        assert!(loglik(&params, &two).is_err());
    }

    #[test]
    fn sampler_loglik_matches_pointwise_sum() {
        let data = toy_data(60, 3);
        let prior = PriorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = sample_prior(&prior, 5, 1, &mut rng).unwrap();
        let s = Sampler::new(&data, &prior, params.clone(), data.y.clone()).unwrap();
        assert!((s.loglik() - loglik(&params, &data).unwrap()).abs() < 1e-9 * s.loglik().abs());
    }

    #[test]
    fn fitted_values_stay_consistent() {
        let data = toy_data(80, 4);
        let prior = PriorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = sample_prior(&prior, 6, 1, &mut rng).unwrap();
        let mut s = Sampler::new(&data, &prior, params, data.y.clone()).unwrap();
        for it in 0..30 {
            let mode = if it % 2 == 0 { XiUpdate::Block } else { XiUpdate::Coordinate };
            s.sweep(&mut rng, mode).unwrap();
            let direct = s.params.eval_many(&data.x).unwrap();
            for (a, b) in direct.iter().zip(s.fitted()) {
                assert!((a - b).abs() < 1e-9, "iteration {it}");
            }
        }
    }

    #[test]
    fn zero_steps_freeze_centers_and_bandwidth() {
        let data = toy_data(40, 5);
        let prior = PriorConfig { step_offset: 0.0, step_kh: Some(0.0), ..Default::default() };
        let cfg = McmcConfig { burnin: 5, samples: 20, seed: 1, ..Default::default() };
        let draws = run_chain(&cfg, &prior, 4, &data).unwrap();
        let first = &draws.draws[0];
        for d in &draws.draws {
            assert_eq!(d.centers, first.centers);
            assert_eq!(d.bandwidth, first.bandwidth);
        }
    }

    #[test]
    fn same_seed_same_chain() {
        let data = toy_data(50, 6);
        let prior = PriorConfig::default();
        let cfg = McmcConfig { burnin: 20, samples: 30, seed: 77, ..Default::default() };
        let a = run_chain(&cfg, &prior, 5, &data).unwrap();
        let b = run_chain(&cfg, &prior, 5, &data).unwrap();
        assert_eq!(a, b);
    }
}
