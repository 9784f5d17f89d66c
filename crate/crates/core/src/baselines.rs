//! Comparison estimators: Nadaraya–Watson, local polynomial regression, and
//! Gaussian-process regression with an inverse-gamma hyperprior on the range
//! parameter, sampled by random-walk Metropolis.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dist::{mixture_quantile, norm_quantile};
use crate::error::{config_err, domain_err, KmpError, Result};
use crate::grid::{check_point, MultiIndexSet};
use crate::kernel::KernelFamily;
use crate::posterior::{CredibleSummary, SummaryKind};

const RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BandwidthChoice {
    Fixed { value: f64 },
    /// Leave-one-out cross-validation over a log-spaced grid. Missing ends
    /// default to `n^{-1/p}` and `0.5`.
    LooCv {
        min: Option<f64>,
        max: Option<f64>,
        points: usize,
    },
}

impl Default for BandwidthChoice {
    fn default() -> Self {
        BandwidthChoice::LooCv { min: None, max: None, points: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalFitConfig {
    /// 0 is Nadaraya–Watson, 1 local linear, and so on.
    pub degree: usize,
    pub kernel: KernelFamily,
    pub bandwidth: BandwidthChoice,
}

impl Default for LocalFitConfig {
    fn default() -> Self {
        Self { degree: 1, kernel: KernelFamily::Epanechnikov, bandwidth: BandwidthChoice::default() }
    }
}

impl LocalFitConfig {
    pub fn validate(&self) -> Result<()> {
        match self.bandwidth {
            BandwidthChoice::Fixed { value } if !(value.is_finite() && value > 0.0) => {
                Err(config_err(format!("bandwidth must be positive, got {value}")))
            }
            BandwidthChoice::LooCv { min, max, points } => {
                if points == 0 {
                    return Err(config_err("bandwidth grid needs at least one point"));
                }
                for v in [min, max].into_iter().flatten() {
                    if !(v.is_finite() && v > 0.0) {
                        return Err(config_err(format!("bandwidth must be positive, got {v}")));
                    }
                }
                if let (Some(a), Some(b)) = (min, max) {
                    if a > b {
                        return Err(config_err(format!("bandwidth range [{a}, {b}] is empty")));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// A smoother evaluated on a grid. Grid points with an empty kernel
/// neighbourhood hold `NaN` and are flagged in `missing`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalCurve {
    pub grid: Vec<f64>,
    pub dim: usize,
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
    /// Points where the local system was singular and solved with a ridge.
    pub ridged: Vec<bool>,
    pub bandwidth: f64,
    /// `(h, LOO mean squared error)` when the bandwidth was cross-validated.
    pub cv_scores: Vec<(f64, f64)>,
}

impl LocalCurve {
    pub fn n_missing(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }
}

fn check_grid(grid: &[f64], p: usize) -> Result<usize> {
    if !grid.len().is_multiple_of(p) {
        return Err(domain_err(format!("grid length {} is not a multiple of {p}", grid.len())));
    }
    for g in grid.chunks(p) {
        check_point(g, p)?;
    }
    Ok(grid.len() / p)
}

#[inline]
fn kernel_weight(kernel: KernelFamily, x0: &[f64], xi: &[f64], h: f64) -> f64 {
    let r = x0.iter().zip(xi).fold(0.0_f64, |r, (a, b)| r.max((a - b).abs()));
    kernel.profile(r / h)
}

/// Nadaraya–Watson value at `x0`, skipping row `skip`.
fn nw_point(data: &Dataset, kernel: KernelFamily, h: f64, x0: &[f64], skip: Option<usize>) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..data.n() {
        if Some(i) == skip {
            continue;
        }
        let w = kernel_weight(kernel, x0, data.x_row(i), h);
        if w > 0.0 {
            num += w * data.y[i];
            den += w;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Local polynomial fit at `x0`: the intercept of a kernel-weighted least
/// squares fit on monomials of `(x_i - x0) / h`, together with its
/// equivalent-kernel weights `ℓ_i`. Returns `None` on an empty neighbourhood.
struct LocalSolve {
    value: f64,
    ridged: bool,
    /// `(row, ℓ_i)` for rows with positive weight.
    weights: Vec<(usize, f64)>,
}

fn local_point(
    data: &Dataset,
    multi: &MultiIndexSet,
    kernel: KernelFamily,
    h: f64,
    x0: &[f64],
    skip: Option<usize>,
    want_weights: bool,
) -> Option<LocalSolve> {
    let d = multi.len();
    let p = data.p;
    let mut xtwx = DMatrix::<f64>::zeros(d, d);
    let mut xtwy = DVector::<f64>::zeros(d);
    let mut rows = Vec::new();
    let mut mono = Vec::with_capacity(d);
    let mut diff = vec![0.0; p];
    for i in 0..data.n() {
        if Some(i) == skip {
            continue;
        }
        let xi = data.x_row(i);
        let w = kernel_weight(kernel, x0, xi, h);
        if w <= 0.0 {
            continue;
        }
        for j in 0..p {
            diff[j] = (xi[j] - x0[j]) / h;
        }
        multi.monomials(&diff, &mut mono);
        for a in 0..d {
            let wa = w * mono[a];
            xtwy[a] += wa * data.y[i];
            for b in 0..=a {
                xtwx[(a, b)] += wa * mono[b];
            }
        }
        if want_weights {
            rows.push((i, w, mono.clone()));
        }
    }
    if xtwx[(0, 0)] <= 0.0 {
        return None;
    }
    for a in 0..d {
        for b in 0..a {
            xtwx[(b, a)] = xtwx[(a, b)];
        }
    }
    // well-posed systems go through Cholesky, the rest get a small ridge
    let scale = xtwx[(0, 0)];
    let (chol, ridged) = match Cholesky::new(xtwx.clone()).filter(|c| c.l().diagonal().min() > 1e-7 * scale.sqrt()) {
        Some(c) => (c, false),
        None => {
            let mut m = xtwx;
            for a in 0..d {
                m[(a, a)] += RIDGE * scale.max(1.0);
            }
            (Cholesky::new(m)?, true)
        }
    };
    let beta = chol.solve(&xtwy);
    let mut weights = Vec::new();
    if want_weights {
        // ℓ_i = w_i e_1ᵀ (XᵀWX)⁻¹ x_i
        let mut e1 = DVector::<f64>::zeros(d);
        e1[0] = 1.0;
        let r = chol.solve(&e1);
        weights = rows.into_iter().map(|(i, w, m)| (i, w * m.iter().zip(r.iter()).map(|(a, b)| a * b).sum::<f64>())).collect();
    }
    Some(LocalSolve { value: beta[0], ridged, weights })
}

fn smooth_at(data: &Dataset, cfg: &LocalFitConfig, multi: &MultiIndexSet, h: f64, x0: &[f64], skip: Option<usize>) -> (Option<f64>, bool) {
    if cfg.degree == 0 {
        (nw_point(data, cfg.kernel, h, x0, skip), false)
    } else {
        match local_point(data, multi, cfg.kernel, h, x0, skip, false) {
            Some(s) => (Some(s.value), s.ridged),
            None => (None, false),
        }
    }
}

/// Leave-one-out mean squared error; rows with no neighbours make it infinite.
fn loo_score(data: &Dataset, cfg: &LocalFitConfig, multi: &MultiIndexSet, h: f64) -> f64 {
    let mut sse = 0.0;
    for i in 0..data.n() {
        match smooth_at(data, cfg, multi, h, data.x_row(i), Some(i)).0 {
            Some(v) => sse += (data.y[i] - v).powi(2),
            None => return f64::INFINITY,
        }
    }
    sse / data.n() as f64
}

/// Resolved bandwidth and the cross-validation trace (empty for a fixed
/// bandwidth).
pub fn choose_bandwidth(data: &Dataset, cfg: &LocalFitConfig) -> Result<(f64, Vec<(f64, f64)>)> {
    cfg.validate()?;
    match cfg.bandwidth {
        BandwidthChoice::Fixed { value } => Ok((value, Vec::new())),
        BandwidthChoice::LooCv { min, max, points } => {
            if data.n() < 2 {
                return Err(domain_err("cross-validation needs at least two observations"));
            }
            let lo = min.unwrap_or_else(|| (data.n() as f64).powf(-1.0 / data.p as f64));
            let hi = max.unwrap_or(0.5).max(lo);
            let multi = MultiIndexSet::new(data.p, cfg.degree);
            let grid: Vec<f64> = if points == 1 {
                vec![lo]
            } else {
                (0..points).map(|i| lo * (hi / lo).powf(i as f64 / (points - 1) as f64)).collect()
            };
            let scores: Vec<(f64, f64)> = grid.iter().map(|&h| (h, loo_score(data, cfg, &multi, h))).collect();
            let best = scores
                .iter()
                .filter(|s| s.1.is_finite())
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .ok_or_else(|| KmpError::Numerical("every candidate bandwidth leaves some point without neighbours".into()))?;
            Ok((best.0, scores))
        }
    }
}

fn local_curve(data: &Dataset, cfg: &LocalFitConfig, grid: &[f64]) -> Result<LocalCurve> {
    data.validate()?;
    let g = check_grid(grid, data.p)?;
    let (h, cv_scores) = choose_bandwidth(data, cfg)?;
    let multi = MultiIndexSet::new(data.p, cfg.degree);
    let mut values = Vec::with_capacity(g);
    let mut missing = Vec::with_capacity(g);
    let mut ridged = Vec::with_capacity(g);
    for x0 in grid.chunks(data.p) {
        let (v, r) = smooth_at(data, cfg, &multi, h, x0, None);
        values.push(v.unwrap_or(f64::NAN));
        missing.push(v.is_none());
        ridged.push(r);
    }
    Ok(LocalCurve { grid: grid.to_vec(), dim: data.p, values, missing, ridged, bandwidth: h, cv_scores })
}

/// Nadaraya–Watson estimate `Σ_i φ_h(x - x_i) y_i / Σ_j φ_h(x - x_j)`. The
/// configured degree is ignored.
pub fn nw_estimate(data: &Dataset, cfg: &LocalFitConfig, grid: &[f64]) -> Result<LocalCurve> {
    let cfg = LocalFitConfig { degree: 0, ..cfg.clone() };
    local_curve(data, &cfg, grid)
}

/// Local polynomial estimate of degree `cfg.degree`. Degree 0 coincides with
/// [`nw_estimate`].
pub fn local_poly_estimate(data: &Dataset, cfg: &LocalFitConfig, grid: &[f64]) -> Result<LocalCurve> {
    local_curve(data, cfg, grid)
}

/// Local polynomial estimate with a pointwise normal-approximation band
/// `f̂(x) ± z σ̂ ‖ℓ(x)‖`, where `ℓ(x)` are the equivalent-kernel weights and
/// `σ̂² = RSS / (n - tr L)` from the in-sample smoother matrix.
pub fn local_poly_band(data: &Dataset, cfg: &LocalFitConfig, grid: &[f64], level: f64) -> Result<(LocalCurve, CredibleSummary)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(domain_err(format!("level must lie in (0, 1), got {level}")));
    }
    let curve = local_curve(data, cfg, grid)?;
    let h = curve.bandwidth;
    let multi = MultiIndexSet::new(data.p, cfg.degree);
    let n = data.n();
    let mut rss = 0.0;
    let mut trace = 0.0;
    for i in 0..n {
        let s = local_point(data, &multi, cfg.kernel, h, data.x_row(i), None, true)
            .ok_or_else(|| KmpError::Numerical(format!("observation {i} has no neighbours at bandwidth {h}")))?;
        rss += (data.y[i] - s.value).powi(2);
        trace += s.weights.iter().find(|w| w.0 == i).map_or(0.0, |w| w.1);
    }
    let dof = (n as f64 - trace).max(1.0);
    let sigma = (rss / dof).sqrt();
    let z = norm_quantile(0.5 + 0.5 * level);
    let mut lower = Vec::with_capacity(curve.values.len());
    let mut upper = Vec::with_capacity(curve.values.len());
    for (x0, &v) in grid.chunks(data.p).zip(&curve.values) {
        let half = match local_point(data, &multi, cfg.kernel, h, x0, None, true) {
            Some(s) => z * sigma * s.weights.iter().map(|w| w.1 * w.1).sum::<f64>().sqrt(),
            None => f64::NAN,
        };
        lower.push(v - half);
        upper.push(v + half);
    }
    let summary = CredibleSummary {
        grid: grid.to_vec(),
        dim: data.p,
        mean: curve.values.clone(),
        lower,
        upper,
        level,
        kind: SummaryKind::Pointwise,
        radius: None,
    };
    Ok((curve, summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpCovariance {
    #[default]
    SquaredExponential,
    Matern32,
    Matern52,
}

impl GpCovariance {
    pub const ALL: [GpCovariance; 3] = [GpCovariance::SquaredExponential, GpCovariance::Matern32, GpCovariance::Matern52];

    pub fn name(self) -> &'static str {
        match self {
            GpCovariance::SquaredExponential => "squared_exponential",
            GpCovariance::Matern32 => "matern32",
            GpCovariance::Matern52 => "matern52",
        }
    }

    /// Correlation at distance `d >= 0` with range `psi > 0`; unit signal
    /// variance.
    #[inline]
    pub fn eval(self, d: f64, psi: f64) -> f64 {
        let r = d / psi;
        match self {
            GpCovariance::SquaredExponential => (-r * r).exp(),
            GpCovariance::Matern32 => {
                let s = 3f64.sqrt() * r;
                (1.0 + s) * (-s).exp()
            }
            GpCovariance::Matern52 => {
                let s = 5f64.sqrt() * r;
                (1.0 + s + 5.0 * r * r / 3.0) * (-s).exp()
            }
        }
    }
}

impl std::str::FromStr for GpCovariance {
    type Err = KmpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared_exponential" | "se" => Ok(GpCovariance::SquaredExponential),
            "matern32" => Ok(GpCovariance::Matern32),
            "matern52" => Ok(GpCovariance::Matern52),
            other => Err(config_err(format!("unknown covariance '{other}'"))),
        }
    }
}

/// Checked form of [`GpCovariance::eval`].
pub fn gp_covariance(cov: GpCovariance, d: f64, psi: f64) -> Result<f64> {
    if !(d >= 0.0 && d.is_finite()) {
        return Err(domain_err(format!("distance must be finite and nonnegative, got {d}")));
    }
    if !(psi > 0.0 && psi.is_finite()) {
        return Err(domain_err(format!("range must be positive, got {psi}")));
    }
    Ok(cov.eval(d, psi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GpNoise {
    Known { sd: f64 },
    /// `σ² ~ InvGamma(shape, scale)`, updated by a random walk on `log σ²`.
    Estimated { shape: f64, scale: f64, init_sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub covariance: GpCovariance,
    pub a_psi: f64,
    pub b_psi: f64,
    pub noise: GpNoise,
    pub burnin: usize,
    pub samples: usize,
    pub seed: u64,
    /// Diagonal jitter tried after a failed factorization, raised tenfold up
    /// to `max_jitter`.
    pub jitter: f64,
    pub max_jitter: f64,
    /// Initial random-walk step on `log ψ`.
    pub step: f64,
    /// Conditional variances are computed on every `band_thin`-th retained draw.
    pub band_thin: usize,
    pub level: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            covariance: GpCovariance::SquaredExponential,
            a_psi: 2.0,
            b_psi: 2.0,
            noise: GpNoise::Known { sd: 0.1 },
            burnin: 1000,
            samples: 1000,
            seed: 0,
            jitter: 1e-10,
            max_jitter: 1e-2,
            step: 0.5,
            band_thin: 10,
            level: 0.95,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_psi >= 2.0 && self.b_psi >= 2.0) {
            return Err(config_err(format!("a_psi and b_psi must be at least 2, got {} and {}", self.a_psi, self.b_psi)));
        }
        match self.noise {
            GpNoise::Known { sd } if !(sd > 0.0 && sd.is_finite()) => {
                return Err(config_err(format!("noise sd must be positive, got {sd}")));
            }
            GpNoise::Estimated { shape, scale, init_sd } if !(shape > 0.0 && scale > 0.0 && init_sd > 0.0) => {
                return Err(config_err("noise prior shape, scale and initial sd must be positive"));
            }
            _ => {}
        }
        if self.samples == 0 {
            return Err(config_err("samples must be positive"));
        }
        if !(self.jitter > 0.0 && self.max_jitter >= self.jitter) {
            return Err(config_err("jitter must be positive and not above max_jitter"));
        }
        if !(self.step > 0.0) || self.band_thin == 0 {
            return Err(config_err("step and band_thin must be positive"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(config_err(format!("level must lie in (0, 1), got {}", self.level)));
        }
        Ok(())
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

/// Factorized `K_ψ + (σ² + jitter) I` and `α = A⁻¹ y`.
pub struct GpFactor {
    pub psi: f64,
    pub sigma2: f64,
    pub jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    pub log_marginal: f64,
}

/// Factorizes the marginal covariance of `y`. On failure a diagonal jitter
/// starting at `jitter` is added and raised tenfold up to `max_jitter`.
pub fn gp_factor(data: &Dataset, cov: GpCovariance, psi: f64, sigma2: f64, jitter: f64, max_jitter: f64) -> Result<GpFactor> {
    let n = data.n();
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let xi = data.x_row(i);
        k[(i, i)] = 1.0 + sigma2;
        for j in 0..i {
            let v = cov.eval(euclid(xi, data.x_row(j)), psi);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let mut jit = 0.0;
    loop {
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += jit;
        }
        if let Some(chol) = Cholesky::new(a) {
            let y = DVector::from_column_slice(&data.y);
            let alpha = chol.solve(&y);
            let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
            let log_marginal = -0.5 * y.dot(&alpha) - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            return Ok(GpFactor { psi, sigma2, jitter: jit, chol, alpha, log_marginal });
        }
        jit = if jit == 0.0 { jitter } else { jit * 10.0 };
        if jit > max_jitter {
            return Err(KmpError::Numerical(format!("covariance factorization failed at psi = {psi} even with jitter {max_jitter}")));
        }
    }
}

/// `log N(y | 0, K_ψ + σ² I)`.
pub fn gp_marginal_loglik(data: &Dataset, cov: GpCovariance, psi: f64, sigma: f64) -> Result<f64> {
    Ok(gp_factor(data, cov, psi, sigma * sigma, 1e-10, 1e-2)?.log_marginal)
}

fn cross_cov(data: &Dataset, cov: GpCovariance, psi: f64, grid: &[f64]) -> DMatrix<f64> {
    let g = grid.len() / data.p;
    DMatrix::from_fn(data.n(), g, |i, j| cov.eval(euclid(data.x_row(i), &grid[j * data.p..(j + 1) * data.p]), psi))
}

impl GpFactor {
    /// Conditional mean of the latent function on `grid`.
    pub fn mean(&self, data: &Dataset, cov: GpCovariance, grid: &[f64]) -> Vec<f64> {
        cross_cov(data, cov, self.psi, grid).tr_mul(&self.alpha).iter().cloned().collect()
    }

    /// Conditional mean and variance of the latent function on `grid`;
    /// variances are clipped at zero.
    pub fn mean_var(&self, data: &Dataset, cov: GpCovariance, grid: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let ks = cross_cov(data, cov, self.psi, grid);
        let mean = ks.tr_mul(&self.alpha).iter().cloned().collect();
        let mut v = ks;
        self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        let var = v.column_iter().map(|c| (1.0 - c.norm_squared()).max(0.0)).collect();
        (mean, var)
    }
}

/// Wall-clock and work counts of a GP chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRecord {
    pub seconds_chain: f64,
    pub seconds_total: f64,
    pub factorizations: usize,
    pub burnin: usize,
    pub samples: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpFit {
    pub covariance: GpCovariance,
    pub summary: CredibleSummary,
    pub psi_draws: Vec<f64>,
    pub sigma_draws: Vec<f64>,
    pub acceptance_psi: f64,
    pub acceptance_sigma: Option<f64>,
    pub max_jitter_used: f64,
    pub runtime: RuntimeRecord,
}

fn log_inv_gamma(v: f64, shape: f64, scale: f64) -> f64 {
    -(shape + 1.0) * v.ln() - scale / v
}

/// Random-walk Metropolis on `log ψ` (and `log σ²` when the noise is
/// estimated) targeting the marginal likelihood times the inverse-gamma
/// hyperpriors. Every retained draw contributes its conditional mean on the
/// grid; the band mixes the Gaussian conditionals of every `band_thin`-th
/// retained draw.
pub fn rescaled_gp_fit(data: &Dataset, cfg: &GpConfig, grid: &[f64]) -> Result<GpFit> {
    let start = Instant::now();
    cfg.validate()?;
    data.validate()?;
    let g = check_grid(grid, data.p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cov = cfg.covariance;
    let (mut sigma2, estimate) = match cfg.noise {
        GpNoise::Known { sd } => (sd * sd, None),
        GpNoise::Estimated { shape, scale, init_sd } => (init_sd * init_sd, Some((shape, scale))),
    };
    // start at the prior mode
    let mut psi = cfg.b_psi / (cfg.a_psi + 1.0);
    let mut factorizations = 1;
    let mut cur = gp_factor(data, cov, psi, sigma2, cfg.jitter, cfg.max_jitter)?;
    let log_target = |f: &GpFactor| {
        let mut t = f.log_marginal + log_inv_gamma(f.psi, cfg.a_psi, cfg.b_psi) + f.psi.ln();
        if let Some((a, b)) = estimate {
            t += log_inv_gamma(f.sigma2, a, b) + f.sigma2.ln();
        }
        t
    };
    let mut cur_target = log_target(&cur);
    let mut step_psi = cfg.step;
    let mut step_sigma = cfg.step;
    let (mut acc_psi, mut acc_sigma) = (0usize, 0usize);
    let (mut win_psi, mut win_sigma) = (0usize, 0usize);
    let mut max_jitter_used = cur.jitter;

    let mut mean_sum = vec![0.0; g];
    let mut band_means: Vec<Vec<f64>> = Vec::new();
    let mut band_sds: Vec<Vec<f64>> = Vec::new();
    let mut psi_draws = Vec::with_capacity(cfg.samples);
    let mut sigma_draws = Vec::with_capacity(cfg.samples);
    // the conditional curves only change on accepted moves
    let mut cached_mean: Option<Vec<f64>> = None;
    let mut cached_mv: Option<(Vec<f64>, Vec<f64>)> = None;

    let total = cfg.burnin + cfg.samples;
    for it in 0..total {
        let prop_psi = psi * (step_psi * rng.sample::<f64, _>(StandardNormal)).exp();
        factorizations += 1;
        if let Ok(f) = gp_factor(data, cov, prop_psi, sigma2, cfg.jitter, cfg.max_jitter) {
            let t = log_target(&f);
            if rng.random::<f64>().ln() < t - cur_target {
                psi = prop_psi;
                max_jitter_used = max_jitter_used.max(f.jitter);
                cur = f;
                cur_target = t;
                cached_mean = None;
                cached_mv = None;
                if it < cfg.burnin {
                    win_psi += 1;
                } else {
                    acc_psi += 1;
                }
            }
        }
        if estimate.is_some() {
            let prop_s2 = sigma2 * (step_sigma * rng.sample::<f64, _>(StandardNormal)).exp();
            factorizations += 1;
            if let Ok(f) = gp_factor(data, cov, psi, prop_s2, cfg.jitter, cfg.max_jitter) {
                let t = log_target(&f);
                if rng.random::<f64>().ln() < t - cur_target {
                    sigma2 = prop_s2;
                    max_jitter_used = max_jitter_used.max(f.jitter);
                    cur = f;
                    cur_target = t;
                    cached_mean = None;
                    cached_mv = None;
                    if it < cfg.burnin {
                        win_sigma += 1;
                    } else {
                        acc_sigma += 1;
                    }
                }
            }
        }
        if it < cfg.burnin {
            if (it + 1) % 50 == 0 {
                step_psi *= ((win_psi as f64 / 50.0 - 0.44) * 2.0).exp();
                step_sigma *= ((win_sigma as f64 / 50.0 - 0.44) * 2.0).exp();
                win_psi = 0;
                win_sigma = 0;
            }
            continue;
        }
        let t = it - cfg.burnin;
        psi_draws.push(psi);
        sigma_draws.push(sigma2.sqrt());
        if t.is_multiple_of(cfg.band_thin) {
            if cached_mv.is_none() {
                cached_mv = Some(cur.mean_var(data, cov, grid));
            }
            let (m, v) = cached_mv.as_ref().unwrap();
            cached_mean = Some(m.clone());
            band_means.push(m.clone());
            band_sds.push(v.iter().map(|v| v.sqrt()).collect());
        } else if cached_mean.is_none() {
            cached_mean = Some(cur.mean(data, cov, grid));
        }
        for (s, m) in mean_sum.iter_mut().zip(cached_mean.as_ref().unwrap()) {
            *s += m;
        }
    }
    let seconds_chain = start.elapsed().as_secs_f64();

    let mean: Vec<f64> = mean_sum.iter().map(|s| s / cfg.samples as f64).collect();
    let lo_q = 0.5 - 0.5 * cfg.level;
    let hi_q = 0.5 + 0.5 * cfg.level;
    let mut lower = Vec::with_capacity(g);
    let mut upper = Vec::with_capacity(g);
    let mut ms = vec![0.0; band_means.len()];
    let mut ss = vec![0.0; band_means.len()];
    for j in 0..g {
        for (t, (m, s)) in band_means.iter().zip(&band_sds).enumerate() {
            ms[t] = m[j];
            ss[t] = s[j];
        }
        lower.push(mixture_quantile(&ms, &ss, lo_q).min(mean[j]));
        upper.push(mixture_quantile(&ms, &ss, hi_q).max(mean[j]));
    }
    let summary = CredibleSummary {
        grid: grid.to_vec(),
        dim: data.p,
        mean,
        lower,
        upper,
        level: cfg.level,
        kind: SummaryKind::Pointwise,
        radius: None,
    };
    Ok(GpFit {
        covariance: cov,
        summary,
        psi_draws,
        sigma_draws,
        acceptance_psi: acc_psi as f64 / cfg.samples as f64,
        acceptance_sigma: estimate.map(|_| acc_sigma as f64 / cfg.samples as f64),
        max_jitter_used,
        runtime: RuntimeRecord {
            seconds_chain,
            seconds_total: start.elapsed().as_secs_f64(),
            factorizations,
            burnin: cfg.burnin,
            samples: cfg.samples,
            n: data.n(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_data(seed: u64, n: usize, f: impl Fn(f64) -> f64, sd: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y = x.iter().map(|&v| f(v) + sd * rng.sample::<f64, _>(StandardNormal)).collect();
        Dataset::univariate(x, y).unwrap()
    }

    fn linspace(g: usize) -> Vec<f64> {
        (0..g).map(|i| i as f64 / (g - 1) as f64).collect()
    }

    fn fixed(degree: usize, h: f64) -> LocalFitConfig {
        LocalFitConfig { degree, kernel: KernelFamily::Epanechnikov, bandwidth: BandwidthChoice::Fixed { value: h } }
    }

    #[test]
    fn nw_constant_data() {
        let d = Dataset::univariate(vec![0.1, 0.4, 0.7, 0.9], vec![2.5; 4]).unwrap();
        let c = nw_estimate(&d, &fixed(0, 0.3), &linspace(21)).unwrap();
        for (v, m) in c.values.iter().zip(&c.missing) {
            assert!(*m || (v - 2.5).abs() < 1e-15);
        }
    }

    #[test]
    fn nw_single_observation_and_missing_flags() {
        let d = Dataset::univariate(vec![0.5], vec![-1.25]).unwrap();
        let c = nw_estimate(&d, &fixed(0, 0.1), &[0.45, 0.5, 0.9]).unwrap();
        assert_eq!(c.values[0], -1.25);
        assert_eq!(c.values[1], -1.25);
        assert!(c.missing[2] && c.values[2].is_nan());
        assert_eq!(c.n_missing(), 1);
    }

    #[test]
    fn nw_matches_double_loop() {
        let d = random_data(3, 80, |x| x.sin(), 0.3);
        let grid = linspace(37);
        let h = 0.15;
        let c = nw_estimate(&d, &fixed(0, h), &grid).unwrap();
        for (j, &x0) in grid.iter().enumerate() {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..d.n() {
                let r = (x0 - d.x[i]).abs() / h;
                let w = if r < 1.0 { 1.0 - r * r } else { 0.0 };
                num += w * d.y[i];
                den += w;
            }
            assert!((c.values[j] - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn degree_zero_is_nadaraya_watson() {
        for seed in 0..50 {
            let d = random_data(seed, 30, |x| x * x, 0.2);
            let grid = linspace(15);
            let a = nw_estimate(&d, &fixed(0, 0.2), &grid).unwrap();
            let b = local_poly_estimate(&d, &fixed(0, 0.2), &grid).unwrap();
            for (u, v) in a.values.iter().zip(&b.values) {
                assert!(u.to_bits() == v.to_bits() || (u.is_nan() && v.is_nan()));
            }
        }
    }

    #[test]
    fn local_linear_reproduces_lines() {
        let d = random_data(9, 40, |x| 0.3 - 2.0 * x, 0.0);
        for h in [0.12, 0.3, 2.0] {
            let c = local_poly_estimate(&d, &fixed(1, h), &linspace(11)).unwrap();
            for (j, x) in linspace(11).iter().enumerate() {
                if c.missing[j] || c.ridged[j] {
                    continue;
                }
                assert!((c.values[j] - (0.3 - 2.0 * x)).abs() < 1e-9, "h {h} x {x}: {}", c.values[j]);
            }
            if h > 1.0 {
                assert_eq!(c.n_missing(), 0);
                assert!(c.ridged.iter().all(|r| !r));
            }
        }
    }

    #[test]
    fn singular_local_system_is_ridged() {
        // two coincident points: a local line is not identified
        let d = Dataset::univariate(vec![0.5, 0.5, 0.9], vec![1.0, 3.0, 0.0]).unwrap();
        let c = local_poly_estimate(&d, &fixed(1, 0.1), &[0.5]).unwrap();
        assert!(c.ridged[0]);
        assert!((c.values[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn cross_validated_local_linear_on_sine() {
        let d = random_data(21, 500, |x| (2.0 * std::f64::consts::PI * x).sin(), 0.1);
        let cfg = LocalFitConfig::default();
        let grid = linspace(101);
        let c = local_poly_estimate(&d, &cfg, &grid).unwrap();
        assert_eq!(c.cv_scores.len(), 20);
        let mse = grid
            .iter()
            .zip(&c.values)
            .map(|(&x, v)| (v - (2.0 * std::f64::consts::PI * x).sin()).powi(2))
            .sum::<f64>()
            / grid.len() as f64;
        assert!(mse < 5e-3, "mse {mse}");
    }

    #[test]
    fn local_band_brackets_estimate() {
        let d = random_data(2, 200, |x| x.cos(), 0.1);
        let (c, s) = local_poly_band(&d, &fixed(1, 0.2), &linspace(21), 0.95).unwrap();
        for j in 0..21 {
            assert!(s.lower[j] < c.values[j] && c.values[j] < s.upper[j]);
        }
    }

    #[test]
    fn covariance_values() {
        for cov in GpCovariance::ALL {
            assert_eq!(gp_covariance(cov, 0.0, 0.7).unwrap(), 1.0);
            let mut prev = 1.0;
            for i in 1..200 {
                let v = cov.eval(i as f64 * 0.01, 0.3);
                assert!(v > 0.0 && v <= prev);
                prev = v;
            }
        }
        assert!((GpCovariance::SquaredExponential.eval(0.4, 0.4) - (-1f64).exp()).abs() < 1e-15);
        let s3 = 3f64.sqrt();
        let m32 = GpCovariance::Matern32.eval(1.3, 1.3);
        assert!((m32 - (1.0 + s3) * (-s3).exp()).abs() < 1e-15);
        assert!((m32 - 0.48335).abs() < 1e-5);
        assert!(gp_covariance(GpCovariance::Matern52, -1.0, 1.0).is_err());
    }

    #[test]
    fn marginal_likelihood_matches_dense_formula() {
        let d = random_data(4, 20, |x| x.sin(), 0.1);
        let (psi, sigma) = (0.3, 0.2);
        for cov in GpCovariance::ALL {
            let n = d.n();
            let a = DMatrix::from_fn(n, n, |i, j| cov.eval((d.x[i] - d.x[j]).abs(), psi) + if i == j { sigma * sigma } else { 0.0 });
            let inv = a.clone().try_inverse().unwrap();
            let y = DVector::from_column_slice(&d.y);
            let quad = (y.transpose() * &inv * &y)[(0, 0)];
            let oracle = -0.5 * quad - 0.5 * a.determinant().ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            let got = gp_marginal_loglik(&d, cov, psi, sigma).unwrap();
            assert!((got - oracle).abs() < 1e-8, "{cov:?}: {got} vs {oracle}");
        }
    }

    #[test]
    fn interpolates_noise_free_data() {
        let d = Dataset::univariate(vec![0.2, 0.7], vec![1.5, -0.5]).unwrap();
        let f = gp_factor(&d, GpCovariance::Matern52, 0.4, 0.0, 1e-12, 1e-2).unwrap();
        let (m, v) = f.mean_var(&d, GpCovariance::Matern52, &[0.2, 0.7]);
        assert!((m[0] - 1.5).abs() < 1e-8 && (m[1] + 0.5).abs() < 1e-8);
        assert!(v.iter().all(|&v| (0.0..1e-8).contains(&v)));
    }

    #[test]
    fn gp_chain_is_seeded_and_fits() {
        let d = random_data(8, 120, |x| (2.0 * std::f64::consts::PI * x).sin(), 0.1);
        let cfg = GpConfig { burnin: 100, samples: 100, seed: 3, ..GpConfig::default() };
        let grid = linspace(41);
        let a = rescaled_gp_fit(&d, &cfg, &grid).unwrap();
        let b = rescaled_gp_fit(&d, &cfg, &grid).unwrap();
        assert_eq!(a.psi_draws, b.psi_draws);
        assert_eq!(a.summary.mean, b.summary.mean);
        assert_eq!(a.runtime.factorizations, 201);
        let mse = grid
            .iter()
            .zip(&a.summary.mean)
            .map(|(&x, v)| (v - (2.0 * std::f64::consts::PI * x).sin()).powi(2))
            .sum::<f64>()
            / 41.0;
        assert!(mse < 5e-3, "mse {mse}");
        for j in 0..41 {
            assert!(a.summary.lower[j] <= a.summary.mean[j] && a.summary.mean[j] <= a.summary.upper[j]);
        }
    }

    #[test]
    fn estimated_noise_mode_runs() {
        let d = random_data(5, 60, |x| x, 0.3);
        let cfg = GpConfig {
            burnin: 100,
            samples: 50,
            noise: GpNoise::Estimated { shape: 2.0, scale: 0.1, init_sd: 0.5 },
            ..GpConfig::default()
        };
        let f = rescaled_gp_fit(&d, &cfg, &linspace(5)).unwrap();
        let s = f.sigma_draws.iter().sum::<f64>() / 50.0;
        assert!(s > 0.1 && s < 0.6, "{s}");
        assert!(f.acceptance_sigma.is_some());
    }
}
