//! Partial linear model `y_i = z_iᵀβ + η(x_i) + e_i`.
//!
//! Each sweep draws `β` from its exact Gaussian conditional given `η`, then
//! runs one nonparametric sweep on the partial residuals `y - Zβ`. The noise
//! scale follows the prior configuration: a fixed unit scale reproduces the
//! standard model, an inverse-gamma prior gives the practical variant.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dist::quantile_in_place;
use crate::error::{config_err, KmpError, Result};
use crate::prior::{log_beta_density, sample_beta, PriorConfig, SigmaPrior};
use crate::sampler::{initial_params, McmcConfig, PosteriorDraws, Sampler};

/// Prior configuration with the noise scale fixed at 1.
pub fn unit_noise(prior: &PriorConfig) -> PriorConfig {
    PriorConfig {
        sigma_prior: SigmaPrior::Fixed { value: 1.0 },
        sigma_min: prior.sigma_min.min(1.0),
        sigma_max: prior.sigma_max.max(1.0),
        ..prior.clone()
    }
}

/// Precomputed pieces of the `β` conditional.
pub struct BetaBlock {
    ztz: DMatrix<f64>,
    q: usize,
}

impl BetaBlock {
    pub fn new(data: &Dataset) -> Result<Self> {
        if data.q == 0 {
            return Err(config_err("the partial linear model needs linear covariates"));
        }
        let q = data.q;
        let mut ztz = DMatrix::zeros(q, q);
        for i in 0..data.n() {
            let z = data.z_row(i);
            for a in 0..q {
                for b in 0..q {
                    ztz[(a, b)] += z[a] * z[b];
                }
            }
        }
        Ok(Self { ztz, q })
    }

    /// Mean and Cholesky factor of the precision of `β | η, σ`:
    /// precision `I/τ² + ZᵀZ/σ²`, mean `precision⁻¹ Zᵀ(y - η)/σ²`.
    pub fn conditional(&self, data: &Dataset, eta: &[f64], sigma: f64, beta_sd: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let s2 = sigma * sigma;
        let mut prec = &self.ztz / s2;
        for j in 0..self.q {
            prec[(j, j)] += 1.0 / (beta_sd * beta_sd);
        }
        let mut rhs = DVector::zeros(self.q);
        for (i, &e) in eta.iter().enumerate().take(data.n()) {
            let r = data.y[i] - e;
            for (a, &z) in data.z_row(i).iter().enumerate() {
                rhs[a] += z * r;
            }
        }
        rhs /= s2;
        let chol = prec.cholesky().ok_or_else(|| KmpError::Numerical("beta precision is not positive definite".into()))?;
        Ok((chol.solve(&rhs), chol.l()))
    }

    /// Exact draw of `β | η, σ`.
    pub fn draw<R: Rng + ?Sized>(&self, data: &Dataset, eta: &[f64], sigma: f64, beta_sd: f64, rng: &mut R) -> Result<Vec<f64>> {
        let (mean, l) = self.conditional(data, eta, sigma, beta_sd)?;
        let z = DVector::from_fn(self.q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = l.transpose().solve_upper_triangular(&z).ok_or_else(|| KmpError::Numerical("singular factor".into()))?;
        Ok((mean + noise).as_slice().to_vec())
    }
}

/// Exact conditional draw of `β` given the current values `η(x_i)`.
pub fn gibbs_beta<R: Rng + ?Sized>(data: &Dataset, eta: &[f64], sigma: f64, beta_sd: f64, rng: &mut R) -> Result<Vec<f64>> {
    BetaBlock::new(data)?.draw(data, eta, sigma, beta_sd, rng)
}

fn partial_residuals(data: &Dataset, beta: &[f64]) -> Vec<f64> {
    (0..data.n())
        .map(|i| data.y[i] - data.z_row(i).iter().zip(beta).map(|(z, b)| z * b).sum::<f64>())
        .collect()
}

/// Joint chain over `(β, η)` at fixed `K`. Deterministic given `cfg.seed`.
pub fn run_plm_chain(cfg: &McmcConfig, prior: &PriorConfig, k: usize, data: &Dataset) -> Result<PosteriorDraws> {
    cfg.validate()?;
    prior.validate()?;
    let block = BetaBlock::new(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut beta = sample_beta(prior, data.q, &mut rng);
    let target = partial_residuals(data, &beta);
    let params = initial_params(cfg, prior, k, data, &target, &mut rng)?;
    let mut template = params.clone();
    let mut sampler = Sampler::new(data, prior, params, target)?;
    let draws = sampler.run(cfg, &mut rng, |s, r| {
        beta = block.draw(data, s.fitted(), s.params.sigma, prior.beta_sd, r)?;
        s.set_target(partial_residuals(data, &beta));
        Ok((beta.clone(), log_beta_density(prior, &beta)))
    })?;
    template.coefs.iter_mut().for_each(|c| *c = 0.0);
    Ok(PosteriorDraws { template, draws, acceptance: sampler.acceptance(), beta_names: data.z_names.clone() })
}

/// Marginal posterior of one coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

/// Posterior mean, standard deviation and equal-tailed interval of each
/// `β_j`.
pub fn beta_summary(draws: &PosteriorDraws, level: f64) -> Result<Vec<BetaSummary>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(config_err(format!("level must lie in (0, 1), got {level}")));
    }
    if draws.is_empty() {
        return Err(config_err("no draws"));
    }
    let t = draws.len() as f64;
    Ok((0..draws.q())
        .map(|j| {
            let mut v: Vec<f64> = draws.draws.iter().map(|d| d.beta[j]).collect();
            let mean = v.iter().sum::<f64>() / t;
            let var = v.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / (t - 1.0).max(1.0);
            BetaSummary {
                name: draws.beta_names.get(j).cloned().unwrap_or_else(|| format!("z{}", j + 1)),
                mean,
                sd: var.sqrt(),
                lower: quantile_in_place(&mut v, 0.5 - 0.5 * level),
                upper: quantile_in_place(&mut v, 0.5 + 0.5 * level),
                level,
            }
        })
        .collect())
}

/// Posterior summary of `β` and the centering quantities of its normal
/// limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvmDiagnostic {
    pub q: usize,
    /// `n^{-1/2} Σ_i (E zzᵀ)⁻¹ z_i (y_i - η₀(x_i) - z_iᵀβ₀)`.
    pub delta_n: Vec<f64>,
    /// Same sum with prefactor `1/n`, as sometimes written.
    pub delta_n_literal: Vec<f64>,
    /// `E zzᵀ` used (row-major `q × q`).
    pub ezz: Vec<f64>,
    pub ezz_inv: Vec<f64>,
    /// Mean over draws of `√n (β - β₀)`.
    pub scaled_mean: Vec<f64>,
    /// Covariance over draws of `√n (β - β₀)` (row-major).
    pub scaled_cov: Vec<f64>,
    /// `max_j |scaled_mean_j - delta_n_j|`.
    pub mean_discrepancy: f64,
    /// Diagonal ratios `scaled_cov_jj / (E zzᵀ)⁻¹_jj`.
    pub cov_ratio: Vec<f64>,
    pub posterior_mean: Vec<f64>,
    pub posterior_sd: Vec<f64>,
}

/// `E zzᵀ` for `z ~ Unif([-1, 1]^q)`: `I/3`.
pub fn uniform_ezz(q: usize) -> Vec<f64> {
    let mut m = vec![0.0; q * q];
    for j in 0..q {
        m[j * q + j] = 1.0 / 3.0;
    }
    m
}

/// `ZᵀZ / n`.
pub fn empirical_ezz(data: &Dataset) -> Vec<f64> {
    let q = data.q;
    let mut m = vec![0.0; q * q];
    for i in 0..data.n() {
        let z = data.z_row(i);
        for a in 0..q {
            for b in 0..q {
                m[a * q + b] += z[a] * z[b];
            }
        }
    }
    let n = data.n() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Compares the posterior of `β` with its normal limit. `ezz` defaults to
/// the empirical `ZᵀZ/n`.
pub fn bvm_diagnostic(
    draws: &PosteriorDraws,
    data: &Dataset,
    beta0: &[f64],
    eta0: impl Fn(&[f64]) -> f64,
    ezz: Option<Vec<f64>>,
) -> Result<BvmDiagnostic> {
    let q = data.q;
    if beta0.len() != q || draws.q() != q || draws.is_empty() {
        return Err(config_err("beta dimensions do not match"));
    }
    let ezz = ezz.unwrap_or_else(|| empirical_ezz(data));
    if ezz.len() != q * q {
        return Err(config_err("E zz' has the wrong shape"));
    }
    let ezz_m = DMatrix::from_row_slice(q, q, &ezz);
    let inv = ezz_m
        .clone()
        .cholesky()
        .ok_or_else(|| KmpError::Numerical("E zz' is singular or not positive definite".into()))?
        .inverse();
    let n = data.n() as f64;
    let mut sum = DVector::zeros(q);
    for i in 0..data.n() {
        let z = DVector::from_column_slice(data.z_row(i));
        let r = data.y[i] - eta0(data.x_row(i)) - z.dot(&DVector::from_column_slice(beta0));
        sum += &inv * z * r;
    }
    let delta_n: Vec<f64> = (&sum / n.sqrt()).as_slice().to_vec();
    let delta_n_literal: Vec<f64> = (&sum / n).as_slice().to_vec();
    let t = draws.len() as f64;
    let scaled: Vec<Vec<f64>> = draws
        .draws
        .iter()
        .map(|d| d.beta.iter().zip(beta0).map(|(b, b0)| n.sqrt() * (b - b0)).collect())
        .collect();
    let mut mean = vec![0.0; q];
    for s in &scaled {
        for j in 0..q {
            mean[j] += s[j] / t;
        }
    }
    let mut cov = vec![0.0; q * q];
    for s in &scaled {
        for a in 0..q {
            for b in 0..q {
                cov[a * q + b] += (s[a] - mean[a]) * (s[b] - mean[b]) / (t - 1.0).max(1.0);
            }
        }
    }
    let mean_discrepancy = mean.iter().zip(&delta_n).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let cov_ratio = (0..q).map(|j| cov[j * q + j] / inv[(j, j)]).collect();
    let posterior_mean = (0..q).map(|j| beta0[j] + mean[j] / n.sqrt()).collect();
    let posterior_sd = (0..q).map(|j| cov[j * q + j].sqrt() / n.sqrt()).collect();
    Ok(BvmDiagnostic {
        q,
        delta_n,
        delta_n_literal,
        ezz,
        ezz_inv: inv.transpose().as_slice().to_vec(),
        scaled_mean: mean,
        scaled_cov: cov,
        mean_discrepancy,
        cov_ratio,
        posterior_mean,
        posterior_sd,
    })
}
