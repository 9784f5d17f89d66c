//! Hierarchical prior on `(K, h, μ, ξ, σ)` and the linear coefficient `β`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::dist::{truncated_inv_gamma, truncated_normal};
use crate::error::{config_err, Result};
use crate::grid::PartitionGrid;
use crate::kernel::KernelFamily;
use crate::model::KmpParams;

/// Prior on the number of blocks per axis, supported on `{1, 2, ...}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum KPrior {
    /// `P(K = k) = ρ (1 - ρ)^{k-1}`; tail `(1 - ρ)^{x-1}`.
    Geometric { rho: f64 },
    /// `K - 1 ~ Poisson(λ)`.
    Poisson { lambda: f64 },
}

/// Prior on each coefficient `ξ_ks`, always restricted to `[-B, B]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum CoefPrior {
    Uniform,
    /// `N(0, sd²)` truncated to `[-B, B]`.
    Normal { sd: f64 },
    /// `N(0, scale² σ²)` given the noise scale, truncated to `[-B, B]`.
    SigmaScaled { scale: f64 },
}

/// Prior on the center offsets `μ̃_k ∈ [-1, 1]^p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum CenterPrior {
    #[default]
    Uniform,
}

/// Prior on the noise scale, restricted to `[σ̲, σ̄]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum SigmaPrior {
    /// `σ² ~ InvGamma(shape, scale)`, density `∝ (σ²)^{-shape-1} exp(-scale/σ²)`.
    InverseGamma { shape: f64, scale: f64 },
    /// Point mass; the noise scale is not sampled.
    Fixed { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Coefficient bound `B`.
    pub coef_bound: f64,
    /// Polynomial degree `m`.
    pub degree: usize,
    pub kernel: KernelFamily,
    /// Bounds on the scaled bandwidth `Kh`.
    pub kh_min: f64,
    pub kh_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub k_prior: KPrior,
    pub coef_prior: CoefPrior,
    pub center_prior: CenterPrior,
    pub sigma_prior: SigmaPrior,
    /// Standard deviation of the Gaussian prior on each `β_j`.
    pub beta_sd: f64,
    /// Random-walk step on each offset coordinate `μ̃_kj`.
    pub step_offset: f64,
    /// Random-walk step on `Kh`; `None` means `0.05 (kh_max - kh_min)`.
    pub step_kh: Option<f64>,
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            coef_bound: 50.0,
            degree: 2,
            kernel: KernelFamily::Bump,
            kh_min: 1.2,
            kh_max: 2.0,
            sigma_min: 1e-3,
            sigma_max: 10.0,
            k_prior: KPrior::Geometric { rho: 0.5 },
            coef_prior: CoefPrior::Normal { sd: 10.0 },
            center_prior: CenterPrior::Uniform,
            sigma_prior: SigmaPrior::InverseGamma { shape: 1.0, scale: 1.0 },
            beta_sd: 10.0,
            step_offset: 0.1,
            step_kh: None,
            k_min: 6,
            k_max: 15,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(self.coef_bound.is_finite() && self.coef_bound >= 0.0) {
            return Err(config_err(format!("coef_bound must be finite and >= 0, got {}", self.coef_bound)));
        }
        if !(self.kh_min > 1.0 && self.kh_min < self.kh_max && self.kh_max.is_finite()) {
            return Err(config_err(format!(
                "bandwidth bounds need 1 < kh_min < kh_max, got [{}, {}]",
                self.kh_min, self.kh_max
            )));
        }
        if !(pos(self.sigma_min) && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(config_err(format!(
                "noise bounds need 0 < sigma_min < sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        match self.k_prior {
            KPrior::Geometric { rho } if !(rho > 0.0 && rho < 1.0) => {
                return Err(config_err(format!("geometric rho must lie in (0, 1), got {rho}")))
            }
            KPrior::Poisson { lambda } if !pos(lambda) => {
                return Err(config_err(format!("poisson lambda must be positive, got {lambda}")))
            }
            _ => {}
        }
        match self.coef_prior {
            CoefPrior::Normal { sd } if !pos(sd) => return Err(config_err(format!("coefficient sd must be positive, got {sd}"))),
            CoefPrior::SigmaScaled { scale } if !pos(scale) => {
                return Err(config_err(format!("coefficient scale must be positive, got {scale}")))
            }
            _ => {}
        }
        match self.sigma_prior {
            SigmaPrior::InverseGamma { shape, scale } if !(pos(shape) && scale.is_finite() && scale >= 0.0) => {
                return Err(config_err(format!("inverse-gamma needs shape > 0 and scale >= 0, got ({shape}, {scale})")))
            }
            SigmaPrior::Fixed { value } if !(value >= self.sigma_min && value <= self.sigma_max) => {
                return Err(config_err(format!("fixed sigma {value} outside [sigma_min, sigma_max]")))
            }
            _ => {}
        }
        if !pos(self.beta_sd) {
            return Err(config_err(format!("beta_sd must be positive, got {}", self.beta_sd)));
        }
        if !(self.step_offset.is_finite() && self.step_offset >= 0.0) {
            return Err(config_err("step_offset must be finite and >= 0"));
        }
        if let Some(s) = self.step_kh {
            if !(s.is_finite() && s >= 0.0) {
                return Err(config_err("step_kh must be finite and >= 0"));
            }
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return Err(config_err(format!("need 1 <= k_min <= k_max, got [{}, {}]", self.k_min, self.k_max)));
        }
        Ok(())
    }

    pub fn step_kh(&self) -> f64 {
        self.step_kh.unwrap_or(0.05 * (self.kh_max - self.kh_min))
    }

    pub fn k_grid(&self) -> Vec<usize> {
        (self.k_min..=self.k_max).collect()
    }

    /// Prior standard deviation of each coefficient given the noise scale,
    /// or `None` for the flat prior.
    pub fn coef_sd(&self, sigma: f64) -> Option<f64> {
        match self.coef_prior {
            CoefPrior::Uniform => None,
            CoefPrior::Normal { sd } => Some(sd),
            CoefPrior::SigmaScaled { scale } => Some(scale * sigma),
        }
    }

    fn sample_coef<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> f64 {
        let b = self.coef_bound;
        match self.coef_sd(sigma) {
            None => {
                if b == 0.0 {
                    0.0
                } else {
                    rng.random_range(-b..=b)
                }
            }
            Some(sd) => truncated_normal(rng, 0.0, sd, -b, b),
        }
    }

    /// Draws the noise scale from its prior.
    pub fn sample_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.sigma_prior {
            SigmaPrior::Fixed { value } => value,
            SigmaPrior::InverseGamma { shape, scale } => {
                let v = truncated_inv_gamma(rng, shape, scale, self.sigma_min.powi(2), self.sigma_max.powi(2));
                v.sqrt().clamp(self.sigma_min, self.sigma_max)
            }
        }
    }

    /// Log prior mass of `K` (exact).
    pub fn log_k_pmf(&self, k: usize) -> f64 {
        if k == 0 {
            return f64::NEG_INFINITY;
        }
        let x = (k - 1) as f64;
        match self.k_prior {
            KPrior::Geometric { rho } => rho.ln() + x * (1.0 - rho).ln(),
            KPrior::Poisson { lambda } => -lambda + x * lambda.ln() - ln_gamma(x + 1.0),
        }
    }

    /// Draws `K` from its prior.
    pub fn sample_k<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self.k_prior {
            KPrior::Geometric { rho } => {
                let u: f64 = rng.random();
                1 + ((1.0 - u).ln() / (1.0 - rho).ln()).floor() as usize
            }
            KPrior::Poisson { lambda } => {
                // inversion; lambda is small in every sensible use
                let u: f64 = rng.random();
                let mut k = 0usize;
                let mut pmf = (-lambda).exp();
                let mut cdf = pmf;
                while u > cdf && k < 10_000 {
                    k += 1;
                    pmf *= lambda / k as f64;
                    cdf += pmf;
                }
                k + 1
            }
        }
    }
}

/// Draws a parameter set at fixed `K` and dimension `p`: offsets from the
/// center prior, `Kh` uniform on its bounds, coefficients and noise scale
/// from their priors.
pub fn sample_prior<R: Rng + ?Sized>(cfg: &PriorConfig, k: usize, p: usize, rng: &mut R) -> Result<KmpParams> {
    cfg.validate()?;
    let grid = PartitionGrid::new(k, p)?;
    let sigma = cfg.sample_sigma(rng);
    let kh = rng.random_range(cfg.kh_min..=cfg.kh_max);
    let mut params = KmpParams::centered(grid, cfg.degree, cfg.kernel, kh, sigma)?;
    let offsets: Vec<f64> = (0..params.centers.len()).map(|_| rng.random_range(-1.0..=1.0)).collect();
    params.set_offsets(&offsets);
    for c in params.coefs.iter_mut() {
        *c = cfg.sample_coef(sigma, rng);
    }
    Ok(params)
}

/// Log prior density of `params` up to an additive constant that depends on
/// `K` only; `-inf` outside the support.
///
/// The noise term is the density of `σ` (the `σ²` density times the Jacobian
/// `2σ`). Under a fixed noise prior the term is zero at the fixed value.
pub fn log_prior_density(cfg: &PriorConfig, params: &KmpParams) -> f64 {
    let kh = params.kh();
    let tol = 1e-12;
    if !(kh >= cfg.kh_min - tol && kh <= cfg.kh_max + tol) {
        return f64::NEG_INFINITY;
    }
    if params.offsets().iter().any(|o| !(o.abs() <= 1.0 + 1e-9)) {
        return f64::NEG_INFINITY;
    }
    let b = cfg.coef_bound;
    if params.coefs.iter().any(|c| !(c.abs() <= b)) {
        return f64::NEG_INFINITY;
    }
    let sigma = params.sigma;
    let mut lp = cfg.log_k_pmf(params.k());
    match cfg.sigma_prior {
        SigmaPrior::Fixed { value } => {
            if sigma != value {
                return f64::NEG_INFINITY;
            }
        }
        SigmaPrior::InverseGamma { shape, scale } => {
            if !(sigma >= cfg.sigma_min && sigma <= cfg.sigma_max) {
                return f64::NEG_INFINITY;
            }
            let v = sigma * sigma;
            lp += -(shape + 1.0) * v.ln() - scale / v + (2.0 * sigma).ln();
        }
    }
    if let Some(sd) = cfg.coef_sd(sigma) {
        let ss: f64 = params.coefs.iter().map(|c| c * c).sum();
        lp += -0.5 * ss / (sd * sd);
        if matches!(cfg.coef_prior, CoefPrior::SigmaScaled { .. }) {
            lp -= params.coefs.len() as f64 * sd.ln();
        }
    }
    lp
}

/// `Π(K >= x)` for the configured prior on `K`.
pub fn prior_k_tail(cfg: &PriorConfig, x: usize) -> f64 {
    if x <= 1 {
        return 1.0;
    }
    match cfg.k_prior {
        KPrior::Geometric { rho } => (1.0 - rho).powi((x - 1) as i32),
        // P(N >= x - 1) for N ~ Poisson(λ) is the regularized lower gamma P(x - 1, λ)
        KPrior::Poisson { lambda } => gamma_lr((x - 1) as f64, lambda),
    }
}

/// Constants `(b0, b1)` with `-b0 x log^{r0} x <= log Π(K >= x) <= -b1 x log^{r0} x`
/// over `x ∈ [lo, hi]`, where `r0 = 0` for the geometric prior and `r0 = 1`
/// for the Poisson prior. Returned values are the tightest ones on the range.
pub fn tail_envelope(cfg: &PriorConfig, lo: usize, hi: usize) -> (f64, f64) {
    let r0 = match cfg.k_prior {
        KPrior::Geometric { .. } => 0,
        KPrior::Poisson { .. } => 1,
    };
    let mut b0 = 0.0_f64;
    let mut b1 = f64::INFINITY;
    for x in lo.max(2)..=hi {
        let xf = x as f64;
        let scale = if r0 == 0 { xf } else { xf * xf.ln() };
        let ratio = -prior_k_tail(cfg, x).ln() / scale;
        b0 = b0.max(ratio);
        b1 = b1.min(ratio);
    }
    (b0, b1)
}

/// Draws `β ~ N(0, beta_sd² I_q)`.
pub fn sample_beta<R: Rng + ?Sized>(cfg: &PriorConfig, q: usize, rng: &mut R) -> Vec<f64> {
    (0..q).map(|_| cfg.beta_sd * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

pub fn log_beta_density(cfg: &PriorConfig, beta: &[f64]) -> f64 {
    -0.5 * beta.iter().map(|b| b * b).sum::<f64>() / (cfg.beta_sd * cfg.beta_sd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn defaults_are_valid() {
        PriorConfig::default().validate().unwrap();
        assert_eq!(PriorConfig::default().k_grid(), (6..=15).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_bounds() {
        let cfg = PriorConfig { kh_min: 0.9, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = PriorConfig { sigma_min: 2.0, sigma_max: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = PriorConfig { k_prior: KPrior::Geometric { rho: 1.0 }, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn geometric_tail() {
        let cfg = PriorConfig::default();
        assert_eq!(prior_k_tail(&cfg, 1), 1.0);
        assert!((prior_k_tail(&cfg, 3) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn poisson_tail_matches_summation() {
        let cfg = PriorConfig { k_prior: KPrior::Poisson { lambda: 5.0 }, ..Default::default() };
        for x in 1..40 {
            // Π(K >= x) = 1 - Σ_{k < x} pmf(k)
            let below: f64 = (1..x).map(|k| cfg.log_k_pmf(k).exp()).sum();
            let direct = if x < 8 { 1.0 - below } else { (x..400).map(|k| cfg.log_k_pmf(k).exp()).sum() };
            assert!((prior_k_tail(&cfg, x) - direct).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn density_difference_for_normal_coefficient() {
        let cfg = PriorConfig::default();
        let grid = PartitionGrid::new(1, 1).unwrap();
        let mut a = KmpParams::centered(grid, 0, KernelFamily::Bump, 1.5, 1.0).unwrap();
        let mut b = a.clone();
        a.coefs[0] = 0.0;
        b.coefs[0] = 10.0;
        let d = log_prior_density(&cfg, &a) - log_prior_density(&cfg, &b);
        assert!((d - 0.5).abs() < 1e-12);
        b.coefs[0] = 51.0;
        assert_eq!(log_prior_density(&cfg, &b), f64::NEG_INFINITY);
    }

    #[test]
    fn flat_prior_density_is_constant() {
        let cfg = PriorConfig { coef_prior: CoefPrior::Uniform, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = sample_prior(&cfg, 5, 1, &mut rng).unwrap();
        let mut b = sample_prior(&cfg, 5, 1, &mut rng).unwrap();
        a.sigma = 1.0;
        b.sigma = 1.0;
        assert_eq!(log_prior_density(&cfg, &a), log_prior_density(&cfg, &b));
    }

    #[test]
    fn k_sampling_follows_pmf() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for cfg in [
            PriorConfig::default(),
            PriorConfig { k_prior: KPrior::Poisson { lambda: 3.0 }, ..Default::default() },
        ] {
            let n = 40_000;
            let mut counts = [0usize; 6];
            for _ in 0..n {
                let k = cfg.sample_k(&mut rng);
                if k <= 6 {
                    counts[k - 1] += 1;
                }
            }
            for (i, &c) in counts.iter().enumerate() {
                let p = cfg.log_k_pmf(i + 1).exp();
                let se = (p * (1.0 - p) / n as f64).sqrt();
                assert!((c as f64 / n as f64 - p).abs() < 4.0 * se + 1e-9);
            }
        }
    }

    #[test]
    fn geometric_envelope_sandwich() {
        let cfg = PriorConfig::default();
        let (b0, b1) = tail_envelope(&cfg, 2, 100);
        assert!(b0 > 0.0 && b1 > 0.0);
        for x in 2..=100usize {
            let xf = x as f64;
            let lt = prior_k_tail(&cfg, x).ln();
            assert!(lt >= -b0 * xf * xf.ln() - 1e-9);
            assert!(lt <= -b1 * xf + 1e-9);
        }
    }
}
