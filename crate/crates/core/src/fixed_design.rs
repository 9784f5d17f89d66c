//! Fixed-design model: `K`, `h = 2/K` and centers `μ_k = μ*_k` are fixed,
//! `ξ | σ ~ N(0, n² σ² I)` and `σ² ~ InvGamma(a_σ/2, b_σ/2)` (density
//! `∝ (σ²)^{-a_σ/2-1} exp(-b_σ / (2σ²))`).
//!
//! The posterior is available in closed form. With `A = ΨᵀΨ + n⁻² I` and
//! `m = A⁻¹ Ψᵀ y`,
//!
//! ```text
//! ξ | σ², y ~ N(m, σ² A⁻¹)
//! σ² | y    ~ InvGamma(a_σ/2 + n/2, b_σ/2 + (yᵀy - yᵀΨ m)/2)
//! ```
//!
//! where the scale update is the quadratic form `yᵀ (I + n² ΨΨᵀ)⁻¹ y` of the
//! marginal `y | σ² ~ N(0, σ² (I + n² ΨΨᵀ))`, rewritten with the Woodbury
//! identity. Integrating out `σ²`, `f(x) = ψ(x)ᵀξ` is Student-t with
//! `2 a'` degrees of freedom, location `ψ(x)ᵀm` and squared scale
//! `(b'/a') ψ(x)ᵀ A⁻¹ ψ(x)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::Dataset;
use crate::dist::inv_gamma;
use crate::error::{config_err, domain_err, KmpError, Result};
use crate::grid::{check_point, PartitionGrid};
use crate::kernel::KernelFamily;
use crate::model::{KmpParams, Workspace};
use crate::posterior::{CredibleSummary, SummaryKind};
use crate::prior::{CoefPrior, PriorConfig, SigmaPrior};
use crate::sampler::{AcceptanceRates, Draw, PosteriorDraws, SparseBasis};

/// `⌈(n / log n)^{1/(2α+p)}⌉`.
pub fn choose_kn(n: usize, alpha: f64, p: usize) -> Result<usize> {
    if n < 2 || !(alpha > 0.0) || p == 0 {
        return Err(config_err(format!("K_n rule needs n >= 2, alpha > 0, p >= 1 (got n={n}, alpha={alpha}, p={p})")));
    }
    let nf = n as f64;
    let base = nf / nf.ln();
    Ok((base.powf(1.0 / (2.0 * alpha + p as f64)).ceil() as usize).max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedDesignConfig {
    /// Declared smoothness used by the `K_n` rule.
    pub alpha: f64,
    pub degree: usize,
    /// Overrides the `K_n` rule.
    pub k: Option<usize>,
    pub kernel: KernelFamily,
    pub a_sigma: f64,
    pub b_sigma: f64,
}

impl Default for FixedDesignConfig {
    fn default() -> Self {
        Self { alpha: 1.0, degree: 2, k: None, kernel: KernelFamily::Bump, a_sigma: 2.0, b_sigma: 2.0 }
    }
}

impl FixedDesignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_sigma >= 2.0 && self.b_sigma >= 2.0) {
            return Err(config_err(format!("a_sigma and b_sigma must be >= 2, got ({}, {})", self.a_sigma, self.b_sigma)));
        }
        if self.k == Some(0) {
            return Err(config_err("K must be positive"));
        }
        Ok(())
    }

    pub fn resolve_k(&self, n: usize, p: usize) -> Result<usize> {
        match self.k {
            Some(k) => Ok(k),
            None => choose_kn(n, self.alpha, p),
        }
    }

    /// Parameters with the fixed centers and `h = 2/K`; coefficients zero.
    pub fn template(&self, n: usize, p: usize) -> Result<KmpParams> {
        let k = self.resolve_k(n, p)?;
        KmpParams::centered(PartitionGrid::new(k, p)?, self.degree, self.kernel, 2.0, 1.0)
    }

    /// Sampler prior that reproduces this model: centers and bandwidth are
    /// frozen (zero steps), coefficients are `N(0, n² σ²)` with a box far
    /// outside the posterior, and `σ²` has the matching inverse gamma.
    pub fn pinned_prior(&self, n: usize) -> PriorConfig {
        PriorConfig {
            coef_bound: 1e12,
            degree: self.degree,
            kernel: self.kernel,
            kh_min: 1.5,
            kh_max: 2.5,
            sigma_min: 1e-6,
            sigma_max: 1e6,
            coef_prior: CoefPrior::SigmaScaled { scale: n as f64 },
            sigma_prior: SigmaPrior::InverseGamma { shape: self.a_sigma / 2.0, scale: self.b_sigma / 2.0 },
            step_offset: 0.0,
            step_kh: Some(0.0),
            ..PriorConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConjugatePosterior {
    pub template: KmpParams,
    pub n: usize,
    /// Posterior mean of `ξ`.
    pub mean: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    /// Shape and scale of the inverse-gamma posterior on `σ²`.
    pub shape: f64,
    pub scale: f64,
}

impl ConjugatePosterior {
    /// Posterior mean of `σ²` (infinite when the shape is at most 1).
    pub fn sigma2_mean(&self) -> f64 {
        if self.shape > 1.0 {
            self.scale / (self.shape - 1.0)
        } else {
            f64::INFINITY
        }
    }

    fn basis_vector(&self, x: &[f64], ws: &mut Workspace, row: &mut Vec<(usize, f64)>) -> Result<DVector<f64>> {
        check_point(x, self.template.dim())?;
        self.template.basis_row(x, ws, row)?;
        let mut v = DVector::zeros(self.mean.len());
        for &(c, val) in row.iter() {
            v[c] = val;
        }
        Ok(v)
    }

    /// Posterior mean of `f` at each row of the `G × p` grid.
    pub fn mean_curve(&self, grid: &[f64]) -> Result<Vec<f64>> {
        let mut params = self.template.clone();
        params.coefs.clone_from(&self.mean);
        params.eval_many(grid)
    }

    /// Exact pointwise credible band from the Student-t marginal of `f(x)`.
    pub fn pointwise_band(&self, grid: &[f64], level: f64) -> Result<CredibleSummary> {
        if !(level > 0.0 && level < 1.0) {
            return Err(domain_err(format!("level must lie in (0, 1), got {level}")));
        }
        let p = self.template.dim();
        let dof = 2.0 * self.shape;
        let t = StudentsT::new(0.0, 1.0, dof).map_err(|e| KmpError::Numerical(e.to_string()))?;
        let q = t.inverse_cdf(0.5 + 0.5 * level);
        let mut ws = Workspace::default();
        let mut row = Vec::new();
        let mut mean = Vec::new();
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        let l = self.chol.l();
        for x in grid.chunks(p) {
            let psi = self.basis_vector(x, &mut ws, &mut row)?;
            let m = psi.dot(&DVector::from_column_slice(&self.mean));
            let w = l.solve_lower_triangular(&psi).ok_or_else(|| KmpError::Numerical("triangular solve failed".into()))?;
            let sd = (self.scale / self.shape * w.norm_squared()).sqrt();
            mean.push(m);
            lower.push(m - q * sd);
            upper.push(m + q * sd);
        }
        Ok(CredibleSummary {
            grid: grid.to_vec(),
            dim: p,
            mean,
            lower,
            upper,
            level,
            kind: SummaryKind::Pointwise,
            radius: None,
        })
    }

    /// Independent draws `(σ², ξ)` from the joint posterior, packaged like a
    /// chain (log-likelihood fields are zero).
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> PosteriorDraws {
        let lt = self.chol.l().transpose();
        let mean = DVector::from_column_slice(&self.mean);
        let draws = (0..count)
            .map(|_| {
                let s2 = inv_gamma(rng, self.shape, self.scale);
                let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                let noise = lt.solve_upper_triangular(&z).expect("nonsingular factor");
                let xi = &mean + noise * s2.sqrt();
                Draw {
                    bandwidth: self.template.bandwidth,
                    centers: self.template.centers.clone(),
                    coefs: xi.as_slice().to_vec(),
                    sigma: s2.sqrt(),
                    beta: Vec::new(),
                    loglik: 0.0,
                    logpost: 0.0,
                }
            })
            .collect();
        PosteriorDraws {
            template: self.template.clone(),
            draws,
            acceptance: AcceptanceRates::default(),
            beta_names: Vec::new(),
        }
    }
}

/// Closed-form posterior of the fixed-design model.
pub fn conjugate_fit(data: &Dataset, cfg: &FixedDesignConfig) -> Result<ConjugatePosterior> {
    cfg.validate()?;
    data.validate()?;
    let n = data.n();
    if n == 0 {
        return Err(config_err("fixed-design fit needs at least one observation"));
    }
    let template = cfg.template(n.max(2), data.p)?;
    conjugate_fit_with(data, template, cfg.a_sigma, cfg.b_sigma)
}

/// Closed-form posterior for a given basis template (centers, bandwidth).
pub fn conjugate_fit_with(data: &Dataset, template: KmpParams, a_sigma: f64, b_sigma: f64) -> Result<ConjugatePosterior> {
    let n = data.n();
    let basis = SparseBasis::build(&template, data, &mut Workspace::default())?;
    let (mut a, rhs) = basis.normal_equations(&data.y);
    let ridge = 1.0 / (n as f64 * n as f64);
    for j in 0..a.nrows() {
        a[(j, j)] += ridge;
    }
    let chol = DMatrix::cholesky(a).ok_or_else(|| KmpError::Numerical("posterior precision is not positive definite".into()))?;
    let mean = chol.solve(&rhs);
    let yty: f64 = data.y.iter().map(|v| v * v).sum();
    let quad = (yty - rhs.dot(&mean)).max(0.0);
    Ok(ConjugatePosterior {
        template,
        n,
        mean: mean.as_slice().to_vec(),
        chol,
        shape: a_sigma / 2.0 + n as f64 / 2.0,
        scale: b_sigma / 2.0 + quad / 2.0,
    })
}

/// `[(1/n) Σ_i (f(x_i) - f₀(x_i))²]^{1/2}` over the rows of `design`.
pub fn empirical_l2(f: impl Fn(&[f64]) -> f64, f0: impl Fn(&[f64]) -> f64, design: &[f64], p: usize) -> Result<f64> {
    if design.is_empty() || p == 0 || !design.len().is_multiple_of(p) {
        return Err(domain_err("design must be a nonempty n × p array"));
    }
    let n = design.len() / p;
    let ss: f64 = design.chunks(p).map(|x| (f(x) - f0(x)).powi(2)).sum();
    Ok((ss / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kn_rule() {
        assert_eq!(choose_kn(1000, 1.0, 1).unwrap(), 6);
        assert_eq!(choose_kn(250, 1.0, 1).unwrap(), 4);
        assert_eq!(choose_kn(4000, 1.0, 1).unwrap(), 8);
        let mut prev = 0;
        for n in (100..=100_000).step_by(97) {
            let k = choose_kn(n, 1.5, 2).unwrap();
            assert!(k >= prev);
            prev = k;
        }
        assert!(choose_kn(1, 1.0, 1).is_err());
    }

    #[test]
    fn empirical_l2_basics() {
        let design = [0.1, 0.5, 0.9];
        assert_eq!(empirical_l2(|x| x[0], |x| x[0], &design, 1).unwrap(), 0.0);
        let d = empirical_l2(|x| x[0] + 0.3, |x| x[0], &design, 1).unwrap();
        assert!((d - 0.3).abs() < 1e-15);
    }

    #[test]
    fn interpolation_limit() {
        let cfg = FixedDesignConfig { k: Some(4), degree: 1, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..2000).map(|_| rng.random_range(0.0..1.0)).collect();
        let template = cfg.template(2000, 1).unwrap();
        let truth: Vec<f64> = (0..template.n_coefs()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut gen = template.clone();
        gen.coefs = truth.clone();
        let y = gen.eval_many(&x).unwrap();
        let post = conjugate_fit(&Dataset::univariate(x, y).unwrap(), &cfg).unwrap();
        for (a, b) in post.mean.iter().zip(&truth) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn single_basis_toy() {
        // K = 1, m = 0: ψ ≡ 1, so the mean is y₁ / (1 + n⁻²) = y₁ / 2 at n = 1
        let cfg = FixedDesignConfig { k: Some(1), degree: 0, ..Default::default() };
        let data = Dataset::univariate(vec![0.4], vec![3.0]).unwrap();
        let post = conjugate_fit(&data, &cfg).unwrap();
        assert!((post.mean[0] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn mean_is_linear_in_y() {
        let cfg = FixedDesignConfig { k: Some(5), degree: 1, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let y1: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y2: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y3: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let fit = |y: Vec<f64>| conjugate_fit(&Dataset::univariate(x.clone(), y).unwrap(), &cfg).unwrap().mean;
        let (m1, m2, m3) = (fit(y1), fit(y2), fit(y3));
        for i in 0..m1.len() {
            assert!((m3[i] - (2.0 * m1[i] - 3.0 * m2[i])).abs() < 1e-9);
        }
    }
}
