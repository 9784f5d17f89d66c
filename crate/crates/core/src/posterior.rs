//! Posterior summaries: pointwise bands, L2-credible sets, DIC, selection of
//! `K`, and posterior prediction.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dist::{mixture_quantile, quantile_in_place};
use crate::error::{config_err, domain_err, KmpError, Result};
use crate::grid::check_point;
use crate::model::Workspace;
use crate::par::{map_indexed, Execution};
use crate::sampler::{gaussian_loglik, PosteriorDraws};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryKind {
    Pointwise,
    L2Set,
}

/// Mean curve and band on an evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibleSummary {
    /// `G × dim` row-major grid.
    pub grid: Vec<f64>,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    pub kind: SummaryKind,
    /// L2 radius `γ_n` of the credible set.
    pub radius: Option<f64>,
}

impl CredibleSummary {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean_width(&self) -> f64 {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).sum::<f64>() / self.len() as f64
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(domain_err(format!("level must lie in (0, 1), got {level}")))
    }
}

/// Pointwise means and equal-tailed quantile bands from a `T × G` matrix of
/// curve values. The band is widened to contain the mean where a very skewed
/// sample would leave it outside.
pub fn pointwise_band_from_curves(curves: &[f64], t: usize, grid: &[f64], dim: usize, level: f64) -> Result<CredibleSummary> {
    check_level(level)?;
    if t == 0 {
        return Err(domain_err("no draws to summarize"));
    }
    let g = curves.len() / t;
    let mut mean = Vec::with_capacity(g);
    let mut lower = Vec::with_capacity(g);
    let mut upper = Vec::with_capacity(g);
    let mut col = vec![0.0; t];
    for j in 0..g {
        for (i, c) in col.iter_mut().enumerate() {
            *c = curves[i * g + j];
        }
        let m = col.iter().sum::<f64>() / t as f64;
        let lo = quantile_in_place(&mut col, 0.5 - 0.5 * level);
        let hi = quantile_in_place(&mut col, 0.5 + 0.5 * level);
        mean.push(m);
        lower.push(lo.min(m));
        upper.push(hi.max(m));
    }
    Ok(CredibleSummary { grid: grid.to_vec(), dim, mean, lower, upper, level, kind: SummaryKind::Pointwise, radius: None })
}

/// L2-credible set from a `T × G` matrix of curve values: `f̂` is the
/// pointwise mean, `γ` the `level` quantile of the root-mean-square distances
/// `‖f_t - f̂‖`, and the band is the pointwise envelope of `f̂` and every
/// curve within distance `γ`.
pub fn l2_set_from_curves(curves: &[f64], t: usize, grid: &[f64], dim: usize, level: f64) -> Result<CredibleSummary> {
    check_level(level)?;
    if t < 2 {
        return Err(domain_err("an L2-credible set needs at least 2 draws"));
    }
    let g = curves.len() / t;
    let mut mean = vec![0.0; g];
    for i in 0..t {
        for (m, v) in mean.iter_mut().zip(&curves[i * g..(i + 1) * g]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let dists: Vec<f64> = (0..t)
        .map(|i| {
            let ss: f64 = curves[i * g..(i + 1) * g].iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum();
            (ss / g as f64).sqrt()
        })
        .collect();
    let radius = quantile_in_place(&mut dists.clone(), level);
    let mut lower = mean.clone();
    let mut upper = mean.clone();
    for (i, &d) in dists.iter().enumerate() {
        if d <= radius {
            for j in 0..g {
                let v = curves[i * g + j];
                lower[j] = lower[j].min(v);
                upper[j] = upper[j].max(v);
            }
        }
    }
    Ok(CredibleSummary { grid: grid.to_vec(), dim, mean, lower, upper, level, kind: SummaryKind::L2Set, radius: Some(radius) })
}

pub fn pointwise_band(draws: &PosteriorDraws, grid: &[f64], level: f64) -> Result<CredibleSummary> {
    let curves = draws.eval_grid(grid)?;
    pointwise_band_from_curves(&curves, draws.len(), grid, draws.template.dim(), level)
}

pub fn l2_credible_set(draws: &PosteriorDraws, grid: &[f64], level: f64) -> Result<CredibleSummary> {
    let curves = draws.eval_grid(grid)?;
    l2_set_from_curves(&curves, draws.len(), grid, draws.template.dim(), level)
}

/// One row of a DIC table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DicEntry {
    pub k: usize,
    pub dic: f64,
    /// Mean of `-2 ℓ(θ_t)` over draws.
    pub mean_deviance: f64,
    /// `-2 ℓ(θ̄)`.
    pub plugin_deviance: f64,
    pub p_dic: f64,
    /// The plug-in log-likelihood was not finite and `p_DIC = 2 var(ℓ)` was
    /// used instead.
    pub variance_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DicReport {
    pub table: Vec<DicEntry>,
    pub selected_k: usize,
    /// `K` values whose chains failed, with the error message.
    pub failures: Vec<(usize, String)>,
    /// Which DIC form and plug-in were used.
    pub variant: String,
}

/// Plug-in point `θ̄` of the DIC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DicPlugin {
    /// Posterior mean of the fitted values `z β + f(x)` at the data, with
    /// the posterior mean of `σ`.
    #[default]
    MeanCurve,
    /// Posterior means of `ξ`, center offsets `μ̃`, `Kh`, `σ` (and `β`).
    /// Offsets and `Kh` enter nonlinearly, so this plug-in can fit worse
    /// than a typical draw and drive `p_DIC` negative.
    MeanParameters,
}

impl DicPlugin {
    pub fn describe(self) -> &'static str {
        match self {
            DicPlugin::MeanCurve => {
                "DIC = -2 loglik(theta_bar) + 2 p_DIC, p_DIC = 2 (loglik(theta_bar) - mean_t loglik(theta_t)); \
                 theta_bar = posterior mean fitted values at the data and posterior mean sigma"
            }
            DicPlugin::MeanParameters => {
                "DIC = -2 loglik(theta_bar) + 2 p_DIC, p_DIC = 2 (loglik(theta_bar) - mean_t loglik(theta_t)); \
                 theta_bar = posterior means of xi, center offsets, K*h, sigma (and beta)"
            }
        }
    }
}

/// DIC of one chain with the default plug-in.
pub fn dic(draws: &PosteriorDraws, data: &Dataset) -> Result<DicEntry> {
    dic_with(draws, data, DicPlugin::default())
}

/// Residual sum of squares at the plug-in, `None` when some data point is
/// not covered by any kernel.
fn plugin_ssr(draws: &PosteriorDraws, data: &Dataset, plugin: DicPlugin) -> Option<f64> {
    let t = draws.len();
    let tf = t as f64;
    let q = draws.q();
    let mut ws = Workspace::default();
    let linear = |beta: &[f64], i: usize| -> f64 {
        if q > 0 {
            data.z_row(i).iter().zip(beta).map(|(z, b)| z * b).sum()
        } else {
            0.0
        }
    };
    match plugin {
        DicPlugin::MeanCurve => {
            let mut fitted = vec![0.0; data.n()];
            for d in 0..t {
                let p = draws.params(d);
                let beta = &draws.draws[d].beta;
                for (i, f) in fitted.iter_mut().enumerate() {
                    *f += (linear(beta, i) + p.eval_with(data.x_row(i), &mut ws).ok()?) / tf;
                }
            }
            Some(data.y.iter().zip(&fitted).map(|(y, f)| (y - f) * (y - f)).sum())
        }
        DicPlugin::MeanParameters => {
            let mut bar = draws.template.clone();
            let mut offsets = vec![0.0; bar.centers.len()];
            let mut coefs = vec![0.0; bar.coefs.len()];
            let mut beta = vec![0.0; q];
            let mut kh = 0.0;
            for d in 0..t {
                let p = draws.params(d);
                for (o, v) in offsets.iter_mut().zip(p.offsets()) {
                    *o += v / tf;
                }
                for (c, v) in coefs.iter_mut().zip(&p.coefs) {
                    *c += v / tf;
                }
                for (b, v) in beta.iter_mut().zip(&draws.draws[d].beta) {
                    *b += v / tf;
                }
                kh += p.kh() / tf;
            }
            bar.set_offsets(&offsets);
            bar.coefs = coefs;
            bar.set_kh(kh);
            let mut ssr = 0.0;
            for i in 0..data.n() {
                let r = data.y[i] - linear(&beta, i) - bar.eval_with(data.x_row(i), &mut ws).ok()?;
                ssr += r * r;
            }
            Some(ssr)
        }
    }
}

/// DIC of one chain. A non-finite plug-in log-likelihood falls back to
/// `p_DIC = 2 var_t ℓ(θ_t)` and sets `variance_fallback`.
pub fn dic_with(draws: &PosteriorDraws, data: &Dataset, plugin: DicPlugin) -> Result<DicEntry> {
    let t = draws.len();
    if t == 0 {
        return Err(domain_err("DIC needs at least one draw"));
    }
    let tf = t as f64;
    let sigma = draws.draws.iter().map(|d| d.sigma).sum::<f64>() / tf;
    let lls: Vec<f64> = draws.draws.iter().map(|d| d.loglik).collect();
    let mean_ll = lls.iter().sum::<f64>() / tf;
    let plugin_ll = plugin_ssr(draws, data, plugin).map(|ssr| gaussian_loglik(data.n(), ssr, sigma));
    match plugin_ll {
        Some(pl) if pl.is_finite() => {
            let p_dic = 2.0 * (pl - mean_ll);
            Ok(DicEntry { k: draws.k(), dic: -2.0 * pl + 2.0 * p_dic, mean_deviance: -2.0 * mean_ll, plugin_deviance: -2.0 * pl, p_dic, variance_fallback: false })
        }
        _ => {
            let var = lls.iter().map(|l| (l - mean_ll) * (l - mean_ll)).sum::<f64>() / tf;
            let p_dic = 2.0 * var;
            Ok(DicEntry { k: draws.k(), dic: -2.0 * mean_ll + p_dic, mean_deviance: -2.0 * mean_ll, plugin_deviance: f64::NAN, p_dic, variance_fallback: true })
        }
    }
}

/// Fits one chain per `K` (seed `base_seed + K`, concurrently) and selects
/// the `K` of smallest DIC. `fit` receives `(K, seed)`.
pub fn select_k_with<F>(data: &Dataset, ks: &[usize], base_seed: u64, exec: Execution, fit: F) -> Result<(DicReport, PosteriorDraws)>
where
    F: Fn(usize, u64) -> Result<PosteriorDraws> + Sync + Send,
{
    if ks.is_empty() {
        return Err(config_err("empty K grid"));
    }
    let mut sorted = ks.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(config_err("duplicate K values in the grid"));
    }
    let results = map_indexed(exec, ks.len(), |i| {
        let k = ks[i];
        fit(k, base_seed.wrapping_add(k as u64)).and_then(|d| dic(&d, data).map(|e| (e, d)))
    });
    let mut table = Vec::new();
    let mut failures = Vec::new();
    let mut best: Option<(f64, PosteriorDraws)> = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok((entry, draws)) => {
                let better = best.as_ref().is_none_or(|b| entry.dic < b.0);
                if better {
                    best = Some((entry.dic, draws));
                }
                table.push(entry);
            }
            Err(e) => failures.push((ks[i], e.to_string())),
        }
    }
    let Some((_, draws)) = best else {
        return Err(KmpError::Numerical(format!("every chain failed: {failures:?}")));
    };
    Ok((DicReport { table, selected_k: draws.k(), failures, variant: DicPlugin::default().describe().into() }, draws))
}

/// [`select_k_with`] for the nonparametric model.
pub fn select_k(
    data: &Dataset,
    prior: &crate::prior::PriorConfig,
    cfg: &crate::sampler::McmcConfig,
    ks: &[usize],
    exec: Execution,
) -> Result<(DicReport, PosteriorDraws)> {
    select_k_with(data, ks, cfg.seed, exec, |k, seed| {
        let c = crate::sampler::McmcConfig { seed, ..cfg.clone() };
        crate::sampler::run_chain(&c, prior, k, data)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub x: Vec<f64>,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
}

/// Posterior predictive mean and equal-tailed interval of `y* = f(x*) + e`
/// at each row of `xnew`. The predictive law is the mixture over draws of
/// `N(f_t(x*), σ_t²)`; its quantiles are found by bisection. When every
/// `σ_t` is zero the interval is the pointwise band of `f`.
pub fn predict(draws: &PosteriorDraws, xnew: &[f64], level: f64) -> Result<Prediction> {
    check_level(level)?;
    let p = draws.template.dim();
    for x in xnew.chunks(p) {
        check_point(x, p)?;
    }
    let t = draws.len();
    let curves = draws.eval_grid(xnew)?;
    let g = xnew.len() / p;
    let sds: Vec<f64> = draws.draws.iter().map(|d| d.sigma).collect();
    if sds.iter().all(|&s| s == 0.0) {
        let band = pointwise_band_from_curves(&curves, t, xnew, p, level)?;
        return Ok(Prediction { x: xnew.to_vec(), dim: p, mean: band.mean, lower: band.lower, upper: band.upper, level });
    }
    let mut mean = Vec::with_capacity(g);
    let mut lower = Vec::with_capacity(g);
    let mut upper = Vec::with_capacity(g);
    let mut col = vec![0.0; t];
    for j in 0..g {
        for (i, c) in col.iter_mut().enumerate() {
            *c = curves[i * g + j];
        }
        mean.push(col.iter().sum::<f64>() / t as f64);
        lower.push(mixture_quantile(&col, &sds, 0.5 - 0.5 * level));
        upper.push(mixture_quantile(&col, &sds, 0.5 + 0.5 * level));
    }
    Ok(Prediction { x: xnew.to_vec(), dim: p, mean, lower, upper, level })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_draws_give_degenerate_summaries() {
        let curve = [0.1, 0.5, -0.2];
        let curves: Vec<f64> = (0..5).flat_map(|_| curve).collect();
        let grid = [0.2, 0.5, 0.8];
        let b = pointwise_band_from_curves(&curves, 5, &grid, 1, 0.95).unwrap();
        assert_eq!(b.lower, curve.to_vec());
        assert_eq!(b.upper, curve.to_vec());
        let s = l2_set_from_curves(&curves, 5, &grid, 1, 0.95).unwrap();
        assert_eq!(s.radius, Some(0.0));
        assert_eq!(s.lower, s.mean);
    }

    #[test]
    fn two_point_band() {
        let c = 0.3;
        let mut curves = Vec::new();
        for i in 0..100 {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            curves.extend([1.0 + s * c, 2.0 + s * c]);
        }
        let b = pointwise_band_from_curves(&curves, 100, &[0.3, 0.6], 1, 0.999).unwrap();
        assert!((b.lower[0] - 0.7).abs() < 1e-12 && (b.upper[0] - 1.3).abs() < 1e-12);
        assert!((b.mean[1] - 2.0).abs() < 1e-12);
    }

    fn repeated_chain(t: usize) -> (PosteriorDraws, Dataset) {
        use crate::grid::PartitionGrid;
        use crate::kernel::KernelFamily;
        use crate::model::KmpParams;
        use crate::sampler::{AcceptanceRates, Draw};
        let mut params = KmpParams::centered(PartitionGrid::new(3, 1).unwrap(), 1, KernelFamily::Bump, 1.5, 0.3).unwrap();
        params.coefs = vec![0.2, -0.4, 1.0, 0.5, -0.3, 0.1];
        let x: Vec<f64> = (0..20).map(|i| (i as f64 + 0.5) / 20.0).collect();
        let y: Vec<f64> = x.iter().map(|v| (5.0 * v).sin()).collect();
        let data = Dataset::univariate(x, y).unwrap();
        let f = params.eval_many(&data.x).unwrap();
        let ssr: f64 = data.y.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum();
        let draw = Draw {
            bandwidth: params.bandwidth,
            centers: params.centers.clone(),
            coefs: params.coefs.clone(),
            sigma: params.sigma,
            beta: vec![],
            loglik: gaussian_loglik(data.n(), ssr, params.sigma),
            logpost: 0.0,
        };
        let draws = PosteriorDraws { template: params, draws: vec![draw; t], acceptance: AcceptanceRates::default(), beta_names: vec![] };
        (draws, data)
    }

    #[test]
    fn degenerate_chain_has_zero_penalty() {
        let (draws, data) = repeated_chain(4);
        for plugin in [DicPlugin::MeanCurve, DicPlugin::MeanParameters] {
            let e = dic_with(&draws, &data, plugin).unwrap();
            assert!(e.p_dic.abs() < 1e-9, "{plugin:?}: {}", e.p_dic);
            assert!((e.dic - e.plugin_deviance).abs() < 1e-9);
            assert!(!e.variance_fallback);
        }
    }

    #[test]
    fn duplicated_draws_leave_dic_unchanged() {
        let (mut draws, data) = repeated_chain(2);
        draws.draws[1].coefs[2] += 0.3;
        draws.draws[1].loglik -= 1.0;
        let a = dic(&draws, &data).unwrap();
        let doubled = draws.draws.clone();
        draws.draws.extend(doubled);
        let b = dic(&draws, &data).unwrap();
        assert!((a.dic - b.dic).abs() < 1e-9);
    }

    #[test]
    fn mean_curve_penalty_is_nonnegative_for_fixed_sigma() {
        // ℓ is concave in the fitted values, so Jensen gives p_DIC >= 0.
        let (mut draws, data) = repeated_chain(3);
        for (t, shift) in [0.0, 0.4, -0.7].into_iter().enumerate() {
            let d = &mut draws.draws[t];
            d.coefs[0] += shift;
            d.centers[1] += 0.02 * shift;
            let p = draws.params(t);
            let f = p.eval_many(&data.x).unwrap();
            let ssr: f64 = data.y.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum();
            draws.draws[t].loglik = gaussian_loglik(data.n(), ssr, p.sigma);
        }
        assert!(dic(&draws, &data).unwrap().p_dic >= 0.0);
    }

    #[test]
    fn bad_level_rejected() {
        assert!(pointwise_band_from_curves(&[1.0], 1, &[0.5], 1, 1.0).is_err());
        assert!(l2_set_from_curves(&[1.0], 1, &[0.5], 1, 0.9).is_err());
    }
}
