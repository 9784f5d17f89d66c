//! Sieve maximum likelihood: least squares over the constrained class
//! `{f : |ξ| <= B, μ_k in the closed block, Kh ∈ [h̲, h̄]}` at fixed `K`.
//!
//! The outer loop alternates an exact box-constrained solve for `ξ`, a
//! lattice line search on each center offset coordinate, and a golden-section
//! search on `Kh`. Line and bandwidth searches re-solve `ξ` at each candidate
//! when `profile` is set (the default); a candidate replaces the incumbent
//! only if it strictly lowers the objective, so the objective never increases.
//! Small problems seed the first start with an exhaustive scan of the joint
//! offset and `Kh` lattice, and the line search also probes sub-lattice
//! steps around the incumbent.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, Result};
use crate::fixed_design::choose_kn;
use crate::grid::PartitionGrid;
use crate::kernel::KernelFamily;
use crate::model::{KmpParams, Workspace};
use crate::par::{map_indexed, Execution};
use crate::sampler::SparseBasis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SieveConfig {
    /// Blocks per axis; `None` uses `⌈(n / log n)^{1/(2α+p)}⌉`.
    pub k: Option<usize>,
    pub alpha: f64,
    pub degree: usize,
    pub coef_bound: f64,
    pub kh_min: f64,
    pub kh_max: f64,
    pub kernel: KernelFamily,
    pub multistart: usize,
    /// Relative objective decrease below which the outer loop stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Points of the offset lattice on `[-1, 1]` used by the line search.
    pub lattice: usize,
    /// Re-solve `ξ` at every line-search candidate.
    pub profile: bool,
    /// Largest joint lattice (offsets × `Kh`) scanned exhaustively to seed
    /// the first start; larger problems start from the block centers.
    pub scan_budget: usize,
    /// Known noise scale; `None` reports the residual standard deviation.
    pub sigma: Option<f64>,
    pub execution: Execution,
}

impl Default for SieveConfig {
    fn default() -> Self {
        Self {
            k: None,
            alpha: 1.0,
            degree: 2,
            coef_bound: 50.0,
            kh_min: 1.2,
            kh_max: 2.0,
            kernel: KernelFamily::Bump,
            multistart: 5,
            tol: 1e-10,
            max_iter: 50,
            lattice: 21,
            profile: true,
            scan_budget: 20_000,
            sigma: None,
            execution: Execution::Auto,
        }
    }
}

impl SieveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.multistart == 0 {
            return Err(config_err("multistart must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(config_err("tolerance must be positive"));
        }
        if !(self.kh_min > 1.0 && self.kh_min <= self.kh_max) {
            return Err(config_err("bandwidth bounds need 1 < kh_min <= kh_max"));
        }
        if !(self.coef_bound >= 0.0 && self.coef_bound.is_finite()) {
            return Err(config_err("coef_bound must be finite and >= 0"));
        }
        if self.lattice < 2 {
            return Err(config_err("lattice needs at least 2 points"));
        }
        if self.k == Some(0) || !(self.alpha > 0.0) {
            return Err(config_err("need K >= 1 and alpha > 0"));
        }
        Ok(())
    }

    pub fn resolve_k(&self, n: usize, p: usize) -> Result<usize> {
        match self.k {
            Some(k) => Ok(k),
            None => choose_kn(n, self.alpha, p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveFit {
    pub params: KmpParams,
    /// `Σ (y_i - f(x_i))²` at the returned parameters.
    pub objective: f64,
    /// Objective after each outer iteration of the winning start.
    pub history: Vec<f64>,
    /// Final objective of every start, in start order.
    pub start_objectives: Vec<f64>,
    /// The winning start stopped at the iteration cap.
    pub hit_iteration_cap: bool,
}

/// Minimizes `½ ξᵀ G ξ - cᵀ ξ` over `|ξ_j| <= bound` with a primal
/// active-set method. Singular free blocks are regularized by a tiny ridge.
pub fn box_qp(g: &DMatrix<f64>, c: &DVector<f64>, bound: f64) -> DVector<f64> {
    let d = c.len();
    if d == 0 || bound == 0.0 {
        return DVector::zeros(d);
    }
    // 0 = free, 1 = at +bound, -1 = at -bound
    let mut state = vec![0i8; d];
    let mut x = DVector::zeros(d);
    let scale = (0..d).map(|i| g[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    for _ in 0..(20 * d + 100) {
        let free: Vec<usize> = (0..d).filter(|&i| state[i] == 0).collect();
        let grad = g * &x - c;
        let mut moved_to_bound = false;
        if !free.is_empty() {
            let nf = free.len();
            let mut sub = DMatrix::from_fn(nf, nf, |a, b| g[(free[a], free[b])]);
            let rhs = DVector::from_fn(nf, |a, _| -grad[free[a]]);
            let step = solve_spd(&mut sub, &rhs, scale);
            // largest feasible fraction of the Newton step
            let mut alpha = 1.0;
            let mut blocking = None;
            for (a, &i) in free.iter().enumerate() {
                let s = step[a];
                if s > 0.0 && x[i] + s > bound {
                    let t = (bound - x[i]) / s;
                    if t < alpha {
                        alpha = t;
                        blocking = Some((i, 1i8));
                    }
                } else if s < 0.0 && x[i] + s < -bound {
                    let t = (-bound - x[i]) / s;
                    if t < alpha {
                        alpha = t;
                        blocking = Some((i, -1i8));
                    }
                }
            }
            for (a, &i) in free.iter().enumerate() {
                x[i] = (x[i] + alpha * step[a]).clamp(-bound, bound);
            }
            if let Some((i, side)) = blocking {
                state[i] = side;
                x[i] = side as f64 * bound;
                moved_to_bound = true;
            }
        }
        if moved_to_bound {
            continue;
        }
        // free variables are optimal; release the worst violated bound
        let grad = g * &x - c;
        let mut worst = None;
        let mut worst_val = 1e-14 * scale;
        for i in 0..d {
            let violation = match state[i] {
                1 => grad[i],
                -1 => -grad[i],
                _ => 0.0,
            };
            if violation > worst_val {
                worst_val = violation;
                worst = Some(i);
            }
        }
        match worst {
            Some(i) => state[i] = 0,
            None => return x,
        }
    }
    x
}

fn solve_spd(m: &mut DMatrix<f64>, rhs: &DVector<f64>, scale: f64) -> DVector<f64> {
    if let Some(ch) = m.clone().cholesky() {
        return ch.solve(rhs);
    }
    let mut ridge = 1e-12 * scale;
    loop {
        let mut r = m.clone();
        for i in 0..r.nrows() {
            r[(i, i)] += ridge;
        }
        if let Some(ch) = r.cholesky() {
            return ch.solve(rhs);
        }
        ridge *= 100.0;
    }
}

/// Projected coordinate descent on the same problem; slow but simple.
pub fn box_qp_coordinate(g: &DMatrix<f64>, c: &DVector<f64>, bound: f64, sweeps: usize) -> DVector<f64> {
    let d = c.len();
    let mut x = DVector::<f64>::zeros(d);
    for _ in 0..sweeps {
        for j in 0..d {
            let gjj = g[(j, j)];
            if gjj <= 0.0 {
                continue;
            }
            let r = c[j] - (g.row(j) * &x)[0] + gjj * x[j];
            x[j] = (r / gjj).clamp(-bound, bound);
        }
    }
    x
}

/// `argmin ‖y - Ψ ξ‖²` over `‖ξ‖_∞ <= B` with centers and bandwidth taken
/// from `params`.
pub fn solve_xi_box(data: &Dataset, params: &KmpParams, bound: f64) -> Result<Vec<f64>> {
    let basis = SparseBasis::build(params, data, &mut Workspace::default())?;
    let (g, c) = basis.normal_equations(&data.y);
    Ok(box_qp(&g, &c, bound).as_slice().to_vec())
}

/// `Σ (y_i - f(x_i))²`.
pub fn objective(params: &KmpParams, data: &Dataset) -> Result<f64> {
    let mut ws = Workspace::default();
    let mut s = 0.0;
    for i in 0..data.n() {
        let r = data.y[i] - params.eval_with(data.x_row(i), &mut ws)?;
        s += r * r;
    }
    Ok(s)
}

/// Objective after re-solving `ξ` in place.
fn profile_solve(data: &Dataset, params: &mut KmpParams, bound: f64) -> Result<f64> {
    let basis = SparseBasis::build(params, data, &mut Workspace::default())?;
    let (g, c) = basis.normal_equations(&data.y);
    params.coefs = box_qp(&g, &c, bound).as_slice().to_vec();
    let mut fitted = Vec::with_capacity(data.n());
    basis.mul(&params.coefs, &mut fitted);
    Ok(data.y.iter().zip(&fitted).map(|(y, f)| (y - f) * (y - f)).sum())
}

fn candidate_value(data: &Dataset, params: &mut KmpParams, cfg: &SieveConfig) -> Result<f64> {
    if cfg.profile {
        profile_solve(data, params, cfg.coef_bound)
    } else {
        objective(params, data)
    }
}

struct StartResult {
    params: KmpParams,
    objective: f64,
    history: Vec<f64>,
    capped: bool,
}

fn run_start(data: &Dataset, cfg: &SieveConfig, mut params: KmpParams) -> Result<StartResult> {
    let p = params.dim();
    let lattice = unit_lattice(cfg.lattice, -1.0, 1.0);
    let step = 2.0 / (cfg.lattice - 1) as f64;
    let mut best = profile_solve(data, &mut params, cfg.coef_bound)?;
    let mut history = vec![best];
    let mut capped = true;
    for _ in 0..cfg.max_iter {
        let before = best;
        // center offsets, one coordinate at a time
        for b in 0..params.n_blocks() {
            for j in 0..p {
                let mut offset = params.offsets()[b * p..(b + 1) * p].to_vec();
                let current = offset[j];
                let mut winner: Option<(f64, KmpParams)> = None;
                let probes = (1..=4).flat_map(|e| {
                    let d = step / f64::from(1 << e);
                    [current - d, current + d]
                });
                let candidates: Vec<f64> = lattice.iter().copied().chain(probes).filter(|v| v.abs() <= 1.0).collect();
                for v in candidates {
                    if v == current {
                        continue;
                    }
                    offset[j] = v;
                    let mut cand = params.clone();
                    cand.set_block_offset(b, &offset);
                    let val = candidate_value(data, &mut cand, cfg)?;
                    let incumbent = winner.as_ref().map_or(best, |w| w.0);
                    if val < incumbent {
                        winner = Some((val, cand));
                    }
                }
                if let Some((val, cand)) = winner {
                    params = cand;
                    best = val;
                }
            }
        }
        // bandwidth, golden section on [kh_min, kh_max]
        if cfg.kh_max > cfg.kh_min {
            let (val, cand) = golden_kh(data, cfg, &params)?;
            if val < best {
                params = cand;
                best = val;
            }
        }
        // exact coefficient refit
        let mut refit = params.clone();
        let val = profile_solve(data, &mut refit, cfg.coef_bound)?;
        if val < best {
            params = refit;
            best = val;
        }
        assert!(best <= before, "sieve objective increased: {before} -> {best}");
        history.push(best);
        if before - best <= cfg.tol * before.max(f64::MIN_POSITIVE) {
            capped = false;
            break;
        }
    }
    Ok(StartResult { params, objective: best, history, capped })
}

fn unit_lattice(points: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

/// Joint lattice size, or `None` when it exceeds `budget`.
fn scan_size(cfg: &SieveConfig, n_offsets: usize) -> Option<usize> {
    let mut size = if cfg.kh_max > cfg.kh_min { cfg.lattice } else { 1 };
    for _ in 0..n_offsets {
        size = size.checked_mul(cfg.lattice).filter(|&s| s <= cfg.scan_budget)?;
    }
    (size <= cfg.scan_budget).then_some(size)
}

/// Best point of the joint offset × `Kh` lattice, with profiled `ξ`.
fn joint_scan(data: &Dataset, cfg: &SieveConfig, template: &KmpParams) -> Result<KmpParams> {
    let offsets = unit_lattice(cfg.lattice, -1.0, 1.0);
    let khs = if cfg.kh_max > cfg.kh_min { unit_lattice(cfg.lattice, cfg.kh_min, cfg.kh_max) } else { vec![cfg.kh_min] };
    let d = template.centers.len();
    let mut idx = vec![0usize; d];
    let mut point = vec![0.0; d];
    let mut best: Option<(f64, KmpParams)> = None;
    loop {
        for (v, &i) in point.iter_mut().zip(&idx) {
            *v = offsets[i];
        }
        for &kh in &khs {
            let mut cand = template.clone();
            cand.set_offsets(&point);
            cand.set_kh(kh);
            let val = profile_solve(data, &mut cand, cfg.coef_bound)?;
            if best.as_ref().is_none_or(|b| val < b.0) {
                best = Some((val, cand));
            }
        }
        let mut j = d;
        loop {
            if j == 0 {
                return Ok(best.expect("non-empty lattice").1);
            }
            j -= 1;
            if idx[j] + 1 < offsets.len() {
                idx[j] += 1;
                break;
            }
            idx[j] = 0;
        }
    }
}

fn golden_kh(data: &Dataset, cfg: &SieveConfig, params: &KmpParams) -> Result<(f64, KmpParams)> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (cfg.kh_min, cfg.kh_max);
    let eval = |kh: f64| -> Result<(f64, KmpParams)> {
        let mut cand = params.clone();
        cand.set_kh(kh);
        Ok((candidate_value(data, &mut cand, cfg)?, cand))
    };
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = eval(c)?;
    let mut fd = eval(d)?;
    while b - a > 1e-4 * (cfg.kh_max - cfg.kh_min) {
        if fc.0 < fd.0 {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = eval(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = eval(d)?;
        }
    }
    Ok(if fc.0 < fd.0 { fc } else { fd })
}

/// Best-of-multistart sieve least-squares fit. Starting points draw offsets
/// uniformly on `[-1, 1]^p` and `Kh` uniformly on its bounds.
pub fn fit_sieve_mle<R: Rng + ?Sized>(data: &Dataset, cfg: &SieveConfig, rng: &mut R) -> Result<SieveFit> {
    cfg.validate()?;
    data.validate()?;
    if data.n() == 0 {
        return Err(config_err("sieve fit needs at least one observation"));
    }
    let k = cfg.resolve_k(data.n(), data.p)?;
    let grid = PartitionGrid::new(k, data.p)?;
    let scan = scan_size(cfg, grid.n_blocks() * data.p).is_some();
    let seeds: Vec<u64> = (0..cfg.multistart).map(|_| rng.random()).collect();
    let results = map_indexed(cfg.execution, cfg.multistart, |s| {
        let mut r = ChaCha8Rng::seed_from_u64(seeds[s]);
        let kh = if s == 0 { 0.5 * (cfg.kh_min + cfg.kh_max) } else { r.random_range(cfg.kh_min..=cfg.kh_max) };
        let mut params = KmpParams::centered(grid, cfg.degree, cfg.kernel, kh, 1.0)?;
        if s == 0 && scan {
            params = joint_scan(data, cfg, &params)?;
        } else if s > 0 {
            let offsets: Vec<f64> = (0..params.centers.len()).map(|_| r.random_range(-1.0..=1.0)).collect();
            params.set_offsets(&offsets);
        }
        run_start(data, cfg, params)
    });
    let mut start_objectives = Vec::with_capacity(results.len());
    let mut best: Option<StartResult> = None;
    for res in results {
        let res = res?;
        start_objectives.push(res.objective);
        if best.as_ref().is_none_or(|b| res.objective < b.objective) {
            best = Some(res);
        }
    }
    let best = best.expect("at least one start");
    let mut params = best.params;
    params.sigma = cfg.sigma.unwrap_or_else(|| (best.objective / data.n() as f64).sqrt());
    Ok(SieveFit {
        params,
        objective: best.objective,
        history: best.history,
        start_objectives,
        hit_iteration_cap: best.capped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(d: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(d + 3, d, |_, _| rng.random_range(-1.0..1.0));
        let c = DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0));
        (a.transpose() * a, c)
    }

    fn qp_obj(g: &DMatrix<f64>, c: &DVector<f64>, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * g * x)[0] - c.dot(x)
    }

    #[test]
    fn interior_solution_is_least_squares() {
        let (g, c) = random_spd(6, 1);
        let x = box_qp(&g, &c, 1e6);
        let ls = g.clone().cholesky().unwrap().solve(&c);
        assert!((x - ls).norm() < 1e-8);
    }

    #[test]
    fn zero_box_gives_zero() {
        let (g, c) = random_spd(4, 2);
        assert_eq!(box_qp(&g, &c, 0.0), DVector::zeros(4));
    }

    #[test]
    fn clipped_instance_matches_long_coordinate_run() {
        for seed in 0..10 {
            let (g, c) = random_spd(8, 10 + seed);
            let x = box_qp(&g, &c, 0.5);
            let reference = box_qp_coordinate(&g, &c, 0.5, 200_000);
            assert!(x.iter().all(|v| v.abs() <= 0.5));
            let (a, b) = (qp_obj(&g, &c, &x), qp_obj(&g, &c, &reference));
            assert!(a <= b + 1e-8, "seed {seed}: {a} vs {b}");
        }
    }

    #[test]
    fn singular_gram_is_handled() {
        let g = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let c = DVector::from_vec(vec![2.0, 2.0, 0.0]);
        let x = box_qp(&g, &c, 10.0);
        assert!((x[0] + x[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn constant_data_is_fit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
        let data = Dataset::univariate(x, vec![1.7; 40]).unwrap();
        let cfg = SieveConfig { k: Some(3), multistart: 2, ..Default::default() };
        let fit = fit_sieve_mle(&data, &cfg, &mut rng).unwrap();
        for i in 1..=100 {
            let v = fit.params.eval(&[i as f64 / 100.0]).unwrap();
            assert!((v - 1.7).abs() < 1e-6);
        }
        for w in fit.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }
}
