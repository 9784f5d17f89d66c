use std::path::{Path, PathBuf};
use std::time::Instant;

use kmp_core::error::KmpError;
use kmp_core::fixed_design::{conjugate_fit, FixedDesignConfig};
use kmp_core::harness::{fit_kmp, run_benchmark, run_coverage, ScenarioSpec};
use kmp_core::io::{
    crate_versions, load_csv, read_chain, read_json, read_table, wage_preprocess, wage_split, write_band_csv, write_chain, write_json,
    write_summary_csv, RunManifest, Schema,
};
use kmp_core::plm::beta_summary;
use kmp_core::posterior::{dic, l2_credible_set, pointwise_band, predict, DicEntry};
use kmp_core::prior::PriorConfig;
use kmp_core::sampler::{McmcConfig, PosteriorDraws};
use kmp_core::sieve::{fit_sieve_mle, SieveConfig};
use kmp_core::{Dataset, Execution, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Command, Common, DataArgs};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FitConfig {
    prior: PriorConfig,
    mcmc: McmcConfig,
    /// Blocks per axis; `None` uses the prior's largest K.
    k: Option<usize>,
    /// Evaluation points per axis.
    grid_size: usize,
    level: f64,
    execution: Execution,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            prior: PriorConfig::default(),
            mcmc: McmcConfig::default(),
            k: None,
            grid_size: 200,
            level: 0.95,
            execution: Execution::Auto,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FixedConfig {
    model: FixedDesignConfig,
    draws: usize,
    grid_size: usize,
    level: f64,
}

impl Default for FixedConfig {
    fn default() -> Self {
        Self { model: FixedDesignConfig::default(), draws: 1000, grid_size: 200, level: 0.95 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SieveCommandConfig {
    sieve: SieveConfig,
    grid_size: usize,
}

impl Default for SieveCommandConfig {
    fn default() -> Self {
        Self { sieve: SieveConfig::default(), grid_size: 200 }
    }
}

fn load_config<T: Default + for<'de> Deserialize<'de>>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    if args.wage {
        let wage = wage_preprocess(&read_table(&args.data)?)?;
        for w in &wage.warnings {
            eprintln!("{}", serde_json::json!({ "warning": w }));
        }
        return match args.split_seed {
            Some(seed) => Ok(wage_split(&wage.data, seed)?.train),
            None => Ok(wage.data),
        };
    }
    let schema = Schema { x: args.x.clone(), z: args.z.clone(), y: args.y.clone() };
    load_csv(&args.data, &schema)
}

/// Product grid of `g` midpoints per axis.
fn midpoint_grid(g: usize, p: usize) -> Result<Vec<f64>> {
    if g == 0 {
        return Err(KmpError::Config("grid_size must be positive".into()));
    }
    let total = g.checked_pow(p as u32).filter(|&t| t <= 1_000_000).ok_or_else(|| KmpError::Config("evaluation grid is too large".into()))?;
    let mut out = Vec::with_capacity(total * p);
    for i in 0..total {
        let mut r = i;
        let mut pt = vec![0.0; p];
        for j in (0..p).rev() {
            pt[j] = ((r % g) as f64 + 0.5) / g as f64;
            r /= g;
        }
        out.extend(pt);
    }
    Ok(out)
}

struct Run {
    command: &'static str,
    out: PathBuf,
    started: Instant,
    outputs: Vec<String>,
}

impl Run {
    fn new(command: &'static str, out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        Ok(Self { command, out: out.to_path_buf(), started: Instant::now(), outputs: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn finish(mut self, seed: Option<u64>, config: &impl Serialize, data: Option<&Path>) -> Result<()> {
        let mut versions = crate_versions();
        versions["kmp-cli"] = serde_json::json!(env!("CARGO_PKG_VERSION"));
        let manifest_path = self.path("manifest.json");
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: std::env::args().collect(),
            seed,
            config: serde_json::to_value(config)?,
            data: data.map(|d| d.display().to_string()),
            versions,
            outputs: self.outputs.clone(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        write_json(&manifest_path, &manifest)
    }
}

#[derive(Serialize)]
struct FitSummary<'a> {
    k: usize,
    draws: usize,
    acceptance: &'a kmp_core::sampler::AcceptanceRates,
    dic: Option<DicEntry>,
    l2_radius: Option<f64>,
    pointwise_mean_width: f64,
    l2_mean_width: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<Vec<kmp_core::plm::BetaSummary>>,
}

fn write_posterior(run: &mut Run, draws: &PosteriorDraws, data: &Dataset, grid: &[f64], level: f64, beta: bool) -> Result<()> {
    write_chain(&run.path("chain.csv"), draws)?;
    let band = pointwise_band(draws, grid, level)?;
    let l2 = l2_credible_set(draws, grid, level)?;
    write_summary_csv(&run.path("summary.csv"), &band)?;
    write_summary_csv(&run.path("summary_l2.csv"), &l2)?;
    let summary = FitSummary {
        k: draws.k(),
        draws: draws.len(),
        acceptance: &draws.acceptance,
        dic: dic(draws, data).ok(),
        l2_radius: l2.radius,
        pointwise_mean_width: band.mean_width(),
        l2_mean_width: l2.mean_width(),
        beta: if beta { Some(beta_summary(draws, level)?) } else { None },
    };
    write_json(&run.path("summary.json"), &summary)
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Fit { data, common, seed, k } => fit(data, common, seed, k, false),
        Command::FitPlm { data, common, seed, k } => fit(data, common, seed, k, true),
        Command::FitFixed { data, common, seed } => fit_fixed(data, common, seed),
        Command::SieveMle { data, common, seed } => sieve(data, common, seed),
        Command::SelectK { data, common, seed, k_min, k_max } => select(data, common, seed, k_min, k_max),
        Command::Coverage { common, seed, replicates } => coverage(common, seed, replicates),
        Command::Benchmark { common, seed, replicates } => benchmark(common, seed, replicates),
        Command::Predict { chain, data, x, level, out } => predict_cmd(chain, data, x, level, out),
    }
}

fn fit(args: DataArgs, common: Common, seed: u64, k: Option<usize>, plm: bool) -> Result<()> {
    let mut cfg: FitConfig = load_config(&common.config)?;
    cfg.mcmc.seed = seed;
    if k.is_some() {
        cfg.k = k;
    }
    let data = load_data(&args)?;
    if plm && data.q == 0 {
        return Err(KmpError::Config("fit-plm needs linear covariates (--z or --wage)".into()));
    }
    if !plm && data.q > 0 {
        return Err(KmpError::Config("fit ignores linear covariates; use fit-plm".into()));
    }
    let k = cfg.k.unwrap_or(cfg.prior.k_max);
    cfg.k = Some(k);
    let mut run = Run::new(if plm { "fit-plm" } else { "fit" }, &common.out)?;
    let (draws, _) = fit_kmp(&data, &cfg.prior, &cfg.mcmc, Some(k), cfg.execution)?;
    let grid = midpoint_grid(cfg.grid_size, data.p)?;
    write_posterior(&mut run, &draws, &data, &grid, cfg.level, plm)?;
    run.finish(Some(seed), &cfg, Some(&args.data))
}

fn fit_fixed(args: DataArgs, common: Common, seed: u64) -> Result<()> {
    let cfg: FixedConfig = load_config(&common.config)?;
    let data = load_data(&args)?;
    let mut run = Run::new("fit-fixed", &common.out)?;
    let post = conjugate_fit(&data, &cfg.model)?;
    let grid = midpoint_grid(cfg.grid_size, data.p)?;
    let band = post.pointwise_band(&grid, cfg.level)?;
    let draws = post.sample(cfg.draws, &mut ChaCha8Rng::seed_from_u64(seed));
    write_chain(&run.path("chain.csv"), &draws)?;
    write_summary_csv(&run.path("summary.csv"), &band)?;
    let summary = serde_json::json!({
        "k": post.template.k(),
        "n": post.n,
        "sigma2_mean": post.sigma2_mean(),
        "shape": post.shape,
        "scale": post.scale,
        "mean_width": band.mean_width(),
    });
    write_json(&run.path("summary.json"), &summary)?;
    run.finish(Some(seed), &cfg, Some(&args.data))
}

fn sieve(args: DataArgs, common: Common, seed: u64) -> Result<()> {
    let cfg: SieveCommandConfig = load_config(&common.config)?;
    let data = load_data(&args)?;
    let mut run = Run::new("sieve-mle", &common.out)?;
    let fit = fit_sieve_mle(&data, &cfg.sieve, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let grid = midpoint_grid(cfg.grid_size, data.p)?;
    let curve = fit.params.eval_many(&grid)?;
    write_band_csv(&run.path("summary.csv"), &grid, data.p, &curve, &curve, &curve)?;
    write_json(&run.path("summary.json"), &fit)?;
    run.finish(Some(seed), &cfg, Some(&args.data))
}

fn select(args: DataArgs, common: Common, seed: u64, k_min: Option<usize>, k_max: Option<usize>) -> Result<()> {
    let mut cfg: FitConfig = load_config(&common.config)?;
    cfg.mcmc.seed = seed;
    if let Some(k) = k_min {
        cfg.prior.k_min = k;
    }
    if let Some(k) = k_max {
        cfg.prior.k_max = k;
    }
    cfg.prior.validate()?;
    let data = load_data(&args)?;
    let mut run = Run::new("select-k", &common.out)?;
    let (draws, report) = fit_kmp(&data, &cfg.prior, &cfg.mcmc, None, cfg.execution)?;
    let report = report.expect("selection runs every K");
    let mut w = String::from("k,dic,mean_deviance,plugin_deviance,p_dic,variance_fallback\n");
    for e in &report.table {
        w.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.k,
            kmp_core::io::fmt_f64(e.dic),
            kmp_core::io::fmt_f64(e.mean_deviance),
            kmp_core::io::fmt_f64(e.plugin_deviance),
            kmp_core::io::fmt_f64(e.p_dic),
            e.variance_fallback
        ));
    }
    kmp_core::io::atomic_write(&run.path("dic.csv"), w.as_bytes())?;
    write_json(&run.path("dic.json"), &report)?;
    let grid = midpoint_grid(cfg.grid_size, data.p)?;
    write_posterior(&mut run, &draws, &data, &grid, cfg.level, data.q > 0)?;
    run.finish(Some(seed), &cfg, Some(&args.data))
}

fn scenario(common: &Common, seed: u64, replicates: Option<usize>) -> Result<ScenarioSpec> {
    let path = common.config.as_ref().ok_or_else(|| KmpError::Config("a scenario needs --config".into()))?;
    let mut spec: ScenarioSpec = read_json(path)?;
    spec.base_seed = seed;
    if let Some(r) = replicates {
        spec.replicates = r;
    }
    Ok(spec)
}

fn coverage(common: Common, seed: u64, replicates: Option<usize>) -> Result<()> {
    let spec = scenario(&common, seed, replicates)?;
    let mut run = Run::new("coverage", &common.out)?;
    let report = run_coverage(&spec)?;
    let mut w = String::from("estimator,x,truth,coverage,mean_width,mean_curve\n");
    for e in &report.estimators {
        for j in 0..report.grid.len() {
            w.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.name,
                kmp_core::io::fmt_f64(report.grid[j]),
                kmp_core::io::fmt_f64(report.truth[j]),
                kmp_core::io::fmt_f64(e.coverage[j]),
                kmp_core::io::fmt_f64(e.mean_width[j]),
                kmp_core::io::fmt_f64(e.mean_curve[j])
            ));
        }
    }
    kmp_core::io::atomic_write(&run.path("coverage.csv"), w.as_bytes())?;
    write_json(&run.path("coverage.json"), &report)?;
    run.finish(Some(seed), &spec, None)
}

fn benchmark(common: Common, seed: u64, replicates: Option<usize>) -> Result<()> {
    let spec = scenario(&common, seed, replicates)?;
    let mut run = Run::new("benchmark", &common.out)?;
    let report = run_benchmark(&spec)?;
    let mut w = String::from("estimator,mse,seconds,iterations\n");
    for r in &report.rows {
        w.push_str(&format!("{},{},{},{}\n", r.estimator, kmp_core::io::fmt_f64(r.mse), kmp_core::io::fmt_f64(r.seconds), r.iterations));
    }
    kmp_core::io::atomic_write(&run.path("benchmark.csv"), w.as_bytes())?;
    write_json(&run.path("benchmark.json"), &report)?;
    run.finish(Some(seed), &spec, None)
}

fn predict_cmd(chain: PathBuf, data: PathBuf, x: Vec<String>, level: f64, out: PathBuf) -> Result<()> {
    let draws = read_chain(&chain)?;
    let table = read_table(&data)?;
    let cols: Vec<Vec<f64>> = x.iter().map(|c| table.numeric(c)).collect::<Result<_>>()?;
    let n = table.rows.len();
    let mut xnew = Vec::with_capacity(n * cols.len());
    for i in 0..n {
        xnew.extend(cols.iter().map(|c| c[i]));
    }
    let mut run = Run::new("predict", &out)?;
    let pred = predict(&draws, &xnew, level)?;
    write_band_csv(&run.path("prediction.csv"), &pred.x, pred.dim, &pred.mean, &pred.lower, &pred.upper)?;
    let cfg = serde_json::json!({ "chain": chain.display().to_string(), "x": x, "level": level });
    run.finish(None, &cfg, Some(&data))
}
