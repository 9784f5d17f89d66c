use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "kmp", version, about = "Kernel mixture of polynomials regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long, env = "KMP_DATA")]
    pub data: PathBuf,
    /// Design columns, comma separated; values must lie in [0, 1].
    #[arg(long, value_delimiter = ',', default_value = "x")]
    pub x: Vec<String>,
    /// Linear covariate columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub z: Vec<String>,
    #[arg(long, default_value = "y")]
    pub y: String,
    /// Treat the file as raw wage data (lwage, female, married, educ,
    /// tenure, exper) and preprocess it.
    #[arg(long)]
    pub wage: bool,
    /// With --wage, fit on the training rows of a split seeded by this value.
    #[arg(long, requires = "wage")]
    pub split_seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration; defaults apply to omitted fields.
    #[arg(long, env = "KMP_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, env = "KMP_OUT")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Posterior sampling at fixed K.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "KMP_SEED")]
        seed: u64,
        /// Overrides the configured K.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Partial linear model: linear covariates plus a KMP component.
    FitPlm {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "KMP_SEED")]
        seed: u64,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Conjugate posterior with fixed partition, bandwidth and centers.
    FitFixed {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "KMP_SEED")]
        seed: u64,
    },
    /// Box-constrained least squares over the KMP class.
    SieveMle {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "KMP_SEED")]
        seed: u64,
    },
    /// One chain per K and selection by DIC.
    SelectK {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "KMP_SEED")]
        seed: u64,
        #[arg(long)]
        k_min: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
    },
    /// Repeated-experiment coverage study from a scenario JSON.
    Coverage {
        #[command(flatten)]
        common: Common,
        /// Base seed; replicate r uses seed + r.
        #[arg(long, env = "KMP_SEED")]
        seed: u64,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// MSE and wall-clock comparison from a scenario JSON.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "KMP_SEED")]
        seed: u64,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Posterior predictive intervals from a saved chain.
    Predict {
        /// Chain file written by fit, fit-plm, fit-fixed or select-k.
        #[arg(long)]
        chain: PathBuf,
        /// CSV holding the new design points.
        #[arg(long, env = "KMP_DATA")]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "x")]
        x: Vec<String>,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, env = "KMP_OUT")]
        out: PathBuf,
    },
}

fn report(kind: &str, message: &str) {
    let err = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{err}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            report("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
