//! File formats: dataset CSV with column roles, wage-data preprocessing,
//! chain and summary persistence, run manifests. Every write goes to a
//! temporary file in the target directory and is renamed into place.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, KmpError, Result};
use crate::posterior::CredibleSummary;
use crate::sampler::{AcceptanceRates, Draw, PosteriorDraws};

/// Writes `bytes` to `path` atomically.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| KmpError::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-5..1e16).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Which columns play which role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub x: Vec<String>,
    #[serde(default)]
    pub z: Vec<String>,
    pub y: String,
}

impl Schema {
    pub fn univariate(x: &str, y: &str) -> Self {
        Self { x: vec![x.into()], z: Vec::new(), y: y.into() }
    }

    /// Column roles of the preprocessed wage data.
    pub fn wage() -> Self {
        Self {
            x: vec!["exper".into()],
            z: WAGE_Z.iter().map(|s| s.to_string()).collect(),
            y: "lwage".into(),
        }
    }
}

/// A CSV file held as strings, header first.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| KmpError::Data { row: 1, column: name.into(), message: "missing column".into() })
    }

    /// Strictly parsed numeric column; any unparsable cell is an error that
    /// names its row (1-based, header included) and column.
    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.column(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let cell = r[j].trim();
                cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| KmpError::Data {
                    row: i + 2,
                    column: name.into(),
                    message: format!("cannot parse '{cell}' as a finite number"),
                })
            })
            .collect()
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?.iter().map(String::from).collect());
    }
    Ok(Table { headers, rows })
}

pub fn dataset_from_table(table: &Table, schema: &Schema) -> Result<Dataset> {
    let n = table.rows.len();
    let cols = |names: &[String]| -> Result<Vec<f64>> {
        let parsed: Vec<Vec<f64>> = names.iter().map(|c| table.numeric(c)).collect::<Result<_>>()?;
        let mut flat = Vec::with_capacity(n * names.len());
        for i in 0..n {
            flat.extend(parsed.iter().map(|c| c[i]));
        }
        Ok(flat)
    };
    if schema.x.is_empty() {
        return Err(config_err("schema needs at least one design column"));
    }
    let x = cols(&schema.x)?;
    let z = cols(&schema.z)?;
    let y = table.numeric(&schema.y)?;
    let data = Dataset {
        x,
        p: schema.x.len(),
        z,
        q: schema.z.len(),
        y,
        x_names: schema.x.clone(),
        z_names: schema.z.clone(),
        y_name: schema.y.clone(),
        note: String::new(),
    };
    data.validate()?;
    Ok(data)
}

/// Reads a dataset; `x` must lie in `[0, 1]^p` already.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let mut data = dataset_from_table(&read_table(path)?, schema)?;
    data.note = format!("loaded from {}", path.display());
    Ok(data)
}

/// Writes `x`, `z` and `y` columns under their names.
pub fn save_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = data
        .x_names
        .iter()
        .chain(&data.z_names)
        .map(String::as_str)
        .chain(std::iter::once(data.y_name.as_str()))
        .collect();
    w.write_record(&header)?;
    for i in 0..data.n() {
        let row: Vec<String> = data.x_row(i).iter().chain(data.z_row(i)).chain(std::iter::once(&data.y[i])).map(|&v| fmt_f64(v)).collect();
        w.write_record(&row)?;
    }
    atomic_write(path, &finish(w)?)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| KmpError::Io(e.into_error()))
}

const WAGE_Z: [&str; 4] = ["female", "married", "educ", "tenure"];
const WAGE_COLUMNS: [&str; 6] = ["lwage", "female", "married", "educ", "tenure", "exper"];
/// Open margin kept between rescaled experience and the ends of `[0, 1]`.
pub const WAGE_MARGIN: f64 = 1e-6;
pub const WAGE_ROWS: usize = 526;
pub const WAGE_TRAIN: usize = 300;

fn pm_one(cell: &str, row: usize, column: &str) -> Result<f64> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "1" | "1.0" | "yes" | "true" => Ok(1.0),
        "0" | "0.0" | "-1" | "no" | "false" => Ok(-1.0),
        other => Err(KmpError::Data { row, column: column.into(), message: format!("cannot read '{other}' as an indicator") }),
    }
}

/// Preprocessed wage data: indicators coded ±1, `educ` and `tenure`
/// centered, `exper` mapped affinely into `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WageData {
    pub data: Dataset,
    pub warnings: Vec<String>,
}

pub fn wage_preprocess(table: &Table) -> Result<WageData> {
    for c in WAGE_COLUMNS {
        table.column(c)?;
    }
    let n = table.rows.len();
    let mut warnings = Vec::new();
    if n < WAGE_ROWS {
        warnings.push(format!("wage data has {n} rows, expected {WAGE_ROWS}"));
    }
    if n < 2 {
        return Err(config_err("wage preprocessing needs at least two rows"));
    }
    let indicator = |name: &str| -> Result<Vec<f64>> {
        let j = table.column(name)?;
        table.rows.iter().enumerate().map(|(i, r)| pm_one(&r[j], i + 2, name)).collect()
    };
    let centered = |name: &str| -> Result<Vec<f64>> {
        let v = table.numeric(name)?;
        let m = v.iter().sum::<f64>() / n as f64;
        Ok(v.into_iter().map(|x| x - m).collect())
    };
    let female = indicator("female")?;
    let married = indicator("married")?;
    let educ = centered("educ")?;
    let tenure = centered("tenure")?;
    let exper = table.numeric("exper")?;
    let lo = exper.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = exper.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(KmpError::Data { row: 2, column: "exper".into(), message: "experience is constant".into() });
    }
    let x: Vec<f64> = exper.iter().map(|e| WAGE_MARGIN + (1.0 - 2.0 * WAGE_MARGIN) * (e - lo) / (hi - lo)).collect();
    let mut z = Vec::with_capacity(4 * n);
    for i in 0..n {
        z.extend([female[i], married[i], educ[i], tenure[i]]);
    }
    let schema = Schema::wage();
    let data = Dataset {
        x,
        p: 1,
        z,
        q: 4,
        y: table.numeric("lwage")?,
        x_names: schema.x,
        z_names: schema.z,
        y_name: schema.y,
        note: format!("wage data; experience rescaled from [{lo}, {hi}]"),
    };
    data.validate()?;
    Ok(WageData { data, warnings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Seeded random split. With fewer rows than the full sample the training
/// share stays at `300 / 526`.
pub fn wage_split(data: &Dataset, seed: u64) -> Result<Split> {
    let n = data.n();
    let train = if n >= WAGE_ROWS { WAGE_TRAIN } else { ((n * WAGE_TRAIN) as f64 / WAGE_ROWS as f64).round() as usize };
    split(data, train.clamp(1, n - 1), seed)
}

pub fn split(data: &Dataset, train: usize, seed: u64) -> Result<Split> {
    let n = data.n();
    if train == 0 || train >= n {
        return Err(config_err(format!("training size {train} must lie in 1..{n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = idx.split_at(train);
    Ok(Split { train: data.subset(a), test: data.subset(b), train_idx: a.to_vec(), test_idx: b.to_vec() })
}

/// Metadata line at the top of a chain file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainHeader {
    pub format: String,
    pub k: usize,
    pub draws: usize,
    pub template: crate::model::KmpParams,
    pub acceptance: AcceptanceRates,
    pub beta_names: Vec<String>,
}

const CHAIN_FORMAT: &str = "kmp-chain-1";

/// Chain file: a `#`-prefixed JSON header line, then one CSV row per draw
/// with `bandwidth, sigma, loglik, logpost`, the `β` block, center offsets
/// and coefficients.
pub fn write_chain(path: &Path, draws: &PosteriorDraws) -> Result<()> {
    let header = ChainHeader {
        format: CHAIN_FORMAT.into(),
        k: draws.k(),
        draws: draws.len(),
        template: draws.template.clone(),
        acceptance: draws.acceptance.clone(),
        beta_names: draws.beta_names.clone(),
    };
    let mut bytes = b"# ".to_vec();
    bytes.extend(serde_json::to_vec(&header)?);
    bytes.push(b'\n');
    let q = draws.q();
    let nc = draws.template.centers.len();
    let nx = draws.template.coefs.len();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut cols: Vec<String> = ["bandwidth", "sigma", "loglik", "logpost"].iter().map(|s| s.to_string()).collect();
    cols.extend((0..q).map(|j| format!("beta_{}", draws.beta_names.get(j).cloned().unwrap_or_else(|| (j + 1).to_string()))));
    cols.extend((0..nc).map(|j| format!("center_{j}")));
    cols.extend((0..nx).map(|j| format!("coef_{j}")));
    w.write_record(&cols)?;
    for d in &draws.draws {
        let row: Vec<String> = [d.bandwidth, d.sigma, d.loglik, d.logpost]
            .iter()
            .chain(&d.beta)
            .chain(&d.centers)
            .chain(&d.coefs)
            .map(|&v| fmt_f64(v))
            .collect();
        w.write_record(&row)?;
    }
    bytes.extend(finish(w)?);
    atomic_write(path, &bytes)
}

pub fn read_chain(path: &Path) -> Result<PosteriorDraws> {
    let text = std::fs::read_to_string(path)?;
    let (first, body) = text.split_once('\n').ok_or_else(|| config_err("chain file is empty"))?;
    let json = first.strip_prefix("# ").ok_or_else(|| config_err("chain file lacks its header line"))?;
    let header: ChainHeader = serde_json::from_str(json)?;
    if header.format != CHAIN_FORMAT {
        return Err(config_err(format!("unsupported chain format '{}'", header.format)));
    }
    let q = header.beta_names.len();
    let nc = header.template.centers.len();
    let nx = header.template.coefs.len();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let width = 4 + q + nc + nx;
    if rdr.headers()?.len() != width {
        return Err(config_err(format!("chain file has {} columns, expected {width}", rdr.headers()?.len())));
    }
    let mut out = Vec::with_capacity(header.draws);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .enumerate()
            .map(|(j, c)| {
                c.parse::<f64>().map_err(|_| KmpError::Data { row: i + 3, column: format!("#{j}"), message: format!("cannot parse '{c}'") })
            })
            .collect::<Result<_>>()?;
        out.push(Draw {
            bandwidth: vals[0],
            sigma: vals[1],
            loglik: vals[2],
            logpost: vals[3],
            beta: vals[4..4 + q].to_vec(),
            centers: vals[4 + q..4 + q + nc].to_vec(),
            coefs: vals[4 + q + nc..].to_vec(),
        });
    }
    if out.len() != header.draws {
        return Err(config_err(format!("chain file holds {} draws, header says {}", out.len(), header.draws)));
    }
    Ok(PosteriorDraws { template: header.template, draws: out, acceptance: header.acceptance, beta_names: header.beta_names })
}

/// Curve and band as CSV: grid coordinates, then `mean, lower, upper`.
pub fn write_summary_csv(path: &Path, s: &CredibleSummary) -> Result<()> {
    write_band_csv(path, &s.grid, s.dim, &s.mean, &s.lower, &s.upper)
}

pub fn write_band_csv(path: &Path, grid: &[f64], dim: usize, mean: &[f64], lower: &[f64], upper: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut cols: Vec<String> = (1..=dim).map(|j| format!("x{j}")).collect();
    cols.extend(["mean", "lower", "upper"].iter().map(|s| s.to_string()));
    w.write_record(&cols)?;
    for (i, x) in grid.chunks(dim).enumerate() {
        let row: Vec<String> = x.iter().chain([mean[i], lower[i], upper[i]].iter()).map(|&v| fmt_f64(v)).collect();
        w.write_record(&row)?;
    }
    atomic_write(path, &finish(w)?)
}

/// Everything needed to rerun a command bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub data: Option<String>,
    pub versions: serde_json::Value,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

pub fn crate_versions() -> serde_json::Value {
    serde_json::json!({
        "kmp-core": env!("CARGO_PKG_VERSION"),
        "parallel": cfg!(feature = "parallel"),
    })
}
