//! Rolling-window experiments over methods and seeds, with CSV/JSON reports.
//!
//! Seeds select the data replicate: for synthetic sources the seed is added to
//! the generator seed; for file sources with `subsample` set, the seed draws
//! the asset subset. File sources without subsampling give identical
//! replicates.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backtest::{backtest, PerformanceReport, StrategyConfig};
use crate::market_data::{
    load_price_panel, period_splits, rolling_splits, to_returns, DateRange, ReturnMatrix,
    WindowSpec, WindowSplit,
};
use crate::mtp2_ggm::SolverSettings;
use crate::ortho_metrics::{summarize_rows, CorrelationSummary};
use crate::residual_pipeline::{
    fit_transform, FitOptions, LinearResidualizer, Method, ResidualTransform,
};
use crate::synthetic::{generate_returns, SyntheticSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub path: PathBuf,
    #[serde(default)]
    pub start: Option<NaiveDate>,
    #[serde(default)]
    pub end: Option<NaiveDate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "unit", rename_all = "snake_case", deny_unknown_fields)]
pub enum WindowConfig {
    Months {
        train: u32,
        test: u32,
        stride: u32,
    },
    Periods {
        train: usize,
        test: usize,
        stride: usize,
    },
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: Option<DataSource>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    pub window: WindowConfig,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub k_max: Option<usize>,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Number of assets drawn per seed from a file source.
    #[serde(default)]
    pub subsample: Option<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Write every fitted transform under `transforms/`.
    #[serde(default)]
    pub dump_transforms: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => return bad("set either [data] or [synthetic], not both"),
            (None, None) => return bad("one of [data] or [synthetic] is required"),
            (None, Some(spec)) => spec.validate()?,
            (Some(_), None) => {}
        }
        if self.methods.is_empty() {
            return bad("methods must list at least one method");
        }
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed");
        }
        match self.window {
            WindowConfig::Months {
                train,
                test,
                stride,
            } if train == 0 || test == 0 || stride == 0 => {
                return bad("window lengths and stride must be positive");
            }
            WindowConfig::Periods {
                train,
                test,
                stride,
            } if train == 0 || test == 0 || stride == 0 => {
                return bad("window lengths and stride must be positive");
            }
            _ => {}
        }
        if self.subsample.is_some_and(|m| m < 2) {
            return bad("subsample must keep at least 2 assets");
        }
        self.solver.validate()?;
        self.strategy.validate()
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            k_max: self.k_max,
            solver: self.solver,
        }
    }
}

/// Returns and windows for one seed.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub seed: u64,
    pub returns: ReturnMatrix,
    pub splits: Vec<WindowSplit>,
}

/// Loaded data plus the bytes needed for provenance.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub replicates: Vec<Replicate>,
    pub data_sha256: Option<String>,
    pub dropped_assets: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn split_windows(returns: &ReturnMatrix, window: &WindowConfig) -> Result<Vec<WindowSplit>> {
    let out = match *window {
        WindowConfig::Months {
            train,
            test,
            stride,
        } => rolling_splits(
            returns,
            &WindowSpec {
                train_months: train,
                test_months: test,
                stride_months: stride,
            },
        )?,
        WindowConfig::Periods {
            train,
            test,
            stride,
        } => period_splits(returns, train, test, stride)?,
    };
    if out.splits.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} periods do not fit a single train/test window",
            returns.n_periods()
        )));
    }
    Ok(out.splits)
}

/// Loads or generates the data for every seed and cuts the windows.
pub fn prepare(config: &ExperimentConfig, base_dir: &Path) -> Result<Prepared> {
    let mut data_sha256 = None;
    let mut dropped_assets = Vec::new();
    let mut replicates = Vec::with_capacity(config.seeds.len());
    if let Some(spec) = &config.synthetic {
        for &seed in &config.seeds {
            let spec = SyntheticSpec {
                seed: spec.seed.wrapping_add(seed),
                ..spec.clone()
            };
            let returns = generate_returns(&spec)?;
            let splits = split_windows(&returns, &config.window)?;
            replicates.push(Replicate {
                seed,
                returns,
                splits,
            });
        }
    } else if let Some(source) = &config.data {
        let path = base_dir.join(&source.path);
        let bytes = fs::read(&path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        data_sha256 = Some(sha256_hex(&bytes));
        let range = DateRange {
            start: source.start,
            end: source.end,
        };
        let loaded = load_price_panel(bytes.as_slice(), &range)?;
        for d in &loaded.dropped {
            log::warn!("dropped {} ({} missing dates)", d.ticker, d.missing_dates);
        }
        dropped_assets = loaded.dropped.iter().map(|d| d.ticker.clone()).collect();
        let full = to_returns(&loaded.panel)?;
        for &seed in &config.seeds {
            let returns = match config.subsample {
                Some(m) if m < full.n_assets() => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mut rows =
                        rand::seq::index::sample(&mut rng, full.n_assets(), m).into_vec();
                    rows.sort_unstable();
                    full.select_assets(&rows)?
                }
                _ => full.clone(),
            };
            let splits = split_windows(&returns, &config.window)?;
            replicates.push(Replicate {
                seed,
                returns,
                splits,
            });
        }
    }
    Ok(Prepared {
        replicates,
        data_sha256,
        dropped_assets,
    })
}

/// What to compute for every cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub orthogonality: bool,
    pub performance: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        orthogonality: true,
        performance: true,
    };
}

/// Outcome of one (window, method, seed) cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub seed: u64,
    pub window_index: usize,
    pub window: String,
    pub method: Method,
    pub k: Option<usize>,
    pub orthogonality: Option<std::result::Result<(CorrelationSummary, Vec<String>), String>>,
    pub performance: Option<std::result::Result<PerformanceReport, String>>,
    /// Set when the transform could not be fitted.
    pub fit_error: Option<String>,
    pub transform: Option<ResidualTransform>,
}

impl CellResult {
    pub fn failed(&self) -> bool {
        self.fit_error.is_some()
            || matches!(self.orthogonality, Some(Err(_)))
            || matches!(self.performance, Some(Err(_)))
    }
}

/// Fits one method on one window and evaluates it on the test period.
pub fn evaluate_cell(
    config: &ExperimentConfig,
    seed: u64,
    window_index: usize,
    split: &WindowSplit,
    method: Method,
    stages: Stages,
) -> CellResult {
    let mut cell = CellResult {
        seed,
        window_index,
        window: split.label.clone(),
        method,
        k: None,
        orthogonality: None,
        performance: None,
        fit_error: None,
        transform: None,
    };
    let transform = match fit_transform(method, &split.train, &split.label, &config.fit_options()) {
        Ok(t) => t,
        Err(e) => {
            log::warn!("{method} on {} (seed {seed}) failed: {e}", split.label);
            cell.fit_error = Some(e.to_string());
            return cell;
        }
    };
    cell.k = transform.provenance.k;
    for d in &transform.provenance.diagnostics {
        log::info!("{method} on {} (seed {seed}): {d}", split.label);
    }
    let residuals = match transform.residualize(&split.test) {
        Ok(r) => r,
        Err(e) => {
            cell.fit_error = Some(e.to_string());
            return cell;
        }
    };
    if stages.orthogonality {
        cell.orthogonality = Some(
            summarize_rows(&residuals.values, false)
                .map(|(s, zero)| {
                    (
                        s,
                        zero.into_iter()
                            .map(|i| residuals.assets[i].clone())
                            .collect(),
                    )
                })
                .map_err(|e| e.to_string()),
        );
    }
    if stages.performance {
        cell.performance = Some(
            backtest(
                &residuals,
                &split.test,
                &config.strategy,
                &split.label,
                method.name(),
            )
            .map_err(|e| e.to_string()),
        );
    }
    if config.dump_transforms {
        cell.transform = Some(transform);
    }
    cell
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub version: String,
    pub config_sha256: String,
    pub data_sha256: Option<String>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub windows: Vec<String>,
    pub cells: usize,
    pub failed_cells: usize,
    pub dropped_assets: Vec<String>,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub cells: Vec<CellResult>,
    pub manifest: Manifest,
    pub output_dir: PathBuf,
}

impl ExperimentOutcome {
    pub fn all_failed(&self) -> bool {
        !self.cells.is_empty() && self.cells.iter().all(CellResult::failed)
    }
}

/// Runs every (window, method, seed) cell and writes the reports.
///
/// `config_bytes` is hashed into the manifest; relative paths in the config
/// resolve against `base_dir`. Cells run in parallel, outputs are written in
/// (window, method, seed) order.
pub fn run_experiment(
    config: &ExperimentConfig,
    config_bytes: &[u8],
    base_dir: &Path,
    output_dir: &Path,
    stages: Stages,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    let prepared = prepare(config, base_dir)?;
    let n_windows = prepared
        .replicates
        .iter()
        .map(|r| r.splits.len())
        .max()
        .unwrap_or(0);

    let mut jobs = Vec::new();
    for w in 0..n_windows {
        for &method in &config.methods {
            for rep in &prepared.replicates {
                if let Some(split) = rep.splits.get(w) {
                    jobs.push((rep.seed, w, split, method));
                }
            }
        }
    }
    let cells: Vec<CellResult> = jobs
        .into_par_iter()
        .map(|(seed, w, split, method)| evaluate_cell(config, seed, w, split, method, stages))
        .collect();

    let windows = prepared.replicates[0]
        .splits
        .iter()
        .map(|s| s.label.clone())
        .collect();
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: sha256_hex(config_bytes),
        data_sha256: prepared.data_sha256.clone(),
        seeds: config.seeds.clone(),
        methods: config.methods.clone(),
        windows,
        cells: cells.len(),
        failed_cells: cells.iter().filter(|c| c.failed()).count(),
        dropped_assets: prepared.dropped_assets.clone(),
    };

    fs::create_dir_all(output_dir)?;
    if stages.orthogonality {
        write_orthogonality(&cells, output_dir)?;
    }
    if stages.performance {
        write_performance(&cells, output_dir)?;
    }
    if config.dump_transforms {
        let dir = output_dir.join("transforms");
        fs::create_dir_all(&dir)?;
        for cell in &cells {
            if let Some(t) = &cell.transform {
                let name = format!(
                    "seed{}_window{}_{}.txt",
                    cell.seed, cell.window_index, cell.method
                );
                t.write_dump(BufWriter::new(fs::File::create(dir.join(name))?))?;
            }
        }
    }
    let manifest_file = fs::File::create(output_dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(manifest_file), &manifest)?;

    Ok(ExperimentOutcome {
        cells,
        manifest,
        output_dir: output_dir.to_path_buf(),
    })
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn status(failed: bool) -> &'static str {
    if failed {
        "failed"
    } else {
        "ok"
    }
}

/// `(window, method)` keys in first-appearance order with their values.
fn grouped<T>(
    items: impl IntoIterator<Item = ((usize, String, Method), T)>,
) -> Vec<((usize, String, Method), Vec<T>)> {
    let mut map: BTreeMap<(usize, Method), (String, Vec<T>)> = BTreeMap::new();
    for ((w, label, m), v) in items {
        map.entry((w, m))
            .or_insert_with(|| (label, Vec::new()))
            .1
            .push(v);
    }
    map.into_iter()
        .map(|((w, m), (label, v))| ((w, label, m), v))
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn write_orthogonality(cells: &[CellResult], dir: &Path) -> Result<()> {
    let mut out = csv::Writer::from_path(dir.join("orthogonality.csv"))?;
    out.write_record([
        "window", "method", "seed", "status", "k", "l1_mean", "l2_mean", "n_pairs", "max_abs",
        "excluded", "error",
    ])?;
    for c in cells {
        let k = c.k.map(|k| k.to_string()).unwrap_or_default();
        let (window, method, seed) = (c.window.clone(), c.method.to_string(), c.seed.to_string());
        match (&c.fit_error, &c.orthogonality) {
            (None, Some(Ok((s, excluded)))) => out.write_record([
                window,
                method,
                seed,
                "ok".into(),
                k,
                fmt(s.l1_mean),
                fmt(s.l2_mean),
                s.n_pairs.to_string(),
                fmt(s.max_abs),
                excluded.join(";"),
                String::new(),
            ])?,
            (err, ortho) => {
                let msg = err
                    .clone()
                    .or_else(|| ortho.as_ref().and_then(|o| o.as_ref().err().cloned()))
                    .unwrap_or_default();
                out.write_record([
                    window,
                    method,
                    seed,
                    "failed".into(),
                    k,
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    msg,
                ])?
            }
        }
    }
    out.flush()?;

    let rows = cells
        .iter()
        .filter_map(|c| match (&c.fit_error, &c.orthogonality) {
            (None, Some(Ok((s, _)))) => Some((
                (c.window_index, c.window.clone(), c.method),
                (s.l1_mean, s.l2_mean),
            )),
            _ => None,
        });
    let mut avg = csv::Writer::from_path(dir.join("orthogonality_avg.csv"))?;
    avg.write_record(["window", "method", "l1_mean", "l2_mean", "seeds"])?;
    for ((_, label, method), vals) in grouped(rows) {
        let l1: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let l2: Vec<f64> = vals.iter().map(|v| v.1).collect();
        avg.write_record([
            label,
            method.to_string(),
            fmt(mean(&l1)),
            fmt(mean(&l2)),
            vals.len().to_string(),
        ])?;
    }
    avg.flush()?;
    Ok(())
}

/// One row of `performance.csv` for a lag or for the lag average.
struct PerformanceRow {
    window: String,
    method: String,
    seed: u64,
    lag: String,
    status: &'static str,
    sr: Option<f64>,
    mdd: Option<f64>,
    mdd_running_peak: Option<f64>,
    cvar: Option<f64>,
}

fn write_performance(cells: &[CellResult], dir: &Path) -> Result<()> {
    let mut out = csv::Writer::from_path(dir.join("performance.csv"))?;
    out.write_record([
        "window",
        "method",
        "seed",
        "lag",
        "status",
        "sr",
        "mdd",
        "mdd_running_peak",
        "cvar",
    ])?;
    let mut rows = Vec::new();
    for c in cells {
        match (&c.fit_error, &c.performance) {
            (None, Some(Ok(report))) => {
                for p in &report.per_lag {
                    rows.push(PerformanceRow {
                        window: c.window.clone(),
                        method: c.method.to_string(),
                        seed: c.seed,
                        lag: p.lag.to_string(),
                        status: status(false),
                        sr: Some(p.sr),
                        mdd: Some(p.mdd),
                        mdd_running_peak: Some(p.mdd_running_peak),
                        cvar: Some(p.cvar),
                    });
                }
                rows.push(PerformanceRow {
                    window: c.window.clone(),
                    method: c.method.to_string(),
                    seed: c.seed,
                    lag: "avg".into(),
                    status: status(false),
                    sr: Some(report.sr),
                    mdd: Some(report.mdd),
                    mdd_running_peak: Some(report.mdd_running_peak),
                    cvar: Some(report.cvar),
                });
            }
            _ => rows.push(PerformanceRow {
                window: c.window.clone(),
                method: c.method.to_string(),
                seed: c.seed,
                lag: "avg".into(),
                status: status(true),
                sr: None,
                mdd: None,
                mdd_running_peak: None,
                cvar: None,
            }),
        }
    }
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    for r in &rows {
        out.write_record([
            r.window.clone(),
            r.method.clone(),
            r.seed.to_string(),
            r.lag.clone(),
            r.status.to_string(),
            opt(r.sr),
            opt(r.mdd),
            opt(r.mdd_running_peak),
            opt(r.cvar),
        ])?;
    }
    out.flush()?;

    // Seed averages per (window, method, lag); the lag average sorts last.
    let mut groups: BTreeMap<(usize, Method, Option<usize>), (String, Vec<[f64; 4]>)> =
        BTreeMap::new();
    for c in cells {
        let (None, Some(Ok(report))) = (&c.fit_error, &c.performance) else {
            continue;
        };
        let mut push = |lag: Option<usize>, v: [f64; 4]| {
            groups
                .entry((c.window_index, c.method, lag))
                .or_insert_with(|| (c.window.clone(), Vec::new()))
                .1
                .push(v)
        };
        for p in &report.per_lag {
            push(Some(p.lag), [p.sr, p.mdd, p.mdd_running_peak, p.cvar]);
        }
        push(
            None,
            [report.sr, report.mdd, report.mdd_running_peak, report.cvar],
        );
    }
    let mut avg = csv::Writer::from_path(dir.join("performance_avg.csv"))?;
    avg.write_record([
        "window",
        "method",
        "lag",
        "sr",
        "mdd",
        "mdd_running_peak",
        "cvar",
        "seeds",
    ])?;
    let mut json_rows = Vec::new();
    let mut groups: Vec<_> = groups.into_iter().collect();
    groups.sort_by_key(|((w, m, lag), _)| (*w, *m, lag.is_none(), *lag));
    for ((_, method, lag), (label, vals)) in groups {
        let lag = lag.map_or_else(|| "avg".to_string(), |d| d.to_string());
        let col = |i: usize| mean(&vals.iter().map(|v| v[i]).collect::<Vec<_>>());
        let m = [col(0), col(1), col(2), col(3)];
        avg.write_record([
            label.clone(),
            method.to_string(),
            lag.clone(),
            fmt(m[0]),
            fmt(m[1]),
            fmt(m[2]),
            fmt(m[3]),
            vals.len().to_string(),
        ])?;
        json_rows.push(serde_json::json!({
            "window": label,
            "method": method.name(),
            "lag": lag,
            "sr": m[0],
            "mdd": m[1],
            "mdd_running_peak": m[2],
            "cvar": m[3],
            "seeds": vals.len(),
        }));
    }
    avg.flush()?;
    let json = fs::File::create(dir.join("performance.json"))?;
    serde_json::to_writer_pretty(
        BufWriter::new(json),
        &serde_json::json!({ "rows": json_rows }),
    )?;
    Ok(())
}

/// Recomputes seed averages from one or more `orthogonality.csv` and
/// `performance.csv` files and writes the merged tables to `out_dir`.
pub fn merge_reports(inputs: &[PathBuf], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    for (name, key_cols) in [("orthogonality.csv", 2usize), ("performance.csv", 4usize)] {
        let mut header: Option<csv::StringRecord> = None;
        let mut records = Vec::new();
        for dir in inputs {
            let path = dir.join(name);
            if !path.exists() {
                continue;
            }
            let mut reader = csv::Reader::from_path(&path)?;
            let h = reader.headers()?.clone();
            match &header {
                Some(existing) if existing != &h => {
                    return Err(Error::Alignment(format!(
                        "{} has a different header",
                        path.display()
                    )));
                }
                _ => header = Some(h),
            }
            for r in reader.records() {
                records.push(r?);
            }
        }
        let Some(header) = header else { continue };
        let mut out = csv::Writer::from_path(out_dir.join(name))?;
        out.write_record(&header)?;
        for r in &records {
            out.write_record(r)?;
        }
        out.flush()?;

        // Average numeric columns of ok rows by (window, method[, lag]).
        let status_col = header.iter().position(|h| h == "status");
        let numeric: Vec<usize> = header
            .iter()
            .enumerate()
            .filter(|(_, h)| {
                matches!(
                    *h,
                    "l1_mean" | "l2_mean" | "sr" | "mdd" | "mdd_running_peak" | "cvar"
                )
            })
            .map(|(i, _)| i)
            .collect();
        let group_cols: Vec<usize> = header
            .iter()
            .enumerate()
            .take(key_cols)
            .filter(|(_, h)| *h != "seed")
            .map(|(i, _)| i)
            .collect();
        let mut groups: Vec<(Vec<String>, Vec<Vec<f64>>)> = Vec::new();
        for r in &records {
            if status_col.is_some_and(|c| &r[c] != "ok") {
                continue;
            }
            let key: Vec<String> = group_cols.iter().map(|&c| r[c].to_string()).collect();
            let vals = numeric
                .iter()
                .map(|&c| {
                    r[c].parse::<f64>()
                        .map_err(|e| Error::parse(0, format!("{name}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(vals),
                None => groups.push((key, vec![vals])),
            }
        }
        let avg_name = name.replace(".csv", "_avg.csv");
        let mut avg = csv::Writer::from_path(out_dir.join(avg_name))?;
        let mut avg_header: Vec<String> =
            group_cols.iter().map(|&c| header[c].to_string()).collect();
        avg_header.extend(numeric.iter().map(|&c| header[c].to_string()));
        avg_header.push("seeds".into());
        avg.write_record(&avg_header)?;
        for (key, rows) in groups {
            let mut rec = key;
            for j in 0..numeric.len() {
                rec.push(fmt(mean(&rows.iter().map(|r| r[j]).collect::<Vec<_>>())));
            }
            rec.push(rows.len().to_string());
            avg.write_record(&rec)?;
        }
        avg.flush()?;
    }
    Ok(())
}
