//! `cmmm` subcommands: gen, train, eval-structure, eval-forecast, infer, baseline.
//!
//! Every command reads and writes plain files. Results go to `metrics.json`
//! (merged across commands) and the resolved settings to `run_config.json`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cmmm_core::datagen::{generate_dataset, SimConfig};
use cmmm_core::diffcore::Checkpoint;
use cmmm_core::encoder::{encode, export_structure, EDGE_THRESHOLD};
use cmmm_core::evalkit::{
    evaluate_structure, forecast_mse, linear_granger, mean_std, persistence_mse, posterior_structure,
    score_structure, var_forecast_mse, BaselineConfig, MetricsReport,
};
use cmmm_core::io::{read_dataset, write_generated, Dataset};
use cmmm_core::model::ModelParams;
use cmmm_core::trainer::{fit, Split, TrainConfig, TrainData};
use cmmm_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Evaluation settings not covered by the other sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Number of posterior draws scored by `eval-structure`.
    pub seeds: usize,
    pub horizons: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seeds: 10,
            horizons: vec![1, 7, 30],
        }
    }
}

/// Every setting a run depends on. Commands fill in their own sections and keep
/// the rest of an existing `run_config.json` in the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
}

#[derive(Parser, Debug)]
#[command(name = "cmmm", about = "Per-shop causal structure learning for marketing mix data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with ground-truth graphs.
    Gen(Common),
    /// Train encoder and decoder on a dataset.
    Train(Common),
    /// Score inferred graphs against ground truth.
    EvalStructure(Common),
    /// Multi-step target forecasting error on held-out shops.
    EvalForecast(Common),
    /// Export per-shop edge probabilities and adjacency.
    Infer(Common),
    /// Linear Granger baseline.
    Baseline(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    #[arg(long)]
    lag: Option<usize>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: String,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            kind: "usage".into(),
            message: message.into(),
        }
    }

    /// `ERROR <code>: <message>` on one line.
    pub fn line(&self) -> String {
        format!("ERROR {}: {}", self.kind, self.message.replace('\n', " "))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numeric() { EXIT_NUMERIC } else { EXIT_DATA },
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

/// Parses `argv` (without the program name), runs the command, and returns the
/// exit code. Errors are reported on stderr.
pub fn run<S: AsRef<str>>(argv: &[S]) -> i32 {
    init_logging();
    match execute(argv) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("{}", f.line());
            f.code
        }
    }
}

fn init_logging() {
    let filter = std::env::var("CMMM_LOG").unwrap_or_else(|_| "error".into());
    let _ = env_logger::Builder::new()
        .parse_filters(&filter)
        .format_timestamp(None)
        .try_init();
}

/// Like [`run`] but returns the failure instead of printing it.
pub fn execute<S: AsRef<str>>(argv: &[S]) -> CmdResult {
    let args = std::iter::once("cmmm").chain(argv.iter().map(|s| s.as_ref()));
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return Err(Failure::usage(first));
        }
    };
    let (name, common) = match &cli.command {
        Command::Gen(c) => ("gen", c),
        Command::Train(c) => ("train", c),
        Command::EvalStructure(c) => ("eval-structure", c),
        Command::EvalForecast(c) => ("eval-forecast", c),
        Command::Infer(c) => ("infer", c),
        Command::Baseline(c) => ("baseline", c),
    };
    let threads = match common.threads {
        Some(0) => return Err(Failure::usage("--threads must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::usage(format!("cannot start {threads} threads: {e}")))?;
    log::info!("{name} with {threads} threads");
    pool.install(|| match &cli.command {
        Command::Gen(c) => gen(c),
        Command::Train(c) => train(c),
        Command::EvalStructure(c) => eval_structure(c),
        Command::EvalForecast(c) => eval_forecast(c),
        Command::Infer(c) => infer(c),
        Command::Baseline(c) => baseline(c),
    })
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Error::io(path, e).into()
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CmdResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())).into())
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> CmdResult<&'a PathBuf> {
    value.as_ref().ok_or_else(|| Failure::usage(format!("missing required flag --{flag}")))
}

fn make_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Base config: `--config` if given, else `run_config.json` already in `out`, else defaults.
fn base_config(c: &Common, out: &Path) -> CmdResult<RunConfig> {
    if let Some(path) = &c.config {
        return read_json(path);
    }
    let existing = out.join("run_config.json");
    if existing.is_file() {
        return read_json(&existing);
    }
    Ok(RunConfig::default())
}

fn apply_flags(cfg: &mut RunConfig, c: &Common) {
    if let Some(v) = c.lambda {
        cfg.train.lambda = v;
    }
    if let Some(v) = c.tau {
        cfg.train.tau = v;
    }
    if let Some(v) = c.seeds {
        cfg.eval.seeds = v;
    }
    if let Some(v) = &c.horizons {
        cfg.eval.horizons = v.clone();
    }
    if let Some(v) = c.lag {
        cfg.baseline.lag = v;
    }
    if let Some(v) = c.ridge {
        cfg.baseline.ridge = v;
    }
    if c.data.is_some() {
        cfg.data_dir = c.data.clone();
    }
    if c.ckpt.is_some() {
        cfg.ckpt = c.ckpt.clone();
    }
}

fn save_run_config(cfg: &mut RunConfig, out: &Path) -> CmdResult {
    cfg.out_dir = Some(out.to_path_buf());
    write_json(&out.join("run_config.json"), cfg)
}

fn load_dataset(dir: &Path) -> CmdResult<Dataset> {
    log::info!("reading dataset {}", dir.display());
    Ok(read_dataset(dir)?)
}

fn load_model(path: &Path) -> CmdResult<ModelParams> {
    let ckpt = Checkpoint::load(path)?;
    Ok(ModelParams::from_checkpoint(&ckpt)?)
}

/// Evaluation output directory: `--out`, else the checkpoint's directory.
fn eval_out(c: &Common, ckpt: &Path) -> PathBuf {
    c.out.clone().unwrap_or_else(|| {
        ckpt.parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    })
}

/// Loads `metrics.json` from `out` when it belongs to the same dataset.
fn load_metrics(out: &Path, dataset_id: &str) -> CmdResult<MetricsReport> {
    let path = out.join("metrics.json");
    if path.is_file() {
        let report: MetricsReport = read_json(&path)?;
        if report.dataset_id == dataset_id {
            return Ok(report);
        }
        log::info!("replacing metrics.json of dataset {}", report.dataset_id);
    }
    Ok(MetricsReport {
        dataset_id: dataset_id.to_string(),
        ..MetricsReport::default()
    })
}

fn gen(c: &Common) -> CmdResult {
    let out = require(&c.out, "out")?;
    let mut cfg = base_config(c, out)?;
    apply_flags(&mut cfg, c);
    if let Some(seed) = c.seed {
        cfg.sim.seed = seed;
    }
    cfg.sim.validate()?;
    let ds = generate_dataset(&cfg.sim)?;
    write_generated(&ds, out)?;
    cfg.data_dir = Some(out.clone());
    save_run_config(&mut cfg, out)?;
    log::info!("wrote {} shops to {}", ds.samples.len(), out.display());
    Ok(())
}

fn train(c: &Common) -> CmdResult {
    let data_dir = require(&c.data, "data")?;
    let out = require(&c.out, "out")?;
    make_dir(out)?;
    let mut cfg = base_config(c, out)?;
    apply_flags(&mut cfg, c);
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    cfg.train.validate()?;
    let ds = load_dataset(data_dir)?;
    if let Some(sim) = &ds.sim_config {
        cfg.sim = sim.clone();
    }
    save_run_config(&mut cfg, out)?;
    let outcome = fit(
        TrainData {
            samples: &ds.samples,
            graphs: ds.graphs.as_deref(),
        },
        &cfg.train,
    )?;
    let ckpt = out.join("best.ckpt");
    outcome.model.to_checkpoint().save(&ckpt)?;
    write_text(&out.join("history.csv"), &outcome.history.to_csv())?;
    write_text(&out.join("timing.csv"), &outcome.history.timing_csv())?;
    write_json(&out.join("split.json"), &outcome.split)?;
    cfg.ckpt = Some(ckpt);
    save_run_config(&mut cfg, out)?;
    log::info!(
        "trained {} epochs, best epoch {}",
        outcome.history.rows.len(),
        outcome.history.best_epoch
    );
    Ok(())
}

fn eval_structure(c: &Common) -> CmdResult {
    let ckpt = require(&c.ckpt, "ckpt")?;
    let data_dir = require(&c.data, "data")?;
    let out = eval_out(c, ckpt);
    make_dir(&out)?;
    let mut cfg = base_config(c, &out)?;
    apply_flags(&mut cfg, c);
    if cfg.eval.seeds < 1 {
        return Err(Failure::usage("--seeds must be at least 1"));
    }
    cmmm_core::encoder::check_tau(cfg.train.tau)?;
    let ds = load_dataset(data_dir)?;
    let graphs = ds
        .graphs
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("{} has no graphs.json", data_dir.display())))?;
    let model = load_model(ckpt)?;
    let seed = c.seed.unwrap_or(cfg.train.seed);
    let draws = posterior_structure(&model, &ds.samples, graphs, cfg.eval.seeds, cfg.train.tau, seed)?;
    let mode = evaluate_structure(&model, &ds.samples, graphs)?;
    let mut report = load_metrics(&out, &ds.dataset_id())?;
    report.seeds = Some(cfg.eval.seeds);
    report.acc_mean = Some(draws.acc_mean);
    report.acc_std = Some(draws.acc_std);
    report.auroc_mean = Some(draws.auroc_mean);
    report.auroc_std = Some(draws.auroc_std);
    report.acc_noise_free = Some(mode.acc_mean);
    report.auroc_noise_free = Some(mode.auroc_mean);
    write_json(&out.join("metrics.json"), &report)?;
    save_run_config(&mut cfg, &out)
}

/// Test shops from `split.json` beside the checkpoint; all shops without one.
fn held_out(ckpt: &Path, ds: &Dataset) -> CmdResult<Vec<usize>> {
    let path = ckpt.with_file_name("split.json");
    if path.is_file() {
        let split: Split = read_json(&path)?;
        if split.test.iter().all(|&k| k < ds.samples.len()) && !split.test.is_empty() {
            return Ok(split.test);
        }
        return Err(Error::Contract(format!("{} does not match the dataset", path.display())).into());
    }
    Ok((0..ds.samples.len()).collect())
}

fn eval_forecast(c: &Common) -> CmdResult {
    let ckpt = require(&c.ckpt, "ckpt")?;
    let data_dir = require(&c.data, "data")?;
    let out = eval_out(c, ckpt);
    make_dir(&out)?;
    let mut cfg = base_config(c, &out)?;
    apply_flags(&mut cfg, c);
    if cfg.eval.horizons.is_empty() || cfg.eval.horizons.contains(&0) {
        return Err(Failure::usage("--horizons needs positive integers"));
    }
    let ds = load_dataset(data_dir)?;
    cfg.baseline.validate(ds.manifest.length)?;
    let model = load_model(ckpt)?;
    let (shops, _) = ds.select(&held_out(ckpt, &ds)?);
    let mut report = load_metrics(&out, &ds.dataset_id())?;
    for &m in &cfg.eval.horizons {
        report.mse.insert(format!("model_m{m}"), forecast_mse(&model, &shops, m)?);
        report.mse.insert(format!("persistence_m{m}"), persistence_mse(&shops, m)?);
        report.mse.insert(format!("linear_granger_m{m}"), var_forecast_mse(&shops, m, &cfg.baseline)?);
    }
    write_json(&out.join("metrics.json"), &report)?;
    save_run_config(&mut cfg, &out)
}

fn infer(c: &Common) -> CmdResult {
    let ckpt = require(&c.ckpt, "ckpt")?;
    let data_dir = require(&c.data, "data")?;
    let out = eval_out(c, ckpt);
    make_dir(&out)?;
    let mut cfg = base_config(c, &out)?;
    apply_flags(&mut cfg, c);
    let ds = load_dataset(data_dir)?;
    let model = load_model(ckpt)?;
    let exports = ds
        .samples
        .iter()
        .enumerate()
        .map(|(k, s)| encode(s, &model).map(|l| export_structure(k, &l)))
        .collect::<Result<Vec<_>, _>>()?;
    write_json(&out.join("structures.json"), &exports)?;
    save_run_config(&mut cfg, &out)
}

fn baseline(c: &Common) -> CmdResult {
    let data_dir = require(&c.data, "data")?;
    let out = c.out.clone().unwrap_or_else(|| data_dir.clone());
    make_dir(&out)?;
    let mut cfg = base_config(c, &out)?;
    apply_flags(&mut cfg, c);
    let ds = load_dataset(data_dir)?;
    let lag_given = c.lag.is_some() || c.config.is_some();
    if !lag_given {
        if let Some(k) = ds.known_lag() {
            cfg.baseline.lag = k;
        }
    }
    cfg.baseline.validate(ds.manifest.length)?;
    let scores = ds
        .samples
        .iter()
        .map(|s| linear_granger(s, &cfg.baseline))
        .collect::<Result<Vec<_>, _>>()?;
    let mut entry = serde_json::Map::new();
    entry.insert("lag".into(), cfg.baseline.lag.into());
    entry.insert("ridge".into(), cfg.baseline.ridge.into());
    if let Some(graphs) = &ds.graphs {
        let per_shop = scores
            .iter()
            .zip(graphs)
            .map(|(s, g)| score_structure(s, EDGE_THRESHOLD, g))
            .collect::<Result<Vec<_>, _>>()?;
        let (acc_mean, acc_std) = mean_std(&per_shop.iter().map(|s| s.acc).collect::<Vec<_>>());
        let (auroc_mean, auroc_std) = mean_std(&per_shop.iter().map(|s| s.auroc).collect::<Vec<_>>());
        entry.insert("acc_mean".into(), acc_mean.into());
        entry.insert("acc_std".into(), acc_std.into());
        entry.insert("auroc_mean".into(), auroc_mean.into());
        entry.insert("auroc_std".into(), auroc_std.into());
    }
    let mut report = load_metrics(&out, &ds.dataset_id())?;
    report.baseline.insert("linear_granger".into(), serde_json::Value::Object(entry));
    write_json(&out.join("metrics.json"), &report)?;
    let rows: Vec<Vec<Vec<f64>>> = scores.iter().map(|m| m.rows()).collect();
    write_json(&out.join("baseline_scores.json"), &rows)?;
    save_run_config(&mut cfg, &out)
}
