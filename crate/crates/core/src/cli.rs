//! Command-line pipelines: `simulate`, `train`, `evaluate` and `cv`.
//!
//! Every parameter is a key of a [`RunConfig`]. Values are layered, later
//! layers winning: built-in defaults, the `--config` file, `NFM_OUT_DIR` (for
//! `out_dir` only), `--set key=value` pairs, then dedicated flags such as
//! `--epochs`. Config files hold one `key = value` per line; `#` starts a
//! comment.
//!
//! Outputs are pure functions of the inputs and the seed, so reruns produce
//! byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{apply_scaler, fit_scaler, load_csv, make_cv_plan, write_csv, CsvSchema, CvParams, Dataset};
use crate::derive_seed;
use crate::error::{NfmError, Result};
use crate::frailty::{FrailtyFamily, FrailtySpec, ThetaBounds};
use crate::metrics::{EvalWindow, MetricsReport, SurvivalCurve};
use crate::model::{train, NfmModel, TrainConfig};
use crate::synth::{generate_with_holdout, SynthConfig, DEFAULT_BETA};

pub const OUT_DIR_ENV: &str = "NFM_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "nfm", version, about = "Neural frailty machines for right-censored survival data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Key-value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset, hold-out set and truth sidecar.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        target_censoring: Option<f64>,
    },
    /// Fit a model and write it with its per-epoch trace.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a model, or a table of predicted curves, on a test set.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Long-format predictions `id,t,s` instead of a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Repeated k-fold cross-validation.
    Cv {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
}

const COMMON_KEYS: &[&str] = &["seed", "out_dir"];
const DATA_KEYS: &[&str] = &["data", "schema", "time_column", "event_column"];
const WINDOW_KEYS: &[&str] = &["t1", "t2", "grid_size"];
const SIM_KEYS: &[&str] =
    &["n", "beta", "frailty", "alpha", "theta", "target_censoring", "holdout", "covariate_effect"];
const TRAIN_KEYS: &[&str] = &[
    "scheme",
    "hidden_widths",
    "epochs",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "dropout_p",
    "quad_order",
    "eval_quad_order",
    "frailty",
    "alpha",
    "theta_init",
    "theta_min",
    "theta_max",
    "learn_theta",
    "tau",
    "standardize",
];
const EVAL_KEYS: &[&str] = &["model", "predictions"];
const CV_KEYS: &[&str] = &["n_folds", "n_repeats", "holdout_fraction"];

/// Flat `key -> value` parameter set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| NfmError::Config(format!("config line {}: expected 'key = value'", lineno + 1)))?;
            cfg.set(k.trim(), v.trim());
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NfmError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| NfmError::Config(format!("override '{pair}' is not of the form key=value")))?;
        if k.trim().is_empty() {
            return Err(NfmError::Config(format!("override '{pair}' has an empty key")));
        }
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| NfmError::Config(format!("invalid value '{v}' for key '{key}'"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| NfmError::Config(format!("missing required key '{key}'")))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|x| {
                    x.trim().parse().map_err(|_| NfmError::Config(format!("invalid list entry '{x}' for key '{key}'")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    fn check_keys(&self, allowed: &[&[&str]]) -> Result<()> {
        for k in self.values.keys() {
            if !allowed.iter().any(|set| set.contains(&k.as_str())) {
                return Err(NfmError::Config(format!("unknown config key '{k}'")));
            }
        }
        Ok(())
    }
}

fn layered(common: &CommonArgs, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.set("out_dir", &dir);
        }
    }
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    if let Some(out) = &common.out {
        cfg.set("out_dir", &out.to_string_lossy());
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string());
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v);
        }
    }
    Ok(cfg)
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.to_string_lossy().into_owned())
}

/// Parses `args` (including the program name) and runs the command,
/// returning its stdout summary.
pub fn run_from<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| NfmError::Config(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Simulate { common, n, target_censoring } => {
            let cfg = layered(
                &common,
                &[("n", n.map(|v| v.to_string())), ("target_censoring", target_censoring.map(|v| v.to_string()))],
            )?;
            cmd_simulate(&cfg)
        }
        Command::Train { common, data, schema, scheme, epochs } => {
            let cfg = layered(
                &common,
                &[
                    ("data", path_flag(&data)),
                    ("schema", path_flag(&schema)),
                    ("scheme", scheme),
                    ("epochs", epochs.map(|v| v.to_string())),
                ],
            )?;
            cmd_train(&cfg)
        }
        Command::Evaluate { common, model, predictions, data, schema } => {
            let cfg = layered(
                &common,
                &[
                    ("model", path_flag(&model)),
                    ("predictions", path_flag(&predictions)),
                    ("data", path_flag(&data)),
                    ("schema", path_flag(&schema)),
                ],
            )?;
            cmd_evaluate(&cfg)
        }
        Command::Cv { common, data, schema, scheme, epochs, folds, repeats } => {
            let cfg = layered(
                &common,
                &[
                    ("data", path_flag(&data)),
                    ("schema", path_flag(&schema)),
                    ("scheme", scheme),
                    ("epochs", epochs.map(|v| v.to_string())),
                    ("n_folds", folds.map(|v| v.to_string())),
                    ("n_repeats", repeats.map(|v| v.to_string())),
                ],
            )?;
            cmd_cv(&cfg)
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.path("out_dir").unwrap_or_else(|| PathBuf::from("nfm_out"));
    fs::create_dir_all(&dir).map_err(|e| NfmError::io(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| NfmError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| NfmError::Json { path: path.to_path_buf(), source: e })?;
    text.push('\n');
    write_text(path, &text)
}

fn frailty_family(cfg: &RunConfig) -> Result<FrailtyFamily> {
    let key = cfg.raw("frailty").unwrap_or("gamma");
    FrailtyFamily::from_key(key, cfg.get("alpha")?)
}

pub fn synth_config(cfg: &RunConfig) -> Result<SynthConfig> {
    let family = frailty_family(cfg)?;
    let config = SynthConfig {
        n: cfg.get_or("n", 1000)?,
        beta: cfg.get_list("beta")?.unwrap_or_else(|| DEFAULT_BETA.to_vec()),
        frailty: FrailtySpec::new(family, cfg.get_or("theta", 1.0)?)?,
        target_censoring: cfg.get_or("target_censoring", 0.40)?,
        seed: cfg.get_or("seed", 0)?,
        covariate_effect: cfg.get_or("covariate_effect", true)?,
    };
    config.validate()?;
    Ok(config)
}

/// Writes `data.csv`, `holdout.csv` and `truth.csv` (hold-out rows with the
/// true `ν`, `m` and marginal survival at the observed time).
pub fn cmd_simulate(cfg: &RunConfig) -> Result<String> {
    cfg.check_keys(&[COMMON_KEYS, SIM_KEYS])?;
    let config = synth_config(cfg)?;
    let n_holdout: usize = cfg.get_or("holdout", 100)?;
    let dir = out_dir(cfg)?;
    let (train_set, holdout, truth) = generate_with_holdout(&config, n_holdout)?;
    write_csv(&train_set, &dir.join("data.csv"))?;
    write_csv(&holdout, &dir.join("holdout.csv"))?;

    let mut text = String::from("id,time,event");
    for name in config.covariate_names() {
        text.push(',');
        text.push_str(&name);
    }
    text.push_str(",nu_true,m_true,s_true\n");
    for (i, s) in holdout.samples().iter().enumerate() {
        let _ = write!(text, "{i},{},{}", s.time, u8::from(s.event));
        for z in &s.covariates {
            let _ = write!(text, ",{z}");
        }
        let _ = writeln!(text, ",{},{},{}", truth.nu(s.time, &s.covariates), truth.m(&s.covariates), truth.survival(s.time, &s.covariates)?);
    }
    write_text(&dir.join("truth.csv"), &text)?;

    Ok(format!(
        "n={} holdout={} censoring_rate={:.4} target={} censoring_shift={}\n",
        train_set.len(),
        holdout.len(),
        train_set.censoring_rate(),
        config.target_censoring,
        truth.censoring_shift
    ))
}

pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let theta_bounds = ThetaBounds::new(
        cfg.get_or("theta_min", d.theta_bounds.min)?,
        cfg.get_or("theta_max", d.theta_bounds.max)?,
    )?;
    let config = TrainConfig {
        scheme: cfg.get_or("scheme", d.scheme)?,
        hidden_widths: cfg.get_list("hidden_widths")?.unwrap_or(d.hidden_widths),
        epochs: cfg.get_or("epochs", d.epochs)?,
        batch_size: cfg.get_or("batch_size", d.batch_size)?,
        learning_rate: cfg.get_or("learning_rate", d.learning_rate)?,
        weight_decay: cfg.get_or("weight_decay", d.weight_decay)?,
        dropout_p: cfg.get_or("dropout_p", d.dropout_p)?,
        quad_order: cfg.get_or("quad_order", d.quad_order)?,
        eval_quad_order: cfg.get_or("eval_quad_order", d.eval_quad_order)?,
        seed: cfg.get_or("seed", d.seed)?,
        frailty: frailty_family(cfg)?,
        theta_init: cfg.get_or("theta_init", d.theta_init)?,
        theta_bounds,
        learn_theta: cfg.get_or("learn_theta", d.learn_theta)?,
        tau: cfg.get("tau")?,
    };
    config.validate()?;
    Ok(config)
}

fn schema(cfg: &RunConfig) -> Result<CsvSchema> {
    let mut schema = match cfg.path("schema") {
        Some(p) => CsvSchema::from_file(&p)?,
        None => CsvSchema::default(),
    };
    if let Some(t) = cfg.raw("time_column") {
        schema.time_column = t.to_string();
    }
    if let Some(e) = cfg.raw("event_column") {
        schema.event_column = e.to_string();
    }
    Ok(schema)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let path: PathBuf = cfg.require("data")?;
    load_csv(&path, &schema(cfg)?)
}

/// Standardizes `train_set` when enabled and fits; the model keeps the scaler.
fn fit(train_set: &Dataset, cfg: &RunConfig, config: &TrainConfig) -> Result<NfmModel> {
    let train_set = if cfg.get_or("standardize", true)? {
        apply_scaler(train_set, &fit_scaler(train_set)?)?
    } else {
        train_set.clone()
    };
    Ok(train(&train_set, config)?.model)
}

/// Writes `model.json` and `trace.csv`.
pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    cfg.check_keys(&[COMMON_KEYS, DATA_KEYS, TRAIN_KEYS])?;
    let config = train_config(cfg)?;
    let data = load_data(cfg)?;
    let dir = out_dir(cfg)?;
    let train_set = if cfg.get_or("standardize", true)? { apply_scaler(&data, &fit_scaler(&data)?)? } else { data };
    let outcome = train(&train_set, &config)?;
    outcome.model.save(&dir.join("model.json"))?;

    let mut trace = String::from("epoch,mean_batch_oll,oll,theta\n");
    for r in &outcome.trace {
        let _ = writeln!(trace, "{},{},{},{}", r.epoch, r.mean_batch_oll, r.oll, r.theta);
    }
    write_text(&dir.join("trace.csv"), &trace)?;

    let first = outcome.trace.first().map(|r| r.oll).unwrap_or(f64::NAN);
    let last = outcome.trace.last().map(|r| r.oll).unwrap_or(f64::NAN);
    Ok(format!(
        "scheme={:?} epochs={} initial_oll={first} final_oll={last} theta={}\n",
        config.scheme,
        config.epochs,
        outcome.model.frailty().theta
    ))
}

fn window(cfg: &RunConfig, test: &Dataset, tau: Option<f64>) -> Result<EvalWindow> {
    let default = EvalWindow::default_for(test.samples())?;
    let t1 = cfg.get_or("t1", default.t1)?;
    let mut t2 = cfg.get_or("t2", default.t2)?;
    if let Some(tau) = tau {
        t2 = t2.min(tau);
    }
    EvalWindow::new(t1, t2, cfg.get_or("grid_size", default.grid_size)?)
}

/// Sorted distinct test times, truncated at `tau`. Curves on this grid are
/// held flat beyond it.
fn concordance_grid(test: &Dataset, tau: f64) -> Vec<f64> {
    let mut grid: Vec<f64> = test.samples().iter().map(|s| s.time.min(tau)).collect();
    grid.push(0.0);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Window and concordance curves of `model` for every test subject.
fn model_curves(model: &NfmModel, test: &Dataset, win: &EvalWindow) -> Result<(Vec<SurvivalCurve>, Vec<SurvivalCurve>)> {
    if model.covariate_names.as_slice() != test.covariate_names() {
        return Err(NfmError::Dataset(format!(
            "test covariates {:?} do not match the model's {:?}",
            test.covariate_names(),
            model.covariate_names
        )));
    }
    let zs: Vec<Vec<f64>> = test
        .samples()
        .iter()
        .map(|s| {
            let mut z = s.covariates.clone();
            if let Some(sc) = &model.scaler {
                sc.apply_in_place(&mut z);
            }
            z
        })
        .collect();
    let window_curves = model.survival_curves(&zs, &win.grid())?;
    let conc_curves = model.survival_curves(&zs, &concordance_grid(test, model.tau()))?;
    Ok((window_curves, conc_curves))
}

/// Reads long-format predictions `id,t,s`; ids index test rows from 0.
pub fn load_predictions(path: &Path, n: usize) -> Result<Vec<SurvivalCurve>> {
    let csv_err = |e| NfmError::Csv { path: path.to_path_buf(), source: e };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut points: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n];
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize, name: &str| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| NfmError::Parse { row: r + 1, column: name.into(), msg: "expected a number".into() })
        };
        let id = field(0, "id")?;
        if id < 0.0 || id.fract() != 0.0 || id as usize >= n {
            return Err(NfmError::Parse { row: r + 1, column: "id".into(), msg: format!("id {id} is not a test row") });
        }
        points[id as usize].push((field(1, "t")?, field(2, "s")?));
    }
    points
        .into_iter()
        .enumerate()
        .map(|(i, mut p)| {
            if p.is_empty() {
                return Err(NfmError::Dataset(format!("no predictions for test row {i}")));
            }
            p.sort_by(|a, b| a.0.total_cmp(&b.0));
            SurvivalCurve::new(p.iter().map(|x| x.0).collect(), p.iter().map(|x| x.1).collect())
        })
        .collect()
}

#[derive(Serialize)]
struct ReportFile<'a> {
    format: &'static str,
    version: u32,
    source: &'a str,
    #[serde(flatten)]
    report: MetricsReport,
}

/// Writes `report.txt`, `report.json` and, for models, `curves.csv`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<String> {
    cfg.check_keys(&[COMMON_KEYS, DATA_KEYS, WINDOW_KEYS, EVAL_KEYS])?;
    let test = load_data(cfg)?;
    let dir = out_dir(cfg)?;
    let (report, source) = match (cfg.path("model"), cfg.path("predictions")) {
        (Some(model_path), None) => {
            let model = NfmModel::load(&model_path)?;
            let win = window(cfg, &test, Some(model.tau()))?;
            let (window_curves, conc_curves) = model_curves(&model, &test, &win)?;
            let mut curves = String::from("id,t,s\n");
            for (i, c) in window_curves.iter().enumerate() {
                for (t, s) in c.times.iter().zip(&c.values) {
                    let _ = writeln!(curves, "{i},{t},{s}");
                }
            }
            write_text(&dir.join("curves.csv"), &curves)?;
            (MetricsReport::compute(&window_curves, &conc_curves, test.samples(), win)?, "model")
        }
        (None, Some(pred_path)) => {
            let curves = load_predictions(&pred_path, test.len())?;
            let win = window(cfg, &test, None)?;
            (MetricsReport::compute(&curves, &curves, test.samples(), win)?, "predictions")
        }
        _ => return Err(NfmError::Config("give exactly one of 'model' or 'predictions'".into())),
    };
    let text = report.to_text();
    write_text(&dir.join("report.txt"), &text)?;
    write_json(&dir.join("report.json"), &ReportFile { format: "nfm-report", version: 1, source, report })?;
    Ok(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CvRow {
    pub repeat: usize,
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub ibs: f64,
    pub inbll: f64,
    pub cindex: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (denominator `n - 1`).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvSummary {
    pub n_runs: usize,
    pub ibs: MeanStd,
    pub inbll: MeanStd,
    pub cindex: MeanStd,
}

/// Trains on each fold's training indices and scores its test fold. The
/// validation indices of the plan are left unused. Writes `cv_folds.csv`,
/// `cv_summary.txt` and `cv_summary.json`.
pub fn cmd_cv(cfg: &RunConfig) -> Result<String> {
    cfg.check_keys(&[COMMON_KEYS, DATA_KEYS, WINDOW_KEYS, TRAIN_KEYS, CV_KEYS])?;
    let base = train_config(cfg)?;
    let data = load_data(cfg)?;
    let dir = out_dir(cfg)?;
    let d = CvParams::default();
    let params = CvParams {
        n_folds: cfg.get_or("n_folds", d.n_folds)?,
        holdout_fraction: cfg.get_or("holdout_fraction", d.holdout_fraction)?,
        n_repeats: cfg.get_or("n_repeats", d.n_repeats)?,
    };
    let plan = make_cv_plan(data.len(), params, derive_seed(base.seed, 100))?;

    let mut rows = Vec::new();
    for (r, folds) in plan.runs.iter().enumerate() {
        for (f, split) in folds.iter().enumerate() {
            let run = r * params.n_folds + f;
            let config = TrainConfig { seed: derive_seed(base.seed, 1000 + run as u64), tau: None, ..base.clone() };
            let train_set = data.subset(&split.train);
            let test = data.subset(&split.test);
            let fold_err = |e| NfmError::Fold { repeat: r, fold: f, source: Box::new(e) };
            let model = fit(&train_set, cfg, &config).map_err(fold_err)?;
            let report = (|| {
                let win = window(cfg, &test, Some(model.tau()))?;
                let (window_curves, conc_curves) = model_curves(&model, &test, &win)?;
                MetricsReport::compute(&window_curves, &conc_curves, test.samples(), win)
            })()
            .map_err(fold_err)?;
            rows.push(CvRow {
                repeat: r,
                fold: f,
                n_train: train_set.len(),
                n_test: test.len(),
                ibs: report.ibs,
                inbll: report.inbll,
                cindex: report.cindex,
                theta: model.frailty().theta,
            });
        }
    }

    let mut table = String::from("repeat,fold,n_train,n_test,ibs,inbll,cindex,theta\n");
    for row in &rows {
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{}",
            row.repeat, row.fold, row.n_train, row.n_test, row.ibs, row.inbll, row.cindex, row.theta
        );
    }
    write_text(&dir.join("cv_folds.csv"), &table)?;

    let pick = |f: fn(&CvRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let summary = CvSummary {
        n_runs: rows.len(),
        ibs: MeanStd::of(&pick(|r| r.ibs)),
        inbll: MeanStd::of(&pick(|r| r.inbll)),
        cindex: MeanStd::of(&pick(|r| r.cindex)),
    };
    let text = format!(
        "runs={}\nmetric=ibs mean={} std={}\nmetric=inbll mean={} std={}\nmetric=cindex mean={} std={}\n",
        summary.n_runs,
        summary.ibs.mean,
        summary.ibs.std,
        summary.inbll.mean,
        summary.inbll.std,
        summary.cindex.mean,
        summary.cindex.std
    );
    write_text(&dir.join("cv_summary.txt"), &text)?;
    write_json(&dir.join("cv_summary.json"), &summary)?;
    Ok(text)
}
