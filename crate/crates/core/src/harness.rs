//! Experiment configs, multi-seed runs, metrics files, summaries, comparisons
//! and plot-ready curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_cifar_bin, load_csv, load_idx, CsvSchema, Dataset};
use crate::error::{Error, Result};
use crate::network::{build_model, save_model, Architecture};
use crate::optim::{Adam, OptimHyper};
use crate::scheduler::{
    fit_gd, occam_fit, post_train_prune_baseline, FitOutcome, OccamConfig, OccamTrace, PostTrainPruneConfig,
    TrainSettings,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Gd,
    Ogd,
    #[serde(alias = "ptp")]
    PostTrainPrune,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(Algorithm::Gd),
            "ogd" => Ok(Algorithm::Ogd),
            "ptp" | "post_train_prune" => Ok(Algorithm::PostTrainPrune),
            other => Err(Error::config(format!("unknown algorithm {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Gd => "gd",
            Algorithm::Ogd => "ogd",
            Algorithm::PostTrainPrune => "post_train_prune",
        }
    }
}

fn default_split_fraction() -> f64 {
    0.75
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// MNIST-style IDX image and label files.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        /// Keep only the first N training samples.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// One CSV file split into train and test parts.
    Csv {
        path: PathBuf,
        schema: CsvSchema,
        #[serde(default = "default_split_fraction")]
        split_fraction: f64,
        #[serde(default)]
        split_seed: u64,
    },
    /// CIFAR-10 binary batches.
    Cifar {
        train: Vec<PathBuf>,
        #[serde(default)]
        test: Vec<PathBuf>,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

/// Architecture by name; input width and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub hidden: Option<usize>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_eval_batch() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub algorithm: Algorithm,
    pub epochs: f64,
    pub batch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub optimizer: OptimHyper,
    #[serde(default)]
    pub occam: Option<OccamConfig>,
    #[serde(default)]
    pub post_train_prune: Option<PostTrainPruneConfig>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    /// Parses TOML; relative paths are taken relative to `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        match &mut cfg.dataset {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                resolve(base_dir, train_images);
                resolve(base_dir, train_labels);
                test_images.iter_mut().for_each(|p| resolve(base_dir, p));
                test_labels.iter_mut().for_each(|p| resolve(base_dir, p));
            }
            DatasetSpec::Csv { path, .. } => resolve(base_dir, path),
            DatasetSpec::Cifar { train, test, .. } => {
                train.iter_mut().chain(test.iter_mut()).for_each(|p| resolve(base_dir, p));
            }
        }
        if let Some(out) = &mut cfg.output_dir {
            resolve(base_dir, out);
        }
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    /// Applies command-line overrides.
    pub fn override_with(&mut self, algorithm: Option<Algorithm>, seed_count: Option<usize>, out: Option<PathBuf>) {
        if let Some(a) = algorithm {
            self.algorithm = a;
        }
        if let Some(n) = seed_count {
            let first = self.seeds.first().copied().unwrap_or(0);
            self.seeds = (0..n as u64).map(|i| first + i).collect();
        }
        if let Some(o) = out {
            self.output_dir = Some(o);
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    /// The Occam settings with the epoch budget filled in from `epochs`.
    pub fn occam_config(&self) -> Result<OccamConfig> {
        let mut c = self
            .occam
            .clone()
            .ok_or_else(|| Error::config("algorithm ogd needs an [occam] section"))?;
        if c.epoch_budget == 0.0 {
            c.epoch_budget = self.epochs;
        } else if c.epoch_budget != self.epochs {
            return Err(Error::config(format!(
                "occam.epoch_budget {} disagrees with epochs {}",
                c.epoch_budget, self.epochs
            )));
        }
        Ok(c)
    }

    pub fn post_train_prune_config(&self) -> PostTrainPruneConfig {
        self.post_train_prune.unwrap_or(PostTrainPruneConfig {
            target_fraction: 0.21,
            pretrain_epochs: 6,
            retrain_epochs: 6,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if !(self.epochs > 0.0) {
            return Err(Error::config(format!("epochs must be positive, got {}", self.epochs)));
        }
        self.optimizer.validate()?;
        match self.algorithm {
            Algorithm::Gd => {
                if self.epochs.fract() != 0.0 {
                    return Err(Error::config("gradient descent needs a whole number of epochs"));
                }
            }
            Algorithm::Ogd => self.occam_config()?.validate()?,
            Algorithm::PostTrainPrune => {
                let p = self.post_train_prune_config();
                p.validate()?;
                if (p.pretrain_epochs + p.retrain_epochs) as f64 != self.epochs {
                    return Err(Error::config(format!(
                        "pretrain {} + retrain {} epochs must equal epochs {}",
                        p.pretrain_epochs, p.retrain_epochs, self.epochs
                    )));
                }
            }
        }
        if let DatasetSpec::Csv { split_fraction, .. } = self.dataset {
            if !(split_fraction > 0.0 && split_fraction < 1.0) {
                return Err(Error::config(format!("split fraction {split_fraction} outside (0, 1)")));
            }
        }
        match self.model.name.as_str() {
            "mnist_mlp" | "tabular" | "cifar_cnn" => Ok(()),
            other => Err(Error::config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Training and optional test data for an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

fn truncate(ds: Dataset, limit: Option<usize>) -> Dataset {
    match limit {
        Some(n) if n < ds.len() => ds.subset(&(0..n).collect::<Vec<_>>()),
        _ => ds,
    }
}

impl ExperimentData {
    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        match spec {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let train = truncate(load_idx(train_images, train_labels)?, *train_limit);
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some(truncate(load_idx(i, l)?, *test_limit)),
                    (None, None) => None,
                    _ => return Err(Error::config("test_images and test_labels go together")),
                };
                Ok(ExperimentData { train, test })
            }
            DatasetSpec::Csv {
                path,
                schema,
                split_fraction,
                split_seed,
            } => {
                let (train, test) = load_csv(path, schema)?.split(*split_fraction, *split_seed)?;
                Ok(ExperimentData { train, test: Some(test) })
            }
            DatasetSpec::Cifar {
                train,
                test,
                train_limit,
                test_limit,
            } => {
                let tr = truncate(load_cifar_bin(train)?, *train_limit);
                let te = if test.is_empty() {
                    None
                } else {
                    Some(truncate(load_cifar_bin(test)?, *test_limit))
                };
                Ok(ExperimentData { train: tr, test: te })
            }
        }
    }

    /// Hash over the training and test contents.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.train.fingerprint());
        if let Some(t) = &self.test {
            h.update(b"/");
            h.update(t.fingerprint());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn architecture(&self, spec: &ModelSpec) -> Result<Architecture> {
        let arch = match spec.name.as_str() {
            "mnist_mlp" => Architecture::MnistMlp {
                hidden: spec.hidden.unwrap_or(128),
            },
            "tabular" => {
                let shape = self.train.sample_shape();
                if shape.len() != 1 {
                    return Err(Error::config(format!("tabular model needs flat samples, got {shape:?}")));
                }
                Architecture::Tabular {
                    inputs: shape[0],
                    hidden: spec.hidden.unwrap_or(512),
                    classes: self.train.classes,
                }
            }
            "cifar_cnn" => Architecture::CifarCnn,
            other => return Err(Error::config(format!("unknown architecture {other:?}"))),
        };
        if arch.input_shape() != self.train.sample_shape() {
            return Err(Error::config(format!(
                "architecture {} expects samples {:?}, data has {:?}",
                spec.name,
                arch.input_shape(),
                self.train.sample_shape()
            )));
        }
        Ok(arch)
    }
}

/// A mean and its standard error across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
}

impl Stat {
    /// Sample standard deviation over `sqrt(n)`; zero for a single value.
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        if values.is_empty() {
            return Stat { mean: f64::NAN, stderr: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Stat { mean, stderr }
    }
}

/// Metrics of one run at its best epoch, plus its end state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: usize,
    pub seed: u64,
    pub best_epoch: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub control_loss: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub active_mult: usize,
    pub active_fraction: f64,
    /// Active multiplicative weights plus biases.
    pub active_total: usize,
    pub compute: f64,
    pub final_size: usize,
    pub final_fraction: f64,
    pub final_test_loss: Option<f64>,
    pub final_test_acc: Option<f64>,
    pub total_compute: f64,
}

impl RunResult {
    pub fn from_trace(run_id: usize, trace: &OccamTrace) -> Result<Self> {
        let best = trace
            .best()
            .ok_or_else(|| Error::validation("run produced no steps"))?;
        let last = trace.last().expect("non-empty trace");
        Ok(RunResult {
            run_id,
            seed: trace.seed,
            best_epoch: best.epoch,
            train_loss: best.train_loss,
            train_acc: best.train_acc,
            control_loss: best.control_loss,
            test_loss: best.test_loss,
            test_acc: best.test_acc,
            active_mult: best.active_mult,
            active_fraction: best.active_fraction,
            active_total: best.active_mult + trace.bias_total,
            compute: best.cumulative_compute,
            final_size: trace.final_size(),
            final_fraction: last.active_after as f64 / trace.multiplicative_total as f64,
            final_test_loss: last.test_loss,
            final_test_acc: last.test_acc,
            total_compute: last.cumulative_compute,
        })
    }
}

/// Across-run means at each run's own best epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub best_epoch: Stat,
    pub train_loss: Stat,
    pub train_acc: Stat,
    pub control_loss: Stat,
    pub test_loss: Option<Stat>,
    pub test_acc: Option<Stat>,
    pub active_mult: Stat,
    pub active_fraction: Stat,
    pub active_total: Stat,
    pub compute: Stat,
    pub final_size: Stat,
    pub final_fraction: Stat,
    pub final_test_loss: Option<Stat>,
    pub final_test_acc: Option<Stat>,
    pub total_compute: Stat,
}

impl Aggregate {
    pub fn of(runs: &[RunResult]) -> Aggregate {
        let s = |f: &dyn Fn(&RunResult) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
        let opt = |f: &dyn Fn(&RunResult) -> Option<f64>| {
            runs.iter().map(f).collect::<Option<Vec<_>>>().map(|v| Stat::of(&v))
        };
        Aggregate {
            best_epoch: s(&|r| r.best_epoch),
            train_loss: s(&|r| r.train_loss),
            train_acc: s(&|r| r.train_acc),
            control_loss: s(&|r| r.control_loss),
            test_loss: opt(&|r| r.test_loss),
            test_acc: opt(&|r| r.test_acc),
            active_mult: s(&|r| r.active_mult as f64),
            active_fraction: s(&|r| r.active_fraction),
            active_total: s(&|r| r.active_total as f64),
            compute: s(&|r| r.compute),
            final_size: s(&|r| r.final_size as f64),
            final_fraction: s(&|r| r.final_fraction),
            final_test_loss: opt(&|r| r.final_test_loss),
            final_test_acc: opt(&|r| r.final_test_acc),
            total_compute: s(&|r| r.total_compute),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub algorithm: Algorithm,
    pub architecture: Architecture,
    pub fingerprint: String,
    /// Weights plus biases of the unpruned network.
    pub parameters: usize,
    pub runs: Vec<RunResult>,
    pub mean: Aggregate,
}

impl RunSummary {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("summary.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line() as u64,
            column: e.column(),
            message: format!("{}: {e}", path.display()),
        })
    }
}

/// Everything a finished experiment produced.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub traces: Vec<OccamTrace>,
}

pub const METRIC_COLUMNS: [&str; 12] = [
    "run_id",
    "epoch",
    "train_loss",
    "train_acc",
    "control_loss",
    "test_loss",
    "test_acc",
    "active_mult",
    "active_fraction",
    "lambda_raw",
    "lambda_clamped",
    "cumulative_compute",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

pub fn metrics_csv(traces: &[OccamTrace]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::validation(e.to_string());
    w.write_record(METRIC_COLUMNS).map_err(csv_err)?;
    for (run_id, trace) in traces.iter().enumerate() {
        for r in &trace.records {
            w.write_record([
                run_id.to_string(),
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_acc.to_string(),
                r.control_loss.to_string(),
                opt(r.test_loss),
                opt(r.test_acc),
                r.active_mult.to_string(),
                r.active_fraction.to_string(),
                opt(r.lambda_raw),
                opt(r.lambda_clamped),
                r.cumulative_compute.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::validation(e.to_string()))
}

/// Runs one algorithm/seed pair on already loaded data.
pub fn run_seed(config: &ExperimentConfig, data: &ExperimentData, arch: &Architecture, seed: u64) -> Result<FitOutcome> {
    let model = build_model(arch, seed)?;
    let adam = Adam::new(config.optimizer);
    let settings = TrainSettings {
        batch_size: config.batch_size,
        seed,
        eval_batch: config.eval_batch,
    };
    let test = data.test.as_ref();
    match config.algorithm {
        Algorithm::Gd => fit_gd(model, &data.train, adam, config.epochs as usize, settings, test),
        Algorithm::Ogd => occam_fit(model, &data.train, adam, &config.occam_config()?, settings, test),
        Algorithm::PostTrainPrune => {
            post_train_prune_baseline(model, &data.train, adam, &config.post_train_prune_config(), settings, test)
        }
    }
}

/// Validates, loads data, runs every seed and writes the artifacts.
pub fn run(config: &ExperimentConfig) -> Result<Artifacts> {
    run_with_log(config, &mut |_| {})
}

pub fn run_with_log(config: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<Artifacts> {
    config.validate()?;
    let data = ExperimentData::load(&config.dataset)?;
    run_on(config, &data, log)
}

/// As [`run_with_log`] with the data supplied by the caller.
pub fn run_on(config: &ExperimentConfig, data: &ExperimentData, log: &mut dyn FnMut(&str)) -> Result<Artifacts> {
    config.validate()?;
    let arch = data.architecture(&config.model)?;
    let dir = config.output_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_file(&dir.join("config.json"), to_json(config))?;

    let mut traces = Vec::new();
    let mut runs = Vec::new();
    let mut parameters = 0;
    for (run_id, &seed) in config.seeds.iter().enumerate() {
        let out = run_seed(config, data, &arch, seed)?;
        parameters = out.trace.multiplicative_total + out.trace.bias_total;
        let result = RunResult::from_trace(run_id, &out.trace)?;
        let run_dir = dir.join(format!("run_{run_id}"));
        fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        write_file(&run_dir.join("trace.json"), to_json(&out.trace))?;
        save_model(&out.best, run_dir.join("best.ogd"))?;
        log(&format!(
            "run {run_id} (seed {seed}): best epoch {} test loss {} active {:.4}",
            result.best_epoch,
            opt(result.test_loss),
            result.active_fraction
        ));
        runs.push(result);
        traces.push(out.trace);
    }

    write_file(&dir.join("metrics.csv"), metrics_csv(&traces)?)?;
    let summary = RunSummary {
        name: config.name.clone(),
        algorithm: config.algorithm,
        architecture: arch,
        fingerprint: data.fingerprint(),
        parameters,
        mean: Aggregate::of(&runs),
        runs,
    };
    write_file(&dir.join("summary.json"), to_json(&summary))?;
    Ok(Artifacts { dir, summary, traces })
}

/// Side-by-side numbers of two summaries, `a` relative to `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    /// Best-epoch active size (weights plus biases), a over b.
    pub size_ratio: f64,
    /// End-of-run size, a over b.
    pub final_size_ratio: f64,
    pub test_loss_delta: Option<f64>,
    pub test_loss_delta_pct: Option<f64>,
    pub accuracy_delta: Option<f64>,
    pub compute_ratio: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

pub fn compare(a: &RunSummary, b: &RunSummary) -> Result<Comparison> {
    if a.fingerprint != b.fingerprint {
        return Err(Error::validation(format!(
            "dataset fingerprints differ ({} vs {})",
            a.fingerprint, b.fingerprint
        )));
    }
    if a.architecture != b.architecture {
        return Err(Error::validation(format!(
            "architectures differ ({:?} vs {:?})",
            a.architecture, b.architecture
        )));
    }
    let (ma, mb) = (&a.mean, &b.mean);
    let loss = ma.test_loss.zip(mb.test_loss).map(|(x, y)| (x.mean, y.mean));
    Ok(Comparison {
        a: format!("{} ({})", a.name, a.algorithm.name()),
        b: format!("{} ({})", b.name, b.algorithm.name()),
        size_ratio: ratio(ma.active_total.mean, mb.active_total.mean),
        final_size_ratio: ratio(ma.final_size.mean, mb.final_size.mean),
        test_loss_delta: loss.map(|(x, y)| x - y),
        test_loss_delta_pct: loss.map(|(x, y)| if x == y { 0.0 } else { 100.0 * (x - y) / y }),
        accuracy_delta: ma.test_acc.zip(mb.test_acc).map(|(x, y)| x.mean - y.mean),
        compute_ratio: ratio(ma.compute.mean, mb.compute.mean),
    })
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let na = |v: Option<f64>, digits: usize| v.map_or("n/a".to_string(), |x| format!("{x:+.digits$}"));
        let _ = writeln!(s, "{} vs {}", self.a, self.b);
        let _ = writeln!(s, "  size ratio (best epoch)  {:.4}", self.size_ratio);
        let _ = writeln!(s, "  size ratio (final)       {:.4}", self.final_size_ratio);
        let _ = writeln!(s, "  test loss delta          {}", na(self.test_loss_delta, 5));
        let _ = writeln!(s, "  test loss delta %        {}", na(self.test_loss_delta_pct, 2));
        let _ = writeln!(s, "  accuracy delta           {}", na(self.accuracy_delta, 5));
        let _ = writeln!(s, "  compute ratio            {:.4}", self.compute_ratio);
        s
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }
}

/// One point of a mean curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: f64,
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    /// Twice the largest standard error of this metric over all epochs.
    pub error_bar: f64,
}

/// Per-epoch across-run mean and standard error of every metric column.
pub fn emit_curves(metrics: &[u8]) -> Result<Vec<CurvePoint>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(metrics);
    let parse_err = |line: u64, column: usize, message: String| Error::Parse { line, column, message };
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(1, 0, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let epoch_col = header
        .iter()
        .position(|h| h == "epoch")
        .ok_or_else(|| parse_err(1, 0, "missing epoch column".into()))?;
    let metrics_cols: Vec<usize> = (0..header.len())
        .filter(|&i| i != epoch_col && header[i] != "run_id")
        .collect();
    // metric column -> epoch bits -> values
    let mut table: Vec<BTreeMap<u64, (f64, Vec<f64>)>> = vec![BTreeMap::new(); metrics_cols.len()];
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, 0, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let num = |col: usize| -> Result<Option<f64>> {
            let cell = record.get(col).unwrap_or("").trim();
            if cell.is_empty() {
                return Ok(None);
            }
            cell.parse::<f64>()
                .map(Some)
                .map_err(|_| parse_err(line, col + 1, format!("not a number: {cell:?}")))
        };
        let epoch = num(epoch_col)?.ok_or_else(|| parse_err(line, epoch_col + 1, "empty epoch".into()))?;
        for (slot, &col) in metrics_cols.iter().enumerate() {
            if let Some(v) = num(col)? {
                // Sorting by bit pattern is order-preserving for non-negative epochs.
                table[slot]
                    .entry(epoch.to_bits())
                    .or_insert_with(|| (epoch, Vec::new()))
                    .1
                    .push(v);
            }
        }
    }
    let mut out = Vec::new();
    for (slot, &col) in metrics_cols.iter().enumerate() {
        let points: Vec<(f64, Stat)> = table[slot].values().map(|(e, v)| (*e, Stat::of(v))).collect();
        let bar = 2.0 * points.iter().map(|(_, s)| s.stderr).fold(0.0, f64::max);
        out.extend(points.into_iter().map(|(epoch, s)| CurvePoint {
            epoch,
            metric: header[col].clone(),
            mean: s.mean,
            stderr: s.stderr,
            error_bar: bar,
        }));
    }
    Ok(out)
}

pub fn curves_csv(points: &[CurvePoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p).map_err(|e| Error::validation(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::validation(e.to_string()))
}

pub fn load_curves(path: impl AsRef<Path>) -> Result<Vec<CurvePoint>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    emit_curves(&bytes)
}
