//! The Occam pruning loop: train, measure the control loss, adapt the pruning
//! rate from the loss trajectory, prune, record.
//!
//! The rate follows `lambda_i = lambda_{i-1} * (tau_i - tau_{i-1}) / (tau_{i-1} - tau_{i-2})`,
//! clamped into a positive interval (by default `[lambda0 / 10, lambda0]`).
//! The first two prunes use `lambda0`.

use serde::{Deserialize, Serialize};

use crate::data::{batches, split, Dataset};
use crate::error::{Error, Result};
use crate::network::{Evaluation, Mode, Model};
use crate::optim::Adam;
use crate::pruning::{prune_model, restore_random};
use crate::tensor::{argmax_rows, softmax_cross_entropy};

/// Where the control loss comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Loss on a held-back slice of the training samples, excluded from updates.
    Holdback,
    /// Mean training loss over the interval just trained.
    TrainingLoss,
}

fn default_holdback() -> f64 {
    0.10
}

fn default_interval() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccamConfig {
    pub lambda0: f64,
    pub control: ControlMode,
    #[serde(default = "default_holdback")]
    pub holdback_fraction: f64,
    /// Epochs of training between prunes; may be fractional.
    #[serde(default = "default_interval")]
    pub prune_interval: f64,
    /// Zero in experiment configs means "use the experiment's epochs".
    #[serde(default)]
    pub epoch_budget: f64,
    /// Lower clamp bound; `lambda0 / 10` when absent.
    #[serde(default)]
    pub lambda_min: Option<f64>,
    /// Upper clamp bound; `lambda0` when absent.
    #[serde(default)]
    pub lambda_max: Option<f64>,
    #[serde(default)]
    pub restore_fraction: f64,
}

impl OccamConfig {
    pub fn new(lambda0: f64, control: ControlMode, epoch_budget: f64) -> Self {
        OccamConfig {
            lambda0,
            control,
            holdback_fraction: default_holdback(),
            prune_interval: default_interval(),
            epoch_budget,
            lambda_min: None,
            lambda_max: None,
            restore_fraction: 0.0,
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        (
            self.lambda_min.unwrap_or(self.lambda0 / 10.0),
            self.lambda_max.unwrap_or(self.lambda0),
        )
    }

    /// Number of train/prune steps in the budget.
    pub fn steps(&self) -> usize {
        (self.epoch_budget / self.prune_interval + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.bounds();
        if !(0.0..1.0).contains(&self.lambda0) {
            return Err(Error::config(format!("lambda0 {} outside [0, 1)", self.lambda0)));
        }
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("lambda bounds [{lo}, {hi}] are not an interval in [0, 1]")));
        }
        if !(self.prune_interval > 0.0 && self.prune_interval <= self.epoch_budget) {
            return Err(Error::config(format!(
                "prune interval {} must be positive and at most the epoch budget {}",
                self.prune_interval, self.epoch_budget
            )));
        }
        if self.control == ControlMode::Holdback && !(self.holdback_fraction > 0.0 && self.holdback_fraction < 1.0) {
            return Err(Error::config(format!("holdback fraction {} outside (0, 1)", self.holdback_fraction)));
        }
        if !(0.0..=1.0).contains(&self.restore_fraction) {
            return Err(Error::config(format!("restore fraction {} outside [0, 1]", self.restore_fraction)));
        }
        Ok(())
    }
}

/// Batching and seeding shared by every training loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub seed: u64,
    /// Chunk size for evaluation passes.
    pub eval_batch: usize,
}

impl TrainSettings {
    pub fn new(batch_size: usize, seed: u64) -> Self {
        TrainSettings {
            batch_size,
            seed,
            eval_batch: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaUpdate {
    pub raw: f64,
    pub clamped: f64,
}

/// One step of the rate recurrence, clamped into `[lambda0 / 10, lambda0]`.
pub fn update_lambda(tau: f64, tau_prev: f64, tau_prev2: f64, lambda_prev: f64, lambda0: f64) -> LambdaUpdate {
    update_lambda_within(tau, tau_prev, tau_prev2, lambda_prev, (lambda0 / 10.0, lambda0))
}

/// [`update_lambda`] with explicit clamp bounds. A vanishing denominator yields the lower bound.
pub fn update_lambda_within(
    tau: f64,
    tau_prev: f64,
    tau_prev2: f64,
    lambda_prev: f64,
    (lo, hi): (f64, f64),
) -> LambdaUpdate {
    let denom = tau_prev - tau_prev2;
    let raw = if denom.abs() < 1e-12 {
        lo
    } else {
        lambda_prev * (tau - tau_prev) / denom
    };
    LambdaUpdate {
        raw,
        clamped: raw.max(lo).min(hi),
    }
}

/// Closed-form bound on the final fraction of the initial dimension:
/// `exp(-lambda0 * (2 + (tau_last - tau_2) / (tau_2 - tau_1)))`.
pub fn dim_bound_from(taus: &[f64], lambda0: f64) -> Result<f64> {
    if taus.len() < 3 {
        return Err(Error::validation(format!("dimension bound needs 3 control losses, got {}", taus.len())));
    }
    let (t1, t2, last) = (taus[0], taus[1], taus[taus.len() - 1]);
    if t2 == t1 {
        return Err(Error::validation("dimension bound undefined when tau_2 == tau_1"));
    }
    Ok((-lambda0 * (2.0 + (last - t2) / (t2 - t1))).exp())
}

pub fn dim_bound(trace: &OccamTrace, lambda0: f64) -> Result<f64> {
    let taus: Vec<f64> = trace.records.iter().map(|r| r.control_loss).collect();
    dim_bound_from(&taus, lambda0)
}

/// Sum of `interval * active fraction at the start of each step`.
pub fn compute_proxy_from(start_fractions: &[f64], interval: f64) -> f64 {
    start_fractions.iter().map(|f| f * interval).sum()
}

pub fn compute_proxy(trace: &OccamTrace) -> f64 {
    trace.records.iter().map(|r| r.interval * r.start_fraction).sum()
}

/// What happened in one train/measure/prune step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based step index.
    pub step: usize,
    /// Epoch position at the end of the step's training.
    pub epoch: f64,
    /// Epochs trained in this step.
    pub interval: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// The control loss tau_i.
    pub control_loss: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    /// Active multiplicative fraction when the step's training began.
    pub start_fraction: f64,
    /// Non-zero multiplicative weights per layer of the evaluated (pre-prune) model.
    pub active_per_layer: Vec<usize>,
    pub active_mult: usize,
    pub active_fraction: f64,
    pub lambda_raw: Option<f64>,
    pub lambda_clamped: Option<f64>,
    /// Non-zero multiplicative weights after this step's prune.
    pub active_after: usize,
    pub cumulative_compute: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccamTrace {
    pub algorithm: String,
    pub seed: u64,
    pub multiplicative_total: usize,
    pub bias_total: usize,
    pub records: Vec<StepRecord>,
    /// Index into `records` of the step whose model was kept as best.
    pub best_index: Option<usize>,
}

impl OccamTrace {
    pub fn best(&self) -> Option<&StepRecord> {
        self.best_index.map(|i| &self.records[i])
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    /// Non-zero multiplicative weights plus biases at the end of the run.
    pub fn final_size(&self) -> usize {
        self.records.last().map_or(self.multiplicative_total, |r| r.active_after) + self.bias_total
    }
}

pub struct FitOutcome {
    pub model: Model,
    /// Snapshot with the lowest test loss (control loss without a test set).
    pub best: Model,
    pub trace: OccamTrace,
}

/// Mixes a run seed with a purpose tag and an index.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_EPOCH: u64 = 1;
const TAG_HOLDBACK: u64 = 2;
const TAG_RESTORE: u64 = 3;

/// Mean cross-entropy of `model` over `set`.
pub fn control_loss(model: &Model, set: &Dataset, eval_batch: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::config("control set is empty"));
    }
    Ok(model.evaluate(&set.features, &set.labels, eval_batch)?.loss)
}

struct IntervalStats {
    loss: f64,
    accuracy: f64,
}

/// Shared training state: model, optimizer, batch cursor, trace and best snapshot.
struct Runner<'a> {
    model: Model,
    adam: Adam,
    train: &'a Dataset,
    test: Option<&'a Dataset>,
    settings: TrainSettings,
    batches_per_epoch: usize,
    batches_done: usize,
    epoch_order: Vec<Vec<usize>>,
    step: usize,
    trace: OccamTrace,
    best: Option<(f64, Model)>,
    compute: f64,
}

impl<'a> Runner<'a> {
    fn new(
        model: Model,
        adam: Adam,
        train: &'a Dataset,
        test: Option<&'a Dataset>,
        settings: TrainSettings,
        algorithm: &str,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        if settings.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        let count = model.count_active();
        Ok(Runner {
            batches_per_epoch: train.len().div_ceil(settings.batch_size),
            model,
            adam,
            train,
            test,
            settings,
            batches_done: 0,
            epoch_order: Vec::new(),
            step: 0,
            trace: OccamTrace {
                algorithm: algorithm.to_string(),
                seed: settings.seed,
                multiplicative_total: count.multiplicative_total,
                bias_total: count.bias_total,
                records: Vec::new(),
                best_index: None,
            },
            best: None,
            compute: 0.0,
        })
    }

    fn batch(&mut self, k: usize) -> Vec<usize> {
        let epoch = k / self.batches_per_epoch;
        if k % self.batches_per_epoch == 0 || self.epoch_order.is_empty() {
            let seed = derive_seed(self.settings.seed, TAG_EPOCH, epoch as u64);
            self.epoch_order = batches(self.train.len(), self.settings.batch_size, seed);
        }
        self.epoch_order[k % self.batches_per_epoch].clone()
    }

    /// Trains through the batch index reached after `epochs_total` epochs.
    fn train_until(&mut self, epochs_total: f64) -> Result<IntervalStats> {
        let target = (epochs_total * self.batches_per_epoch as f64).round() as usize;
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        while self.batches_done < target {
            let idx = self.batch(self.batches_done);
            let (x, y) = self.train.gather(&idx);
            let logits = self.model.forward(&x, Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step,
                    batch: self.batches_done,
                    value: loss as f64,
                });
            }
            let grads = self.model.backward(&grad)?;
            self.adam.step(&mut self.model, &grads)?;
            loss_sum += loss as f64 * y.len() as f64;
            correct += argmax_rows(&logits).iter().zip(&y).filter(|(a, b)| a == b).count();
            seen += y.len();
            self.batches_done += 1;
        }
        if seen == 0 {
            return Err(Error::config("prune interval too short to contain a single batch"));
        }
        Ok(IntervalStats {
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
        })
    }

    /// Trains one step of `interval` epochs and measures it. Returns the
    /// record (without pruning fields) and the control loss.
    fn train_step(&mut self, interval: f64, control: Option<&Dataset>) -> Result<StepRecord> {
        self.step += 1;
        let start_fraction = self.model.count_active().fraction();
        let epoch = self.step as f64 * interval;
        let stats = self.train_until(epoch)?;
        let tau = match control {
            Some(set) => control_loss(&self.model, set, self.settings.eval_batch)?,
            None => stats.loss,
        };
        if !tau.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                batch: self.batches_done,
                value: tau,
            });
        }
        let test: Option<Evaluation> = self
            .test
            .map(|t| self.model.evaluate(&t.features, &t.labels, self.settings.eval_batch))
            .transpose()?;
        let count = self.model.count_active();
        self.compute += interval * start_fraction;
        let record = StepRecord {
            step: self.step,
            epoch,
            interval,
            train_loss: stats.loss,
            train_acc: stats.accuracy,
            control_loss: tau,
            test_loss: test.map(|e| e.loss),
            test_acc: test.map(|e| e.accuracy),
            start_fraction,
            active_per_layer: self.model.active_per_layer(),
            active_mult: count.multiplicative_nonzero,
            active_fraction: count.fraction(),
            lambda_raw: None,
            lambda_clamped: None,
            active_after: count.multiplicative_nonzero,
            cumulative_compute: self.compute,
        };
        let score = record.test_loss.unwrap_or(tau);
        if self.best.as_ref().is_none_or(|(b, _)| score < *b) {
            self.best = Some((score, self.model.clone()));
            self.trace.best_index = Some(self.trace.records.len());
        }
        Ok(record)
    }

    fn push(&mut self, mut record: StepRecord) {
        record.active_after = self.model.count_active().multiplicative_nonzero;
        self.trace.records.push(record);
    }

    fn finish(self) -> FitOutcome {
        let best = self.best.map_or_else(|| self.model.clone(), |(_, m)| m);
        FitOutcome {
            model: self.model,
            best,
            trace: self.trace,
        }
    }
}

/// Plain masked gradient descent for `epochs` epochs, recorded like an Occam run.
pub fn fit_gd(
    model: Model,
    train: &Dataset,
    adam: Adam,
    epochs: usize,
    settings: TrainSettings,
    test: Option<&Dataset>,
) -> Result<FitOutcome> {
    let mut run = Runner::new(model, adam, train, test, settings, "gd")?;
    for _ in 0..epochs {
        let record = run.train_step(1.0, None)?;
        run.push(record);
    }
    Ok(run.finish())
}

/// Gradient descent interleaved with adaptively sized magnitude pruning.
pub fn occam_fit(
    model: Model,
    train: &Dataset,
    adam: Adam,
    config: &OccamConfig,
    settings: TrainSettings,
    test: Option<&Dataset>,
) -> Result<FitOutcome> {
    config.validate()?;
    let (fit_set, control_set) = match config.control {
        ControlMode::TrainingLoss => (None, None),
        ControlMode::Holdback => {
            let seed = derive_seed(settings.seed, TAG_HOLDBACK, 0);
            let (a, b) = split(train, 1.0 - config.holdback_fraction, seed)?;
            (Some(a), Some(b))
        }
    };
    let fit_on = fit_set.as_ref().unwrap_or(train);
    let mut run = Runner::new(model, adam, fit_on, test, settings, "ogd")?;
    let bounds = config.bounds();
    let mut taus: Vec<f64> = Vec::new();
    let mut lambda_prev = config.lambda0;
    for i in 1..=config.steps() {
        let mut record = run.train_step(config.prune_interval, control_set.as_ref())?;
        let tau = record.control_loss;
        let update = if i <= 2 {
            let l = config.lambda0.max(bounds.0).min(bounds.1);
            LambdaUpdate { raw: config.lambda0, clamped: l }
        } else {
            let n = taus.len();
            update_lambda_within(tau, taus[n - 1], taus[n - 2], lambda_prev, bounds)
        };
        taus.push(tau);
        lambda_prev = update.clamped;
        prune_model(&mut run.model, update.clamped);
        if config.restore_fraction > 0.0 {
            restore_random(
                &mut run.model,
                config.restore_fraction,
                derive_seed(settings.seed, TAG_RESTORE, i as u64),
            );
        }
        record.lambda_raw = Some(update.raw);
        record.lambda_clamped = Some(update.clamped);
        run.push(record);
    }
    Ok(run.finish())
}

/// Settings of the train, prune-once, retrain baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostTrainPruneConfig {
    /// Fraction of multiplicative weights kept after the single prune.
    pub target_fraction: f64,
    pub pretrain_epochs: usize,
    pub retrain_epochs: usize,
}

impl PostTrainPruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_fraction > 0.0 && self.target_fraction <= 1.0) {
            return Err(Error::config(format!("target fraction {} outside (0, 1]", self.target_fraction)));
        }
        if self.pretrain_epochs + self.retrain_epochs == 0 {
            return Err(Error::config("post-train pruning needs at least one epoch"));
        }
        Ok(())
    }
}

/// Trains unpruned, prunes once to the target size, resets Adam, retrains with masks.
///
/// A target of 1.0 skips the prune and the reset, leaving plain gradient descent.
pub fn post_train_prune_baseline(
    model: Model,
    train: &Dataset,
    adam: Adam,
    config: &PostTrainPruneConfig,
    settings: TrainSettings,
    test: Option<&Dataset>,
) -> Result<FitOutcome> {
    config.validate()?;
    let mut run = Runner::new(model, adam, train, test, settings, "post_train_prune")?;
    for _ in 0..config.pretrain_epochs {
        let record = run.train_step(1.0, None)?;
        run.push(record);
    }
    if config.target_fraction < 1.0 {
        let lambda = 1.0 - config.target_fraction;
        prune_model(&mut run.model, lambda);
        run.adam.reset_state();
        if let Some(last) = run.trace.records.last_mut() {
            last.lambda_raw = Some(lambda);
            last.lambda_clamped = Some(lambda);
            last.active_after = run.model.count_active().multiplicative_nonzero;
        }
    }
    for _ in 0..config.retrain_epochs {
        let record = run.train_step(1.0, None)?;
        run.push(record);
    }
    Ok(run.finish())
}
