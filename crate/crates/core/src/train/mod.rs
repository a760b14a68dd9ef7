//! Latitude-weighted objective, Adam over trainable parameters, and the
//! epoch loop with early stopping on validation loss.

mod data;
mod regimes;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{Split, WindowIndex};
use crate::error::{shape_err, Error, Result};
use crate::grid::LatWeights;
use crate::model::{ForecastModel, ParamStore};
use crate::numcore::init::seeded;
use crate::numcore::{memory, Tape, Tensor, Var};
use crate::peft::{GloraTags, SearchConfig, TargetSelector, DEFAULT_RANK};

pub use data::ForecastData;
pub use regimes::{finetune_regional, glora_search, lead_time_suite, FinetuneResult, LeadSuite, LeadSuiteEntry};

/// `mean_{v,i,j} w_i · (pred − target)²` on the tape.
pub fn lat_weighted_mse(tape: &mut Tape, pred: Var, target: &Tensor, weights: &LatWeights) -> Result<Var> {
    let w = loss_weights(tape.value(pred).shape(), target, weights)?;
    let t = tape.constant(target.clone());
    let w = tape.constant(w);
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    let weighted = tape.mul(sq, w)?;
    tape.mean(weighted)
}

/// Value form of [`lat_weighted_mse`].
pub fn lat_weighted_mse_value(pred: &Tensor, target: &Tensor, weights: &LatWeights) -> Result<f64> {
    let w = loss_weights(pred.shape(), target, weights)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(w.data())
        .map(|((p, t), w)| w * (p - t) * (p - t))
        .sum();
    Ok(s / pred.len() as f64)
}

fn loss_weights(shape: &[usize], target: &Tensor, weights: &LatWeights) -> Result<Tensor> {
    if shape != target.shape() {
        return Err(shape_err("lat_weighted_mse", shape, target.shape()));
    }
    let [d, h, w] = shape[..] else {
        return Err(Error::Contract(format!("loss expects [D, H, W], got {shape:?}")));
    };
    if weights.len() != h {
        return Err(Error::Train(format!("{} latitude weights for {h} rows", weights.len())));
    }
    Ok(weights.broadcast(d, w))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Fft,
    Lora,
    Reslora,
    Glora,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Fft => "fft",
            TrainMode::Lora => "lora",
            TrainMode::Reslora => "reslora",
            TrainMode::Glora => "glora",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fft" => TrainMode::Fft,
            "lora" => TrainMode::Lora,
            "reslora" => TrainMode::Reslora,
            "glora" => TrainMode::Glora,
            _ => return Err(Error::Config(format!("unknown mode `{s}` (fft, lora, reslora, glora)"))),
        })
    }
}

/// Adapter settings for the PEFT modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeftConfig {
    pub rank: usize,
    /// `None` gives scaling 1.
    pub alpha: Option<f64>,
    pub targets: TargetSelector,
    pub train_head: bool,
    /// Fixed GLoRA structure; when absent the structure is searched.
    pub glora_tags: Option<Vec<GloraTags>>,
    pub search: SearchConfig,
    /// Optimizer steps per candidate during search.
    pub search_steps: usize,
    /// Validation windows per candidate during search.
    pub search_val_windows: usize,
}

impl Default for PeftConfig {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            alpha: None,
            targets: TargetSelector::Attention,
            train_head: true,
            glora_tags: None,
            search: SearchConfig::default(),
            search_steps: 50,
            search_val_windows: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Hours; windows for every lead are pooled.
    pub lead_times: Vec<u32>,
    /// Caps the optimizer steps per epoch (random subset of windows).
    pub steps_per_epoch: Option<usize>,
    /// Caps validation windows (evenly strided subset).
    pub max_val_windows: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub peft: PeftConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 10,
            patience: 3,
            seed: 0,
            mode: TrainMode::Fft,
            lead_times: vec![72],
            steps_per_epoch: None,
            max_val_windows: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            peft: PeftConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rate 1e-5, used for the full-scale runs.
    pub fn full_scale() -> Self {
        Self {
            learning_rate: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience, batch_size and max_epochs must be ≥ 1".into()));
        }
        if self.lead_times.is_empty() || self.lead_times.contains(&0) {
            return Err(Error::Config("lead_times must be non-empty and positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps > 0".into()));
        }
        if matches!(self.steps_per_epoch, Some(0)) || matches!(self.max_val_windows, Some(0)) {
            return Err(Error::Config("steps_per_epoch and max_val_windows must be ≥ 1 when set".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction; moments keyed by parameter path.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: IndexMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// Updates trainable parameters only; frozen entries are never written.
    pub fn update(&mut self, store: &mut ParamStore, grads: &IndexMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (path, g) in grads {
            let p = store.get_mut(path)?;
            if !p.trainable {
                continue;
            }
            if p.value.shape() != g.shape() {
                return Err(shape_err("adam", p.value.shape(), g.shape()));
            }
            let (m, v) = self
                .moments
                .entry(path.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (((x, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Early-stopping bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub patience: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochOutcome {
    Improved,
    Continue,
    Stop,
}

impl TrainState {
    pub fn new(patience: usize) -> Self {
        Self {
            epoch: 0,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            patience,
        }
    }

    /// Records the validation loss of the next epoch (1-based).
    pub fn observe(&mut self, val_loss: f64) -> EpochOutcome {
        self.epoch += 1;
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.best_epoch = self.epoch;
            self.epochs_since_improvement = 0;
            EpochOutcome::Improved
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                EpochOutcome::Stop
            } else {
                EpochOutcome::Continue
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_ms: f64,
    pub peak_bytes: usize,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch={} train_loss={:.6e} val_loss={:.6e} wall_ms={:.1} peak_bytes={}",
            self.epoch, self.train_loss, self.val_loss, self.wall_ms, self.peak_bytes
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: usize,
    /// Tracked tensor-storage high-water mark during the run.
    pub peak_bytes: usize,
    pub trainable_params: usize,
}

/// Mean gradient over a batch, keyed by trainable path.
fn batch_gradients(
    model: &ForecastModel,
    data: &ForecastData,
    batch: &[WindowIndex],
) -> Result<(f64, IndexMap<String, Tensor>)> {
    let mut acc: IndexMap<String, Tensor> = IndexMap::new();
    let mut loss_sum = 0.0;
    for w in batch {
        let (x, y) = data.sample(w)?;
        let mut tape = Tape::new().with_finite_check(false);
        let bound = model.bind(&mut tape);
        let pred = model.forward(&mut tape, &bound, &x, &data.inputs, w.lead_hours, &data.window)?;
        let loss = lat_weighted_mse(&mut tape, pred, &y, &data.weights)?;
        loss_sum += tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        for (path, &v) in bound.iter() {
            if let Some(g) = grads.take(v) {
                match acc.get_mut(path) {
                    Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        acc.insert(path.clone(), g);
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    for g in acc.values_mut() {
        g.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    Ok((loss_sum / n, acc))
}

/// Mean normalized-space loss over `windows`.
pub fn validation_loss(model: &ForecastModel, data: &ForecastData, windows: &[WindowIndex]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Train("no validation windows".into()));
    }
    let mut total = 0.0;
    for w in windows {
        let (x, y) = data.sample(w)?;
        let pred = model.predict(&x, &data.inputs, w.lead_hours, &data.window)?;
        total += lat_weighted_mse_value(&pred, &y, &data.weights)?;
    }
    Ok(total / windows.len() as f64)
}

/// Evenly strided subset of at most `cap` items, keeping order.
pub fn strided<T: Clone>(items: &[T], cap: Option<usize>) -> Vec<T> {
    match cap {
        Some(c) if c < items.len() => (0..c).map(|i| items[i * items.len() / c].clone()).collect(),
        _ => items.to_vec(),
    }
}

/// Trains the model's trainable parameters in place and leaves it at the
/// best-validation epoch. Deterministic for a fixed seed.
pub fn train(model: &mut ForecastModel, data: &ForecastData, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_log(model, data, cfg, |_| {})
}

/// [`train`] with a callback per finished epoch.
pub fn train_with_log(
    model: &mut ForecastModel,
    data: &ForecastData,
    cfg: &TrainConfig,
    mut log: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    let train_windows = data.windows(Split::Train, &cfg.lead_times);
    let val_windows = strided(&data.windows(Split::Val, &cfg.lead_times), cfg.max_val_windows);
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::Train(format!(
            "empty split: {} train and {} validation windows for leads {:?}",
            train_windows.len(),
            val_windows.len(),
            cfg.lead_times
        )));
    }
    let trainable_params = model.count_parameters(crate::model::CountFilter::Trainable);
    let start_live = memory::live_bytes();
    memory::reset_peak();
    let mut rng = seeded(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut state = TrainState::new(cfg.patience);
    let mut best: Option<ParamStore> = None;
    let mut history = Vec::new();
    let mut steps = 0;
    for epoch in 1..=cfg.max_epochs {
        let clock = Instant::now();
        let mut order = train_windows.clone();
        order.shuffle(&mut rng);
        if let Some(s) = cfg.steps_per_epoch {
            order.truncate(s * cfg.batch_size);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_gradients(model, data, batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step: steps, loss });
            }
            opt.update(model.params_mut(), &grads)?;
            loss_sum += loss;
            batches += 1;
            steps += 1;
        }
        let val_loss = validation_loss(model, data, &val_windows)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, step: steps, loss: val_loss });
        }
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            peak_bytes: memory::peak_bytes(),
        };
        log(&entry);
        history.push(entry);
        match state.observe(val_loss) {
            EpochOutcome::Improved => best = Some(model.params().clone()),
            EpochOutcome::Continue => {}
            EpochOutcome::Stop => break,
        }
    }
    if let Some(best) = best {
        *model.params_mut() = best;
    }
    let peak_bytes = memory::peak_bytes().max(start_live);
    Ok(TrainReport {
        history,
        best_epoch: state.best_epoch,
        best_val_loss: state.best_val_loss,
        steps,
        peak_bytes,
        trainable_params,
    })
}
