//! Training loop: forward pass, combined objective, backward pass and an
//! SGD-with-momentum update of the full-precision weights, with the
//! regularization strength advanced by a schedule every step.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analyze::{self, LayerMetrics, RunRecord, TrajectorySampler};
use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::model::{ForwardMode, Model};
use crate::quantize::LevelGeometry;
use crate::schedule::{lambda_at, LambdaSchedule};
use crate::sinreq::{self, RegularizerConfig};
use crate::tensor::{Graph, Tensor};

pub const DEFAULT_LEARNING_RATE: f64 = 0.05;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_FINETUNE_EPOCHS: usize = 10;
pub const DEFAULT_SCRATCH_EPOCHS: usize = 60;

/// Samples per forward pass when measuring accuracy.
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "FP_Baseline")]
    FpBaseline,
    #[serde(rename = "FP_SinReQ")]
    FpSinreq,
    #[serde(rename = "STE_Quantized")]
    SteQuantized,
    #[serde(rename = "STE_Quantized_SinReQ")]
    SteQuantizedSinreq,
}

impl TrainMode {
    pub fn forward_mode(self) -> ForwardMode {
        match self {
            TrainMode::FpBaseline | TrainMode::FpSinreq => ForwardMode::FullPrecision,
            TrainMode::SteQuantized | TrainMode::SteQuantizedSinreq => ForwardMode::QuantizedSte,
        }
    }

    pub fn uses_regularizer(self) -> bool {
        matches!(self, TrainMode::FpSinreq | TrainMode::SteQuantizedSinreq)
    }

    /// The same forward mode with the regularizer switched on or off.
    pub fn with_regularizer(self, on: bool) -> TrainMode {
        match (self.forward_mode(), on) {
            (ForwardMode::FullPrecision, true) => TrainMode::FpSinreq,
            (ForwardMode::FullPrecision, false) => TrainMode::FpBaseline,
            (ForwardMode::QuantizedSte, true) => TrainMode::SteQuantizedSinreq,
            (ForwardMode::QuantizedSte, false) => TrainMode::SteQuantized,
        }
    }
}

/// Strength multiplier over steps: one global schedule, optionally replaced
/// for individual layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSet {
    pub global: LambdaSchedule,
    pub per_layer: IndexMap<String, LambdaSchedule>,
}

impl ScheduleSet {
    pub fn global(schedule: LambdaSchedule) -> Self {
        ScheduleSet {
            global: schedule,
            per_layer: IndexMap::new(),
        }
    }

    pub fn for_layer(&self, name: &str) -> &LambdaSchedule {
        self.per_layer.get(name).unwrap_or(&self.global)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Base per-layer strengths and level geometries. The strength applied at
    /// step `t` is `lambda_q * lambda_at(schedule, t)`.
    pub regularizer: RegularizerConfig,
    pub schedule: ScheduleSet,
    pub eval_quantize: bool,
    /// Weights tracked per layer (capped at the smallest layer size).
    pub trajectory_count: usize,
    /// Clamp shadow weights into `[lowest level, highest level]` after every
    /// update, in every mode.
    pub clip_weights: bool,
}

impl TrainConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        self.schedule.global.validate()?;
        for (name, s) in &self.schedule.per_layer {
            s.validate()?;
            if model.weight(name).is_none() {
                return Err(Error::Config(format!("schedule given for unknown layer {name}")));
            }
        }
        let trainable: Vec<&str> = model.spec().trainable().map(|l| l.name.as_str()).collect();
        for name in &trainable {
            self.regularizer.layer(name)?;
        }
        if self.regularizer.layers().len() != trainable.len() {
            return Err(Error::Config(
                "regularizer lists layers that are not trainable layers of the model".into(),
            ));
        }
        if self.mode.forward_mode() == ForwardMode::QuantizedSte {
            if let Some(l) = model.spec().trainable().find(|l| l.quant.is_none()) {
                return Err(Error::Config(format!(
                    "{:?} needs a quantizer on every trainable layer; {} has none",
                    self.mode, l.name
                )));
            }
        }
        Ok(())
    }

    /// Strength applied to each layer at `step`; zero in modes without the
    /// regularizer.
    pub fn lambdas_at(&self, step: u64) -> Result<IndexMap<String, f64>> {
        self.regularizer
            .layers()
            .iter()
            .map(|(name, layer)| {
                let value = if self.mode.uses_regularizer() {
                    layer.lambda_q * lambda_at(self.schedule.for_layer(name), step)?
                } else {
                    0.0
                };
                Ok((name.clone(), value))
            })
            .collect()
    }

    pub fn geometries(&self) -> IndexMap<String, LevelGeometry> {
        self.regularizer
            .layers()
            .iter()
            .map(|(n, l)| (n.clone(), l.geometry.clone()))
            .collect()
    }
}

/// Momentum buffers, keyed `<layer>.weight` / `<layer>.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: IndexMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Result<Self> {
        let mut velocity = IndexMap::new();
        for (name, p) in model.params() {
            velocity.insert(format!("{name}.weight"), Tensor::zeros(p.weight.shape().to_vec())?);
            velocity.insert(format!("{name}.bias"), Tensor::zeros(p.bias.shape().to_vec())?);
        }
        Ok(OptimizerState { velocity })
    }

    pub fn velocity(&self) -> &IndexMap<String, Tensor> {
        &self.velocity
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub task_loss: f64,
    pub weight_decay: f64,
    /// Unscaled regularizer value per layer, before the update.
    pub sinreq: IndexMap<String, f64>,
    pub lambdas: IndexMap<String, f64>,
    pub total_loss: f64,
}

fn diverged(step: u64, loss: f64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Divergence { step, loss },
        other => other,
    }
}

/// One optimization step on a batch. The update
/// `v <- momentum * v - lr * grad; w <- w + v` is applied to the shadow
/// weights and biases.
pub fn train_step(
    model: &mut Model,
    inputs: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    step: u64,
) -> Result<StepMetrics> {
    let lambdas = cfg.lambdas_at(step)?;
    let reg = cfg.regularizer.with_lambdas(|name, _| lambdas[name])?;

    let mut graph = Graph::new();
    let on_err = diverged(step, f64::NAN);
    let fwd = model
        .forward(&mut graph, inputs, cfg.mode.forward_mode())
        .map_err(&on_err)?;
    let task = graph.softmax_cross_entropy(fwd.logits, labels).map_err(&on_err)?;
    let loss = sinreq::total_loss(&mut graph, task, &fwd.weights, &reg).map_err(&on_err)?;
    let total = graph.value(loss.total).item()?;
    if !total.is_finite() {
        return Err(Error::Divergence { step, loss: total });
    }
    graph.backward(loss.total).map_err(diverged(step, total))?;

    for (name, p) in model.params_mut() {
        let range = if cfg.clip_weights {
            let levels = cfg.regularizer.layer(name)?.geometry.levels();
            Some((levels[0], levels[levels.len() - 1]))
        } else {
            None
        };
        let targets = [
            (format!("{name}.weight"), fwd.weights[name.as_str()], &mut p.weight),
            (format!("{name}.bias"), fwd.biases[name.as_str()], &mut p.bias),
        ];
        for (i, (key, node, param)) in targets.into_iter().enumerate() {
            let clip = if i == 0 { range } else { None };
            let grad = graph.grad(node).expect("backward populates every node");
            let v = opt.velocity.get_mut(&key).expect("velocity allocated per parameter");
            for ((vi, wi), gi) in v.data_mut().iter_mut().zip(param.data_mut()).zip(grad) {
                *vi = cfg.momentum * *vi - cfg.learning_rate * gi;
                *wi += *vi;
                if !wi.is_finite() {
                    return Err(Error::Divergence { step, loss: total });
                }
                if let Some((lo, hi)) = clip {
                    *wi = wi.clamp(lo, hi);
                }
            }
        }
    }

    Ok(StepMetrics {
        step,
        task_loss: graph.value(task).item()?,
        weight_decay: graph.value(loss.weight_decay).item()?,
        sinreq: loss
            .sinreq
            .iter()
            .map(|(n, id)| Ok((n.clone(), graph.value(*id).item()?)))
            .collect::<Result<_>>()?,
        lambdas,
        total_loss: total,
    })
}

pub fn accuracy(model: &Model, data: &Dataset, mode: ForwardMode) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Spec("accuracy of an empty dataset".into()));
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk)?;
        let pred = model.predict(&x, mode)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy with the shadow weights, then with every layer snapped to its
/// levels. The model itself is left untouched.
pub fn evaluate_quantized(
    model: &Model,
    data: &Dataset,
    geometries: &IndexMap<String, LevelGeometry>,
) -> Result<(f64, f64)> {
    let pre = accuracy(model, data, ForwardMode::FullPrecision)?;
    let snapped = model.snapped(geometries)?;
    let post = accuracy(&snapped, data, ForwardMode::FullPrecision)?;
    Ok((pre, post))
}

/// A failed run, with the records of the epochs that completed.
#[derive(Debug)]
pub struct FitError {
    pub records: Vec<RunRecord>,
    pub error: Error,
}

impl std::fmt::Display for FitError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} completed epochs)", self.error, self.records.len())
    }
}

impl std::error::Error for FitError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub type FitResult = std::result::Result<Vec<RunRecord>, FitError>;

pub fn fit(model: &mut Model, data: &Splits, cfg: &TrainConfig) -> FitResult {
    fit_with(model, data, cfg, |_, _| Ok(()))
}

/// Runs `cfg.epochs` epochs of seeded mini-batch training and calls
/// `on_epoch` after each epoch's record is built.
pub fn fit_with<F>(model: &mut Model, data: &Splits, cfg: &TrainConfig, mut on_epoch: F) -> FitResult
where
    F: FnMut(&Model, &RunRecord) -> Result<()>,
{
    let mut records = Vec::with_capacity(cfg.epochs);
    let fail = |records: Vec<RunRecord>, error: Error| FitError { records, error };
    if let Err(e) = cfg.validate(model) {
        return Err(fail(records, e));
    }
    if data.train.is_empty() {
        return Err(fail(records, Error::Spec("training split is empty".into())));
    }
    if cfg.epochs == 0 {
        return Ok(records);
    }

    let smallest = model.params().values().map(|p| p.weight.len()).min().unwrap_or(0);
    let sampler = match TrajectorySampler::new(model, cfg.trajectory_count.min(smallest), cfg.seed ^ 0x7a11) {
        Ok(s) => s,
        Err(e) => return Err(fail(records, e)),
    };
    let mut opt = match OptimizerState::new(model) {
        Ok(o) => o,
        Err(e) => return Err(fail(records, e)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut task_sum = 0.0;
        let mut total_sum = 0.0;
        let mut batches = 0usize;
        let mut last_lambdas = IndexMap::new();
        for chunk in order.chunks(cfg.batch_size) {
            let result = data
                .train
                .batch(chunk)
                .and_then(|(x, y)| train_step(model, &x, &y, cfg, &mut opt, step));
            let m = match result {
                Ok(m) => m,
                Err(e) => return Err(fail(records, e)),
            };
            task_sum += m.task_loss;
            total_sum += m.total_loss;
            batches += 1;
            last_lambdas = m.lambdas;
            step += 1;
        }

        let record = epoch_record(model, data, cfg, &sampler, epoch, task_sum, total_sum, batches, last_lambdas);
        let record = match record {
            Ok(r) => r,
            Err(e) => return Err(fail(records, e)),
        };
        if let Err(e) = on_epoch(model, &record) {
            records.push(record);
            return Err(fail(records, e));
        }
        records.push(record);
    }
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn epoch_record(
    model: &Model,
    data: &Splits,
    cfg: &TrainConfig,
    sampler: &TrajectorySampler,
    epoch: usize,
    task_sum: f64,
    total_sum: f64,
    batches: usize,
    lambdas: IndexMap<String, f64>,
) -> Result<RunRecord> {
    let mode = cfg.mode.forward_mode();
    let train_acc = accuracy(model, &data.train, mode)?;
    let val_acc = if data.val.is_empty() {
        train_acc
    } else {
        accuracy(model, &data.val, mode)?
    };
    let mut per_layer = IndexMap::new();
    for (name, layer) in cfg.regularizer.layers() {
        let w = &model.params()[name].weight;
        per_layer.insert(
            name.clone(),
            LayerMetrics {
                sinreq_loss: sinreq::sinreq_value(w, &layer.geometry)?,
                lambda_q: lambdas.get(name).copied().unwrap_or(0.0),
                quant_error: analyze::quant_error(w, &layer.geometry)?,
                frac_near_level: analyze::frac_near_level(w, &layer.geometry),
            },
        );
    }
    Ok(RunRecord {
        epoch,
        train_acc,
        val_acc,
        task_loss: task_sum / batches as f64,
        total_loss: total_sum / batches as f64,
        per_layer,
        trajectories: sampler.sample(model),
    })
}
