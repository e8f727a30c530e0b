//! Supervised training of the base toy models.
//!
//! The loop is deterministic: seeded shuffling, gradient accumulation over
//! fixed-size example chunks (parallel across chunks, merged in order, so
//! results do not depend on the thread count), and Adam updates applied in
//! name order. Early stopping is driven by dev spBLEU because every
//! downstream pruning decision is spBLEU-based.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, ParallelCorpus, TokenCodec, TrainExample};
use crate::metrics::{direction_spbleu, MetricsError};
use crate::model::forward::training_loss;
use crate::model::{build, LayeredModel, ModelConfig, ModelError, TrainScope};
use crate::numerics::graph::GradientMap;
use crate::numerics::{NumericsError, Tensor};

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step} (seed {seed}, last finite loss {last_loss})")]
    Diverged {
        step: usize,
        seed: u64,
        last_loss: f32,
    },
    #[error("train split shares pairs with {split} for direction {direction}")]
    SplitLeak { direction: String, split: String },
    #[error("training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Mean dev spBLEU that ends training early; in (0, 100].
    pub early_stop_spbleu: f32,
    /// Dev evaluation cadence in steps (0 disables evaluation).
    pub eval_every: usize,
    pub label_smoothing: f32,
    pub clip_norm: Option<f32>,
    /// Decode budget for dev evaluation.
    pub decode_max_new: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 6000,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 7,
            early_stop_spbleu: 90.0,
            eval_every: 200,
            label_smoothing: 0.1,
            clip_norm: Some(1.0),
            decode_max_new: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        if self.max_steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("step and batch budgets must be positive".into()));
        }
        if !(0.0 < self.early_stop_spbleu && self.early_stop_spbleu <= 100.0) {
            return Err(TrainError::Config(format!(
                "early-stop target {} outside (0, 100]",
                self.early_stop_spbleu
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_spbleu: Option<f32>,
}

pub fn write_train_log(path: &Path, log: &[TrainLogEntry]) -> TrainResult<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for entry in log {
        serde_json::to_writer(&mut f, entry).map_err(|e| TrainError::Config(e.to_string()))?;
        writeln!(f)?;
    }
    Ok(())
}

/// Train and dev corpora for one direction.
#[derive(Debug, Clone)]
pub struct DirectionData {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
}

pub struct TrainOutcome {
    pub model: LayeredModel,
    pub log: Vec<TrainLogEntry>,
    /// False when the budget ran out before the dev target was reached.
    pub reached_target: bool,
    pub final_dev_spbleu: Option<f32>,
}

// --- optimizer ---------------------------------------------------------------

pub(crate) struct Adam {
    lr: f32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub(crate) fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every gradient entry, in name order.
    pub(crate) fn step(
        &mut self,
        model: &mut LayeredModel,
        grads: &GradientMap,
        clip_norm: Option<f32>,
    ) -> Result<(), NumericsError> {
        let mut scale = 1.0f64;
        if let Some(clip) = clip_norm {
            let norm: f64 = grads
                .values()
                .map(|g| g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > clip as f64 {
                scale = clip as f64 / norm;
            }
        }
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            let param = param_mut(model, name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let lr = self.lr as f64;
            let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
            param.try_update(|data| {
                for i in 0..data.len() {
                    let g = grad.data()[i] as f64 * scale;
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let mhat = m[i] / b1c;
                    let vhat = v[i] / b2c;
                    data[i] -= (lr * mhat / (vhat.sqrt() + eps)) as f32;
                }
            })?;
        }
        Ok(())
    }
}

/// Resolves a trainable tensor by gradient-map name: `lora.<base>.<a|b>`
/// addresses adapter halves, anything else is a base weight.
fn param_mut<'m>(model: &'m mut LayeredModel, name: &str) -> Option<&'m mut Tensor> {
    if let Some(rest) = name.strip_prefix("lora.") {
        let (base, half) = rest.rsplit_once('.')?;
        let base = base.to_string();
        let pair = model.adapters_mut()?.pairs.get_mut(&base)?;
        match half {
            "a" => Some(&mut pair.a),
            "b" => Some(&mut pair.b),
            _ => None,
        }
    } else {
        model.weights_mut().get_mut(name)
    }
}

// --- shared step -------------------------------------------------------------

/// Fixed accumulation chunk so gradient sums are identical for any thread count.
const GRAD_CHUNK: usize = 8;

fn mix_seed(seed: u64, step: usize, index: usize) -> u64 {
    crate::data::subseed(seed, &format!("dropout/{step}/{index}"))
}

/// Mean loss and mean gradients over one batch of examples.
pub(crate) fn train_step(
    model: &LayeredModel,
    batch: &[&TrainExample],
    scope: TrainScope,
    label_smoothing: f32,
    dropout_seed: u64,
    step: usize,
) -> Result<(f32, GradientMap), ModelError> {
    let partials: Vec<Result<(f64, GradientMap), ModelError>> = batch
        .chunks(GRAD_CHUNK)
        .enumerate()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(chunk_idx, chunk)| {
            let mut loss_sum = 0.0f64;
            let mut acc = GradientMap::new();
            for (j, example) in chunk.iter().enumerate() {
                let dseed = mix_seed(dropout_seed, step, chunk_idx * GRAD_CHUNK + j);
                let (graph, loss) =
                    training_loss(model, example, scope, Some(dseed), label_smoothing)?;
                loss_sum += graph.value(loss).item().map_err(ModelError::from)? as f64;
                let grads = graph.backward(loss).map_err(ModelError::from)?;
                merge_grads(&mut acc, grads);
            }
            Ok((loss_sum, acc))
        })
        .collect();

    let mut loss_sum = 0.0f64;
    let mut total = GradientMap::new();
    for partial in partials {
        let (l, g) = partial?;
        loss_sum += l;
        merge_grads(&mut total, g);
    }
    let inv = 1.0 / batch.len() as f32;
    for tensor in total.values_mut() {
        tensor
            .try_update(|data| {
                for x in data {
                    *x *= inv;
                }
            })
            .map_err(ModelError::from)?;
    }
    Ok(((loss_sum / batch.len() as f64) as f32, total))
}

fn merge_grads(acc: &mut GradientMap, incoming: GradientMap) {
    for (name, grad) in incoming {
        match acc.get_mut(&name) {
            Some(t) => {
                let mut t2 = t.clone();
                t2.make_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .for_each(|(a, b)| *a += b);
                *t = t2;
            }
            None => {
                acc.insert(name, grad);
            }
        }
    }
}

/// Non-finite values during a step mean divergence; anything else is a
/// genuine model/config failure and propagates as such.
pub(crate) fn diverged_or(e: ModelError, step: usize, seed: u64, last_loss: f32) -> TrainError {
    match e {
        ModelError::Numerics(NumericsError::NonFinite { .. }) => TrainError::Diverged {
            step,
            seed,
            last_loss,
        },
        other => TrainError::Model(other),
    }
}

fn check_disjoint(data: &[DirectionData]) -> TrainResult<()> {
    for d in data {
        let train_hashes = d.train.pair_hashes();
        if !d.dev.pair_hashes().is_disjoint(&train_hashes) {
            return Err(TrainError::SplitLeak {
                direction: d.train.direction.name(),
                split: "dev".into(),
            });
        }
    }
    Ok(())
}

/// Mean dev spBLEU over the configured directions.
pub fn mean_dev_spbleu(
    model: &LayeredModel,
    codec: &TokenCodec,
    data: &[DirectionData],
    max_new: usize,
) -> TrainResult<f32> {
    let mut total = 0.0f64;
    for d in data {
        total += direction_spbleu(model, codec, &d.dev, max_new)?.score as f64;
    }
    Ok((total / data.len() as f64) as f32)
}

/// Trains a fresh model on the given per-direction corpora until the mean
/// dev spBLEU reaches the early-stop target or the step budget runs out.
pub fn train_base(
    config: &ModelConfig,
    codec: &TokenCodec,
    data: &[DirectionData],
    tc: &TrainConfig,
) -> TrainResult<TrainOutcome> {
    tc.validate()?;
    if data.is_empty() {
        return Err(TrainError::Config("no training directions".into()));
    }
    check_disjoint(data)?;

    let mut examples = Vec::new();
    for d in data {
        if d.train.is_empty() {
            return Err(TrainError::Config(format!(
                "empty train corpus for {}",
                d.train.direction.name()
            )));
        }
        for (src, tgt) in &d.train.pairs {
            examples.push(codec.encode_example(&d.train.direction, src, tgt, config.arch)?);
        }
    }

    let mut model = build(config)?;
    let mut adam = Adam::new(tc.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut log = Vec::new();
    let mut last_loss = f32::NAN;
    let mut reached_target = false;
    let mut final_dev = None;

    for step in 1..=tc.max_steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = train_step(
            &model,
            &batch,
            TrainScope::FullParams,
            tc.label_smoothing,
            tc.seed,
            step,
        )
        .map_err(|e| diverged_or(e, step, tc.seed, last_loss))?;
        adam.step(&mut model, &grads, tc.clip_norm).map_err(|e| {
            diverged_or(ModelError::Numerics(e), step, tc.seed, last_loss)
        })?;
        last_loss = loss;

        let mut dev_spbleu = None;
        if tc.eval_every > 0 && (step % tc.eval_every == 0 || step == tc.max_steps) {
            let score = mean_dev_spbleu(&model, codec, data, tc.decode_max_new)?;
            dev_spbleu = Some(score);
            final_dev = Some(score);
            if score >= tc.early_stop_spbleu {
                reached_target = true;
            }
        }
        log.push(TrainLogEntry {
            step,
            loss,
            dev_spbleu,
        });
        if reached_target {
            break;
        }
    }

    Ok(TrainOutcome {
        model,
        log,
        reached_target,
        final_dev_spbleu: final_dev,
    })
}
