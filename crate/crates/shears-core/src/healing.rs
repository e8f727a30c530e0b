//! Post-prune healing: sequence-level distillation from the original model.
//!
//! The distillation corpus pairs length-filtered training sources with the
//! unpruned teacher's greedy translations; the pruned model is then
//! fine-tuned on those pairs, either through low-rank adapters over a frozen
//! base or with all parameters.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, ParallelCorpus, TokenCodec, TrainExample};
use crate::metrics::{direction_spbleu, MetricsError};
use crate::model::{
    greedy_decode, LayeredModel, LoraConfig, ModelError, TrainScope,
};
use crate::training::{diverged_or, train_step, Adam, TrainError, TrainLogEntry};

pub type HealResult<T> = Result<T, HealError>;

#[derive(Debug, Error)]
pub enum HealError {
    #[error("distillation teacher must be the original model (mask is non-empty)")]
    TeacherMasked,
    #[error("lora healing expects adapters already attached to the pruned model")]
    AdaptersMissing,
    #[error("full-parameter healing expects a model without adapters")]
    AdaptersPresent,
    #[error("healing expects a pruned model (mask is empty)")]
    NothingPruned,
    #[error("teacher produced no usable translations for {0}")]
    TeacherDegenerate(String),
    #[error("healing config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealMode {
    Lora,
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealOptimizer {
    pub learning_rate: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HealOptimizer {
    fn default() -> Self {
        HealOptimizer {
            learning_rate: 1e-3,
            steps: 1200,
            batch_size: 16,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealingPlan {
    pub kd_sentences_per_direction: usize,
    pub mode: HealMode,
    pub lora: LoraConfig,
    pub optimizer: HealOptimizer,
    /// Decode budget for teacher translations.
    pub decode_max_new: usize,
}

impl Default for HealingPlan {
    fn default() -> Self {
        HealingPlan {
            kd_sentences_per_direction: 2000,
            mode: HealMode::Lora,
            lora: LoraConfig::default(),
            optimizer: HealOptimizer::default(),
            decode_max_new: 16,
        }
    }
}

impl HealingPlan {
    pub fn validate(&self) -> HealResult<()> {
        if self.kd_sentences_per_direction == 0 {
            return Err(HealError::Config("distillation corpus size must be positive".into()));
        }
        if self.optimizer.batch_size == 0 {
            return Err(HealError::Config("batch size must be positive".into()));
        }
        if self.mode == HealMode::Lora {
            self.lora.validate().map_err(HealError::Model)?;
        }
        Ok(())
    }
}

/// Distillation pairs per direction: training sources with the teacher's
/// greedy translations, stamped with the teacher checkpoint hash.
#[derive(Debug, Clone)]
pub struct KdCorpus {
    pub per_direction: Vec<ParallelCorpus>,
    pub teacher_hash: String,
}

impl KdCorpus {
    pub fn total_pairs(&self) -> usize {
        self.per_direction.iter().map(|c| c.len()).sum()
    }

    /// Same directions, first `size` pairs each (distillation sweeps share
    /// one teacher decode pass and slice prefixes).
    pub fn prefix(&self, size: usize) -> KdCorpus {
        KdCorpus {
            per_direction: self.per_direction.iter().map(|c| c.head(size)).collect(),
            teacher_hash: self.teacher_hash.clone(),
        }
    }
}

/// Builds the distillation corpus: for each direction, sources are drawn in
/// order from the (length-filtered) train split — cycling when the plan
/// asks for more than the split holds — and targets are the teacher's
/// greedy translations. Sources whose translation comes back empty are
/// skipped so the corpus never contains empty sentences.
pub fn build_kd_corpus(
    teacher: &LayeredModel,
    codec: &TokenCodec,
    train: &[ParallelCorpus],
    plan: &HealingPlan,
) -> HealResult<KdCorpus> {
    plan.validate()?;
    if !teacher.mask().is_empty() {
        return Err(HealError::TeacherMasked);
    }
    let teacher_hash = teacher.content_hash();
    let arch = teacher.config().arch;
    let mut per_direction = Vec::with_capacity(train.len());
    for corpus in train {
        if corpus.is_empty() {
            return Err(HealError::Config(format!(
                "empty train corpus for {}",
                corpus.direction.name()
            )));
        }
        let want = plan.kd_sentences_per_direction;
        let budget = want * 4 + 16; // cycles through the pool a few times at most
        let sources: Vec<&String> = (0..budget)
            .map(|i| &corpus.pairs[i % corpus.len()].0)
            .collect();
        let translated: Vec<HealResult<(String, String)>> = sources
            .par_iter()
            .map(|src| {
                let (tokens, tags) = codec.encode_prompt(&corpus.direction, src, arch)?;
                let out = greedy_decode(teacher, &tokens, &tags, plan.decode_max_new)?;
                Ok(((*src).clone(), codec.ids_to_sentence(&out)))
            })
            .collect();
        let mut pairs = Vec::with_capacity(want);
        for item in translated {
            let (src, hyp) = item?;
            if hyp.is_empty() {
                continue;
            }
            pairs.push((src, hyp));
            if pairs.len() == want {
                break;
            }
        }
        if pairs.len() < want {
            return Err(HealError::TeacherDegenerate(corpus.direction.name()));
        }
        per_direction.push(ParallelCorpus {
            direction: corpus.direction.clone(),
            split: corpus.split,
            pairs,
        });
    }
    Ok(KdCorpus {
        per_direction,
        teacher_hash,
    })
}

/// Writes one direction of a distillation corpus in the shared corpus
/// format, flagged `kd=true` with the teacher checkpoint hash.
pub fn write_kd_corpus(dir: &Path, kd: &KdCorpus) -> HealResult<Vec<std::path::PathBuf>> {
    let mut paths = Vec::new();
    for corpus in &kd.per_direction {
        let name = corpus.direction.name().replace("->", "-");
        let path = dir.join(format!("{name}.kd.tsv"));
        crate::data::write_corpus_with(
            &path,
            corpus,
            &[("kd", "true"), ("teacher", &kd.teacher_hash)],
        )?;
        paths.push(path);
    }
    Ok(paths)
}

pub struct HealOutcome {
    pub model: LayeredModel,
    pub log: Vec<TrainLogEntry>,
    pub initial_loss: Option<f32>,
    pub final_loss: Option<f32>,
}

/// Fine-tunes the pruned model on the distillation corpus.
///
/// Lora mode expects adapters already attached (base weights stay bitwise
/// frozen); full mode expects a plain model. A zero-step plan returns the
/// input unchanged.
pub fn heal(
    pruned: &LayeredModel,
    codec: &TokenCodec,
    kd: &KdCorpus,
    plan: &HealingPlan,
) -> HealResult<HealOutcome> {
    plan.validate()?;
    if pruned.mask().is_empty() {
        return Err(HealError::NothingPruned);
    }
    let scope = match plan.mode {
        HealMode::Lora => {
            if pruned.adapters().is_none() {
                return Err(HealError::AdaptersMissing);
            }
            TrainScope::AdaptersOnly
        }
        HealMode::Full => {
            if pruned.adapters().is_some() {
                return Err(HealError::AdaptersPresent);
            }
            TrainScope::FullParams
        }
    };

    let mut examples: Vec<TrainExample> = Vec::new();
    for corpus in &kd.per_direction {
        for (src, tgt) in &corpus.pairs {
            examples.push(codec.encode_example(
                &corpus.direction,
                src,
                tgt,
                pruned.config().arch,
            )?);
        }
    }
    if examples.is_empty() {
        return Err(HealError::Config("distillation corpus is empty".into()));
    }

    let mut model = pruned.clone();
    let mut adam = Adam::new(plan.optimizer.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.optimizer.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut log = Vec::new();
    let mut last_loss = f32::NAN;

    for step in 1..=plan.optimizer.steps {
        let mut batch = Vec::with_capacity(plan.optimizer.batch_size);
        for _ in 0..plan.optimizer.batch_size {
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
            scope,
            0.0,
            plan.optimizer.seed,
            step,
        )
        .map_err(|e| diverged_or(e, step, plan.optimizer.seed, last_loss))?;
        adam.step(&mut model, &grads, Some(1.0)).map_err(|e| {
            diverged_or(ModelError::Numerics(e), step, plan.optimizer.seed, last_loss)
        })?;
        last_loss = loss;
        log.push(TrainLogEntry {
            step,
            loss,
            dev_spbleu: None,
        });
    }

    Ok(HealOutcome {
        model,
        initial_loss: log.first().map(|e| e.loss),
        final_loss: log.last().map(|e| e.loss),
        log,
    })
}

/// One row of the distillation-size sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub kd_size: usize,
    pub healed: Vec<(String, f32)>,
    pub healed_mean: f32,
    pub pruned_mean: f32,
}

/// Heals one pruned snapshot with increasing distillation-corpus sizes and
/// reports dev spBLEU per size. Every run starts from the same snapshot
/// (same adapter seed in lora mode) so rows differ only in data volume.
pub fn kd_size_sweep(
    pruned: &LayeredModel,
    teacher: &LayeredModel,
    codec: &TokenCodec,
    train: &[ParallelCorpus],
    dev: &[ParallelCorpus],
    sizes: &[usize],
    plan: &HealingPlan,
) -> HealResult<Vec<SweepRow>> {
    if sizes.is_empty() {
        return Err(HealError::Config("no sweep sizes".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HealError::Config("sweep sizes must be strictly ascending".into()));
    }
    let max_size = *sizes.last().unwrap();
    let mut full_plan = plan.clone();
    full_plan.kd_sentences_per_direction = max_size;
    let kd_full = build_kd_corpus(teacher, codec, train, &full_plan)?;

    let snapshot = match plan.mode {
        HealMode::Lora => pruned.attach_lora(&plan.lora, plan.optimizer.seed)?,
        HealMode::Full => pruned.clone(),
    };
    let mut pruned_mean = 0.0f64;
    for corpus in dev {
        pruned_mean +=
            direction_spbleu(pruned, codec, corpus, plan.decode_max_new)?.score as f64;
    }
    let pruned_mean = (pruned_mean / dev.len() as f64) as f32;

    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut run_plan = plan.clone();
        run_plan.kd_sentences_per_direction = size;
        let outcome = heal(&snapshot, codec, &kd_full.prefix(size), &run_plan)?;
        let mut healed = Vec::new();
        let mut mean = 0.0f64;
        for corpus in dev {
            let score =
                direction_spbleu(&outcome.model, codec, corpus, plan.decode_max_new)?.score;
            healed.push((corpus.direction.name(), score));
            mean += score as f64;
        }
        rows.push(SweepRow {
            kd_size: size,
            healed,
            healed_mean: (mean / dev.len() as f64) as f32,
            pruned_mean,
        });
    }
    Ok(rows)
}
