//! Greedy layer culling with full trace capture, plus the top-n and
//! blockwise baselines.
//!
//! The search alternates two loops: an inner scan that masks each remaining
//! candidate layer in turn and measures the weighted per-direction spBLEU
//! drop against the *original* model's dev baseline, and an outer loop that
//! permanently removes the argmin-drop layer. Because drops are measured
//! against the original baseline, the threshold compares total degradation;
//! the search stops before committing a removal that would exceed it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ParallelCorpus, TokenCodec};
use crate::metrics::{direction_spbleu, MetricsError};
use crate::model::{LayerId, LayeredModel, ModelError, Section};

pub type PruneResult<T> = Result<T, PruneError>;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("prune config: {0}")]
    Config(String),
    #[error("dev corpus missing for configured direction {0}")]
    MissingDirection(String),
    #[error("zero baseline for direction {0}; normalized drops undefined")]
    ZeroBaseline(String),
    #[error("trace format: {0}")]
    Format(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Whether the stopping threshold bounds total degradation versus the
/// original model (the default) or the per-step increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    Cumulative,
    PerStep,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Max tolerated weighted spBLEU drop before the search stops.
    pub threshold: f32,
    /// Directions of interest with their priority weights.
    pub directions: Vec<(String, f32)>,
    /// Sections whose layers are removal candidates.
    pub sections: Vec<Section>,
    pub max_removals: Option<usize>,
    pub stop_rule: StopRule,
    /// Decode budget per sentence during dev evaluation.
    pub decode_max_new: usize,
}

impl PruneConfig {
    pub fn validate(&self) -> PruneResult<()> {
        if self.threshold < 0.0 {
            return Err(PruneError::Config("threshold must be >= 0".into()));
        }
        if self.directions.is_empty() {
            return Err(PruneError::Config("no directions configured".into()));
        }
        if self.directions.iter().any(|(_, w)| *w < 0.0)
            || self.directions.iter().all(|(_, w)| *w == 0.0)
        {
            return Err(PruneError::Config(
                "direction weights must be non-negative and not all zero".into(),
            ));
        }
        if self.sections.is_empty() {
            return Err(PruneError::Config("no candidate sections".into()));
        }
        Ok(())
    }

    /// Weights normalized to sum to one, in config order.
    pub fn normalized_weights(&self) -> Vec<(String, f32)> {
        let total: f32 = self.directions.iter().map(|(_, w)| w).sum();
        self.directions
            .iter()
            .map(|(n, w)| (n.clone(), w / total))
            .collect()
    }
}

/// Dev corpora and normalized weights resolved against a prune config.
pub struct EvalContext {
    pub codec: TokenCodec,
    /// (direction name, normalized weight, dev corpus) in config order.
    pub directions: Vec<(String, f32, ParallelCorpus)>,
    pub decode_max_new: usize,
}

impl EvalContext {
    pub fn new(
        codec: TokenCodec,
        cfg: &PruneConfig,
        dev: &[ParallelCorpus],
    ) -> PruneResult<Self> {
        cfg.validate()?;
        let mut directions = Vec::new();
        for (name, weight) in cfg.normalized_weights() {
            let corpus = dev
                .iter()
                .find(|c| c.direction.name() == name)
                .ok_or_else(|| PruneError::MissingDirection(name.clone()))?;
            directions.push((name, weight, corpus.clone()));
        }
        Ok(EvalContext {
            codec,
            directions,
            decode_max_new: cfg.decode_max_new,
        })
    }

    /// Per-direction greedy-decoded dev spBLEU.
    pub fn baseline(&self, m: &LayeredModel) -> PruneResult<BTreeMap<String, f32>> {
        let mut out = BTreeMap::new();
        for (name, _, corpus) in &self.directions {
            let bleu = direction_spbleu(m, &self.codec, corpus, self.decode_max_new)?;
            out.insert(name.clone(), bleu.score);
        }
        Ok(out)
    }

    /// Weighted spBLEU under the context's normalized weights.
    pub fn weighted_spbleu(&self, m: &LayeredModel) -> PruneResult<f32> {
        let scores = self.baseline(m)?;
        Ok(self
            .directions
            .iter()
            .map(|(name, w, _)| w * scores[name])
            .sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionScore {
    pub direction: String,
    pub spbleu: f32,
    /// Baseline spBLEU minus this candidate's spBLEU (positive = worse).
    pub drop: f32,
}

/// Outcome of masking one candidate layer: per-direction spBLEU against the
/// original baseline and the weighted average drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub step: usize,
    pub candidate: LayerId,
    pub per_direction: Vec<DirectionScore>,
    pub weighted_avg_drop: f32,
}

impl ImportanceRecord {
    /// Recomputes the weighted average from the per-direction fields.
    pub fn recompute_weighted(&self, weights: &[(String, f32)]) -> f32 {
        self.per_direction
            .iter()
            .map(|d| {
                let w = weights
                    .iter()
                    .find(|(n, _)| *n == d.direction)
                    .map(|(_, w)| *w)
                    .unwrap_or(0.0);
                w * d.drop
            })
            .sum()
    }
}

/// Temporarily masks `layer` on top of the model's current mask, decodes
/// every dev direction, and reports drops versus `baseline`. The input
/// model is untouched (evaluation uses a shared-weight handle), so its mask
/// after the call equals its mask before.
pub fn evaluate_layer(
    m: &LayeredModel,
    layer: LayerId,
    ctx: &EvalContext,
    baseline: &BTreeMap<String, f32>,
    step: usize,
) -> PruneResult<ImportanceRecord> {
    if m.mask().contains(layer) {
        return Err(PruneError::Config(format!("layer {layer} already removed")));
    }
    let masked = m.with_layer_masked(layer)?;
    let mut per_direction = Vec::with_capacity(ctx.directions.len());
    let mut weighted = 0.0f32;
    for (name, weight, corpus) in &ctx.directions {
        let bleu = direction_spbleu(&masked, &ctx.codec, corpus, ctx.decode_max_new)?;
        let drop = baseline[name] - bleu.score;
        weighted += weight * drop;
        per_direction.push(DirectionScore {
            direction: name.clone(),
            spbleu: bleu.score,
            drop,
        });
    }
    Ok(ImportanceRecord {
        step,
        candidate: layer,
        per_direction,
        weighted_avg_drop: weighted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    MaxRemovals,
    Exhausted,
}

/// One outer-loop iteration: every candidate's record, plus the committed
/// layer (`None` for the final scan that triggered a threshold stop).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneStep {
    pub step: usize,
    pub records: Vec<ImportanceRecord>,
    pub chosen: Option<LayerId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneTrace {
    /// Normalized direction weights in config order.
    pub directions: Vec<(String, f32)>,
    pub threshold: f32,
    pub stop_rule: StopRule,
    /// Original model's per-direction dev spBLEU.
    pub baseline: Vec<(String, f32)>,
    /// Candidate layers at step 1, in canonical order.
    pub candidate_pool: Vec<LayerId>,
    pub steps: Vec<PruneStep>,
    pub stop: StopReason,
}

impl PruneTrace {
    /// Committed removals in order.
    pub fn removed(&self) -> Vec<LayerId> {
        self.steps.iter().filter_map(|s| s.chosen).collect()
    }

    /// Weighted drop of the committed removal at each step.
    pub fn committed_drops(&self) -> Vec<f32> {
        self.steps
            .iter()
            .filter_map(|s| {
                s.chosen.map(|layer| {
                    s.records
                        .iter()
                        .find(|r| r.candidate == layer)
                        .expect("chosen layer has a record")
                        .weighted_avg_drop
                })
            })
            .collect()
    }

    pub fn baseline_of(&self, direction: &str) -> Option<f32> {
        self.baseline
            .iter()
            .find(|(n, _)| n == direction)
            .map(|(_, b)| *b)
    }
}

fn candidates_of(m: &LayeredModel, sections: &[Section]) -> Vec<LayerId> {
    m.remaining_layers()
        .into_iter()
        .filter(|l| sections.contains(&l.section))
        .collect()
}

/// Greedy culling: repeatedly evaluates every remaining candidate and
/// permanently masks the one with the smallest weighted drop, until the
/// next-best removal would push the drop past the threshold, the removal
/// budget is spent, or no candidates remain. Returns the pruned model and
/// the full trace.
pub fn cull_prune(
    m: &LayeredModel,
    cfg: &PruneConfig,
    dev: &[ParallelCorpus],
    codec: &TokenCodec,
) -> PruneResult<(LayeredModel, PruneTrace)> {
    let ctx = EvalContext::new(*codec, cfg, dev)?;
    for &section in &cfg.sections {
        let remaining = m
            .remaining_layers()
            .iter()
            .filter(|l| l.section == section)
            .count();
        if remaining < 2 {
            return Err(PruneError::Config(format!(
                "section {section} needs at least 2 remaining layers, has {remaining}"
            )));
        }
    }

    let baseline = ctx.baseline(m)?;
    let weights = cfg.normalized_weights();
    let candidate_pool = candidates_of(m, &cfg.sections);
    let mut model = m.clone();
    let mut steps: Vec<PruneStep> = Vec::new();
    let mut committed_total = 0.0f32;
    let stop;

    let mut step_no = 0usize;
    loop {
        let candidates = candidates_of(&model, &cfg.sections);
        if candidates.is_empty() {
            stop = StopReason::Exhausted;
            break;
        }
        step_no += 1;
        let records: Vec<ImportanceRecord> = candidates
            .par_iter()
            .map(|&layer| evaluate_layer(&model, layer, &ctx, &baseline, step_no))
            .collect::<PruneResult<Vec<_>>>()?;

        // candidates are in canonical (section, index) order, so taking the
        // first strict minimum implements the documented tie-break
        let best = records
            .iter()
            .enumerate()
            .min_by(|(ia, a), (ib, b)| {
                a.weighted_avg_drop
                    .partial_cmp(&b.weighted_avg_drop)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(ia.cmp(ib))
            })
            .map(|(i, _)| i)
            .expect("non-empty candidate set");
        let best_record = records[best].clone();

        let effective_drop = match cfg.stop_rule {
            StopRule::Cumulative => best_record.weighted_avg_drop,
            StopRule::PerStep => best_record.weighted_avg_drop - committed_total,
        };
        if effective_drop > cfg.threshold {
            steps.push(PruneStep {
                step: step_no,
                records,
                chosen: None,
            });
            stop = StopReason::Threshold;
            break;
        }

        model.remove_layer(best_record.candidate)?;
        committed_total = best_record.weighted_avg_drop;
        steps.push(PruneStep {
            step: step_no,
            records,
            chosen: Some(best_record.candidate),
        });
        if let Some(max) = cfg.max_removals {
            if steps.iter().filter(|s| s.chosen.is_some()).count() >= max {
                stop = StopReason::MaxRemovals;
                break;
            }
        }
    }

    let trace = PruneTrace {
        directions: weights,
        threshold: cfg.threshold,
        stop_rule: cfg.stop_rule,
        baseline: ctx
            .directions
            .iter()
            .map(|(n, _, _)| (n.clone(), baseline[n]))
            .collect(),
        candidate_pool,
        steps,
        stop,
    };
    Ok((model, trace))
}

/// Removes the `n` highest-index layers. Decoder-only models take them from
/// the decoder; encoder-decoder models consume the decoder top first, then
/// the encoder top (other orders via [`topn_prune_in_sections`]).
pub fn topn_prune(m: &LayeredModel, n: usize) -> PruneResult<LayeredModel> {
    let order = match m.config().arch {
        crate::model::Arch::DecoderOnly => vec![Section::Decoder],
        crate::model::Arch::EncoderDecoder => vec![Section::Decoder, Section::Encoder],
    };
    topn_prune_in_sections(m, n, &order)
}

pub fn topn_prune_in_sections(
    m: &LayeredModel,
    n: usize,
    order: &[Section],
) -> PruneResult<LayeredModel> {
    let available: usize = order.iter().map(|&s| m.config().section_len(s)).sum();
    if n >= available && n > 0 {
        return Err(PruneError::Config(format!(
            "cannot remove {n} of {available} layers"
        )));
    }
    let mut model = m.clone();
    let mut left = n;
    for &section in order {
        let count = m.config().section_len(section);
        let take = left.min(count);
        for index in (count - take)..count {
            model.remove_layer(LayerId { section, index })?;
        }
        left -= take;
        if left == 0 {
            break;
        }
    }
    Ok(model)
}

/// Removes a contiguous block of `n` layers ending three layers short of the
/// section top (block end index `L - 4`), mirroring the usual penultimate
/// anchoring of blockwise baselines. Applies to the decoder section.
pub fn blockwise_prune(m: &LayeredModel, n: usize) -> PruneResult<LayeredModel> {
    let count = m.config().n_decoder_layers;
    if n >= count {
        return Err(PruneError::Config(format!(
            "cannot remove {n} of {count} layers"
        )));
    }
    if n == 0 {
        return Ok(m.clone());
    }
    if count < 4 {
        return Err(PruneError::Config(format!(
            "blockwise anchor needs at least 4 layers, section has {count}"
        )));
    }
    let end = count - 4;
    let start = (end + 1)
        .checked_sub(n)
        .ok_or_else(|| PruneError::Config(format!("block of {n} does not fit before layer {end}")))?;
    let mut model = m.clone();
    for index in start..=end {
        model.remove_layer(LayerId::decoder(index))?;
    }
    Ok(model)
}

// --- analysis artifacts ------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatrixCell {
    Drop(f32),
    Removed,
}

/// Step-by-layer matrix of weighted drops; removed layers are flagged so a
/// heatmap renderer can blank them.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMatrix {
    pub layers: Vec<LayerId>,
    /// One row per scan (committed steps plus any final scan).
    pub rows: Vec<Vec<MatrixCell>>,
}

pub fn importance_matrix(trace: &PruneTrace) -> PruneResult<ImportanceMatrix> {
    if trace.steps.is_empty() {
        return Err(PruneError::Config("trace has no steps".into()));
    }
    let layers = trace.candidate_pool.clone();
    let mut rows = Vec::with_capacity(trace.steps.len());
    for step in &trace.steps {
        let mut row = Vec::with_capacity(layers.len());
        for &layer in &layers {
            match step.records.iter().find(|r| r.candidate == layer) {
                Some(rec) => row.push(MatrixCell::Drop(rec.weighted_avg_drop)),
                None => row.push(MatrixCell::Removed),
            }
        }
        rows.push(row);
    }
    Ok(ImportanceMatrix { layers, rows })
}

impl ImportanceMatrix {
    /// CSV with a `step` column; removed cells carry the `removed` sentinel.
    /// Float formatting uses the shortest round-trip representation, so
    /// export and re-parse are lossless.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for layer in &self.layers {
            out.push(',');
            out.push_str(&layer.to_string());
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&(i + 1).to_string());
            for cell in row {
                out.push(',');
                match cell {
                    MatrixCell::Drop(v) => out.push_str(&format!("{v}")),
                    MatrixCell::Removed => out.push_str("removed"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> PruneResult<ImportanceMatrix> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| PruneError::Format("empty matrix csv".into()))?;
        let mut cols = header.split(',');
        if cols.next() != Some("step") {
            return Err(PruneError::Format("missing step column".into()));
        }
        let layers: Vec<LayerId> = cols
            .map(|c| c.parse().map_err(|_| PruneError::Format(format!("bad layer {c:?}"))))
            .collect::<PruneResult<_>>()?;
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let mut cells = line.split(',');
            let _step = cells
                .next()
                .ok_or_else(|| PruneError::Format("missing step cell".into()))?;
            let row: Vec<MatrixCell> = cells
                .map(|c| {
                    if c == "removed" {
                        Ok(MatrixCell::Removed)
                    } else {
                        c.parse::<f32>()
                            .map(MatrixCell::Drop)
                            .map_err(|_| PruneError::Format(format!("bad cell {c:?}")))
                    }
                })
                .collect::<PruneResult<_>>()?;
            if row.len() != layers.len() {
                return Err(PruneError::Format("ragged matrix row".into()));
            }
            rows.push(row);
        }
        Ok(ImportanceMatrix { layers, rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedDrop {
    pub layer: LayerId,
    pub direction: String,
    /// Mean over scans of (drop / direction baseline).
    pub value: f32,
}

/// Per-layer per-direction drops divided by the direction baselines, so
/// sensitivities are comparable across directions with different absolute
/// scores. Layers are averaged over every scan in which they were a
/// candidate.
pub fn normalized_direction_drops(trace: &PruneTrace) -> PruneResult<Vec<NormalizedDrop>> {
    for (name, baseline) in &trace.baseline {
        if *baseline <= 0.0 {
            return Err(PruneError::ZeroBaseline(name.clone()));
        }
    }
    let mut out = Vec::new();
    for &layer in &trace.candidate_pool {
        for (direction, baseline) in &trace.baseline {
            let mut total = 0.0f64;
            let mut count = 0usize;
            for step in &trace.steps {
                if let Some(rec) = step.records.iter().find(|r| r.candidate == layer) {
                    let ds = rec
                        .per_direction
                        .iter()
                        .find(|d| &d.direction == direction)
                        .expect("direction present in record");
                    total += (ds.drop / baseline) as f64;
                    count += 1;
                }
            }
            if count > 0 {
                out.push(NormalizedDrop {
                    layer,
                    direction: direction.clone(),
                    value: (total / count as f64) as f32,
                });
            }
        }
    }
    Ok(out)
}

// --- trace persistence -------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Header {
        directions: Vec<(String, f32)>,
        threshold: f32,
        stop_rule: StopRule,
        baseline: Vec<(String, f32)>,
        candidate_pool: Vec<LayerId>,
    },
    Record {
        record: ImportanceRecord,
        chosen: bool,
    },
    Footer {
        stop: StopReason,
        removed: Vec<LayerId>,
    },
}

/// One JSON record per line: header, every importance record (committed ones
/// flagged), footer with the stop reason.
pub fn write_trace(path: &Path, trace: &PruneTrace) -> PruneResult<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut emit = |line: &TraceLine| -> PruneResult<()> {
        serde_json::to_writer(&mut f, line)?;
        writeln!(f)?;
        Ok(())
    };
    emit(&TraceLine::Header {
        directions: trace.directions.clone(),
        threshold: trace.threshold,
        stop_rule: trace.stop_rule,
        baseline: trace.baseline.clone(),
        candidate_pool: trace.candidate_pool.clone(),
    })?;
    for step in &trace.steps {
        for record in &step.records {
            emit(&TraceLine::Record {
                record: record.clone(),
                chosen: step.chosen == Some(record.candidate),
            })?;
        }
    }
    emit(&TraceLine::Footer {
        stop: trace.stop,
        removed: trace.removed(),
    })?;
    Ok(())
}

pub fn read_trace(path: &Path) -> PruneResult<PruneTrace> {
    let text = std::fs::read_to_string(path)?;
    let mut header: Option<TraceLine> = None;
    let mut footer: Option<TraceLine> = None;
    let mut steps: Vec<PruneStep> = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceLine>(line)? {
            h @ TraceLine::Header { .. } => header = Some(h),
            f @ TraceLine::Footer { .. } => footer = Some(f),
            TraceLine::Record { record, chosen } => {
                if steps.last().map(|s| s.step) != Some(record.step) {
                    steps.push(PruneStep {
                        step: record.step,
                        records: Vec::new(),
                        chosen: None,
                    });
                }
                let current = steps.last_mut().unwrap();
                if chosen {
                    current.chosen = Some(record.candidate);
                }
                current.records.push(record);
            }
        }
    }
    let Some(TraceLine::Header {
        directions,
        threshold,
        stop_rule,
        baseline,
        candidate_pool,
    }) = header
    else {
        return Err(PruneError::Format("missing trace header".into()));
    };
    let Some(TraceLine::Footer { stop, .. }) = footer else {
        return Err(PruneError::Format("missing trace footer".into()));
    };
    Ok(PruneTrace {
        directions,
        threshold,
        stop_rule,
        baseline,
        candidate_pool,
        steps,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, Arch, ModelConfig};

    fn deconly(layers: usize) -> LayeredModel {
        build(&ModelConfig {
            arch: Arch::DecoderOnly,
            d_model: 16,
            heads: 2,
            d_ffn: 24,
            n_encoder_layers: 0,
            n_decoder_layers: layers,
            vocab_size: 24,
            max_len: 8,
            seed: 2,
        })
        .unwrap()
    }

    fn removed_set(m: &LayeredModel) -> Vec<usize> {
        m.mask().iter().map(|l| l.index).collect()
    }

    #[test]
    fn topn_removes_highest_indices() {
        let m = deconly(32);
        let pruned = topn_prune(&m, 4).unwrap();
        assert_eq!(removed_set(&pruned), vec![28, 29, 30, 31]);
    }

    #[test]
    fn topn_degenerate_cases() {
        let m = deconly(8);
        assert!(topn_prune(&m, 0).unwrap().mask().is_empty());
        let almost_all = topn_prune(&m, 7).unwrap();
        assert_eq!(removed_set(&almost_all), vec![1, 2, 3, 4, 5, 6, 7]);
        assert!(matches!(topn_prune(&m, 8), Err(PruneError::Config(_))));
    }

    #[test]
    fn topn_enc_dec_takes_decoder_first() {
        let m = build(&ModelConfig {
            d_model: 16,
            heads: 2,
            d_ffn: 24,
            n_encoder_layers: 3,
            n_decoder_layers: 3,
            vocab_size: 24,
            max_len: 8,
            seed: 2,
            arch: Arch::EncoderDecoder,
        })
        .unwrap();
        let pruned = topn_prune(&m, 4).unwrap();
        let removed: Vec<LayerId> = pruned.mask().iter().collect();
        assert!(removed.contains(&LayerId::decoder(0)));
        assert!(removed.contains(&LayerId::decoder(1)));
        assert!(removed.contains(&LayerId::decoder(2)));
        assert!(removed.contains(&LayerId::encoder(2)));
    }

    #[test]
    fn blockwise_anchors_at_l_minus_4() {
        let m = deconly(32);
        let pruned = blockwise_prune(&m, 4).unwrap();
        assert_eq!(removed_set(&pruned), vec![25, 26, 27, 28]);
        let single = blockwise_prune(&m, 1).unwrap();
        assert_eq!(removed_set(&single), vec![28]);
    }

    #[test]
    fn blockwise_rejects_oversized_blocks() {
        let m = deconly(8);
        // end anchor is layer 4; a block of 6 would start below layer 0
        assert!(matches!(
            blockwise_prune(&m, 6),
            Err(PruneError::Config(_))
        ));
        assert!(matches!(
            blockwise_prune(&m, 8),
            Err(PruneError::Config(_))
        ));
    }

    #[test]
    fn blockwise_blocks_are_contiguous_and_in_bounds() {
        for layers in [4usize, 5, 9, 16, 32] {
            let m = deconly(layers);
            for n in 1..layers {
                match blockwise_prune(&m, n) {
                    Ok(pruned) => {
                        let removed = removed_set(&pruned);
                        assert_eq!(removed.len(), n);
                        assert_eq!(removed[removed.len() - 1], layers - 4);
                        for pair in removed.windows(2) {
                            assert_eq!(pair[1], pair[0] + 1);
                        }
                    }
                    Err(PruneError::Config(_)) => {
                        assert!(n > layers.saturating_sub(3), "n {n} layers {layers}");
                    }
                    Err(other) => panic!("unexpected error {other:?}"),
                }
            }
        }
    }

    fn sample_trace() -> PruneTrace {
        let rec = |step: usize, idx: usize, drop: f32, chosen: bool| {
            (
                ImportanceRecord {
                    step,
                    candidate: LayerId::decoder(idx),
                    per_direction: vec![
                        DirectionScore {
                            direction: "L1->T".into(),
                            spbleu: 90.0 - drop,
                            drop,
                        },
                        DirectionScore {
                            direction: "L2->T".into(),
                            spbleu: 80.0 - drop,
                            drop,
                        },
                    ],
                    weighted_avg_drop: drop,
                },
                chosen,
            )
        };
        let s1: Vec<_> = vec![rec(1, 0, 2.0, false), rec(1, 1, 0.5, true), rec(1, 2, 1.0, false)];
        let s2: Vec<_> = vec![rec(2, 0, 2.5, false), rec(2, 2, 1.8, true)];
        let s3: Vec<_> = vec![rec(3, 0, 5.0, false)];
        PruneTrace {
            directions: vec![("L1->T".into(), 0.5), ("L2->T".into(), 0.5)],
            threshold: 3.0,
            stop_rule: StopRule::Cumulative,
            baseline: vec![("L1->T".into(), 90.0), ("L2->T".into(), 80.0)],
            candidate_pool: vec![
                LayerId::decoder(0),
                LayerId::decoder(1),
                LayerId::decoder(2),
            ],
            steps: vec![
                PruneStep {
                    step: 1,
                    records: s1.iter().map(|(r, _)| r.clone()).collect(),
                    chosen: Some(LayerId::decoder(1)),
                },
                PruneStep {
                    step: 2,
                    records: s2.iter().map(|(r, _)| r.clone()).collect(),
                    chosen: Some(LayerId::decoder(2)),
                },
                PruneStep {
                    step: 3,
                    records: s3.iter().map(|(r, _)| r.clone()).collect(),
                    chosen: None,
                },
            ],
            stop: StopReason::Threshold,
        }
    }

    #[test]
    fn importance_matrix_shape_and_minimum() {
        let trace = sample_trace();
        let matrix = importance_matrix(&trace).unwrap();
        assert_eq!(matrix.layers.len(), 3);
        assert_eq!(matrix.rows.len(), 3); // two commits + final scan
        // the chosen cell is the row minimum at every committed step
        for (row, step) in matrix.rows.iter().zip(&trace.steps) {
            if let Some(chosen) = step.chosen {
                let col = matrix.layers.iter().position(|&l| l == chosen).unwrap();
                let MatrixCell::Drop(chosen_drop) = row[col] else {
                    panic!("chosen cell marked removed")
                };
                for cell in row {
                    if let MatrixCell::Drop(v) = cell {
                        assert!(chosen_drop <= *v);
                    }
                }
            }
        }
        // removed layers show the sentinel in later scans
        assert_eq!(matrix.rows[1][1], MatrixCell::Removed);
        assert_eq!(matrix.rows[2][2], MatrixCell::Removed);
    }

    #[test]
    fn matrix_csv_roundtrip_is_lossless() {
        let matrix = importance_matrix(&sample_trace()).unwrap();
        let csv = matrix.to_csv();
        let back = ImportanceMatrix::from_csv(&csv).unwrap();
        assert_eq!(back, matrix);
    }

    #[test]
    fn normalized_drops_divide_by_baseline() {
        let trace = sample_trace();
        let drops = normalized_direction_drops(&trace).unwrap();
        // layer dec.1 was only scanned once, with drop 0.5 on both directions
        let d = drops
            .iter()
            .find(|d| d.layer == LayerId::decoder(1) && d.direction == "L1->T")
            .unwrap();
        assert!((d.value - 0.5 / 90.0).abs() < 1e-7);
        let d2 = drops
            .iter()
            .find(|d| d.layer == LayerId::decoder(1) && d.direction == "L2->T")
            .unwrap();
        assert!((d2.value - 0.5 / 80.0).abs() < 1e-7);
    }

    #[test]
    fn normalized_drops_reject_zero_baseline() {
        let mut trace = sample_trace();
        trace.baseline[0].1 = 0.0;
        assert!(matches!(
            normalized_direction_drops(&trace),
            Err(PruneError::ZeroBaseline(_))
        ));
    }

    #[test]
    fn trace_jsonl_roundtrip() {
        let trace = sample_trace();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        write_trace(&path, &trace).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(back.directions, trace.directions);
        assert_eq!(back.baseline, trace.baseline);
        assert_eq!(back.candidate_pool, trace.candidate_pool);
        assert_eq!(back.stop, trace.stop);
        assert_eq!(back.removed(), trace.removed());
        assert_eq!(back.steps.len(), trace.steps.len());
        for (a, b) in back.steps.iter().zip(&trace.steps) {
            assert_eq!(a.records, b.records);
            assert_eq!(a.chosen, b.chosen);
        }
    }

    #[test]
    fn record_weighted_average_is_recomputable() {
        let trace = sample_trace();
        for step in &trace.steps {
            for rec in &step.records {
                let recomputed = rec.recompute_weighted(&trace.directions);
                assert!((recomputed - rec.weighted_avg_drop).abs() < 1e-6);
            }
        }
    }
}
