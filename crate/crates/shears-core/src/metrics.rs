//! Subword BLEU scoring and generation throughput.
//!
//! `corpus_bleu` is corpus-level BLEU-4: clipped modified n-gram precisions
//! summed over the corpus, geometric mean, and the brevity penalty
//! `exp(1 - ref_len / hyp_len)` when hypotheses run short. Smoothing is a
//! deterministic floor: a zero clipped match count for some order is
//! replaced by 0.1 matches before the geometric mean (report headers state
//! this so scores are comparable across runs).

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{subword_tokenize, ParallelCorpus, TokenCodec};
use crate::model::{greedy_decode, LayeredModel, ModelError, Prompt};

pub type MetricsResult<T> = Result<T, MetricsError>;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error("hypothesis and reference counts differ: {hyps} vs {refs}")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("throughput measurement needs at least {need} prompts, got {got}")]
    NotEnoughPrompts { need: usize, got: usize },
    #[error("throughput measurement generated zero tokens")]
    NoTokensGenerated,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// Matches substituted for a zero clipped count before the geometric mean.
pub const SMOOTHING_EPS: f64 = 0.1;

/// Documented smoothing identifier, embedded in score report headers.
pub const SMOOTHING_RULE: &str = "floor-eps-0.1";

const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// 100 * BP * exp(mean(ln p_n)) under the smoothing rule.
    pub score: f32,
    /// Smoothed modified precisions p1..p4 as used in the geometric mean.
    pub precisions: [f32; MAX_ORDER],
    pub brevity_penalty: f32,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Corpus-level BLEU-4 over pre-tokenized hypothesis/reference pairs.
pub fn corpus_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> MetricsResult<BleuScore> {
    if hyps.len() != refs.len() {
        return Err(MetricsError::CountMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut matches = [0u64; MAX_ORDER];
    let mut totals = [0u64; MAX_ORDER];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hyps.iter().zip(refs) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            if hyp.len() < n {
                continue;
            }
            totals[n - 1] += (hyp.len() - n + 1) as u64;
            let mut ref_counts: HashMap<&[String], u64> = HashMap::new();
            if reference.len() >= n {
                for gram in reference.windows(n) {
                    *ref_counts.entry(gram).or_insert(0) += 1;
                }
            }
            let mut hyp_counts: HashMap<&[String], u64> = HashMap::new();
            for gram in hyp.windows(n) {
                *hyp_counts.entry(gram).or_insert(0) += 1;
            }
            for (gram, count) in hyp_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matches[n - 1] += count.min(clip);
            }
        }
    }
    Ok(assemble(matches, totals, hyp_len, ref_len))
}

fn assemble(
    matches: [u64; MAX_ORDER],
    totals: [u64; MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
) -> BleuScore {
    let mut precisions = [0.0f32; MAX_ORDER];
    let mut log_sum = 0.0f64;
    for n in 0..MAX_ORDER {
        let numer = if matches[n] == 0 {
            SMOOTHING_EPS
        } else {
            matches[n] as f64
        };
        let denom = totals[n].max(1) as f64;
        let p = numer / denom;
        precisions[n] = p as f32;
        log_sum += p.ln();
    }
    let brevity_penalty = if hyp_len >= ref_len {
        1.0
    } else {
        // empty hypotheses clamp to length 1 so the penalty stays positive
        (1.0 - ref_len as f64 / hyp_len.max(1) as f64).exp()
    };
    let score = 100.0 * brevity_penalty * (log_sum / MAX_ORDER as f64).exp();
    BleuScore {
        score: score as f32,
        precisions,
        brevity_penalty: brevity_penalty as f32,
        hyp_len,
        ref_len,
    }
}

/// spBLEU: BLEU-4 over subword-tokenized sentences.
pub fn corpus_spbleu<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> MetricsResult<BleuScore> {
    let h: Vec<Vec<String>> = hyps.iter().map(|s| subword_tokenize(s.as_ref())).collect();
    let r: Vec<Vec<String>> = refs.iter().map(|s| subword_tokenize(s.as_ref())).collect();
    corpus_bleu(&h, &r)
}

/// One line of the JSON-lines score report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub direction: String,
    pub split: String,
    pub score: f32,
    pub p1: f32,
    pub p2: f32,
    pub p3: f32,
    pub p4: f32,
    pub bp: f32,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl ScoreRecord {
    pub fn new(direction: &str, split: &str, bleu: &BleuScore) -> Self {
        ScoreRecord {
            direction: direction.to_string(),
            split: split.to_string(),
            score: bleu.score,
            p1: bleu.precisions[0],
            p2: bleu.precisions[1],
            p3: bleu.precisions[2],
            p4: bleu.precisions[3],
            bp: bleu.brevity_penalty,
            hyp_len: bleu.hyp_len,
            ref_len: bleu.ref_len,
        }
    }
}

/// Greedy-decodes every source sentence of a corpus. Sentences are decoded
/// in parallel and collected in order, so results do not depend on the
/// thread count.
pub fn translate_corpus(
    m: &LayeredModel,
    codec: &TokenCodec,
    corpus: &ParallelCorpus,
    max_new: usize,
) -> MetricsResult<Vec<String>> {
    let arch = m.config().arch;
    corpus
        .pairs
        .par_iter()
        .map(|(src, _)| {
            let (src_tokens, tags) = codec.encode_prompt(&corpus.direction, src, arch)?;
            let out = greedy_decode(m, &src_tokens, &tags, max_new)?;
            Ok(codec.ids_to_sentence(&out))
        })
        .collect()
}

/// Greedy-decoded spBLEU of a model on one corpus.
pub fn direction_spbleu(
    m: &LayeredModel,
    codec: &TokenCodec,
    corpus: &ParallelCorpus,
    max_new: usize,
) -> MetricsResult<BleuScore> {
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let hyps = translate_corpus(m, codec, corpus, max_new)?;
    let refs: Vec<&str> = corpus.pairs.iter().map(|(_, t)| t.as_str()).collect();
    let hyp_refs: Vec<&str> = hyps.iter().map(|s| s.as_str()).collect();
    corpus_spbleu(&hyp_refs, &refs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub tokens_per_second: f64,
    pub total_tokens: usize,
    pub wall_seconds: f64,
}

const WARMUP_PROMPTS: usize = 3;
const MIN_PROMPTS: usize = 20;

/// Tokens generated per second at batch size 1: prompts are decoded one at
/// a time on a monotonic clock, with the first three excluded as warm-up.
pub fn measure_throughput(
    m: &LayeredModel,
    prompts: &[Prompt],
    max_new: usize,
) -> MetricsResult<Throughput> {
    if prompts.len() < MIN_PROMPTS {
        return Err(MetricsError::NotEnoughPrompts {
            need: MIN_PROMPTS,
            got: prompts.len(),
        });
    }
    for p in &prompts[..WARMUP_PROMPTS] {
        greedy_decode(m, &p.src, &p.tags, max_new)?;
    }
    let start = Instant::now();
    let mut total_tokens = 0usize;
    for p in &prompts[WARMUP_PROMPTS..] {
        total_tokens += greedy_decode(m, &p.src, &p.tags, max_new)?.len();
    }
    let wall_seconds = start.elapsed().as_secs_f64();
    if total_tokens == 0 {
        return Err(MetricsError::NoTokensGenerated);
    }
    Ok(Throughput {
        tokens_per_second: total_tokens as f64 / wall_seconds,
        total_tokens,
        wall_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|w| w.to_string()).collect()
    }

    #[test]
    fn identical_corpora_score_exactly_100() {
        let sents = vec![toks("a b c d e"), toks("f g h i")];
        let bleu = corpus_bleu(&sents, &sents).unwrap();
        assert_eq!(bleu.score, 100.0);
        assert_eq!(bleu.brevity_penalty, 1.0);
    }

    #[test]
    fn hand_derived_brevity_case() {
        // p1..p4 all 1, BP = exp(1 - 5/4)
        let hyp = vec![toks("a b c d")];
        let reference = vec![toks("a b c d e")];
        let bleu = corpus_bleu(&hyp, &reference).unwrap();
        assert_eq!(bleu.precisions, [1.0; 4]);
        assert!((bleu.score - 77.88).abs() < 0.01, "{}", bleu.score);
    }

    #[test]
    fn bp_is_one_exactly_when_hyp_at_least_ref() {
        let hyp = vec![toks("a b c d e f")];
        let reference = vec![toks("a b c d e")];
        let bleu = corpus_bleu(&hyp, &reference).unwrap();
        assert_eq!(bleu.brevity_penalty, 1.0);
        let equal = corpus_bleu(&reference, &reference).unwrap();
        assert_eq!(equal.brevity_penalty, 1.0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(matches!(
            corpus_bleu(&empty, &empty),
            Err(MetricsError::EmptyCorpus)
        ));
    }

    #[test]
    fn pair_order_does_not_matter() {
        let hyps = vec![toks("a b c d"), toks("x y z w q"), toks("m n o p")];
        let refs = vec![toks("a b c d e"), toks("x y z v q"), toks("m n o p")];
        let fwd = corpus_bleu(&hyps, &refs).unwrap();
        let rev_h: Vec<_> = hyps.iter().rev().cloned().collect();
        let rev_r: Vec<_> = refs.iter().rev().cloned().collect();
        let rev = corpus_bleu(&rev_h, &rev_r).unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn appending_perfect_pair_keeps_perfect_corpus_at_100() {
        let mut sents = vec![toks("a b c d e")];
        let before = corpus_bleu(&sents, &sents).unwrap().score;
        sents.push(toks("p q r s"));
        let after = corpus_bleu(&sents, &sents).unwrap().score;
        assert_eq!(before, 100.0);
        assert_eq!(after, 100.0);
    }

    #[test]
    fn spbleu_applies_subword_chunking() {
        // "w17" and "w18" share the subword "w1", so spBLEU sees a partial
        // match that whole-word BLEU would miss entirely.
        let bleu = corpus_spbleu(&["w17 w17 w17 w17"], &["w18 w17 w18 w17"]).unwrap();
        assert!(bleu.score > 0.0);
        assert!(bleu.score < 100.0);
    }

    #[test]
    fn empty_hypothesis_scores_near_zero_without_panicking() {
        let bleu = corpus_spbleu(&[""], &["w1 w2 w3 w4 w5"]).unwrap();
        assert!(bleu.score >= 0.0 && bleu.score < 1.0, "{}", bleu.score);
        assert!(bleu.brevity_penalty > 0.0);
    }

    // Independent brute-force oracle: counts clipped matches by scanning
    // positions instead of hashing n-grams.
    pub(super) fn oracle_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> BleuScore {
        let mut matches = [0u64; 4];
        let mut totals = [0u64; 4];
        let mut hyp_len = 0;
        let mut ref_len = 0;
        for (hyp, rf) in hyps.iter().zip(refs) {
            hyp_len += hyp.len();
            ref_len += rf.len();
            for n in 1..=4usize {
                if hyp.len() < n {
                    continue;
                }
                totals[n - 1] += (hyp.len() - n + 1) as u64;
                // for each distinct n-gram (by first occurrence scan),
                // count occurrences on both sides and clip
                let h_grams: Vec<&[String]> = hyp.windows(n).collect();
                let r_grams: Vec<&[String]> = if rf.len() >= n {
                    rf.windows(n).collect()
                } else {
                    vec![]
                };
                for (i, gram) in h_grams.iter().enumerate() {
                    if h_grams[..i].iter().any(|g| g == gram) {
                        continue; // counted at first occurrence
                    }
                    let h_count = h_grams.iter().filter(|g| *g == gram).count() as u64;
                    let r_count = r_grams.iter().filter(|g| *g == gram).count() as u64;
                    matches[n - 1] += h_count.min(r_count);
                }
            }
        }
        assemble(matches, totals, hyp_len, ref_len)
    }

    #[test]
    fn matches_brute_force_oracle_on_random_corpora() {
        let mut state = 0x243f6a8885a308d3u64;
        let mut next = move |bound: usize| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 33) as usize % bound
        };
        for _ in 0..50 {
            let n_pairs = 1 + next(6);
            let mut hyps = Vec::new();
            let mut refs = Vec::new();
            for _ in 0..n_pairs {
                let hl = 1 + next(10);
                let rl = 1 + next(10);
                // tiny alphabet so repeated n-grams (clipping) actually occur
                hyps.push((0..hl).map(|_| format!("t{}", next(4))).collect());
                refs.push((0..rl).map(|_| format!("t{}", next(4))).collect());
            }
            let fast = corpus_bleu(&hyps, &refs).unwrap();
            let slow = oracle_bleu(&hyps, &refs);
            assert!(
                (fast.score - slow.score).abs() < 1e-6 * slow.score.abs().max(1.0),
                "{} vs {}",
                fast.score,
                slow.score
            );
            assert_eq!(fast.hyp_len, slow.hyp_len);
            assert_eq!(fast.ref_len, slow.ref_len);
            for n in 0..4 {
                assert!((fast.precisions[n] - slow.precisions[n]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn score_record_carries_all_fields() {
        let bleu = corpus_bleu(&[toks("a b c d")], &[toks("a b c d e")]).unwrap();
        let rec = ScoreRecord::new("L1->T", "dev", &bleu);
        let json = serde_json::to_string(&rec).unwrap();
        let back: ScoreRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.score, bleu.score);
        assert_eq!(back.bp, bleu.brevity_penalty);
        assert_eq!(back.hyp_len, 4);
        assert_eq!(back.ref_len, 5);
    }
}
