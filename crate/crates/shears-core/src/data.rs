//! Synthetic multilingual corpora.
//!
//! A "language" is a seeded cipher over a shared content vocabulary: a word
//! permutation plus a cyclic word-order rotation. The canonical target
//! language is the identity cipher, so every generated pair has an exact
//! reference translation and an oracle translator exists for any direction.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Arch;
use crate::vocab;

pub type DataResult<T> = Result<T, DataError>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("length filter removed every pair (uniform lengths)")]
    DegenerateFilter,
    #[error("corpus has no pairs")]
    EmptyCorpus,
    #[error("unknown language {0}")]
    UnknownLanguage(String),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("corpus file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A cipher language: bijective word permutation plus a word-order rotation.
/// The canonical target language uses the identity permutation and rotation 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Language {
    pub name: String,
    /// Index into the tag block of the vocabulary (0 = canonical target).
    pub tag_index: usize,
    perm: Vec<u16>,
    inv_perm: Vec<u16>,
    pub rotation: usize,
}

impl Language {
    pub fn identity(name: &str, tag_index: usize, content_words: usize) -> Self {
        let perm: Vec<u16> = (0..content_words as u16).collect();
        Language {
            name: name.to_string(),
            tag_index,
            inv_perm: perm.clone(),
            perm,
            rotation: 0,
        }
    }

    fn with_perm(name: String, tag_index: usize, perm: Vec<u16>, rotation: usize) -> Self {
        let mut inv = vec![0u16; perm.len()];
        for (latent, &surface) in perm.iter().enumerate() {
            inv[surface as usize] = latent as u16;
        }
        Language {
            name,
            tag_index,
            perm,
            inv_perm: inv,
            rotation,
        }
    }

    pub fn tag(&self) -> u32 {
        vocab::tag_id(self.tag_index)
    }

    pub fn content_words(&self) -> usize {
        self.perm.len()
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == 0 && self.perm.iter().enumerate().all(|(i, &p)| p as usize == i)
    }

    /// Latent word indices -> surface word indices (permute, then rotate).
    pub fn encode_words(&self, latent: &[u16]) -> Vec<u16> {
        let mut surface: Vec<u16> = latent.iter().map(|&w| self.perm[w as usize]).collect();
        if !surface.is_empty() {
            surface.rotate_left(self.rotation % surface.len());
        }
        surface
    }

    /// Surface word indices -> latent word indices.
    pub fn decode_words(&self, surface: &[u16]) -> Vec<u16> {
        let mut latent = surface.to_vec();
        if !latent.is_empty() {
            latent.rotate_right(self.rotation % latent.len());
        }
        latent
            .iter()
            .map(|&w| self.inv_perm[w as usize])
            .collect()
    }

    pub fn cipher_sentence(&self, latent: &[u16]) -> String {
        words_to_sentence(&self.encode_words(latent))
    }

    pub fn decipher_sentence(&self, sentence: &str) -> DataResult<Vec<u16>> {
        Ok(self.decode_words(&sentence_to_words(sentence)?))
    }
}

pub fn words_to_sentence(words: &[u16]) -> String {
    words
        .iter()
        .map(|w| format!("w{w}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn sentence_to_words(sentence: &str) -> DataResult<Vec<u16>> {
    sentence
        .split_whitespace()
        .map(|w| {
            w.strip_prefix('w')
                .and_then(|d| d.parse::<u16>().ok())
                .ok_or_else(|| DataError::UnknownWord(w.to_string()))
        })
        .collect()
}

/// Exact translation for any direction: decode with the source cipher,
/// re-encode with the target cipher. Scores a perfect BLEU by construction.
pub fn oracle_translate(src: &Language, tgt: &Language, sentence: &str) -> DataResult<String> {
    Ok(tgt.cipher_sentence(&src.decipher_sentence(sentence)?))
}

/// The generated language family: one canonical target plus `k` ciphers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanguageSet {
    pub target: Language,
    pub ciphers: Vec<Language>,
    pub content_words: usize,
}

impl LanguageSet {
    pub fn all(&self) -> impl Iterator<Item = &Language> {
        std::iter::once(&self.target).chain(self.ciphers.iter())
    }

    pub fn by_name(&self, name: &str) -> DataResult<&Language> {
        self.all()
            .find(|l| l.name == name)
            .ok_or_else(|| DataError::UnknownLanguage(name.to_string()))
    }

    pub fn n_languages(&self) -> usize {
        1 + self.ciphers.len()
    }

    /// Minimum model vocab able to host these languages.
    pub fn required_vocab(&self) -> usize {
        vocab::required_vocab(self.n_languages(), self.content_words)
    }

    pub fn codec(&self) -> TokenCodec {
        TokenCodec {
            n_languages: self.n_languages(),
            content_words: self.content_words,
        }
    }
}

/// Generates `k` cipher languages (distinct seeded permutations, rotations
/// drawn from {0, 1, 2}) plus the canonical target language `T`.
pub fn gen_languages(k: usize, content_words: usize, seed: u64) -> LanguageSet {
    assert!(k >= 1, "need at least one cipher language");
    assert!(content_words >= 16, "content vocabulary too small");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ciphers = Vec::with_capacity(k);
    for i in 0..k {
        let mut perm: Vec<u16> = (0..content_words as u16).collect();
        perm.shuffle(&mut rng);
        let rotation = rng.random_range(0..=2usize);
        ciphers.push(Language::with_perm(
            format!("L{}", i + 1),
            i + 1,
            perm,
            rotation,
        ));
    }
    LanguageSet {
        target: Language::identity("T", 0, content_words),
        ciphers,
        content_words,
    }
}

/// An ordered translation direction with a priority weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub src: Language,
    pub tgt: Language,
    pub weight: f32,
}

impl Direction {
    pub fn new(src: Language, tgt: Language, weight: f32) -> Self {
        assert!(src.name != tgt.name, "direction endpoints must differ");
        assert!(weight >= 0.0, "direction weight must be non-negative");
        Direction { src, tgt, weight }
    }

    pub fn name(&self) -> String {
        format!("{}->{}", self.src.name, self.tgt.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(DataError::Format(format!("unknown split {other:?}"))),
        }
    }
}

/// Aligned (source sentence, target sentence) pairs for one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pub direction: Direction,
    pub split: Split,
    pub pairs: Vec<(String, String)>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stable content hashes of the pairs, for split-disjointness checks.
    pub fn pair_hashes(&self) -> HashSet<u64> {
        self.pairs
            .iter()
            .map(|(s, t)| fnv1a(format!("{s}\t{t}").as_bytes()))
            .collect()
    }

    /// Keeps the first `n` pairs, cycling from the start when `n` exceeds the
    /// corpus size, so requested sample counts are always exact.
    pub fn take_cyclic(&self, n: usize) -> ParallelCorpus {
        assert!(!self.pairs.is_empty());
        let pairs = (0..n)
            .map(|i| self.pairs[i % self.pairs.len()].clone())
            .collect();
        ParallelCorpus {
            direction: self.direction.clone(),
            split: self.split,
            pairs,
        }
    }

    /// First `n` pairs (or all of them) as a corpus; used for scan subsets.
    pub fn head(&self, n: usize) -> ParallelCorpus {
        ParallelCorpus {
            direction: self.direction.clone(),
            split: self.split,
            pairs: self.pairs.iter().take(n).cloned().collect(),
        }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Varies a base seed per purpose label, so corpus draws are decorrelated.
pub fn subseed(seed: u64, label: &str) -> u64 {
    seed ^ fnv1a(label.as_bytes())
}

fn sample_latent(
    rng: &mut ChaCha8Rng,
    len_range: &RangeInclusive<usize>,
    content_words: usize,
) -> Vec<u16> {
    let len = rng.random_range(len_range.clone());
    (0..len)
        .map(|_| rng.random_range(0..content_words as u16))
        .collect()
}

/// Generates `n` aligned pairs for a direction. Each pair shares one latent
/// canonical word sequence; the two surfaces come from the direction's
/// ciphers, so the gold translation is exact by construction.
pub fn gen_corpus(
    direction: &Direction,
    n: usize,
    len_range: RangeInclusive<usize>,
    seed: u64,
    split: Split,
) -> ParallelCorpus {
    assert!(n > 0, "corpus size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = direction.src.content_words();
    let pairs = (0..n)
        .map(|_| {
            let latent = sample_latent(&mut rng, &len_range, content);
            (
                direction.src.cipher_sentence(&latent),
                direction.tgt.cipher_sentence(&latent),
            )
        })
        .collect();
    ParallelCorpus {
        direction: direction.clone(),
        split,
        pairs,
    }
}

/// Train/dev/test splits as disjoint seeded draws: no latent sentence is
/// reused across the three splits of a direction.
pub fn gen_splits(
    direction: &Direction,
    train_n: usize,
    dev_n: usize,
    test_n: usize,
    len_range: RangeInclusive<usize>,
    seed: u64,
) -> (ParallelCorpus, ParallelCorpus, ParallelCorpus) {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, &direction.name()));
    let content = direction.src.content_words();
    let mut seen: HashSet<Vec<u16>> = HashSet::new();
    let mut draw = |n: usize, split: Split| {
        let mut pairs = Vec::with_capacity(n);
        while pairs.len() < n {
            let latent = sample_latent(&mut rng, &len_range, content);
            if !seen.insert(latent.clone()) {
                continue;
            }
            pairs.push((
                direction.src.cipher_sentence(&latent),
                direction.tgt.cipher_sentence(&latent),
            ));
        }
        ParallelCorpus {
            direction: direction.clone(),
            split,
            pairs,
        }
    };
    let train = draw(train_n, Split::Train);
    let dev = draw(dev_n, Split::Dev);
    let test = draw(test_n, Split::Test);
    (train, dev, test)
}

/// Which side's word count drives the length filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterSide {
    Source,
    Target,
}

fn side_len(pair: &(String, String), side: FilterSide) -> usize {
    match side {
        FilterSide::Source => pair.0.split_whitespace().count(),
        FilterSide::Target => pair.1.split_whitespace().count(),
    }
}

/// Keeps pairs whose word count exceeds the corpus mean word count,
/// preserving order. Errors when the result would be empty (all lengths
/// equal); use [`length_filter_lenient`] for the pass-through behaviour.
pub fn length_filter(corpus: &ParallelCorpus, side: FilterSide) -> DataResult<ParallelCorpus> {
    if corpus.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let mean = corpus
        .pairs
        .iter()
        .map(|p| side_len(p, side) as f64)
        .sum::<f64>()
        / corpus.len() as f64;
    let pairs: Vec<_> = corpus
        .pairs
        .iter()
        .filter(|p| (side_len(p, side) as f64) > mean)
        .cloned()
        .collect();
    if pairs.is_empty() {
        return Err(DataError::DegenerateFilter);
    }
    Ok(ParallelCorpus {
        direction: corpus.direction.clone(),
        split: corpus.split,
        pairs,
    })
}

/// Length filter with pass-through on the degenerate all-equal-length case.
pub fn length_filter_lenient(corpus: &ParallelCorpus, side: FilterSide) -> ParallelCorpus {
    match length_filter(corpus, side) {
        Ok(filtered) => filtered,
        Err(_) => corpus.clone(),
    }
}

/// Deterministic, lossless subword splitting: each whitespace word becomes
/// consecutive chunks of at most two characters. Concatenating a word's
/// chunks restores the word exactly.
pub fn subword_tokenize(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in sentence.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        for chunk in chars.chunks(2) {
            out.push(chunk.iter().collect());
        }
    }
    out
}

/// Token-id codec shared by models and corpora.
#[derive(Debug, Clone, Copy)]
pub struct TokenCodec {
    n_languages: usize,
    content_words: usize,
}

impl TokenCodec {
    pub fn content_base(&self) -> u32 {
        vocab::content_base(self.n_languages)
    }

    pub fn word_to_id(&self, surface: u16) -> u32 {
        self.content_base() + surface as u32
    }

    pub fn sentence_to_ids(&self, sentence: &str) -> DataResult<Vec<u32>> {
        Ok(sentence_to_words(sentence)?
            .into_iter()
            .map(|w| self.word_to_id(w))
            .collect())
    }

    /// Generated token ids back to a sentence: stops at EOS, keeps content
    /// words, drops any stray specials or tags.
    pub fn ids_to_sentence(&self, ids: &[u32]) -> String {
        let base = self.content_base();
        let top = base + self.content_words as u32;
        let mut words = Vec::new();
        for &id in ids {
            if id == vocab::EOS {
                break;
            }
            if id >= base && id < top {
                words.push(format!("w{}", id - base));
            }
        }
        words.join(" ")
    }

    /// Model input for the source side plus the decode seed tags.
    pub fn encode_prompt(
        &self,
        direction: &Direction,
        src_sentence: &str,
        arch: Arch,
    ) -> DataResult<(Vec<u32>, Vec<u32>)> {
        let ids = self.sentence_to_ids(src_sentence)?;
        let mut src = Vec::with_capacity(ids.len() + 3);
        src.push(direction.src.tag());
        src.extend(ids);
        match arch {
            Arch::EncoderDecoder => src.push(vocab::EOS),
            Arch::DecoderOnly => src.push(vocab::SEP),
        }
        Ok((src, vec![direction.tgt.tag()]))
    }

    /// Teacher-forcing example for one pair: source tokens, decoder input and
    /// the label sequence aligned with the logits the model returns.
    pub fn encode_example(
        &self,
        direction: &Direction,
        src_sentence: &str,
        tgt_sentence: &str,
        arch: Arch,
    ) -> DataResult<TrainExample> {
        let (src, tags) = self.encode_prompt(direction, src_sentence, arch)?;
        let tgt_ids = self.sentence_to_ids(tgt_sentence)?;
        match arch {
            Arch::EncoderDecoder => {
                // dec_input: BOS tag y1..yn ; labels: tag y1..yn EOS
                let mut dec_input = Vec::with_capacity(tgt_ids.len() + 2);
                dec_input.push(vocab::BOS);
                dec_input.extend(&tags);
                dec_input.extend(&tgt_ids);
                let mut labels = Vec::with_capacity(dec_input.len());
                labels.extend(&tags);
                labels.extend(&tgt_ids);
                labels.push(vocab::EOS);
                Ok(TrainExample {
                    src,
                    dec_input,
                    labels,
                })
            }
            Arch::DecoderOnly => {
                // full sequence: [tag_src src.. SEP tag_tgt] y1..yn
                // labels mask every prompt-internal prediction with PAD.
                let mut full_src = src;
                full_src.extend(&tags);
                let dec_input = tgt_ids.clone();
                let total = full_src.len() + dec_input.len();
                let mut labels = vec![vocab::PAD; total];
                for (j, &y) in tgt_ids.iter().enumerate() {
                    labels[full_src.len() - 1 + j] = y;
                }
                labels[total - 1] = vocab::EOS;
                Ok(TrainExample {
                    src: full_src,
                    dec_input,
                    labels,
                })
            }
        }
    }
}

/// One teacher-forcing example. For encoder-decoder models `labels` aligns
/// with the decoder positions; for decoder-only models it aligns with the
/// full `src + dec_input` sequence.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub src: Vec<u32>,
    pub dec_input: Vec<u32>,
    pub labels: Vec<u32>,
}

// --- corpus files -----------------------------------------------------------
//
// One pair per line, source TAB target, UTF-8. The header line carries the
// direction tags and split name plus optional extra key=value fields.

pub fn write_corpus(path: &Path, corpus: &ParallelCorpus) -> DataResult<()> {
    write_corpus_with(path, corpus, &[])
}

pub fn write_corpus_with(
    path: &Path,
    corpus: &ParallelCorpus,
    extra: &[(&str, &str)],
) -> DataResult<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(
        f,
        "# src={} tgt={} split={} weight={}",
        corpus.direction.src.name, corpus.direction.tgt.name, corpus.split, corpus.direction.weight
    )?;
    for (k, v) in extra {
        write!(f, " {k}={v}")?;
    }
    writeln!(f)?;
    for (s, t) in &corpus.pairs {
        writeln!(f, "{s}\t{t}")?;
    }
    Ok(())
}

pub fn read_corpus(
    path: &Path,
    langs: &LanguageSet,
) -> DataResult<(ParallelCorpus, Vec<(String, String)>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| DataError::Format("empty corpus file".into()))?;
    let header = header
        .strip_prefix("# ")
        .ok_or_else(|| DataError::Format("missing `# ` header".into()))?;
    let mut src_name = None;
    let mut tgt_name = None;
    let mut split = None;
    let mut weight = 1.0f32;
    let mut extras = Vec::new();
    for field in header.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| DataError::Format(format!("bad header field {field:?}")))?;
        match k {
            "src" => src_name = Some(v.to_string()),
            "tgt" => tgt_name = Some(v.to_string()),
            "split" => split = Some(v.parse::<Split>()?),
            "weight" => {
                weight = v
                    .parse()
                    .map_err(|_| DataError::Format(format!("bad weight {v:?}")))?
            }
            _ => extras.push((k.to_string(), v.to_string())),
        }
    }
    let src = langs.by_name(&src_name.ok_or_else(|| DataError::Format("missing src".into()))?)?;
    let tgt = langs.by_name(&tgt_name.ok_or_else(|| DataError::Format("missing tgt".into()))?)?;
    let split = split.ok_or_else(|| DataError::Format("missing split".into()))?;
    let mut pairs = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (s, t) = line
            .split_once('\t')
            .ok_or_else(|| DataError::Format(format!("line {}: missing tab", i + 2)))?;
        if s.is_empty() || t.is_empty() {
            return Err(DataError::Format(format!("line {}: empty sentence", i + 2)));
        }
        pairs.push((s.to_string(), t.to_string()));
    }
    Ok((
        ParallelCorpus {
            direction: Direction::new(src.clone(), tgt.clone(), weight),
            split,
            pairs,
        },
        extras,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn langs() -> LanguageSet {
        gen_languages(3, 64, 7)
    }

    fn direction(set: &LanguageSet, i: usize) -> Direction {
        Direction::new(set.ciphers[i].clone(), set.target.clone(), 1.0)
    }

    #[test]
    fn languages_are_distinct_and_deterministic() {
        let a = langs();
        let b = langs();
        assert_eq!(a.ciphers, b.ciphers);
        for i in 0..a.ciphers.len() {
            for j in (i + 1)..a.ciphers.len() {
                let hamming = a.ciphers[i]
                    .perm
                    .iter()
                    .zip(&a.ciphers[j].perm)
                    .filter(|(x, y)| x != y)
                    .count();
                assert!(hamming > 0, "ciphers {i} and {j} identical");
            }
        }
    }

    #[test]
    fn target_language_is_identity() {
        let set = langs();
        assert!(set.target.is_identity());
        let latent = vec![5u16, 0, 63, 17];
        assert_eq!(set.target.encode_words(&latent), latent);
        assert_eq!(set.target.cipher_sentence(&latent), "w5 w0 w63 w17");
    }

    #[test]
    fn rotations_within_bounds() {
        let set = langs();
        assert!(set.ciphers.iter().all(|l| l.rotation <= 2));
    }

    #[test]
    fn inverse_cipher_reproduces_target() {
        let set = langs();
        let d = direction(&set, 0);
        let corpus = gen_corpus(&d, 1, 4..=12, 99, Split::Train);
        let (src, tgt) = &corpus.pairs[0];
        let recovered = words_to_sentence(&d.src.decipher_sentence(src).unwrap());
        assert_eq!(&recovered, tgt);
    }

    #[test]
    fn oracle_translator_is_exact_both_ways() {
        let set = langs();
        let latent = vec![1u16, 2, 3, 4, 5];
        let l1 = &set.ciphers[0];
        let surface = l1.cipher_sentence(&latent);
        assert_eq!(
            oracle_translate(l1, &set.target, &surface).unwrap(),
            words_to_sentence(&latent)
        );
        assert_eq!(
            oracle_translate(&set.target, l1, &words_to_sentence(&latent)).unwrap(),
            surface
        );
    }

    #[test]
    fn different_directions_have_different_surfaces() {
        let set = langs();
        let c0 = gen_corpus(&direction(&set, 0), 16, 4..=12, 5, Split::Train);
        let c1 = gen_corpus(&direction(&set, 1), 16, 4..=12, 5, Split::Train);
        // same seed => same latents, but the cipher surfaces differ
        assert_ne!(
            c0.pairs.iter().map(|p| &p.0).collect::<Vec<_>>(),
            c1.pairs.iter().map(|p| &p.0).collect::<Vec<_>>()
        );
    }

    #[test]
    fn corpus_counts_and_length_bounds() {
        let set = langs();
        let corpus = gen_corpus(&direction(&set, 0), 1000, 4..=12, 3, Split::Train);
        assert_eq!(corpus.len(), 1000);
        for (s, t) in &corpus.pairs {
            let sl = s.split_whitespace().count();
            let tl = t.split_whitespace().count();
            assert_eq!(sl, tl);
            assert!((4..=12).contains(&sl));
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let set = langs();
        let (train, dev, test) = gen_splits(&direction(&set, 0), 300, 50, 80, 4..=12, 7);
        assert_eq!((train.len(), dev.len(), test.len()), (300, 50, 80));
        let th = train.pair_hashes();
        assert!(dev.pair_hashes().is_disjoint(&th));
        assert!(test.pair_hashes().is_disjoint(&th));
        assert!(test.pair_hashes().is_disjoint(&dev.pair_hashes()));
    }

    fn corpus_with_lengths(lens: &[usize]) -> ParallelCorpus {
        let set = langs();
        let d = direction(&set, 0);
        let pairs = lens
            .iter()
            .map(|&n| {
                let latent: Vec<u16> = (0..n as u16).collect();
                (d.src.cipher_sentence(&latent), d.tgt.cipher_sentence(&latent))
            })
            .collect();
        ParallelCorpus {
            direction: d,
            split: Split::Train,
            pairs,
        }
    }

    #[test]
    fn length_filter_keeps_only_above_mean() {
        let corpus = corpus_with_lengths(&[2, 2, 10]); // mean 4.67
        let filtered = length_filter(&corpus, FilterSide::Source).unwrap();
        assert_eq!(filtered.len(), 1);
        assert_eq!(filtered.pairs[0].0.split_whitespace().count(), 10);
    }

    #[test]
    fn length_filter_degenerate_and_passthrough() {
        let corpus = corpus_with_lengths(&[5, 5, 5]);
        assert!(matches!(
            length_filter(&corpus, FilterSide::Source),
            Err(DataError::DegenerateFilter)
        ));
        assert_eq!(length_filter_lenient(&corpus, FilterSide::Source), corpus);
    }

    #[test]
    fn length_filter_survivors_exceed_original_mean() {
        let set = langs();
        let corpus = gen_corpus(&direction(&set, 1), 400, 4..=12, 11, Split::Train);
        let mean = corpus
            .pairs
            .iter()
            .map(|p| p.0.split_whitespace().count() as f64)
            .sum::<f64>()
            / corpus.len() as f64;
        let filtered = length_filter(&corpus, FilterSide::Source).unwrap();
        assert!(!filtered.is_empty());
        for (s, _) in &filtered.pairs {
            assert!((s.split_whitespace().count() as f64) > mean);
        }
        let filtered_mean = filtered
            .pairs
            .iter()
            .map(|p| p.0.split_whitespace().count() as f64)
            .sum::<f64>()
            / filtered.len() as f64;
        assert!(filtered_mean > mean);
    }

    #[test]
    fn subword_chunking_rule() {
        assert_eq!(subword_tokenize("w17"), vec!["w1", "7"]);
        assert_eq!(subword_tokenize("ab"), vec!["ab"]);
        assert_eq!(subword_tokenize("w5 w63"), vec!["w5", "w6", "3"]);
    }

    #[test]
    fn corpus_file_roundtrip() {
        let set = langs();
        let corpus = gen_corpus(&direction(&set, 2), 25, 4..=12, 13, Split::Dev);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        write_corpus_with(&path, &corpus, &[("kd", "false")]).unwrap();
        let (back, extras) = read_corpus(&path, &set).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(extras, vec![("kd".to_string(), "false".to_string())]);
    }

    #[test]
    fn corpus_file_rejects_garbage() {
        let set = langs();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "no header here\n").unwrap();
        assert!(matches!(
            read_corpus(&path, &set),
            Err(DataError::Format(_))
        ));
    }

    #[test]
    fn encode_example_shapes_for_both_archs() {
        let set = langs();
        let d = direction(&set, 0);
        let codec = set.codec();
        let (src, tgt) = gen_corpus(&d, 1, 5..=5, 21, Split::Train).pairs[0].clone();

        let ed = codec
            .encode_example(&d, &src, &tgt, Arch::EncoderDecoder)
            .unwrap();
        assert_eq!(ed.src.len(), 7); // tag + 5 words + EOS
        assert_eq!(ed.dec_input.len(), 7); // BOS + tag + 5 words
        assert_eq!(ed.labels.len(), ed.dec_input.len());
        assert_eq!(*ed.labels.last().unwrap(), vocab::EOS);

        let do_ = codec
            .encode_example(&d, &src, &tgt, Arch::DecoderOnly)
            .unwrap();
        assert_eq!(do_.src.len(), 8); // tag + 5 words + SEP + tag
        assert_eq!(do_.dec_input.len(), 5);
        assert_eq!(do_.labels.len(), 13);
        // prompt-internal predictions are masked
        assert!(do_.labels[..6].iter().all(|&l| l == vocab::PAD));
        assert_eq!(*do_.labels.last().unwrap(), vocab::EOS);
    }

    proptest! {
        #[test]
        fn subword_roundtrip_restores_sentences(words in proptest::collection::vec(0u16..64, 1..20)) {
            let sentence = words_to_sentence(&words);
            let tokens = subword_tokenize(&sentence);
            // rebuild: chunks concatenate back into the original words
            let mut rebuilt = Vec::new();
            let mut cur = String::new();
            for tok in &tokens {
                cur.push_str(tok);
                // words are "w<idx>": complete when parseable and next token starts fresh 'w'
                rebuilt.push(tok.clone());
            }
            cur.clear();
            // simpler check: joining all tokens equals joining all words
            let joined: String = tokens.concat();
            let original: String = sentence.split_whitespace().collect::<Vec<_>>().concat();
            prop_assert_eq!(joined, original);
            prop_assert!(!rebuilt.is_empty());
        }

        #[test]
        fn filter_output_is_subsequence(lens in proptest::collection::vec(4usize..13, 2..40)) {
            let corpus = corpus_with_lengths(&lens);
            if let Ok(filtered) = length_filter(&corpus, FilterSide::Source) {
                let mut it = corpus.pairs.iter();
                for kept in &filtered.pairs {
                    prop_assert!(it.any(|p| p == kept), "not a subsequence");
                }
            }
        }
    }
}
