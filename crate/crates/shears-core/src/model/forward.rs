//! Forward evaluation: graph construction for training and inference,
//! plus greedy decoding.
//!
//! Masked layers are skipped entirely — the residual stream is returned
//! unchanged — so a masked forward executes the exact op sequence of a
//! model rebuilt without those blocks.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::Tensor;
use crate::vocab;

use super::{Arch, LayeredModel, LayerId, ModelError, ModelResult, Section};

/// Which leaves become trainable parameters when building a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Everything frozen; used for decoding and evaluation.
    Inference,
    /// All base weights trainable (model must carry no adapters).
    FullParams,
    /// Only adapter tensors trainable; base weights stay frozen.
    AdaptersOnly,
}

/// A source prompt for decoding: source-side tokens plus the direction tag
/// tokens that seed the target side.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub src: Vec<u32>,
    pub tags: Vec<u32>,
}

pub(crate) struct Builder<'m> {
    pub g: Graph,
    m: &'m LayeredModel,
    scope: TrainScope,
    dropout_rng: Option<ChaCha8Rng>,
    bound: HashMap<String, NodeId>,
}

enum KvSource<'a> {
    SelfAttn,
    CrossMem(NodeId),
    CrossCached(&'a (Tensor, Tensor)),
}

impl<'m> Builder<'m> {
    pub(crate) fn new(m: &'m LayeredModel, scope: TrainScope, dropout_seed: Option<u64>) -> Self {
        let dropout_rng = match (scope, dropout_seed, m.adapters()) {
            (TrainScope::AdaptersOnly, Some(seed), Some(ad)) if ad.cfg.dropout > 0.0 => {
                Some(ChaCha8Rng::seed_from_u64(seed))
            }
            _ => None,
        };
        Builder {
            g: Graph::new(),
            m,
            scope,
            dropout_rng,
            bound: HashMap::new(),
        }
    }

    fn weight(&mut self, name: &str) -> ModelResult<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let t = self
            .m
            .weight(name)
            .ok_or_else(|| ModelError::Config(format!("missing weight {name}")))?
            .clone();
        let id = match self.scope {
            TrainScope::FullParams => self.g.param(name, t),
            _ => self.g.constant(t),
        };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    fn adapter(&mut self, base: &str, half: &str, t: &Tensor) -> NodeId {
        let name = format!("lora.{base}.{half}");
        if let Some(&id) = self.bound.get(&name) {
            return id;
        }
        let id = match self.scope {
            TrainScope::AdaptersOnly => self.g.param(name.clone(), t.clone()),
            _ => self.g.constant(t.clone()),
        };
        self.bound.insert(name, id);
        id
    }

    /// `x @ w (+ lora delta) + bias`
    fn linear(&mut self, x: NodeId, wname: &str, bname: &str) -> ModelResult<NodeId> {
        let w = self.weight(wname)?;
        let mut y = self.g.matmul(x, w)?;
        if let Some(pair) = self
            .m
            .adapters()
            .and_then(|ad| ad.pairs.get(wname))
            .cloned()
        {
            let scaling = self.m.adapters().unwrap().cfg.scaling();
            let dropout = self.m.adapters().unwrap().cfg.dropout;
            let a = self.adapter(wname, "a", &pair.a);
            let b = self.adapter(wname, "b", &pair.b);
            let mut xin = x;
            if let Some(rng) = self.dropout_rng.as_mut() {
                let shape = self.g.value(x).shape().to_vec();
                let keep = 1.0 - dropout;
                let mask: Vec<f32> = (0..shape.iter().product::<usize>())
                    .map(|_| {
                        if rng.random::<f32>() < dropout {
                            0.0
                        } else {
                            1.0 / keep
                        }
                    })
                    .collect();
                let mask = self.g.constant(Tensor::new(shape, mask)?);
                xin = self.g.mul(x, mask)?;
            }
            let down = self.g.matmul(xin, a)?;
            let up = self.g.matmul(down, b)?;
            let delta = self.g.scale(up, scaling)?;
            y = self.g.add(y, delta)?;
        }
        let bias = self.weight(bname)?;
        Ok(self.g.add_bias(y, bias)?)
    }

    fn layernorm(&mut self, x: NodeId, prefix: &str) -> ModelResult<NodeId> {
        let gamma = self.weight(&format!("{prefix}.g"))?;
        let beta = self.weight(&format!("{prefix}.b"))?;
        Ok(self.g.layernorm(x, gamma, beta)?)
    }

    fn attention(
        &mut self,
        x: NodeId,
        kv: KvSource,
        causal: bool,
        prefix: &str,
    ) -> ModelResult<NodeId> {
        let heads = self.m.config().heads;
        let dh = self.m.config().head_dim();
        let q = self.linear(x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let (k, v) = match kv {
            KvSource::SelfAttn => (
                self.linear(x, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?,
                self.linear(x, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?,
            ),
            KvSource::CrossMem(mem) => (
                self.linear(mem, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?,
                self.linear(mem, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?,
            ),
            KvSource::CrossCached((kt, vt)) => {
                (self.g.constant(kt.clone()), self.g.constant(vt.clone()))
            }
        };
        let t_q = self.g.value(q).shape()[0];
        let t_k = self.g.value(k).shape()[0];
        let mask = if causal {
            Some(self.g.constant(causal_mask(t_q, t_k)?))
        } else {
            None
        };
        let scale = 1.0 / (dh as f32).sqrt();
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.g.slice_cols(q, h * dh, dh)?;
            let kh = self.g.slice_cols(k, h * dh, dh)?;
            let vh = self.g.slice_cols(v, h * dh, dh)?;
            let scores = self.g.matmul_nt(qh, kh)?;
            let scores = self.g.scale(scores, scale)?;
            let scores = match mask {
                Some(m) => self.g.add(scores, m)?,
                None => scores,
            };
            let attn = self.g.softmax(scores)?;
            head_outputs.push(self.g.matmul(attn, vh)?);
        }
        let ctx = self.g.concat_cols(&head_outputs)?;
        self.linear(ctx, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn ffn(&mut self, x: NodeId, prefix: &str) -> ModelResult<NodeId> {
        let h = self.linear(x, &format!("{prefix}.ffn.w1"), &format!("{prefix}.ffn.b1"))?;
        let h = self.g.gelu(h)?;
        self.linear(h, &format!("{prefix}.ffn.w2"), &format!("{prefix}.ffn.b2"))
    }

    fn embed(&mut self, tokens: &[u32]) -> ModelResult<NodeId> {
        let tok = self.weight("tok_emb")?;
        let pos = self.weight("pos_emb")?;
        let te = self.g.embedding(tok, tokens)?;
        let positions: Vec<u32> = (0..tokens.len() as u32).collect();
        let pe = self.g.embedding(pos, &positions)?;
        Ok(self.g.add(te, pe)?)
    }

    /// Pre-norm encoder block; masked layers contribute exactly their input.
    fn encoder_block(&mut self, x: NodeId, i: usize) -> ModelResult<NodeId> {
        if self.m.mask().contains(LayerId::encoder(i)) {
            return Ok(x);
        }
        let p = format!("enc.{i}");
        let h = self.layernorm(x, &format!("{p}.ln1"))?;
        let a = self.attention(h, KvSource::SelfAttn, false, &format!("{p}.attn"))?;
        let x = self.g.add(x, a)?;
        let h = self.layernorm(x, &format!("{p}.ln2"))?;
        let f = self.ffn(h, &p)?;
        Ok(self.g.add(x, f)?)
    }

    fn decoder_block(
        &mut self,
        x: NodeId,
        i: usize,
        cross: Option<&CrossSource>,
    ) -> ModelResult<NodeId> {
        if self.m.mask().contains(LayerId::decoder(i)) {
            return Ok(x);
        }
        let p = format!("dec.{i}");
        let h = self.layernorm(x, &format!("{p}.ln1"))?;
        let a = self.attention(h, KvSource::SelfAttn, true, &format!("{p}.attn"))?;
        let mut x = self.g.add(x, a)?;
        if let Some(cross) = cross {
            let h = self.layernorm(x, &format!("{p}.ln2"))?;
            let kv = match cross {
                CrossSource::Mem(mem) => KvSource::CrossMem(*mem),
                CrossSource::Cached(map) => KvSource::CrossCached(
                    map.get(&i).expect("cached cross k/v for unmasked layer"),
                ),
            };
            let a = self.attention(h, kv, false, &format!("{p}.xattn"))?;
            x = self.g.add(x, a)?;
        }
        let ffn_ln = if cross.is_some() { "ln3" } else { "ln2" };
        let h = self.layernorm(x, &format!("{p}.{ffn_ln}"))?;
        let f = self.ffn(h, &p)?;
        Ok(self.g.add(x, f)?)
    }

    fn encoder(&mut self, src: &[u32]) -> ModelResult<NodeId> {
        let mut x = self.embed(src)?;
        for i in 0..self.m.config().n_encoder_layers {
            x = self.encoder_block(x, i)?;
        }
        self.layernorm(x, "enc_final_ln")
    }

    fn decoder(&mut self, tokens: &[u32], cross: Option<&CrossSource>) -> ModelResult<NodeId> {
        let mut x = self.embed(tokens)?;
        for i in 0..self.m.config().n_decoder_layers {
            x = self.decoder_block(x, i, cross)?;
        }
        self.layernorm(x, "dec_final_ln")
    }

    fn project(&mut self, x: NodeId) -> ModelResult<NodeId> {
        self.linear(x, "out.w", "out.b")
    }
}

enum CrossSource {
    Mem(NodeId),
    Cached(HashMap<usize, (Tensor, Tensor)>),
}

fn causal_mask(t_q: usize, t_k: usize) -> Result<Tensor, crate::numerics::NumericsError> {
    let mut data = vec![0.0f32; t_q * t_k];
    for i in 0..t_q {
        for j in 0..t_k {
            if j > i {
                data[i * t_k + j] = -1e9;
            }
        }
    }
    Tensor::new(vec![t_q, t_k], data)
}

fn check_tokens(m: &LayeredModel, tokens: &[u32]) -> ModelResult<()> {
    let v = m.config().vocab_size;
    for &t in tokens {
        if t as usize >= v {
            return Err(ModelError::Numerics(
                crate::numerics::NumericsError::TokenOutOfRange { id: t, vocab: v },
            ));
        }
    }
    Ok(())
}

fn check_len(len: usize, max: usize) -> ModelResult<()> {
    if len > max {
        return Err(ModelError::Length { len, max });
    }
    Ok(())
}

/// Logits for the target positions given source tokens and a decoder input.
///
/// Encoder-decoder: returns one logit row per `dec_input` position.
/// Decoder-only: the sequence is `src ++ dec_input`; returns one row per
/// position of that full sequence.
pub fn forward(m: &LayeredModel, src: &[u32], dec_input: &[u32]) -> ModelResult<Tensor> {
    check_tokens(m, src)?;
    check_tokens(m, dec_input)?;
    let max = m.config().max_len;
    let mut b = Builder::new(m, TrainScope::Inference, None);
    let logits = match m.config().arch {
        Arch::EncoderDecoder => {
            check_len(src.len(), max)?;
            check_len(dec_input.len(), max)?;
            if dec_input.is_empty() {
                return Err(ModelError::Config(
                    "encoder-decoder forward needs a non-empty decoder input".into(),
                ));
            }
            let mem = b.encoder(src)?;
            let x = b.decoder(dec_input, Some(&CrossSource::Mem(mem)))?;
            b.project(x)?
        }
        Arch::DecoderOnly => {
            let full: Vec<u32> = src.iter().chain(dec_input).copied().collect();
            check_len(full.len(), max)?;
            if full.is_empty() {
                return Err(ModelError::Config("decoder-only forward needs tokens".into()));
            }
            let x = b.decoder(&full, None)?;
            b.project(x)?
        }
    };
    Ok(b.g.value(logits).clone())
}

/// Builds the teacher-forcing loss graph for one example. Returns the graph
/// (for backward) and the scalar loss node.
pub(crate) fn training_loss(
    m: &LayeredModel,
    example: &crate::data::TrainExample,
    scope: TrainScope,
    dropout_seed: Option<u64>,
    label_smoothing: f32,
) -> ModelResult<(Graph, NodeId)> {
    check_tokens(m, &example.src)?;
    check_tokens(m, &example.dec_input)?;
    let max = m.config().max_len;
    let mut b = Builder::new(m, scope, dropout_seed);
    let loss = match m.config().arch {
        Arch::EncoderDecoder => {
            check_len(example.src.len(), max)?;
            check_len(example.dec_input.len(), max)?;
            let mem = b.encoder(&example.src)?;
            let x = b.decoder(&example.dec_input, Some(&CrossSource::Mem(mem)))?;
            let logits = b.project(x)?;
            b.g
                .cross_entropy(logits, &example.labels, vocab::PAD, label_smoothing)?
        }
        Arch::DecoderOnly => {
            let full: Vec<u32> = example
                .src
                .iter()
                .chain(&example.dec_input)
                .copied()
                .collect();
            check_len(full.len(), max)?;
            let x = b.decoder(&full, None)?;
            let logits = b.project(x)?;
            b.g
                .cross_entropy(logits, &example.labels, vocab::PAD, label_smoothing)?
        }
    };
    Ok((b.g, loss))
}

/// Reusable per-sentence decoding state. For encoder-decoder models the
/// encoder output and each unmasked decoder layer's cross-attention K/V are
/// computed once; every decode step still re-runs the full decoder stack on
/// the growing prefix (no incremental self-attention cache).
pub struct DecodeSession<'m> {
    m: &'m LayeredModel,
    prompt: Vec<u32>,
    cross: Option<CrossSource>,
}

impl<'m> DecodeSession<'m> {
    pub fn new(m: &'m LayeredModel, prompt: &Prompt) -> ModelResult<Self> {
        check_tokens(m, &prompt.src)?;
        check_tokens(m, &prompt.tags)?;
        match m.config().arch {
            Arch::EncoderDecoder => {
                check_len(prompt.src.len(), m.config().max_len)?;
                let mut b = Builder::new(m, TrainScope::Inference, None);
                let mem_id = b.encoder(&prompt.src)?;
                let mem = b.g.value(mem_id).clone();
                let mut cached = HashMap::new();
                for i in 0..m.config().n_decoder_layers {
                    if m.mask().contains(LayerId::decoder(i)) {
                        continue;
                    }
                    let mut cb = Builder::new(m, TrainScope::Inference, None);
                    let mem_node = cb.g.constant(mem.clone());
                    let p = format!("dec.{i}.xattn");
                    let k = cb.linear(mem_node, &format!("{p}.wk"), &format!("{p}.bk"))?;
                    let v = cb.linear(mem_node, &format!("{p}.wv"), &format!("{p}.bv"))?;
                    cached.insert(i, (cb.g.value(k).clone(), cb.g.value(v).clone()));
                }
                let mut seed = vec![vocab::BOS];
                seed.extend(&prompt.tags);
                Ok(DecodeSession {
                    m,
                    prompt: seed,
                    cross: Some(CrossSource::Cached(cached)),
                })
            }
            Arch::DecoderOnly => {
                let mut full = prompt.src.clone();
                full.extend(&prompt.tags);
                check_len(full.len(), m.config().max_len)?;
                Ok(DecodeSession {
                    m,
                    prompt: full,
                    cross: None,
                })
            }
        }
    }

    /// The decoder-side prefix decoding starts from.
    pub fn initial_prefix(&self) -> Vec<u32> {
        match self.m.config().arch {
            Arch::EncoderDecoder => self.prompt.clone(),
            Arch::DecoderOnly => Vec::new(),
        }
    }

    fn capacity_left(&self, prefix_len: usize) -> bool {
        let used = match self.m.config().arch {
            Arch::EncoderDecoder => prefix_len,
            Arch::DecoderOnly => self.prompt.len() + prefix_len,
        };
        used < self.m.config().max_len
    }

    /// Logits row predicting the token after the current prefix.
    pub fn next_logits(&self, prefix: &[u32]) -> ModelResult<Vec<f32>> {
        let mut b = Builder::new(self.m, TrainScope::Inference, None);
        let x = match self.m.config().arch {
            Arch::EncoderDecoder => b.decoder(prefix, self.cross.as_ref())?,
            Arch::DecoderOnly => {
                let full: Vec<u32> = self.prompt.iter().chain(prefix).copied().collect();
                b.decoder(&full, None)?
            }
        };
        let t = b.g.value(x).shape()[0];
        let last = b.g.slice_rows(x, t - 1, 1)?;
        let logits = b.project(last)?;
        Ok(b.g.value(logits).data().to_vec())
    }
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Deterministic argmax decoding until EOS, `max_new` tokens, or the model's
/// context limit. Returns the generated ids including the terminating EOS.
pub fn greedy_decode(
    m: &LayeredModel,
    src: &[u32],
    tags: &[u32],
    max_new: usize,
) -> ModelResult<Vec<u32>> {
    if max_new > m.config().max_len {
        return Err(ModelError::Config(format!(
            "max_new {max_new} exceeds max_len {}",
            m.config().max_len
        )));
    }
    let prompt = Prompt {
        src: src.to_vec(),
        tags: tags.to_vec(),
    };
    let session = DecodeSession::new(m, &prompt)?;
    let mut prefix = session.initial_prefix();
    let mut out = Vec::new();
    while out.len() < max_new && session.capacity_left(prefix.len()) {
        let row = session.next_logits(&prefix)?;
        let next = argmax(&row);
        out.push(next);
        if next == vocab::EOS {
            break;
        }
        prefix.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, testsupport, ModelConfig};

    fn tiny_encdec() -> LayeredModel {
        let cfg = ModelConfig {
            d_model: 32,
            heads: 2,
            d_ffn: 48,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            vocab_size: 40,
            max_len: 12,
            seed: 3,
            arch: Arch::EncoderDecoder,
        };
        build(&cfg).unwrap()
    }

    fn tiny_deconly() -> LayeredModel {
        let cfg = ModelConfig {
            d_model: 32,
            heads: 2,
            d_ffn: 48,
            n_encoder_layers: 0,
            n_decoder_layers: 3,
            vocab_size: 40,
            max_len: 16,
            seed: 5,
            arch: Arch::DecoderOnly,
        };
        build(&cfg).unwrap()
    }

    #[test]
    fn forward_is_deterministic() {
        let m = tiny_encdec();
        let src = [4u32, 10, 11, 2];
        let dec = [1u32, 5, 12];
        let a = forward(&m, &src, &dec).unwrap();
        let b = forward(&m, &src, &dec).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(a.shape(), &[3, 40]);
    }

    #[test]
    fn decoder_only_forward_covers_full_sequence() {
        let m = tiny_deconly();
        let logits = forward(&m, &[4, 10, 11, 3], &[7, 8]).unwrap();
        assert_eq!(logits.shape(), &[6, 40]);
    }

    #[test]
    fn masked_forward_equals_rebuilt_model() {
        for (m, layer) in [
            (tiny_encdec(), LayerId::decoder(1)),
            (tiny_encdec(), LayerId::encoder(0)),
            (tiny_deconly(), LayerId::decoder(2)),
        ] {
            let masked = m.with_layer_masked(layer).unwrap();
            let rebuilt = testsupport::rebuild_without_layer(&m, layer);
            let src = [4u32, 9, 10, 2];
            let dec = [1u32, 5, 6, 7];
            let a = forward(&masked, &src, &dec).unwrap();
            let b = forward(&rebuilt, &src, &dec).unwrap();
            assert!(a.bitwise_eq(&b), "mismatch for {layer}");
        }
    }

    #[test]
    fn zero_initialized_adapters_do_not_change_logits() {
        let m = tiny_encdec();
        let adapted = m
            .attach_lora(&crate::model::LoraConfig {
                rank: 4,
                alpha: 8.0,
                dropout: 0.1,
                targets: crate::model::LinearRole::ALL.to_vec(),
            }, 9)
            .unwrap();
        let src = [4u32, 9, 10, 2];
        let dec = [1u32, 5, 6];
        let base = forward(&m, &src, &dec).unwrap();
        let with = forward(&adapted, &src, &dec).unwrap();
        let max_diff = base
            .data()
            .iter()
            .zip(with.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff <= 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn overlong_sequences_are_rejected() {
        let m = tiny_encdec();
        let long: Vec<u32> = (0..13).map(|i| (i % 30) as u32).collect();
        assert!(matches!(
            forward(&m, &long, &[1]),
            Err(ModelError::Length { .. })
        ));
    }

    #[test]
    fn decoder_only_causality_is_bitwise() {
        let m = tiny_deconly();
        let a = forward(&m, &[4, 9, 10, 3], &[7, 8, 11]).unwrap();
        let b = forward(&m, &[4, 9, 10, 3], &[7, 8, 25]).unwrap();
        // rows before the edited position are identical
        let v = 40;
        for row in 0..6 {
            let ra = &a.data()[row * v..(row + 1) * v];
            let rb = &b.data()[row * v..(row + 1) * v];
            assert!(
                ra.iter().zip(rb).all(|(x, y)| x.to_bits() == y.to_bits()),
                "row {row} changed by a future token edit"
            );
        }
    }

    #[test]
    fn greedy_decode_is_deterministic_and_respects_limits() {
        let m = tiny_encdec();
        let src = [4u32, 9, 10, 2];
        let tags = [5u32];
        let a = greedy_decode(&m, &src, &tags, 6).unwrap();
        let b = greedy_decode(&m, &src, &tags, 6).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
        assert!(greedy_decode(&m, &src, &tags, 0).unwrap().is_empty());
    }

    #[test]
    fn decode_session_matches_plain_forward_argmax() {
        let m = tiny_encdec();
        let prompt = Prompt {
            src: vec![4, 9, 10, 2],
            tags: vec![5],
        };
        let session = DecodeSession::new(&m, &prompt).unwrap();
        let prefix = session.initial_prefix();
        let row = session.next_logits(&prefix).unwrap();
        let full = forward(&m, &prompt.src, &prefix).unwrap();
        let (t, v) = (full.shape()[0], full.shape()[1]);
        let last = &full.data()[(t - 1) * v..t * v];
        for (x, y) in row.iter().zip(last) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
