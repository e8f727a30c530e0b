//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, u32 version, fixed config block, named weight
//! sections (little-endian f32), mask entries, then an optional adapter
//! block. Round-trips are bit-exact; any trailing or missing bytes are a
//! format error.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::numerics::Tensor;

use super::{
    AdapterSet, Arch, LayerId, LayerMask, LayeredModel, LinearRole, LoraConfig, LoraPair,
    ModelConfig, ModelError, ModelResult, Section,
};

const MAGIC: &[u8; 8] = b"SHRSCKP\0";
const VERSION: u32 = 1;

fn fmt_err(msg: impl Into<String>) -> ModelError {
    ModelError::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> ModelResult<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(fmt_err("truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> ModelResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> ModelResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> ModelResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> ModelResult<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> ModelResult<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| fmt_err("invalid utf-8 in name"))
    }

    fn tensor(&mut self) -> ModelResult<Tensor> {
        let ndim = self.u8()? as usize;
        if ndim == 0 || ndim > 4 {
            return Err(fmt_err(format!("bad tensor rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = self.take(numel * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| fmt_err(format!("bad tensor payload: {e}")))
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

fn role_tag(role: LinearRole) -> u8 {
    match role {
        LinearRole::AttnQ => 0,
        LinearRole::AttnK => 1,
        LinearRole::AttnV => 2,
        LinearRole::AttnO => 3,
        LinearRole::FfnIn => 4,
        LinearRole::FfnOut => 5,
    }
}

fn role_from_tag(tag: u8) -> ModelResult<LinearRole> {
    Ok(match tag {
        0 => LinearRole::AttnQ,
        1 => LinearRole::AttnK,
        2 => LinearRole::AttnV,
        3 => LinearRole::AttnO,
        4 => LinearRole::FfnIn,
        5 => LinearRole::FfnOut,
        other => return Err(fmt_err(format!("bad lora role tag {other}"))),
    })
}

pub(crate) fn to_bytes(m: &LayeredModel) -> Vec<u8> {
    let cfg = m.config();
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.push(match cfg.arch {
        Arch::EncoderDecoder => 0,
        Arch::DecoderOnly => 1,
    });
    for v in [
        cfg.d_model,
        cfg.heads,
        cfg.d_ffn,
        cfg.n_encoder_layers,
        cfg.n_decoder_layers,
        cfg.vocab_size,
        cfg.max_len,
    ] {
        out.extend((v as u32).to_le_bytes());
    }
    out.extend(cfg.seed.to_le_bytes());

    out.extend((m.weights().len() as u32).to_le_bytes());
    for (name, tensor) in m.weights() {
        put_string(&mut out, name);
        put_tensor(&mut out, tensor);
    }

    let removed: Vec<LayerId> = m.mask().iter().collect();
    out.extend((removed.len() as u32).to_le_bytes());
    for layer in removed {
        out.push(match layer.section {
            Section::Encoder => 0,
            Section::Decoder => 1,
        });
        out.extend((layer.index as u32).to_le_bytes());
    }

    match m.adapters() {
        None => out.push(0),
        Some(ad) => {
            out.push(1);
            out.extend((ad.cfg.rank as u32).to_le_bytes());
            out.extend(ad.cfg.alpha.to_le_bytes());
            out.extend(ad.cfg.dropout.to_le_bytes());
            out.push(ad.cfg.targets.len() as u8);
            for &role in &ad.cfg.targets {
                out.push(role_tag(role));
            }
            out.extend((ad.pairs.len() as u32).to_le_bytes());
            for (name, pair) in &ad.pairs {
                put_string(&mut out, name);
                put_tensor(&mut out, &pair.a);
                put_tensor(&mut out, &pair.b);
            }
        }
    }
    out
}

pub fn save(m: &LayeredModel, path: &Path) -> ModelResult<()> {
    let bytes = to_bytes(m);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> ModelResult<LayeredModel> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

pub(crate) fn from_bytes(bytes: &[u8]) -> ModelResult<LayeredModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(fmt_err("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(fmt_err(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let arch = match r.u8()? {
        0 => Arch::EncoderDecoder,
        1 => Arch::DecoderOnly,
        other => return Err(fmt_err(format!("bad arch tag {other}"))),
    };
    let d_model = r.u32()? as usize;
    let heads = r.u32()? as usize;
    let d_ffn = r.u32()? as usize;
    let n_encoder_layers = r.u32()? as usize;
    let n_decoder_layers = r.u32()? as usize;
    let vocab_size = r.u32()? as usize;
    let max_len = r.u32()? as usize;
    let seed = r.u64()?;
    let config = ModelConfig {
        arch,
        d_model,
        heads,
        d_ffn,
        n_encoder_layers,
        n_decoder_layers,
        vocab_size,
        max_len,
        seed,
    };
    config
        .validate()
        .map_err(|e| fmt_err(format!("invalid config in checkpoint: {e}")))?;

    let n_weights = r.u32()? as usize;
    let mut weights = BTreeMap::new();
    for _ in 0..n_weights {
        let name = r.string()?;
        let tensor = r.tensor()?;
        weights.insert(name, tensor);
    }

    let n_masked = r.u32()? as usize;
    let mut mask = LayerMask::default();
    for _ in 0..n_masked {
        let section = match r.u8()? {
            0 => Section::Encoder,
            1 => Section::Decoder,
            other => return Err(fmt_err(format!("bad section tag {other}"))),
        };
        let index = r.u32()? as usize;
        mask.removed.insert(LayerId { section, index });
    }

    let adapters = match r.u8()? {
        0 => None,
        1 => {
            let rank = r.u32()? as usize;
            let alpha = r.f32()?;
            let dropout = r.f32()?;
            let n_roles = r.u8()? as usize;
            let mut targets = Vec::with_capacity(n_roles);
            for _ in 0..n_roles {
                targets.push(role_from_tag(r.u8()?)?);
            }
            let n_pairs = r.u32()? as usize;
            let mut pairs = BTreeMap::new();
            for _ in 0..n_pairs {
                let name = r.string()?;
                let a = r.tensor()?;
                let b = r.tensor()?;
                pairs.insert(name, LoraPair { a, b });
            }
            Some(AdapterSet {
                cfg: LoraConfig {
                    rank,
                    alpha,
                    dropout,
                    targets,
                },
                pairs,
            })
        }
        other => return Err(fmt_err(format!("bad adapter flag {other}"))),
    };

    if r.pos != bytes.len() {
        return Err(fmt_err("trailing bytes after checkpoint payload"));
    }

    // tamper check: the weight set must be exactly what this config builds
    let expected = super::build(&config)?;
    if expected.weights().len() != weights.len()
        || !expected.weights().keys().eq(weights.keys())
    {
        return Err(fmt_err("weight sections do not match the config"));
    }
    for (name, tensor) in &weights {
        if expected.weights()[name].shape() != tensor.shape() {
            return Err(fmt_err(format!("weight {name} has the wrong shape")));
        }
    }

    Ok(LayeredModel::from_parts(config, weights, mask, adapters))
}

/// Hex digest of the serialized model, used to key stage artifacts and to
/// stamp distillation corpora with their teacher.
pub fn content_hash(m: &LayeredModel) -> String {
    let mut hasher = Sha256::new();
    hasher.update(to_bytes(m));
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, forward::forward, LoraConfig, ModelConfig};

    fn tiny() -> LayeredModel {
        let cfg = ModelConfig {
            d_model: 16,
            heads: 2,
            d_ffn: 24,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            vocab_size: 24,
            max_len: 8,
            seed: 17,
            arch: Arch::EncoderDecoder,
        };
        build(&cfg).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise_identical() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = LayeredModel::load(&path).unwrap();
        let src = [4u32, 5, 6, 2];
        let dec = [1u32, 7, 8];
        assert!(forward(&m, &src, &dec)
            .unwrap()
            .bitwise_eq(&forward(&back, &src, &dec).unwrap()));
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        fs::write(&path, b"NOTApkg\0rest of file").unwrap();
        assert!(matches!(
            LayeredModel::load(&path),
            Err(ModelError::Format(_))
        ));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let m = tiny();
        let bytes = to_bytes(&m);
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(from_bytes(cut), Err(ModelError::Format(_))));
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(matches!(
            from_bytes(&extended),
            Err(ModelError::Format(_))
        ));
    }

    #[test]
    fn mask_and_adapters_survive_roundtrip() {
        let mut m = tiny();
        m.remove_layer(LayerId::decoder(1)).unwrap();
        m.remove_layer(LayerId::encoder(0)).unwrap();
        let adapted = m
            .attach_lora(
                &LoraConfig {
                    rank: 4,
                    alpha: 8.0,
                    dropout: 0.1,
                    targets: LinearRole::ALL.to_vec(),
                },
                23,
            )
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        adapted.save(&path).unwrap();
        let back = LayeredModel::load(&path).unwrap();
        assert_eq!(back.mask(), adapted.mask());
        let (orig, load) = (adapted.adapters().unwrap(), back.adapters().unwrap());
        assert_eq!(orig.cfg, load.cfg);
        assert_eq!(orig.pairs.len(), load.pairs.len());
        for (name, pair) in &orig.pairs {
            assert!(pair.a.bitwise_eq(&load.pairs[name].a), "{name} a");
            assert!(pair.b.bitwise_eq(&load.pairs[name].b), "{name} b");
        }
        assert_eq!(adapted.content_hash(), back.content_hash());
    }
}
