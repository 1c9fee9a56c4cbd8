//! Protein and biotext transformer encoders with projection heads into the
//! shared alignment space.
//!
//! Both modalities use the same architecture: token + learned positional
//! embeddings, pre-norm bidirectional layers, masked mean pooling, a linear
//! projection, and (by default) L2 normalization so the pretraining dot
//! product coincides with cosine similarity at editing time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::nn::{uniform_fanin, EncoderLayer, LayerNorm, Linear, ParamSet};
use crate::numerics::ops;
use crate::numerics::tensor::{Scalar, Tensor};
use crate::tokenize::TokenizedSeq;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub max_len: usize,
    pub projection_dim: usize,
    /// L2-normalize pooled embeddings. On by default; expose as an ablation
    /// toggle because the pretraining similarity is then exactly cosine.
    pub normalize: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.vocab_size == 0 || self.layers == 0 || self.max_len < 2 || self.projection_dim == 0
        {
            return Err(Error::InvalidArgument(
                "encoder config has a zero-sized dimension".into(),
            ));
        }
        Ok(())
    }
}

/// Per-token features plus the pooled, projected (unit-norm) embedding.
#[derive(Debug)]
pub struct Encoded<T: Scalar> {
    pub token_features: Tensor<T>,
    pub pooled: Tensor<T>,
}

pub struct TransformerEncoder<T: Scalar> {
    pub cfg: EncoderConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub final_ln: LayerNorm<T>,
    pub proj: Linear<T>,
}

impl<T: Scalar> TransformerEncoder<T> {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tok_emb = uniform_fanin::<T>(&mut rng, cfg.vocab_size, cfg.model_dim).as_param();
        let pos_emb = uniform_fanin::<T>(&mut rng, cfg.max_len, cfg.model_dim).as_param();
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(EncoderLayer::new(cfg.model_dim, cfg.heads, &mut rng)?);
        }
        let final_ln = LayerNorm::new(cfg.model_dim);
        let proj = Linear::new(cfg.model_dim, cfg.projection_dim, &mut rng);
        Ok(TransformerEncoder {
            cfg,
            tok_emb,
            pos_emb,
            layers,
            final_ln,
            proj,
        })
    }

    /// Run the encoder on pre-built token-embedding rows (`[L × d]`, before
    /// positional embeddings). This is also the differentiable path the
    /// editor uses to embed expected-token mixtures.
    pub fn encode_from_token_rows(&self, rows: &Tensor<T>) -> Result<Encoded<T>> {
        let len = rows.rows()?;
        if len == 0 {
            return Err(Error::InvalidArgument(
                "cannot encode an empty sequence".into(),
            ));
        }
        if len > self.cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {len} exceeds encoder max_len {}",
                self.cfg.max_len
            )));
        }
        let pos = ops::slice_rows(&self.pos_emb, 0, len)?;
        let mut x = ops::add(rows, &pos)?;
        for layer in &self.layers {
            x = layer.forward(&x, None)?;
        }
        let features = self.final_ln.forward(&x)?;
        let mask = vec![true; len];
        let mean = ops::mean_pool_masked(&features, &mask)?;
        let projected = self.proj.forward_vec(&mean)?;
        let pooled = if self.cfg.normalize {
            ops::l2_normalize(&projected)?
        } else {
            projected
        };
        Ok(Encoded {
            token_features: features,
            pooled,
        })
    }

    /// Encode a raw id slice (real tokens only).
    pub fn encode_ids(&self, ids: &[u32]) -> Result<Encoded<T>> {
        let rows = ops::embedding_lookup(&self.tok_emb, ids)?;
        self.encode_from_token_rows(&rows)
    }

    /// Encode a padded [`TokenizedSeq`]. Only the real prefix is read, so the
    /// result cannot depend on anything in the PAD region.
    pub fn encode_tok(&self, tok: &TokenizedSeq) -> Result<Encoded<T>> {
        self.encode_ids(&tok.ids[..tok.true_length])
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamSet<T>) {
        out.push(format!("{prefix}.tok_emb"), self.tok_emb.clone());
        out.push(format!("{prefix}.pos_emb"), self.pos_emb.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect_params(&format!("{prefix}.layer{i}"), out);
        }
        self.final_ln
            .collect_params(&format!("{prefix}.final_ln"), out);
        self.proj.collect_params(&format!("{prefix}.proj"), out);
    }

    pub fn param_set(&self, prefix: &str) -> ParamSet<T> {
        let mut set = ParamSet::new();
        self.collect_params(prefix, &mut set);
        set
    }

    pub fn checksum(&self, prefix: &str) -> u64 {
        self.param_set(prefix).checksum()
    }
}

/// Dot product of two embeddings; with unit-norm embeddings this equals
/// cosine similarity. Errors on dimension mismatch.
pub fn similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let sim = ops::dot(a, b)?;
    Ok(Scalar::as_f64(sim.item()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::no_grad;
    use crate::tokenize::{self, encode_protein, PAD};

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: tokenize::PROTEIN_VOCAB_SIZE,
            layers: 2,
            model_dim: 16,
            heads: 2,
            max_len: 32,
            projection_dim: 8,
            normalize: true,
        }
    }

    #[test]
    fn pooled_embedding_is_unit_norm() {
        let enc = TransformerEncoder::<f64>::new(tiny_config(), 7).unwrap();
        let tok = encode_protein("ACDEFGH", 32).unwrap();
        let out = no_grad(|| enc.encode_tok(&tok)).unwrap();
        let norm: f64 = out.pooled.value().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pad_region_content_cannot_change_output() {
        let enc = TransformerEncoder::<f64>::new(tiny_config(), 7).unwrap();
        let clean = encode_protein("ACDE", 32).unwrap();
        let mut junk = clean.clone();
        for i in junk.true_length..junk.ids.len() {
            junk.ids[i] = (i % 20) as u32 + 4; // arbitrary garbage where PAD was
        }
        assert_ne!(junk.ids, clean.ids);
        let a = no_grad(|| enc.encode_tok(&clean)).unwrap();
        let b = no_grad(|| enc.encode_tok(&junk)).unwrap();
        assert_eq!(a.pooled.value(), b.pooled.value());
        assert_eq!(a.token_features.value(), b.token_features.value());
        // And the clean sequence really has PAD there.
        assert_eq!(clean.ids[clean.true_length], PAD);
    }

    #[test]
    fn identical_inputs_give_identical_embeddings() {
        let enc = TransformerEncoder::<f64>::new(tiny_config(), 9).unwrap();
        let tok = encode_protein("MKVLA", 32).unwrap();
        let a = no_grad(|| enc.encode_tok(&tok)).unwrap();
        let b = no_grad(|| enc.encode_tok(&tok)).unwrap();
        assert_eq!(a.pooled.value(), b.pooled.value());
    }

    #[test]
    fn changed_content_changes_embedding() {
        let enc = TransformerEncoder::<f64>::new(tiny_config(), 9).unwrap();
        let a = no_grad(|| enc.encode_tok(&encode_protein("MKVLA", 32).unwrap())).unwrap();
        let b = no_grad(|| enc.encode_tok(&encode_protein("MKVLW", 32).unwrap())).unwrap();
        assert_ne!(a.pooled.value(), b.pooled.value());
    }

    #[test]
    fn out_of_range_token_id_errors() {
        let enc = TransformerEncoder::<f64>::new(tiny_config(), 1).unwrap();
        let err = no_grad(|| enc.encode_ids(&[1, 99, 2])).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = TransformerEncoder::<f32>::new(tiny_config(), 42).unwrap();
        let b = TransformerEncoder::<f32>::new(tiny_config(), 42).unwrap();
        assert_eq!(a.checksum("enc"), b.checksum("enc"));
        let c = TransformerEncoder::<f32>::new(tiny_config(), 43).unwrap();
        assert_ne!(a.checksum("enc"), c.checksum("enc"));
    }

    #[test]
    fn similarity_identities() {
        let x = ops::l2_normalize(&Tensor::<f64>::vector(vec![1.0, 2.0, -0.5])).unwrap();
        assert!((similarity(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg = ops::scale(&x, -1.0);
        assert!((similarity(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        let y = ops::l2_normalize(&Tensor::<f64>::vector(vec![0.3, -1.0, 2.0])).unwrap();
        let s = similarity(&x, &y).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert_eq!(s, similarity(&y, &x).unwrap());
        let short = Tensor::<f64>::vector(vec![1.0, 2.0]);
        assert!(similarity(&x, &short).is_err());
    }
}
