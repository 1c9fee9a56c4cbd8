//! The serializable model bundle: both encoders, optionally the editing
//! generator, and the architecture metadata needed to rebuild them from a
//! checkpoint.

use std::path::Path;

use crate::editor::{DecoderConfig, EditorModel, FusionMode};
use crate::encoders::{EncoderConfig, TransformerEncoder};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{self, TensorEntry};
use crate::numerics::nn::ParamSet;
use crate::numerics::{Scalar, Tensor};
use crate::tokenize::PROTEIN_VOCAB_SIZE;
use crate::util::derive_seed;

pub struct ModelBundle<T: Scalar> {
    pub protein_encoder: TransformerEncoder<T>,
    pub text_encoder: TransformerEncoder<T>,
    pub editor: Option<EditorModel<T>>,
}

impl<T: Scalar> ModelBundle<T> {
    /// Fresh alignment-stage bundle (no editor yet).
    pub fn align_stage(protein: EncoderConfig, text: EncoderConfig, seed: u64) -> Result<Self> {
        if protein.projection_dim != text.projection_dim {
            return Err(Error::InvalidArgument(format!(
                "projection dims differ: protein {} vs text {}",
                protein.projection_dim, text.projection_dim
            )));
        }
        Ok(ModelBundle {
            protein_encoder: TransformerEncoder::new(protein, derive_seed(seed, "protein"))?,
            text_encoder: TransformerEncoder::new(text, derive_seed(seed, "text"))?,
            editor: None,
        })
    }

    pub fn editor_ref(&self) -> Result<&EditorModel<T>> {
        self.editor
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("bundle has no trained editor stage".into()))
    }

    pub fn editor_mut(&mut self) -> Result<&mut EditorModel<T>> {
        self.editor
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument("bundle has no trained editor stage".into()))
    }

    /// Attach a freshly initialized editor if none exists. The decoder
    /// shares the protein encoder's model dim and leaves room for the
    /// generation slack past the encoder's max length.
    pub fn ensure_editor(
        &mut self,
        fusion: FusionMode,
        decoder_layers: usize,
        decoder_heads: usize,
        seed: u64,
    ) -> Result<()> {
        if self.editor.is_some() {
            return Ok(());
        }
        let cfg = DecoderConfig {
            vocab_size: PROTEIN_VOCAB_SIZE,
            layers: decoder_layers,
            model_dim: self.protein_encoder.cfg.model_dim,
            heads: decoder_heads,
            max_len: self.protein_encoder.cfg.max_len + crate::editor::GENERATION_SLACK + 2,
        };
        self.editor = Some(EditorModel::new(
            self.text_encoder.cfg.projection_dim,
            self.protein_encoder.cfg.model_dim,
            cfg,
            fusion,
            seed,
        )?);
        Ok(())
    }

    pub fn encoder_param_set(&self) -> ParamSet<T> {
        let mut set = ParamSet::new();
        self.protein_encoder
            .collect_params("protein_encoder", &mut set);
        self.text_encoder.collect_params("text_encoder", &mut set);
        set
    }

    pub fn all_params(&self) -> ParamSet<T> {
        let mut set = self.encoder_param_set();
        if let Some(editor) = &self.editor {
            editor.collect_params("editor", &mut set);
        }
        set
    }

    /// (protein, text) encoder checksums; the frozen-encoder contract
    /// compares these before and after editor training.
    pub fn encoder_checksums(&self) -> (u64, u64) {
        (
            self.protein_encoder.checksum("protein_encoder"),
            self.text_encoder.checksum("text_encoder"),
        )
    }

    fn meta_entries(&self) -> Vec<TensorEntry> {
        let enc = |prefix: &str, cfg: &EncoderConfig| -> Vec<TensorEntry> {
            vec![
                TensorEntry::f64_scalar(format!("meta/{prefix}_vocab"), cfg.vocab_size as f64),
                TensorEntry::f64_scalar(format!("meta/{prefix}_layers"), cfg.layers as f64),
                TensorEntry::f64_scalar(format!("meta/{prefix}_dim"), cfg.model_dim as f64),
                TensorEntry::f64_scalar(format!("meta/{prefix}_heads"), cfg.heads as f64),
                TensorEntry::f64_scalar(format!("meta/{prefix}_max_len"), cfg.max_len as f64),
                TensorEntry::f64_scalar(format!("meta/{prefix}_proj"), cfg.projection_dim as f64),
                TensorEntry::f64_scalar(
                    format!("meta/{prefix}_normalize"),
                    if cfg.normalize { 1.0 } else { 0.0 },
                ),
            ]
        };
        let mut out = enc("protein", &self.protein_encoder.cfg);
        out.extend(enc("text", &self.text_encoder.cfg));
        match &self.editor {
            None => out.push(TensorEntry::f64_scalar("meta/has_editor", 0.0)),
            Some(editor) => {
                out.push(TensorEntry::f64_scalar("meta/has_editor", 1.0));
                out.push(TensorEntry::f64_scalar(
                    "meta/fusion",
                    match editor.fusion {
                        FusionMode::Film => 0.0,
                        FusionMode::Concat => 1.0,
                    },
                ));
                out.push(TensorEntry::f64_scalar(
                    "meta/dec_layers",
                    editor.decoder.cfg.layers as f64,
                ));
                out.push(TensorEntry::f64_scalar(
                    "meta/dec_heads",
                    editor.decoder.cfg.heads as f64,
                ));
                out.push(TensorEntry::f64_scalar(
                    "meta/dec_max_len",
                    editor.decoder.cfg.max_len as f64,
                ));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = self.meta_entries();
        for (name, tensor) in self.all_params().iter() {
            entries.push(TensorEntry::from_tensor(name.clone(), tensor));
        }
        checkpoint::write_container(&entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let entries = checkpoint::read_container(bytes)?;
        let meta =
            |name: &str| -> Result<f64> { checkpoint::find(&entries, name)?.as_f64_scalar() };
        let enc_cfg = |prefix: &str| -> Result<EncoderConfig> {
            Ok(EncoderConfig {
                vocab_size: meta(&format!("meta/{prefix}_vocab"))? as usize,
                layers: meta(&format!("meta/{prefix}_layers"))? as usize,
                model_dim: meta(&format!("meta/{prefix}_dim"))? as usize,
                heads: meta(&format!("meta/{prefix}_heads"))? as usize,
                max_len: meta(&format!("meta/{prefix}_max_len"))? as usize,
                projection_dim: meta(&format!("meta/{prefix}_proj"))? as usize,
                normalize: meta(&format!("meta/{prefix}_normalize"))? != 0.0,
            })
        };
        let protein_cfg = enc_cfg("protein")?;
        let text_cfg = enc_cfg("text")?;
        let mut bundle = ModelBundle::align_stage(protein_cfg, text_cfg, 0)?;
        if meta("meta/has_editor")? != 0.0 {
            let fusion = if meta("meta/fusion")? == 0.0 {
                FusionMode::Film
            } else {
                FusionMode::Concat
            };
            let cfg = DecoderConfig {
                vocab_size: PROTEIN_VOCAB_SIZE,
                layers: meta("meta/dec_layers")? as usize,
                model_dim: bundle.protein_encoder.cfg.model_dim,
                heads: meta("meta/dec_heads")? as usize,
                max_len: meta("meta/dec_max_len")? as usize,
            };
            bundle.editor = Some(EditorModel::new(
                bundle.text_encoder.cfg.projection_dim,
                bundle.protein_encoder.cfg.model_dim,
                cfg,
                fusion,
                0,
            )?);
        }
        // Overwrite every parameter from the container, by name.
        for (name, tensor) in bundle.all_params().iter() {
            let entry = checkpoint::find(&entries, name)?;
            let loaded: Tensor<T> = entry.to_tensor()?;
            if loaded.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    tensor.shape()
                )));
            }
            tensor.set_data(loaded.value())?;
        }
        Ok(bundle)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Small ready-made bundles for tests and doc examples.
pub mod test_support {
    use super::*;

    pub fn tiny_bundle_f32(seed: u64, fusion: FusionMode) -> ModelBundle<f32> {
        let protein = EncoderConfig {
            vocab_size: PROTEIN_VOCAB_SIZE,
            layers: 1,
            model_dim: 16,
            heads: 2,
            max_len: 48,
            projection_dim: 8,
            normalize: true,
        };
        let text = EncoderConfig {
            vocab_size: 32,
            layers: 1,
            model_dim: 16,
            heads: 2,
            max_len: 16,
            projection_dim: 8,
            normalize: true,
        };
        let mut bundle = ModelBundle::align_stage(protein, text, seed).expect("valid config");
        bundle
            .ensure_editor(fusion, 1, 2, derive_seed(seed, "test-editor"))
            .expect("valid editor config");
        bundle
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_bitwise_identical() {
        let bundle = test_support::tiny_bundle_f32(21, FusionMode::Film);
        let bytes1 = bundle.to_bytes();
        let reloaded = ModelBundle::<f32>::from_bytes(&bytes1).unwrap();
        let bytes2 = reloaded.to_bytes();
        assert_eq!(bytes1, bytes2);
        assert_eq!(bundle.encoder_checksums(), reloaded.encoder_checksums());
    }

    #[test]
    fn align_stage_round_trip_has_no_editor() {
        let protein = EncoderConfig {
            vocab_size: PROTEIN_VOCAB_SIZE,
            layers: 1,
            model_dim: 8,
            heads: 2,
            max_len: 16,
            projection_dim: 4,
            normalize: true,
        };
        let text = EncoderConfig {
            vocab_size: 10,
            layers: 1,
            model_dim: 8,
            heads: 2,
            max_len: 8,
            projection_dim: 4,
            normalize: true,
        };
        let bundle = ModelBundle::<f32>::align_stage(protein, text, 3).unwrap();
        let reloaded = ModelBundle::<f32>::from_bytes(&bundle.to_bytes()).unwrap();
        assert!(reloaded.editor.is_none());
        assert_eq!(bundle.to_bytes(), reloaded.to_bytes());
    }

    #[test]
    fn mismatched_projection_dims_are_rejected() {
        let protein = EncoderConfig {
            vocab_size: PROTEIN_VOCAB_SIZE,
            layers: 1,
            model_dim: 8,
            heads: 2,
            max_len: 16,
            projection_dim: 4,
            normalize: true,
        };
        let mut text = protein.clone();
        text.projection_dim = 8;
        assert!(ModelBundle::<f32>::align_stage(protein, text, 0).is_err());
    }

    #[test]
    fn fusion_mode_survives_round_trip() {
        let bundle = test_support::tiny_bundle_f32(9, FusionMode::Concat);
        let reloaded = ModelBundle::<f32>::from_bytes(&bundle.to_bytes()).unwrap();
        assert_eq!(reloaded.editor.unwrap().fusion, FusionMode::Concat);
    }
}
