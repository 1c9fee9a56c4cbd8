//! Run configuration: a flat `key = value` text format with `[sections]`,
//! strict key validation, and a canonical writer so the effective config can
//! be snapshotted into the run directory and replayed.

use std::path::{Path, PathBuf};

use crate::align::PretrainSettings;
use crate::editor::{EditorTrainSettings, FusionMode, Sampling};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::optim::AdamConfig;
use crate::tokenize::PROTEIN_VOCAB_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Greedy,
    Temperature,
    TopK,
}

impl SamplingMode {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(SamplingMode::Greedy),
            "temperature" => Ok(SamplingMode::Temperature),
            "topk" => Ok(SamplingMode::TopK),
            other => Err(Error::Config(format!(
                "unknown sampling mode {other:?} (expected greedy, temperature, or topk)"
            ))),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            SamplingMode::Greedy => "greedy",
            SamplingMode::Temperature => "temperature",
            SamplingMode::TopK => "topk",
        }
    }
}

/// Everything a pipeline run needs. Desk-scale model defaults; the training
/// schedule defaults (learning rate 5e-5, 2000 warmup steps, temperature
/// 0.01, 10 epochs) follow the documented reference setup.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [paths]
    pub pairs: PathBuf,
    pub eval_pairs: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub run_dir: PathBuf,
    pub align_checkpoint: Option<PathBuf>,
    // [model]
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub projection_dim: usize,
    pub protein_max_len: usize,
    pub text_max_len: usize,
    pub text_vocab_size: usize,
    pub decoder_layers: usize,
    pub normalize_embeddings: bool,
    // [training]
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub temperature: f64,
    pub label_smoothing: f64,
    pub holdout_fraction: f64,
    // [editor]
    pub fusion: FusionMode,
    // [filter]
    pub min_coverage: f64,
    pub max_evidence: u8,
    // [sampling]
    pub sampling_mode: SamplingMode,
    pub sampling_temperature: f64,
    pub top_k: usize,
    pub num_samples: usize,
    // [ablation]
    pub use_filter: bool,
    pub use_pretraining: bool,
    pub use_film: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pairs: PathBuf::from("pairs.tsv"),
            eval_pairs: None,
            vocab: None,
            run_dir: PathBuf::from("runs/run1"),
            align_checkpoint: None,
            layers: 4,
            model_dim: 256,
            heads: 4,
            projection_dim: 128,
            protein_max_len: 1024,
            text_max_len: 512,
            text_vocab_size: 8192,
            decoder_layers: 4,
            normalize_embeddings: true,
            batch_size: 32,
            epochs: 10,
            learning_rate: 5e-5,
            warmup_steps: 2000,
            seed: 42,
            temperature: 0.01,
            label_smoothing: 0.1,
            holdout_fraction: 0.125,
            fusion: FusionMode::Film,
            min_coverage: 0.4,
            max_evidence: 3,
            sampling_mode: SamplingMode::Greedy,
            sampling_temperature: 1.0,
            top_k: 5,
            num_samples: 1,
            use_filter: true,
            use_pretraining: true,
            use_film: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!(
                "model.model_dim {} must be a positive multiple of model.heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.layers == 0 || self.decoder_layers == 0 || self.projection_dim == 0 {
            return bad("model layer/projection sizes must be positive".into());
        }
        if self.protein_max_len < 2 || self.text_max_len < 2 {
            return bad("model max lengths must be at least 2".into());
        }
        if self.batch_size < 2 {
            return bad(format!(
                "training.batch_size {} must be at least 2 (contrastive batches need negatives)",
                self.batch_size
            ));
        }
        if self.learning_rate <= 0.0 {
            return bad(format!(
                "training.learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        if self.temperature <= 0.0 {
            return bad(format!(
                "training.temperature {} must be positive",
                self.temperature
            ));
        }
        if !(0.0..=0.5).contains(&self.label_smoothing) {
            return bad(format!(
                "training.label_smoothing {} outside [0, 0.5]",
                self.label_smoothing
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!(
                "training.holdout_fraction {} outside [0, 1)",
                self.holdout_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.min_coverage) {
            return bad(format!(
                "filter.min_coverage {} outside [0, 1]",
                self.min_coverage
            ));
        }
        if !(1..=5).contains(&self.max_evidence) {
            return bad(format!(
                "filter.max_evidence {} outside 1..=5",
                self.max_evidence
            ));
        }
        if self.sampling_temperature <= 0.0 {
            return bad(format!(
                "sampling.temperature {} must be positive",
                self.sampling_temperature
            ));
        }
        if self.top_k == 0 || self.num_samples == 0 {
            return bad("sampling.top_k and sampling.num_samples must be at least 1".into());
        }
        Ok(())
    }

    /// The fusion mode after ablation toggles: `use_film = false` forces
    /// concatenation fusion.
    pub fn effective_fusion(&self) -> FusionMode {
        if self.use_film {
            self.fusion
        } else {
            FusionMode::Concat
        }
    }

    /// The filter thresholds after ablation toggles: `use_filter = false`
    /// admits everything.
    pub fn effective_filter(&self) -> (f64, u8) {
        if self.use_filter {
            (self.min_coverage, self.max_evidence)
        } else {
            (0.0, 5)
        }
    }

    pub fn protein_encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            vocab_size: PROTEIN_VOCAB_SIZE,
            layers: self.layers,
            model_dim: self.model_dim,
            heads: self.heads,
            max_len: self.protein_max_len,
            projection_dim: self.projection_dim,
            normalize: self.normalize_embeddings,
        }
    }

    pub fn text_encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.text_vocab_size,
            layers: self.layers,
            model_dim: self.model_dim,
            heads: self.heads,
            max_len: self.text_max_len,
            projection_dim: self.projection_dim,
            normalize: self.normalize_embeddings,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            base_lr: self.learning_rate,
            warmup_steps: self.warmup_steps,
            ..Default::default()
        }
    }

    pub fn pretrain_settings(&self) -> PretrainSettings {
        PretrainSettings {
            protein: self.protein_encoder_config(),
            text: self.text_encoder_config(),
            batch_size: self.batch_size,
            epochs: self.epochs,
            temperature: self.temperature,
            adam: self.adam(),
            seed: self.seed,
            text_vocab_budget: self.text_vocab_size.saturating_sub(4),
        }
    }

    pub fn editor_settings(&self) -> EditorTrainSettings {
        EditorTrainSettings {
            fusion: self.effective_fusion(),
            decoder_layers: self.decoder_layers,
            decoder_heads: self.heads,
            label_smoothing: self.label_smoothing,
            batch_size: self.batch_size,
            epochs: self.epochs,
            adam: self.adam(),
            seed: self.seed,
        }
    }

    pub fn sampling(&self) -> Sampling {
        match self.sampling_mode {
            SamplingMode::Greedy => Sampling::Greedy,
            SamplingMode::Temperature => Sampling::Temperature(self.sampling_temperature),
            SamplingMode::TopK => Sampling::TopK {
                k: self.top_k,
                temperature: self.sampling_temperature,
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    no + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set(&section, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("invalid value {value:?} for key `{section}.{key}`"))
            })
        }
        fn flag(section: &str, key: &str, value: &str) -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!(
                    "invalid value {value:?} for key `{section}.{key}` (expected true/false)"
                ))),
            }
        }
        let opt_path = |value: &str| -> Option<PathBuf> {
            if value.is_empty() {
                None
            } else {
                Some(PathBuf::from(value))
            }
        };
        match (section, key) {
            ("paths", "pairs") => self.pairs = PathBuf::from(value),
            ("paths", "eval_pairs") => self.eval_pairs = opt_path(value),
            ("paths", "vocab") => self.vocab = opt_path(value),
            ("paths", "run_dir") => self.run_dir = PathBuf::from(value),
            ("paths", "align_checkpoint") => self.align_checkpoint = opt_path(value),
            ("model", "layers") => self.layers = num(section, key, value)?,
            ("model", "model_dim") => self.model_dim = num(section, key, value)?,
            ("model", "heads") => self.heads = num(section, key, value)?,
            ("model", "projection_dim") => self.projection_dim = num(section, key, value)?,
            ("model", "protein_max_len") => self.protein_max_len = num(section, key, value)?,
            ("model", "text_max_len") => self.text_max_len = num(section, key, value)?,
            ("model", "text_vocab_size") => self.text_vocab_size = num(section, key, value)?,
            ("model", "decoder_layers") => self.decoder_layers = num(section, key, value)?,
            ("model", "normalize_embeddings") => {
                self.normalize_embeddings = flag(section, key, value)?
            }
            ("training", "batch_size") => self.batch_size = num(section, key, value)?,
            ("training", "epochs") => self.epochs = num(section, key, value)?,
            ("training", "learning_rate") => self.learning_rate = num(section, key, value)?,
            ("training", "warmup_steps") => self.warmup_steps = num(section, key, value)?,
            ("training", "seed") => self.seed = num(section, key, value)?,
            ("training", "temperature") => self.temperature = num(section, key, value)?,
            ("training", "label_smoothing") => self.label_smoothing = num(section, key, value)?,
            ("training", "holdout_fraction") => self.holdout_fraction = num(section, key, value)?,
            ("editor", "fusion") => self.fusion = FusionMode::parse(value)?,
            ("filter", "min_coverage") => self.min_coverage = num(section, key, value)?,
            ("filter", "max_evidence") => self.max_evidence = num(section, key, value)?,
            ("sampling", "mode") => self.sampling_mode = SamplingMode::parse(value)?,
            ("sampling", "temperature") => self.sampling_temperature = num(section, key, value)?,
            ("sampling", "top_k") => self.top_k = num(section, key, value)?,
            ("sampling", "num_samples") => self.num_samples = num(section, key, value)?,
            ("ablation", "use_filter") => self.use_filter = flag(section, key, value)?,
            ("ablation", "use_pretraining") => self.use_pretraining = flag(section, key, value)?,
            ("ablation", "use_film") => self.use_film = flag(section, key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{}{}{}`",
                    section,
                    if section.is_empty() { "" } else { "." },
                    key
                )))
            }
        }
        Ok(())
    }

    /// Canonical serialization; `parse(to_text(cfg)) == cfg`.
    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        format!(
            "[paths]\n\
             pairs = {}\n\
             eval_pairs = {}\n\
             vocab = {}\n\
             run_dir = {}\n\
             align_checkpoint = {}\n\
             \n[model]\n\
             layers = {}\n\
             model_dim = {}\n\
             heads = {}\n\
             projection_dim = {}\n\
             protein_max_len = {}\n\
             text_max_len = {}\n\
             text_vocab_size = {}\n\
             decoder_layers = {}\n\
             normalize_embeddings = {}\n\
             \n[training]\n\
             batch_size = {}\n\
             epochs = {}\n\
             learning_rate = {}\n\
             warmup_steps = {}\n\
             seed = {}\n\
             temperature = {}\n\
             label_smoothing = {}\n\
             holdout_fraction = {}\n\
             \n[editor]\n\
             fusion = {}\n\
             \n[filter]\n\
             min_coverage = {}\n\
             max_evidence = {}\n\
             \n[sampling]\n\
             mode = {}\n\
             temperature = {}\n\
             top_k = {}\n\
             num_samples = {}\n\
             \n[ablation]\n\
             use_filter = {}\n\
             use_pretraining = {}\n\
             use_film = {}\n",
            self.pairs.display(),
            opt(&self.eval_pairs),
            opt(&self.vocab),
            self.run_dir.display(),
            opt(&self.align_checkpoint),
            self.layers,
            self.model_dim,
            self.heads,
            self.projection_dim,
            self.protein_max_len,
            self.text_max_len,
            self.text_vocab_size,
            self.decoder_layers,
            self.normalize_embeddings,
            self.batch_size,
            self.epochs,
            self.learning_rate,
            self.warmup_steps,
            self.seed,
            self.temperature,
            self.label_smoothing,
            self.holdout_fraction,
            self.fusion.as_str(),
            self.min_coverage,
            self.max_evidence,
            self.sampling_mode.as_str(),
            self.sampling_temperature,
            self.top_k,
            self.num_samples,
            self.use_filter,
            self.use_pretraining,
            self.use_film,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn overridden_values_round_trip() {
        let cfg = RunConfig {
            layers: 2,
            model_dim: 64,
            fusion: FusionMode::Concat,
            use_pretraining: false,
            eval_pairs: Some(PathBuf::from("eval.tsv")),
            ..Default::default()
        };
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_key_is_named_in_the_error() {
        let err = RunConfig::parse("[training]\nbatch_sizes = 8\n").unwrap_err();
        assert!(err.to_string().contains("training.batch_sizes"));
    }

    #[test]
    fn invalid_value_is_named() {
        let err = RunConfig::parse("[training]\nepochs = many\n").unwrap_err();
        assert!(err.to_string().contains("training.epochs"));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# comment\n\n[training]\n; another\nseed = 7\n";
        assert_eq!(RunConfig::parse(text).unwrap().seed, 7);
    }

    #[test]
    fn numeric_ranges_are_validated() {
        assert!(RunConfig::parse("[training]\nbatch_size = 1\n").is_err());
        assert!(RunConfig::parse("[filter]\nmax_evidence = 6\n").is_err());
        assert!(RunConfig::parse("[training]\ntemperature = 0\n").is_err());
        assert!(RunConfig::parse("[model]\nmodel_dim = 30\n").is_err()); // not divisible by 4 heads
    }

    #[test]
    fn ablation_toggles_change_effective_settings() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.effective_fusion(), FusionMode::Film);
        cfg.use_film = false;
        assert_eq!(cfg.effective_fusion(), FusionMode::Concat);
        assert_eq!(cfg.effective_filter(), (0.4, 3));
        cfg.use_filter = false;
        assert_eq!(cfg.effective_filter(), (0.0, 5));
    }
}
