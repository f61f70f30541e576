//! The single declarative experiment configuration.
//!
//! One TOML file resolves every knob: corpus recipe, model dimensions,
//! masking policy, both training stages, loss weights, evaluation modes,
//! seeds, and the output directory. Ablations are systematic one-field edits
//! of a base configuration. Every artifact embeds the configuration hash.

use crate::corpus::{CorpusSizes, SyntheticConfig};
use crate::error::{Error, Result};
use crate::masking::MaskingPolicy;
use crate::model::{BottleneckVariant, LossWeights, ModelDims};
use crate::training::{FreezePolicy, InitPart, TrainConfig, ABLATION_NAMES};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// Network shape knobs (data-dependent sizes are derived at build time).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub bottleneck_hidden: usize,
    pub postnet_layers: usize,
    pub postnet_kernel: usize,
    pub prediction_hidden: usize,
    pub bottleneck_variant: BottleneckVariant,
    pub use_language_id: bool,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            encoder_blocks: 2,
            decoder_blocks: 2,
            bottleneck_hidden: 32,
            postnet_layers: 3,
            postnet_kernel: 5,
            prediction_hidden: 64,
            bottleneck_variant: BottleneckVariant::Residual,
            use_language_id: true,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Complete the dims with corpus-derived sizes.
    pub fn to_dims(
        &self,
        vocab_size: usize,
        n_languages: usize,
        feature_dim: usize,
        speaker_dim: usize,
    ) -> ModelDims {
        ModelDims {
            d: self.d,
            heads: self.heads,
            encoder_blocks: self.encoder_blocks,
            decoder_blocks: self.decoder_blocks,
            bottleneck_hidden: self.bottleneck_hidden,
            vocab_size,
            n_languages,
            feature_dim,
            postnet_layers: self.postnet_layers,
            postnet_kernel: self.postnet_kernel,
            prediction_hidden: self.prediction_hidden,
            speaker_dim,
            bottleneck_variant: self.bottleneck_variant,
            use_language_id: self.use_language_id,
            dropout: self.dropout,
        }
    }
}

/// Corpus recipe: family definition, per-language counts, split sizes.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusConfig {
    pub family: SyntheticConfig,
    pub sizes: CorpusSizes,
    /// Held-out text utterances per language (MLM dev set).
    pub n_dev: usize,
    /// Held-out text utterances per language (unused by training).
    pub n_test: usize,
}

/// Fine-tuning stage = training knobs plus freeze policy and initialization
/// source.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FinetuneConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub freeze: FreezePolicy,
    /// Train from scratch (the no-pretraining baselines).
    pub from_scratch: bool,
}

/// Evaluation knobs.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalConfig {
    pub max_frames: usize,
    pub stop_threshold: f64,
    /// `target_mean` or `cross:<language_code>`.
    pub speaker_sources: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_frames: 200,
            stop_threshold: 0.5,
            speaker_sources: vec!["target_mean".into()],
        }
    }
}

/// Which token type the vocabulary uses.
pub use crate::tokenizer::TokenType;

/// The full experiment description.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub token_type: TokenType,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub masking: MaskingPolicy,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    pub loss: LossWeights,
    pub eval: EvalConfig,
    /// Ablation baked into this configuration, if any.
    pub ablation: Option<String>,
}

impl ExperimentConfig {
    /// Desk defaults around a given family recipe.
    pub fn desk_defaults(family: SyntheticConfig, sizes: CorpusSizes, out_dir: PathBuf) -> Self {
        ExperimentConfig {
            seed: 42,
            out_dir,
            token_type: TokenType::Bytes,
            corpus: CorpusConfig {
                family,
                sizes,
                n_dev: 5,
                n_test: 20,
            },
            model: ModelConfig::default(),
            masking: MaskingPolicy::default(),
            pretrain: TrainConfig {
                steps: 400,
                batch_size: 8,
                warmup_steps: 400,
                lr_scale: 1.0,
                tau: 1.0,
                log_interval: 20,
                init_parts: BTreeSet::new(),
            },
            finetune: FinetuneConfig {
                train: TrainConfig {
                    steps: 1000,
                    batch_size: 8,
                    warmup_steps: 1000,
                    lr_scale: 1.0,
                    tau: 1.0,
                    log_interval: 50,
                    init_parts: BTreeSet::from([InitPart::EmbeddingLayer, InitPart::Encoder]),
                },
                freeze: FreezePolicy::FreezeLae,
                from_scratch: false,
            },
            loss: LossWeights::default(),
            eval: EvalConfig::default(),
            ablation: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: ExperimentConfig =
            toml::from_str(&content).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let content =
            toml::to_string(self).map_err(|e| Error::Config(format!("serialize: {e}")))?;
        std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        self.masking.validate()?;
        self.pretrain.validate()?;
        self.finetune.train.validate()?;
        if self.eval.max_frames == 0 {
            return Err(Error::Config("eval.max_frames must be positive".into()));
        }
        if !(0.0 < self.eval.stop_threshold && self.eval.stop_threshold < 1.0) {
            return Err(Error::Config("eval.stop_threshold outside (0, 1)".into()));
        }
        if let Some(name) = &self.ablation {
            if !ABLATION_NAMES.contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "unknown ablation `{name}`; valid: {ABLATION_NAMES:?}"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON serialization.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// The six-language desk family: two two-language groups plus one held-out
/// language related to the first group (text only) and one fully unseen
/// language related to the second group (no data at all). Both groups share
/// the phoneme inventory and lexicon; orthographies overlap within a group.
pub fn desk_family() -> SyntheticConfig {
    use crate::corpus::LanguageDef;
    let lang = |code: &str, anchor: Option<&str>, share: f64, in_text: bool, in_paired: bool| {
        LanguageDef {
            code: code.into(),
            anchor: anchor.map(|s| s.into()),
            share,
            in_text,
            in_paired,
            n_speakers: 2,
        }
    };
    SyntheticConfig {
        inventory_size: 12,
        lexicon_size: 20,
        duration_range: (4, 4),
        noise_sigma: 0.02,
        word_len_range: (2, 2),
        words_per_utterance: (2, 3),
        // A tight pool makes the same graphemes spell different phonemes in
        // the two base families, so language identity carries real signal.
        plain_pool_size: 12,
        // Every speaker speaks one language in each family: a speaker vector
        // alone reveals nothing about the family, so only the language
        // embedding can resolve grapheme conflicts. Per-language means stay
        // distinct for the cross-lingual speaker condition.
        speaker_pool: Some(crate::corpus::SpeakerPool {
            pool_size: 4,
            assignments: vec![
                vec![0, 1], // aa
                vec![2, 3], // ab
                vec![0, 2], // ba
                vec![1, 3], // bb
                vec![1, 2], // ax
                vec![0, 3], // zz
            ],
        }),
        languages: vec![
            lang("aa", None, 0.0, true, true),
            lang("ab", Some("aa"), 0.9, true, true),
            lang("ba", None, 0.0, true, true),
            lang("bb", Some("ba"), 0.9, true, true),
            lang("ax", Some("aa"), 0.9, true, false), // held-out: text only
            lang("zz", Some("ba"), 0.8, false, false), // fully unseen
        ],
        ..SyntheticConfig::default()
    }
}

/// Per-language counts for the desk family: text for every text-role
/// language, paired data for the four seen languages, evaluation utterances
/// for everyone.
pub fn desk_sizes() -> CorpusSizes {
    CorpusSizes {
        text: vec![250, 250, 250, 250, 250, 0],
        paired: vec![150, 150, 150, 150, 0, 0],
        eval: vec![20, 20, 20, 20, 20, 20],
    }
}

/// The full desk experiment: corpus, model, and training defaults sized for
/// minutes-scale CPU runs.
pub fn desk_experiment(out_dir: PathBuf) -> ExperimentConfig {
    ExperimentConfig::desk_defaults(desk_family(), desk_sizes(), out_dir)
}

/// Derive an ablation configuration: exactly one field changes, and the
/// output directory moves into an `ablations/<name>` subdirectory.
pub fn run_ablation(name: &str, base: &ExperimentConfig) -> Result<ExperimentConfig> {
    let mut config = base.clone();
    match name {
        "no_bottleneck" => {
            config.model.bottleneck_variant = BottleneckVariant::None;
        }
        "no_language_id" => {
            config.model.use_language_id = false;
        }
        "no_encoder_init" => {
            config.finetune.train.init_parts = BTreeSet::from([InitPart::EmbeddingLayer]);
        }
        "update_lae" => {
            config.finetune.freeze = FreezePolicy::UpdateLae;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown ablation `{other}`; valid: {ABLATION_NAMES:?}"
            )))
        }
    }
    config.ablation = Some(name.to_string());
    config.out_dir = base.out_dir.join("ablations").join(name);
    Ok(config)
}
