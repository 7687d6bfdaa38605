//! One flat key/value namespace shared by the config file and the command
//! line. Files are TOML restricted to top-level scalar keys; every key has
//! a matching long flag, and flags win over the file, which wins over the
//! built-in defaults.

use crate::data::SyntheticSpec;
use crate::error::{KitError, Result};
use crate::trainer::{Mode, TrainConfig};
use accent_core::ctc::Vocabulary;
use accent_core::encoder::EncoderConfig;
use accent_core::loss::{MarginConfig, MarginKind};
use accent_core::model::ModelConfig;
use accent_core::optim::MtlWeights;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Every tunable in one place. `channels` is a comma-separated list so the
/// file and the flag share one spelling; `bottleneck` 0 means no projection
/// head.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub classes: usize,
    pub utterances_per_class: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub transcript_min: usize,
    pub transcript_max: usize,
    pub noise_level: f64,
    pub stages: usize,
    pub channels: String,
    pub descriptor_dim: usize,
    pub gru_layers: usize,
    pub margin_kind: String,
    pub margin: f64,
    pub scale: f64,
    pub unscaled_negatives: bool,
    pub bottleneck: usize,
    pub mode: String,
    pub lr: f64,
    pub decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub max_frames: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            classes: 4,
            utterances_per_class: 40,
            frames_min: 48,
            frames_max: 120,
            feature_dim: 20,
            vocab_size: 16,
            transcript_min: 3,
            transcript_max: 10,
            noise_level: 0.1,
            stages: 3,
            channels: "4,8,16".into(),
            descriptor_dim: 32,
            gru_layers: 1,
            margin_kind: "circle".into(),
            margin: 0.2,
            scale: 16.0,
            unscaled_negatives: false,
            bottleneck: 0,
            mode: "joint".into(),
            lr: 0.01,
            decay: 0.3,
            patience: 3,
            max_epochs: 100,
            batch_size: 8,
            max_frames: 1200,
            alpha: 0.4,
            beta: 0.01,
        }
    }
}

/// A sparse overlay: only the keys present are applied. Doubles as the
/// shared flag set, so every key is reachable from the command line.
#[derive(Debug, Clone, Default, Deserialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct PartialRunConfig {
    /// Root seed for data generation, initialization, and batching
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of accent classes to synthesize
    #[arg(long)]
    pub classes: Option<usize>,
    /// Utterances per class
    #[arg(long)]
    pub utterances_per_class: Option<usize>,
    /// Shortest utterance length in frames
    #[arg(long)]
    pub frames_min: Option<usize>,
    /// Longest utterance length in frames
    #[arg(long)]
    pub frames_max: Option<usize>,
    /// Feature columns per frame
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Real tokens in the transcript vocabulary
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Shortest transcript in tokens
    #[arg(long)]
    pub transcript_min: Option<usize>,
    /// Longest transcript in tokens
    #[arg(long)]
    pub transcript_max: Option<usize>,
    /// Speaker and sample variation strength; 0 makes classes exact
    #[arg(long)]
    pub noise_level: Option<f64>,
    /// Encoder stages (each halves time and feature axes)
    #[arg(long)]
    pub stages: Option<usize>,
    /// Comma-separated channel widths, one per stage
    #[arg(long)]
    pub channels: Option<String>,
    /// Embedding width out of the encoder
    #[arg(long)]
    pub descriptor_dim: Option<usize>,
    /// Recurrent layers in the frame summarizer
    #[arg(long)]
    pub gru_layers: Option<usize>,
    /// Margin family: softmax, cosface, arcface, or circle
    #[arg(long)]
    pub margin_kind: Option<String>,
    /// Margin offset m
    #[arg(long)]
    pub margin: Option<f64>,
    /// Similarity scale gamma
    #[arg(long)]
    pub scale: Option<f64>,
    /// Leave negative cosines unshifted (cosface variant)
    #[arg(long)]
    pub unscaled_negatives: Option<bool>,
    /// Extra projection width for export (0 disables)
    #[arg(long)]
    pub bottleneck: Option<usize>,
    /// Training mode: joint, ctc-pretrain, or ar-only
    #[arg(long)]
    pub mode: Option<String>,
    /// Learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning-rate decay factor on plateau
    #[arg(long)]
    pub decay: Option<f64>,
    /// Epochs without improvement before acting
    #[arg(long)]
    pub patience: Option<usize>,
    /// Hard epoch cap
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Utterances per optimizer step
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Frames kept per utterance before padding
    #[arg(long)]
    pub max_frames: Option<usize>,
    /// Weight on the transcription term
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight on the classifier term
    #[arg(long)]
    pub beta: Option<f64>,
}

impl PartialRunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(KitError::io(path))?;
        toml::from_str(&text)
            .map_err(|e| KitError::Config(format!("{}: {e}", path.display())))
    }

}

impl RunConfig {
    /// Defaults, then the optional file, then the command line.
    pub fn resolve(file: Option<&Path>, cli: &PartialRunConfig) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply(&PartialRunConfig::from_file(path)?);
        }
        cfg.apply(cli);
        Ok(cfg)
    }

    pub fn apply(&mut self, p: &PartialRunConfig) {
        macro_rules! take {
            ($($f:ident),*) => { $(if let Some(v) = &p.$f { self.$f = v.clone(); })* };
        }
        take!(
            seed, classes, utterances_per_class, frames_min, frames_max, feature_dim,
            vocab_size, transcript_min, transcript_max, noise_level, stages, channels,
            descriptor_dim, gru_layers, margin_kind, margin, scale, unscaled_negatives,
            bottleneck, mode, lr, decay, patience, max_epochs, batch_size, max_frames,
            alpha, beta
        );
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let spec = SyntheticSpec {
            classes: self.classes,
            utterances_per_class: self.utterances_per_class,
            frames_min: self.frames_min,
            frames_max: self.frames_max,
            feature_dim: self.feature_dim,
            vocab_size: self.vocab_size,
            transcript_min: self.transcript_min,
            transcript_max: self.transcript_max,
            noise_level: self.noise_level,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn channel_list(&self) -> Result<Vec<usize>> {
        let list: Vec<usize> = self
            .channels
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| KitError::Config(format!("channels {:?}: {e}", self.channels)))
            })
            .collect::<Result<_>>()?;
        if list.len() != self.stages {
            return Err(KitError::Config(format!(
                "channels {:?} lists {} stages, stages = {}",
                self.channels,
                list.len(),
                self.stages
            )));
        }
        Ok(list)
    }

    pub fn margin_config(&self) -> Result<MarginConfig> {
        let kind: MarginKind = self
            .margin_kind
            .parse()
            .map_err(|e: accent_core::error::CoreError| KitError::Config(e.to_string()))?;
        Ok(MarginConfig {
            kind,
            scale: self.scale,
            margin: self.margin,
            unscaled_negatives: self.unscaled_negatives,
        })
    }

    /// Model built around an existing vocabulary, usually the one recorded
    /// in a corpus header.
    pub fn model_config(&self, vocab: Vocabulary) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                stages: self.stages,
                channels: self.channel_list()?,
                descriptor_dim: self.descriptor_dim,
                gru_layers: self.gru_layers,
            },
            classes: self.classes,
            vocab,
            margin: self.margin_config()?,
            bottleneck: if self.bottleneck == 0 {
                None
            } else {
                Some(self.bottleneck)
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mode: Mode = self.mode.parse()?;
        let cfg = TrainConfig {
            lr: self.lr,
            decay: self.decay,
            patience: self.patience,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            max_frames: self.max_frames,
            seed: self.seed,
            weights: MtlWeights {
                alpha: self.alpha,
                beta: self.beta,
            },
            mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The key list with defaults, rendered from the actual default value so
/// help output can never drift from the code.
pub fn keys_help() -> String {
    let rendered = toml::to_string(&RunConfig::default()).expect("default config serializes");
    let mut out = String::from("Configuration keys (config file or long flag), with defaults:\n");
    for line in rendered.lines() {
        out.push_str("  ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("\nFlags use the key name with dashes, e.g. --frames-min 32.");
    out
}
