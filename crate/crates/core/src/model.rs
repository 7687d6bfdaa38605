//! Full-model assembly: parameter initialization in a fixed order and the
//! per-utterance forward graphs the trainer composes into batch losses.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctc::{self, Transcript, Vocabulary};
use crate::encoder::{self, EncoderConfig};
use crate::error::{CoreError, Result};
use crate::fmath;
use crate::loss::{self, MarginConfig};
use crate::params::{uniform_init, ParameterStore, TapeBinding};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub classes: usize,
    pub vocab: Vocabulary,
    pub margin: MarginConfig,
    /// Optional low-dimensional head (2 or 3) in front of the margin loss,
    /// for visualizable embeddings. The classifier stays on the full
    /// embedding.
    pub bottleneck: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.margin.validate()?;
        if self.classes < 2 {
            return Err(CoreError::Config(format!(
                "classes must be >= 2, got {}",
                self.classes
            )));
        }
        if let Some(b) = self.bottleneck {
            if b != 2 && b != 3 {
                return Err(CoreError::Config(format!(
                    "bottleneck dim must be 2 or 3, got {b}"
                )));
            }
        }
        Ok(())
    }

    /// Width of the vectors the margin loss sees.
    pub fn disc_dim(&self) -> usize {
        self.bottleneck.unwrap_or(self.encoder.descriptor_dim)
    }
}

/// Initializes every parameter the model can use, in a fixed creation order
/// from a single seeded stream, so identical seeds give identical stores in
/// every training mode.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let h = cfg.encoder.descriptor_dim;

    encoder::init_encoder_params(&mut store, &mut rng, &cfg.encoder)?;
    encoder::init_integrator_params(&mut store, &mut rng, h)?;
    ctc::init_asr_params(&mut store, &mut rng, h, cfg.vocab.width())?;

    let bound = 1.0 / fmath::sqrt(h as f64);
    store.insert(
        "classifier.weight",
        uniform_init(&mut rng, &[cfg.classes, h], bound),
    )?;
    store.insert("classifier.bias", Tensor::zeros([cfg.classes]))?;

    let dd = cfg.disc_dim();
    let dbound = 1.0 / fmath::sqrt(dd as f64);
    store.insert(
        "margin.weights",
        uniform_init(&mut rng, &[cfg.classes, dd], dbound),
    )?;

    if let Some(b) = cfg.bottleneck {
        store.insert(
            "bottleneck.weight",
            uniform_init(&mut rng, &[h, b], bound),
        )?;
        store.insert("bottleneck.bias", Tensor::zeros([b]))?;
    }
    Ok(store)
}

/// Tape nodes for one utterance up to the shared representations.
pub struct UtteranceNodes {
    /// Contextualized descriptor rows, each `[H]`.
    pub rows: Vec<Var>,
    /// Utterance embedding `[H]`.
    pub embedding: Var,
    /// What the margin loss consumes: the embedding, or the bottleneck
    /// projection when one is configured.
    pub disc_input: Var,
}

pub fn utterance_nodes(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParameterStore,
    cfg: &ModelConfig,
    frames: &Tensor,
) -> Result<UtteranceNodes> {
    let rows = encoder::encode_rows_on_tape(tape, binding, store, &cfg.encoder, frames)?;
    let h = cfg.encoder.descriptor_dim;
    let embedding = encoder::integrate_on_tape(tape, binding, store, &rows, h)?;
    let disc_input = match cfg.bottleneck {
        Some(_) => {
            let w = binding.bind(tape, store, "bottleneck.weight")?;
            let b = binding.bind(tape, store, "bottleneck.bias")?;
            let proj = tape.matmul(embedding, w)?;
            tape.add(proj, b)?
        }
        None => embedding,
    };
    Ok(UtteranceNodes {
        rows,
        embedding,
        disc_input,
    })
}

/// Margin-family loss for one utterance against the class proxies.
pub fn disc_loss_on_tape(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParameterStore,
    cfg: &ModelConfig,
    disc_input: Var,
    label: usize,
) -> Result<Var> {
    let w = binding.bind(tape, store, "margin.weights")?;
    loss::margin_example_on_tape(tape, &cfg.margin, disc_input, label, w)
}

/// Auxiliary classifier cross-entropy on the full embedding.
pub fn classifier_loss_on_tape(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParameterStore,
    cfg: &ModelConfig,
    embedding: Var,
    label: usize,
) -> Result<Var> {
    if label >= cfg.classes {
        return Err(CoreError::Input(format!(
            "label {label} outside {} classes",
            cfg.classes
        )));
    }
    let w = binding.bind(tape, store, "classifier.weight")?;
    let b = binding.bind(tape, store, "classifier.bias")?;
    let raw = tape.matmul(w, embedding)?;
    let logits = tape.add(raw, b)?;
    let lse = tape.logsumexp(logits)?;
    let t0 = tape.slice(logits, label, 1)?;
    let t = tape.reshape(t0, Vec::new())?;
    tape.sub(lse, t)
}

/// CTC branch for one utterance: ASR head over the shared rows, then the
/// alignment marginalization.
pub fn ctc_loss_nodes(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParameterStore,
    cfg: &ModelConfig,
    rows: &[Var],
    transcript: &Transcript,
) -> Result<Var> {
    let h = cfg.encoder.descriptor_dim;
    let log_rows = ctc::asr_log_rows_on_tape(tape, binding, store, rows, h)?;
    ctc::ctc_loss_on_tape(tape, &log_rows, transcript)
}

/// Value-level classifier logits for evaluation and export paths.
pub fn classifier_logits(store: &ParameterStore, embedding: &Tensor) -> Result<Tensor> {
    let w = store.get("classifier.weight")?;
    let b = store.get("classifier.bias")?;
    let (k, h) = (w.shape()[0], w.shape()[1]);
    if embedding.shape() != [h] {
        return Err(CoreError::Dimension {
            op: "classifier",
            detail: format!("embedding {:?} vs weight {:?}", embedding.shape(), w.shape()),
        });
    }
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let row = w.row(i);
        let dot: f64 = row
            .iter()
            .zip(embedding.data())
            .map(|(&a, &b)| a * b)
            .sum();
        out.push(dot + b.data()[i]);
    }
    Tensor::new([k], out)
}

/// Argmax with first-index tie breaking.
pub fn argmax(t: &Tensor) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0usize;
    for (i, &v) in t.data().iter().enumerate() {
        if v > best {
            best = v;
            arg = i;
        }
    }
    arg
}
