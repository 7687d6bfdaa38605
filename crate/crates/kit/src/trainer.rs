//! Multitask training loop: CTC plus discriminative margin loss plus a
//! softmax classifier head, combined per batch, optimized with Adam, with
//! early stopping and one learning-rate decay window.

use crate::checkpoint::{AdamSnapshot, Checkpoint, CheckpointMeta};
use crate::data::{batch_assemble, Batch, Dataset, Split, UtteranceRecord};
use crate::error::{KitError, Result};
use accent_core::ctc::Transcript;
use accent_core::model::{
    argmax, classifier_logits, classifier_loss_on_tape, ctc_loss_nodes, disc_loss_on_tape,
    init_params, utterance_nodes, ModelConfig,
};
use accent_core::optim::{adam_step, mtl_loss, AdamState, MtlWeights};
use accent_core::params::TapeBinding;
use accent_core::tape::{Tape, Var};
use accent_core::ParameterStore;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// All three branches, weighted by alpha and beta.
    Joint,
    /// CTC only; margin and classifier parameters keep their initial values.
    /// The emitted checkpoint warm-starts a later joint run.
    CtcPretrain,
    /// No CTC branch; transcripts may be absent.
    ArOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Joint => "joint",
            Mode::CtcPretrain => "ctc-pretrain",
            Mode::ArOnly => "ar-only",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = KitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Mode::Joint),
            "ctc-pretrain" => Ok(Mode::CtcPretrain),
            "ar-only" => Ok(Mode::ArOnly),
            other => Err(KitError::Usage(format!(
                "unknown mode {other:?}, expected joint, ctc-pretrain, or ar-only"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub max_frames: usize,
    pub seed: u64,
    pub weights: MtlWeights,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            decay: 0.3,
            patience: 3,
            max_epochs: 100,
            batch_size: 8,
            max_frames: 1200,
            seed: 7,
            weights: MtlWeights::default(),
            mode: Mode::Joint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(KitError::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(KitError::Config(format!(
                "decay must be in (0, 1), got {}",
                self.decay
            )));
        }
        if self.patience < 1 {
            return Err(KitError::Config("patience must be >= 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(KitError::Config("max_epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(KitError::Config("batch_size must be >= 1".into()));
        }
        if self.max_frames < 1 {
            return Err(KitError::Config("max_frames must be >= 1".into()));
        }
        self.weights.validate()?;
        Ok(())
    }

    /// Branch weights after applying the mode: ctc-pretrain is pure CTC,
    /// ar-only drops the CTC branch.
    pub fn effective_weights(&self) -> MtlWeights {
        match self.mode {
            Mode::Joint => self.weights,
            Mode::CtcPretrain => MtlWeights {
                alpha: 1.0,
                beta: 0.0,
            },
            Mode::ArOnly => MtlWeights {
                alpha: 0.0,
                beta: self.weights.beta,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub ctc_loss: f64,
    pub disc_loss: f64,
    pub clf_loss: f64,
    pub dev_accuracy: f64,
    pub lr: f64,
    /// Utterances whose transcript cannot fit their descriptor row count,
    /// dropped from the CTC term this epoch.
    pub skipped_ctc: usize,
}

/// One line per epoch: epoch, train loss, ctc loss, disc loss, clf loss,
/// dev accuracy, lr.
pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(
        out,
        "epoch,train_loss,ctc_loss,disc_loss,clf_loss,dev_accuracy,lr"
    )
    .expect("vec write");
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.epoch, m.train_loss, m.ctc_loss, m.disc_loss, m.clf_loss, m.dev_accuracy, m.lr
        )
        .expect("vec write");
    }
    std::fs::write(path, out).map_err(KitError::io(path))
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// The best-dev-accuracy state seen during the run.
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    pub skipped_ctc_total: usize,
}

/// Sums vars and divides by the count.
fn mean_var(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    if terms.len() > 1 {
        let inv = tape.scalar(1.0 / terms.len() as f64)?;
        acc = tape.mul(acc, inv)?;
    }
    Ok(acc)
}

struct BatchOutcome {
    mtl: f64,
    ctc: f64,
    disc: f64,
    clf: f64,
    ctc_count: usize,
    skipped: usize,
}

/// Forward and backward over one batch on a single tape; gradients land in
/// the store's slots (averaged over the batch by construction).
fn batch_pass(
    model: &ModelConfig,
    params: &mut ParameterStore,
    batch: &Batch,
    weights: &MtlWeights,
    mode: Mode,
) -> Result<BatchOutcome> {
    let mut tape = Tape::new();
    let mut binding = TapeBinding::new();

    let use_ctc = weights.alpha > 0.0;
    let use_disc = mode != Mode::CtcPretrain;

    let mut ctc_terms = Vec::new();
    let mut disc_terms = Vec::new();
    let mut clf_terms = Vec::new();
    let mut skipped = 0;

    for i in 0..batch.len() {
        let frames = batch.utterance_frames(i)?;
        let nodes = utterance_nodes(&mut tape, &mut binding, params, model, &frames)?;
        if use_ctc {
            let target = Transcript::new(batch.transcripts[i].clone(), model.vocab.size())?;
            if target.ids().is_empty() {
                return Err(KitError::Data(format!(
                    "record {:?}: empty transcript outside ar-only mode",
                    batch.ids[i]
                )));
            }
            if target.min_frames() <= nodes.rows.len() {
                ctc_terms.push(ctc_loss_nodes(
                    &mut tape,
                    &mut binding,
                    params,
                    model,
                    &nodes.rows,
                    &target,
                )?);
            } else {
                skipped += 1;
            }
        }
        if use_disc {
            disc_terms.push(disc_loss_on_tape(
                &mut tape,
                &mut binding,
                params,
                model,
                nodes.disc_input,
                batch.labels[i],
            )?);
            clf_terms.push(classifier_loss_on_tape(
                &mut tape,
                &mut binding,
                params,
                model,
                nodes.embedding,
                batch.labels[i],
            )?);
        }
    }

    let ctc_mean = if ctc_terms.is_empty() {
        None
    } else {
        Some(mean_var(&mut tape, &ctc_terms)?)
    };
    let disc_mean = if disc_terms.is_empty() {
        None
    } else {
        Some(mean_var(&mut tape, &disc_terms)?)
    };
    let clf_mean = if clf_terms.is_empty() {
        None
    } else {
        Some(mean_var(&mut tape, &clf_terms)?)
    };

    let scalar_of = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
    let ctc_value = scalar_of(&tape, ctc_mean);
    let disc_value = scalar_of(&tape, disc_mean);
    let clf_value = scalar_of(&tape, clf_mean);
    // Also the NaN guard: a non-finite branch is named in the error.
    let mtl_value = mtl_loss(ctc_value, disc_value, clf_value, weights)?;

    // Root mirrors mtl_loss term by term, skipping absent branches.
    let mut root: Option<Var> = None;
    let push = |tape: &mut Tape, root: &mut Option<Var>, term: Var, w: f64| -> Result<()> {
        let wv = tape.scalar(w)?;
        let weighted = tape.mul(term, wv)?;
        *root = Some(match *root {
            None => weighted,
            Some(r) => tape.add(r, weighted)?,
        });
        Ok(())
    };
    if let Some(c) = ctc_mean {
        push(&mut tape, &mut root, c, weights.alpha)?;
    }
    if let Some(d) = disc_mean {
        push(&mut tape, &mut root, d, 1.0 - weights.alpha)?;
    }
    if let Some(c) = clf_mean {
        push(&mut tape, &mut root, c, weights.beta)?;
    }
    let root = root.ok_or_else(|| KitError::Data("batch produced no loss terms".into()))?;

    let grads = tape.backward(root)?;
    params.zero_grads();
    binding.accumulate(&tape, &grads, params, 1.0)?;

    Ok(BatchOutcome {
        mtl: mtl_value,
        ctc: ctc_value,
        disc: disc_value,
        clf: clf_value,
        ctc_count: ctc_terms.len(),
        skipped,
    })
}

/// Classifier-head accuracy over one split. Prediction always comes from
/// the softmax classifier head, whatever margin family trained the run.
pub fn evaluate(
    model: &ModelConfig,
    params: &ParameterStore,
    ds: &Dataset,
    split: Split,
    max_frames: usize,
) -> Result<(f64, Vec<Vec<usize>>)> {
    let records = ds.split(split);
    if records.is_empty() {
        return Err(KitError::Data("split has no utterances".into()));
    }
    let mut confusion = vec![vec![0usize; model.classes]; model.classes];
    let mut correct = 0usize;
    for r in &records {
        if r.label >= model.classes {
            return Err(KitError::Data(format!(
                "record {:?}: label {} outside the checkpoint's {} classes",
                r.id, r.label, model.classes
            )));
        }
        let emb = utterance_embedding(model, params, ds, r, max_frames)?;
        let logits = classifier_logits(params, &emb)?;
        let pred = argmax(&logits);
        confusion[r.label][pred] += 1;
        if pred == r.label {
            correct += 1;
        }
    }
    Ok((correct as f64 / records.len() as f64, confusion))
}

/// Value-path embedding for one record, truncated to `max_frames`.
pub fn utterance_embedding(
    model: &ModelConfig,
    params: &ParameterStore,
    ds: &Dataset,
    record: &UtteranceRecord,
    max_frames: usize,
) -> Result<accent_core::Tensor> {
    let full = ds.features(record)?;
    let t = record.frames.min(max_frames);
    let d = record.dim;
    let frames = accent_core::Tensor::new(vec![t, d], full.data()[..t * d].to_vec())?;
    let fs = accent_core::encoder::FeatureSequence::new(record.id.clone(), frames)?;
    let desc = accent_core::encoder::encode_frames(&fs, &model.encoder, params)?;
    let emb = accent_core::encoder::integrate(&desc, params)?;
    Ok(emb.values)
}

pub fn train(
    model: &ModelConfig,
    ds: &Dataset,
    cfg: &TrainConfig,
    warm_start: Option<ParameterStore>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if ds.header.classes != model.classes {
        return Err(KitError::Config(format!(
            "model expects {} classes, corpus has {}",
            model.classes, ds.header.classes
        )));
    }
    if ds.header.vocab.len() != model.vocab.size() {
        return Err(KitError::Config(format!(
            "model vocabulary has {} tokens, corpus has {}",
            model.vocab.size(),
            ds.header.vocab.len()
        )));
    }

    let mut params = match warm_start {
        None => init_params(model, cfg.seed)?,
        Some(store) => {
            let expected = init_params(model, 0)?;
            let mut want: Vec<&str> = expected.names();
            let mut have: Vec<&str> = store.names();
            want.sort_unstable();
            have.sort_unstable();
            if want != have {
                return Err(KitError::Config(
                    "warm-start parameters do not match this model".into(),
                ));
            }
            for name in &want {
                if store.get(name)?.shape() != expected.get(name)?.shape() {
                    return Err(KitError::Config(format!(
                        "warm-start parameter {name:?} has the wrong shape"
                    )));
                }
            }
            store
        }
    };

    let weights = cfg.effective_weights();
    let train_records = ds.split(Split::Train);
    if train_records.is_empty() {
        return Err(KitError::Data("corpus has no train split".into()));
    }

    let mut adam = AdamState::new(&params);
    let mut lr = cfg.lr;
    let mut metrics = Vec::new();
    let mut skipped_total = 0usize;

    let mut schedule = PlateauSchedule::new(cfg.patience);
    let mut best: Option<(ParameterStore, AdamSnapshot, usize)> = None;

    for epoch in 1..=cfg.max_epochs {
        // One shuffle stream per epoch, derived from the run seed.
        let shuffle_seed = cfg
            .seed
            .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let batches = batch_assemble(
            ds,
            &train_records,
            cfg.batch_size,
            cfg.max_frames,
            shuffle_seed,
        )?;

        let mut loss_sum = 0.0;
        let mut n = 0usize;
        let mut ctc_sum = 0.0;
        let mut ctc_n = 0usize;
        let mut disc_sum = 0.0;
        let mut clf_sum = 0.0;
        let mut disc_n = 0usize;
        let mut skipped = 0usize;

        for batch in &batches {
            let out = batch_pass(model, &mut params, batch, &weights, cfg.mode)?;
            adam_step(&mut params, &mut adam, lr)?;
            loss_sum += out.mtl * batch.len() as f64;
            n += batch.len();
            ctc_sum += out.ctc * out.ctc_count as f64;
            ctc_n += out.ctc_count;
            if cfg.mode != Mode::CtcPretrain {
                disc_sum += out.disc * batch.len() as f64;
                clf_sum += out.clf * batch.len() as f64;
                disc_n += batch.len();
            }
            skipped += out.skipped;
        }
        skipped_total += skipped;

        let (dev_accuracy, _) = evaluate(model, &params, ds, Split::Dev, cfg.max_frames)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            ctc_loss: if ctc_n > 0 { ctc_sum / ctc_n as f64 } else { 0.0 },
            disc_loss: if disc_n > 0 { disc_sum / disc_n as f64 } else { 0.0 },
            clf_loss: if disc_n > 0 { clf_sum / disc_n as f64 } else { 0.0 },
            dev_accuracy,
            lr,
            skipped_ctc: skipped,
        };
        on_epoch(&m);
        metrics.push(m);

        match schedule.observe(dev_accuracy) {
            Verdict::Improved => {
                best = Some((params.clone(), AdamSnapshot::capture(&adam), epoch));
            }
            Verdict::Wait => {}
            Verdict::Decay => lr *= cfg.decay,
            Verdict::Stop => break,
        }
    }

    let (best_params, best_adam, best_epoch) =
        best.expect("at least one epoch ran, so a best exists");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: model.clone(),
            params: best_params,
            adam: Some(best_adam),
            meta: CheckpointMeta {
                epoch: best_epoch as u64,
                dev_accuracy: schedule.best(),
            },
        },
        metrics,
        skipped_ctc_total: skipped_total,
    })
}

/// Dev-accuracy monitor behind the stopping rule: the first exhausted
/// patience window decays the learning rate, the second ends the run.
/// Only strict improvement resets the window.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    patience: usize,
    best: f64,
    stall: usize,
    windows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Wait,
    Decay,
    Stop,
}

impl PlateauSchedule {
    pub fn new(patience: usize) -> Self {
        PlateauSchedule {
            patience,
            best: f64::NEG_INFINITY,
            stall: 0,
            windows: 0,
        }
    }

    pub fn observe(&mut self, accuracy: f64) -> Verdict {
        if accuracy > self.best {
            self.best = accuracy;
            self.stall = 0;
            return Verdict::Improved;
        }
        self.stall += 1;
        if self.stall < self.patience {
            return Verdict::Wait;
        }
        self.stall = 0;
        self.windows += 1;
        if self.windows == 1 {
            Verdict::Decay
        } else {
            Verdict::Stop
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}
