//! Discriminative objectives over utterance embeddings: plain softmax
//! cross-entropy on raw logits, the additive-cosine and additive-angular
//! margin variants, the unified pair loss, and Circle-Loss with self-paced
//! weights.
//!
//! All of them are assembled from tape primitives, and every log(1 + e^z)
//! is computed as logsumexp([0, z]) so the gamma = 256 regime survives
//! without overflow.

use alloc::format;
use alloc::vec::Vec;

use crate::encoder::EmbeddingVector;
use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Clamp band for the arccos input; keeps the angular derivative bounded.
pub const COS_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginKind {
    Softmax,
    CosFace,
    ArcFace,
    Circle,
}

impl MarginKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MarginKind::Softmax => "softmax",
            MarginKind::CosFace => "cosface",
            MarginKind::ArcFace => "arcface",
            MarginKind::Circle => "circle",
        }
    }

    /// Conventional scale for each family.
    pub fn default_scale(self) -> f64 {
        match self {
            MarginKind::Softmax => 1.0,
            MarginKind::CosFace | MarginKind::ArcFace => 30.0,
            MarginKind::Circle => 256.0,
        }
    }
}

impl core::str::FromStr for MarginKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(MarginKind::Softmax),
            "cosface" => Ok(MarginKind::CosFace),
            "arcface" => Ok(MarginKind::ArcFace),
            "circle" => Ok(MarginKind::Circle),
            other => Err(CoreError::Config(format!(
                "unknown loss kind {other:?} (softmax|cosface|arcface|circle)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginConfig {
    pub kind: MarginKind,
    /// Scale gamma applied inside the exponentials.
    pub scale: f64,
    /// Margin m; ignored by the softmax kind.
    pub margin: f64,
    /// Leave the non-target cosines unscaled in the cosface/arcface
    /// denominators (the less common convention; off by default).
    pub unscaled_negatives: bool,
}

impl MarginConfig {
    pub fn softmax() -> Self {
        MarginConfig {
            kind: MarginKind::Softmax,
            scale: 1.0,
            margin: 0.0,
            unscaled_negatives: false,
        }
    }

    pub fn cosface(margin: f64) -> Self {
        MarginConfig {
            kind: MarginKind::CosFace,
            scale: MarginKind::CosFace.default_scale(),
            margin,
            unscaled_negatives: false,
        }
    }

    pub fn arcface(margin: f64) -> Self {
        MarginConfig {
            kind: MarginKind::ArcFace,
            scale: MarginKind::ArcFace.default_scale(),
            margin,
            unscaled_negatives: false,
        }
    }

    pub fn circle(margin: f64) -> Self {
        MarginConfig {
            kind: MarginKind::Circle,
            scale: MarginKind::Circle.default_scale(),
            margin,
            unscaled_negatives: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(CoreError::Config(format!(
                "loss scale must be positive and finite, got {}",
                self.scale
            )));
        }
        if !(self.margin.is_finite() && (0.0..1.0).contains(&self.margin)) {
            return Err(CoreError::Config(format!(
                "loss margin must lie in [0, 1), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Normalized class-proxy weight matrix rows, `[K, dim]` with K >= 2.
#[derive(Debug, Clone)]
pub struct ClassWeights {
    pub weights: Tensor,
}

impl ClassWeights {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.rank() != 2 || weights.shape()[0] < 2 {
            return Err(CoreError::Input(format!(
                "class weights must be [K>=2, dim], got {:?}",
                weights.shape()
            )));
        }
        weights.assert_finite("class weights")?;
        Ok(ClassWeights { weights })
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Positive (same identity) and negative similarity scores, both non-empty.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityScores {
    pub intra: Vec<f64>,
    pub inter: Vec<f64>,
}

impl SimilarityScores {
    pub fn new(intra: Vec<f64>, inter: Vec<f64>) -> Result<Self> {
        if intra.is_empty() || inter.is_empty() {
            return Err(CoreError::Input(
                "similarity scores need at least one intra and one inter entry".into(),
            ));
        }
        for &s in intra.iter().chain(inter.iter()) {
            if !s.is_finite() || !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&s) {
                return Err(CoreError::Input(format!(
                    "similarity score {s} outside [-1, 1]"
                )));
            }
        }
        Ok(SimilarityScores { intra, inter })
    }
}

/// Cosines between an embedding and every class proxy on the tape:
/// `([1] target similarity, [K-1] non-target similarities)`.
pub fn class_similarity_vars(
    tape: &mut Tape,
    g: Var,
    label: usize,
    w: Var,
) -> Result<(Var, Var)> {
    let k = tape.value(w).shape()[0];
    if label >= k {
        return Err(CoreError::Input(format!(
            "label {label} outside {k} classes"
        )));
    }
    if k < 2 {
        return Err(CoreError::Input("need at least two classes for similarity scores".into()));
    }
    let wn = tape.l2_normalize(w)?;
    let gn = tape.l2_normalize(g)?;
    let sims = tape.matmul(wn, gn)?;
    let sp = tape.slice(sims, label, 1)?;
    let sn = if label == 0 {
        tape.slice(sims, 1, k - 1)?
    } else if label == k - 1 {
        tape.slice(sims, 0, k - 1)?
    } else {
        let before = tape.slice(sims, 0, label)?;
        let after = tape.slice(sims, label + 1, k - 1 - label)?;
        tape.concat(&[before, after])?
    };
    Ok((sp, sn))
}

/// Value-level per-example score extraction against class proxies.
pub fn class_similarities(
    g: &EmbeddingVector,
    label: usize,
    w: &ClassWeights,
) -> Result<SimilarityScores> {
    let mut tape = Tape::new();
    let gv = tape.leaf(g.values.clone())?;
    let wv = tape.leaf(w.weights.clone())?;
    let (sp, sn) = class_similarity_vars(&mut tape, gv, label, wv)
        .map_err(|e| match e {
            CoreError::Domain { op: "l2_normalize", .. } => CoreError::Domain {
                op: "class_similarities",
                detail: "zero-norm embedding or class weight row".into(),
            },
            other => other,
        })?;
    SimilarityScores::new(
        tape.value(sp).data().to_vec(),
        tape.value(sn).data().to_vec(),
    )
}

/// -log softmax(target | all): logsumexp of the row minus the target entry.
fn nll_from_logits(tape: &mut Tape, target: Var, negs: Var) -> Result<Var> {
    let all = tape.concat(&[target, negs])?;
    let lse = tape.logsumexp(all)?;
    let t = tape.reshape(target, Vec::new())?;
    tape.sub(lse, t)
}

/// Raw-logit softmax cross-entropy for one example; no normalization and no
/// margin, logits are `w . g` directly.
pub fn softmax_example_on_tape(tape: &mut Tape, g: Var, label: usize, w: Var) -> Result<Var> {
    let k = tape.value(w).shape()[0];
    if label >= k {
        return Err(CoreError::Input(format!("label {label} outside {k} classes")));
    }
    let logits = tape.matmul(w, g)?;
    let lse = tape.logsumexp(logits)?;
    let t0 = tape.slice(logits, label, 1)?;
    let t = tape.reshape(t0, Vec::new())?;
    tape.sub(lse, t)
}

/// Shared cosface/arcface assembly: the target logit has the margin folded
/// in and is always scaled; negatives are scaled unless the literal variant
/// is requested.
fn margin_example(
    tape: &mut Tape,
    cfg: &MarginConfig,
    sp: Var,
    sn: Var,
) -> Result<Var> {
    let gamma = tape.scalar(cfg.scale)?;
    let target = match cfg.kind {
        MarginKind::CosFace => {
            let m = tape.scalar(cfg.margin)?;
            let shifted = tape.sub(sp, m)?;
            tape.mul(shifted, gamma)?
        }
        MarginKind::ArcFace => {
            let safe = tape.clamp(sp, -COS_CLAMP, COS_CLAMP)?;
            let theta = tape.acos(safe)?;
            let m = tape.scalar(cfg.margin)?;
            let pushed = tape.add(theta, m)?;
            let cos = tape.cos(pushed)?;
            tape.mul(cos, gamma)?
        }
        _ => {
            return Err(CoreError::Contract(
                "margin_example only handles cosface/arcface".into(),
            ))
        }
    };
    let negs = if cfg.unscaled_negatives {
        sn
    } else {
        tape.mul(sn, gamma)?
    };
    nll_from_logits(tape, target, negs)
}

/// log(1 + sum_j e^(gamma (s_n_j + m)) * sum_i e^(-gamma s_p_i)).
pub fn unified_on_tape(
    tape: &mut Tape,
    sp: Var,
    sn: Var,
    scale: f64,
    margin: f64,
) -> Result<Var> {
    let gamma = tape.scalar(scale)?;
    let neg_gamma = tape.scalar(-scale)?;
    let m = tape.scalar(margin)?;
    let shifted_n = tape.add(sn, m)?;
    let neg_terms = tape.mul(shifted_n, gamma)?;
    let pos_terms = tape.mul(sp, neg_gamma)?;
    let lse_n = tape.logsumexp(neg_terms)?;
    let lse_p = tape.logsumexp(pos_terms)?;
    let z = tape.add(lse_n, lse_p)?;
    softplus_scalar(tape, z)
}

/// log(1 + e^z) via logsumexp([0, z]); exact for large positive or negative z.
fn softplus_scalar(tape: &mut Tape, z: Var) -> Result<Var> {
    let z1 = tape.reshape(z, [1])?;
    let zero = tape.leaf(Tensor::zeros([1]))?;
    let both = tape.concat(&[zero, z1])?;
    tape.logsumexp(both)
}

/// Test-visible knobs that specialize Circle-Loss back to the unified loss.
#[derive(Debug, Clone)]
pub struct CircleOverrides {
    pub alpha_p: Vec<f64>,
    pub alpha_n: Vec<f64>,
    pub delta_p: f64,
    pub delta_n: f64,
}

/// Circle-Loss: per-score self-paced weights alpha, relaxed decision margins
/// Delta. The weights are computed from current values and enter the graph
/// as constants, so gradients do not flow through them.
pub fn circle_on_tape(
    tape: &mut Tape,
    sp: Var,
    sn: Var,
    scale: f64,
    margin: f64,
    overrides: Option<&CircleOverrides>,
) -> Result<Var> {
    let (alpha_p, alpha_n, delta_p, delta_n) = match overrides {
        Some(o) => (
            o.alpha_p.clone(),
            o.alpha_n.clone(),
            o.delta_p,
            o.delta_n,
        ),
        None => {
            let optimum_p = 1.0 + margin;
            let optimum_n = -margin;
            let ap = tape
                .value(sp)
                .data()
                .iter()
                .map(|&s| (optimum_p - s).max(0.0))
                .collect();
            let an = tape
                .value(sn)
                .data()
                .iter()
                .map(|&s| (s - optimum_n).max(0.0))
                .collect();
            (ap, an, 1.0 - margin, margin)
        }
    };
    let kp = tape.value(sp).numel();
    let kn = tape.value(sn).numel();
    if alpha_p.len() != kp || alpha_n.len() != kn {
        return Err(CoreError::Dimension {
            op: "circle_loss",
            detail: format!(
                "weights {}x{} vs scores {kp}x{kn}",
                alpha_p.len(),
                alpha_n.len()
            ),
        });
    }
    let ap = tape.leaf(Tensor::new([kp], alpha_p)?)?;
    let an = tape.leaf(Tensor::new([kn], alpha_n)?)?;
    let gamma = tape.scalar(scale)?;
    let neg_gamma = tape.scalar(-scale)?;
    let dp = tape.scalar(delta_p)?;
    let dn = tape.scalar(delta_n)?;

    let sp_shift = tape.sub(sp, dp)?;
    let sp_weighted = tape.mul(sp_shift, ap)?;
    let pos_terms = tape.mul(sp_weighted, neg_gamma)?;

    let sn_shift = tape.sub(sn, dn)?;
    let sn_weighted = tape.mul(sn_shift, an)?;
    let neg_terms = tape.mul(sn_weighted, gamma)?;

    let lse_n = tape.logsumexp(neg_terms)?;
    let lse_p = tape.logsumexp(pos_terms)?;
    let z = tape.add(lse_n, lse_p)?;
    softplus_scalar(tape, z)
}

/// Per-example margin-family dispatch against class proxies.
pub fn margin_example_on_tape(
    tape: &mut Tape,
    cfg: &MarginConfig,
    g: Var,
    label: usize,
    w: Var,
) -> Result<Var> {
    cfg.validate()?;
    match cfg.kind {
        MarginKind::Softmax => softmax_example_on_tape(tape, g, label, w),
        MarginKind::CosFace | MarginKind::ArcFace => {
            let (sp, sn) = class_similarity_vars(tape, g, label, w)?;
            margin_example(tape, cfg, sp, sn)
        }
        MarginKind::Circle => {
            let (sp, sn) = class_similarity_vars(tape, g, label, w)?;
            circle_on_tape(tape, sp, sn, cfg.scale, cfg.margin, None)
        }
    }
}

fn scores_to_vars(tape: &mut Tape, scores: &SimilarityScores) -> Result<(Var, Var)> {
    let sp = tape.leaf(Tensor::new([scores.intra.len()], scores.intra.clone())?)?;
    let sn = tape.leaf(Tensor::new([scores.inter.len()], scores.inter.clone())?)?;
    Ok((sp, sn))
}

/// Value-level unified pair loss over explicit score sets.
pub fn unified_pair_loss(scores: &SimilarityScores, scale: f64, margin: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (sp, sn) = scores_to_vars(&mut tape, scores)?;
    let loss = unified_on_tape(&mut tape, sp, sn, scale, margin)?;
    tape.value(loss).item()
}

/// Value-level Circle-Loss over explicit score sets.
pub fn circle_loss(scores: &SimilarityScores, scale: f64, margin: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (sp, sn) = scores_to_vars(&mut tape, scores)?;
    let loss = circle_on_tape(&mut tape, sp, sn, scale, margin, None)?;
    tape.value(loss).item()
}

/// Circle-Loss with its knobs pinned; exists so the degenerate settings that
/// reproduce the unified loss stay checkable.
pub fn circle_loss_with(
    scores: &SimilarityScores,
    scale: f64,
    overrides: &CircleOverrides,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (sp, sn) = scores_to_vars(&mut tape, scores)?;
    let loss = circle_on_tape(&mut tape, sp, sn, scale, 0.0, Some(overrides))?;
    tape.value(loss).item()
}

fn batch_mean(tape: &mut Tape, examples: &[Var]) -> Result<Var> {
    let cols: Vec<Var> = examples
        .iter()
        .map(|&e| tape.reshape(e, [1]))
        .collect::<Result<_>>()?;
    let row = tape.concat(&cols)?;
    tape.mean(row)
}

fn batch_loss<F>(batch: &[(&Tensor, usize)], w: &ClassWeights, mut example: F) -> Result<f64>
where
    F: FnMut(&mut Tape, Var, usize, Var) -> Result<Var>,
{
    if batch.is_empty() {
        return Err(CoreError::Input("empty batch".into()));
    }
    let mut tape = Tape::new();
    let wv = tape.leaf(w.weights.clone())?;
    let mut losses = Vec::with_capacity(batch.len());
    for (g, label) in batch {
        let gv = tape.leaf((*g).clone())?;
        losses.push(example(&mut tape, gv, *label, wv)?);
    }
    let mean = batch_mean(&mut tape, &losses)?;
    tape.value(mean).item()
}

/// Batch-mean raw-logit softmax cross-entropy.
pub fn softmax_loss(batch: &[(&Tensor, usize)], w: &ClassWeights) -> Result<f64> {
    batch_loss(batch, w, softmax_example_on_tape)
}

/// Batch-mean additive-cosine-margin loss.
pub fn cosface_loss(
    batch: &[(&Tensor, usize)],
    w: &ClassWeights,
    cfg: &MarginConfig,
) -> Result<f64> {
    expect_kind(cfg, MarginKind::CosFace)?;
    batch_loss(batch, w, |tape, g, label, wv| {
        let (sp, sn) = class_similarity_vars(tape, g, label, wv)?;
        margin_example(tape, cfg, sp, sn)
    })
}

/// Batch-mean additive-angular-margin loss.
pub fn arcface_loss(
    batch: &[(&Tensor, usize)],
    w: &ClassWeights,
    cfg: &MarginConfig,
) -> Result<f64> {
    expect_kind(cfg, MarginKind::ArcFace)?;
    batch_loss(batch, w, |tape, g, label, wv| {
        let (sp, sn) = class_similarity_vars(tape, g, label, wv)?;
        margin_example(tape, cfg, sp, sn)
    })
}

fn expect_kind(cfg: &MarginConfig, kind: MarginKind) -> Result<()> {
    cfg.validate()?;
    if cfg.kind != kind {
        return Err(CoreError::Config(format!(
            "loss kind is {}, expected {}",
            cfg.kind.as_str(),
            kind.as_str()
        )));
    }
    Ok(())
}

/// Within-batch pair scores: cosines of normalized embedding pairs, split by
/// label agreement. Returns None when the batch lacks a same-label pair or a
/// cross-label pair.
pub fn pair_scores_on_tape(
    tape: &mut Tape,
    embeddings: &[Var],
    labels: &[usize],
) -> Result<Option<(Var, Var)>> {
    if embeddings.len() != labels.len() {
        return Err(CoreError::Input(format!(
            "{} embeddings vs {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let normed: Vec<Var> = embeddings
        .iter()
        .map(|&g| tape.l2_normalize(g))
        .collect::<Result<_>>()?;
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for i in 0..normed.len() {
        for j in (i + 1)..normed.len() {
            let prod = tape.mul(normed[i], normed[j])?;
            let dot = tape.sum(prod)?;
            let cell = tape.reshape(dot, [1])?;
            if labels[i] == labels[j] {
                intra.push(cell);
            } else {
                inter.push(cell);
            }
        }
    }
    if intra.is_empty() || inter.is_empty() {
        return Ok(None);
    }
    let sp = tape.concat(&intra)?;
    let sn = tape.concat(&inter)?;
    Ok(Some((sp, sn)))
}
