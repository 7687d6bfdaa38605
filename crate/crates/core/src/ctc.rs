//! Connectionist temporal classification over descriptor-rate posteriors.
//!
//! The loss marginalizes over all blank-augmented alignments with the usual
//! forward recursion on a lattice of 2L+1 states, entirely in log space. The
//! lattice is built from scalar tape nodes so the loss is differentiable
//! down to the posterior grid (and through it to the whole model). Cells
//! that no valid alignment can reach are simply absent instead of carrying
//! a -inf sentinel, which keeps every tensor on the tape finite.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::DescriptorSequence;
use crate::error::{CoreError, Result};
use crate::fmath;
use crate::params::{ParameterStore, TapeBinding};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Reserved spelling for the blank output; real tokens may not use it.
pub const BLANK_MARKER: &str = "<b>";

/// Token inventory. The blank is not a token: it lives at index `len()`,
/// one past the real tokens, so a posterior row has `len() + 1` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(CoreError::Config("vocabulary must not be empty".into()));
        }
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(CoreError::Config(format!("vocabulary token {i} is empty")));
            }
            if tok == BLANK_MARKER {
                return Err(CoreError::Config(format!(
                    "vocabulary token {i} equals the blank marker {BLANK_MARKER:?}"
                )));
            }
            if tokens[..i].contains(tok) {
                return Err(CoreError::Config(format!(
                    "vocabulary token {tok:?} appears twice"
                )));
            }
        }
        Ok(Vocabulary { tokens })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn blank(&self) -> usize {
        self.tokens.len()
    }

    /// Posterior row width: tokens plus blank.
    pub fn width(&self) -> usize {
        self.tokens.len() + 1
    }

    /// Token text for an id; the blank id maps to [`BLANK_MARKER`].
    pub fn token(&self, id: usize) -> Option<&str> {
        if id == self.blank() {
            return Some(BLANK_MARKER);
        }
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A label sequence over token indices (no blanks).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    ids: Vec<usize>,
}

impl Transcript {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        for (pos, &id) in ids.iter().enumerate() {
            if id >= vocab_size {
                return Err(CoreError::Input(format!(
                    "transcript label {id} at position {pos} outside vocabulary of size {vocab_size}"
                )));
            }
        }
        Ok(Transcript { ids })
    }

    pub fn empty() -> Self {
        Transcript { ids: Vec::new() }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Count of adjacent equal label pairs; each needs a separating blank.
    pub fn adjacent_repeats(&self) -> usize {
        self.ids.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Fewest output frames any valid alignment needs.
    pub fn min_frames(&self) -> usize {
        self.ids.len() + self.adjacent_repeats()
    }
}

/// Per-frame posterior distributions, `[T, |U|+1]`, rows on the simplex.
#[derive(Debug, Clone)]
pub struct PosteriorGrid {
    probs: Tensor,
}

impl PosteriorGrid {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.rank() != 2 || probs.shape()[1] < 2 {
            return Err(CoreError::Input(format!(
                "posterior grid must be [T, width>=2], got {:?}",
                probs.shape()
            )));
        }
        probs.assert_finite("posterior grid")?;
        let (t, w) = (probs.shape()[0], probs.shape()[1]);
        for r in 0..t {
            let row = &probs.data()[r * w..(r + 1) * w];
            if row.iter().any(|&p| p < 0.0) {
                return Err(CoreError::Input(format!(
                    "posterior grid row {r} has a negative entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if fmath::abs(sum - 1.0) > 1e-9 {
                return Err(CoreError::Input(format!(
                    "posterior grid row {r} sums to {sum}, not 1"
                )));
            }
        }
        Ok(PosteriorGrid { probs })
    }

    pub fn frames(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn prob(&self, t: usize, label: usize) -> f64 {
        self.probs.at2(t, label)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }
}

/// ASR head on the tape: a dedicated bidirectional GRU over the shared
/// descriptor rows, then a linear map to `width` classes and a log-softmax.
/// Returns one `[width]` log-probability row per descriptor.
pub fn asr_log_rows_on_tape(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParameterStore,
    rows: &[Var],
    descriptor_dim: usize,
) -> Result<Vec<Var>> {
    if rows.is_empty() {
        return Err(CoreError::Input("asr head over an empty descriptor sequence".into()));
    }
    let p = crate::gru::bind_bigru(tape, binding, store, "asr.gru")?;
    let states = crate::gru::bigru_rows(tape, &p, rows, descriptor_dim / 2)?;
    let w = binding.bind(tape, store, "asr.out.weight")?;
    let b = binding.bind(tape, store, "asr.out.bias")?;
    states
        .iter()
        .map(|&s| {
            let logits0 = tape.matmul(s, w)?;
            let logits = tape.add(logits0, b)?;
            tape.log_softmax(logits)
        })
        .collect()
}

pub fn init_asr_params(
    store: &mut ParameterStore,
    rng: &mut impl rand::Rng,
    descriptor_dim: usize,
    width: usize,
) -> Result<()> {
    crate::gru::init_bigru_params(store, rng, "asr.gru", descriptor_dim, descriptor_dim / 2)?;
    let bound = 1.0 / fmath::sqrt(descriptor_dim as f64);
    store.insert(
        "asr.out.weight",
        crate::params::uniform_init(rng, &[descriptor_dim, width], bound),
    )?;
    store.insert("asr.out.bias", Tensor::zeros([width]))
}

/// Value-level ASR head: descriptors to a posterior grid.
pub fn asr_head(
    d: &DescriptorSequence,
    vocab: &Vocabulary,
    store: &ParameterStore,
) -> Result<PosteriorGrid> {
    let mut tape = Tape::new();
    let mut binding = TapeBinding::new();
    let h = d.dim();
    let mat = tape.leaf(d.descriptors.clone())?;
    let rows: Vec<Var> = (0..d.count())
        .map(|i| {
            let r = tape.slice(mat, i, 1)?;
            tape.reshape(r, [h])
        })
        .collect::<Result<_>>()?;
    let log_rows = asr_log_rows_on_tape(&mut tape, &mut binding, store, &rows, h)?;
    let prob_rows: Vec<Var> = log_rows
        .iter()
        .map(|&r| {
            let p = tape.exp(r)?;
            tape.reshape(p, [1, vocab.width()])
        })
        .collect::<Result<_>>()?;
    let grid = tape.concat(&prob_rows)?;
    PosteriorGrid::new(tape.value(grid).clone())
}

/// Lattice state count for a transcript of length l.
fn lattice_states(l: usize) -> usize {
    2 * l + 1
}

/// Label carried by lattice state `s`: even states are blanks, odd states
/// walk the transcript.
fn state_label(s: usize, target: &[usize], blank: usize) -> usize {
    if s % 2 == 1 {
        target[s / 2]
    } else {
        blank
    }
}

fn check_feasible(frames: usize, target: &Transcript) -> Result<()> {
    let required = target.min_frames();
    if frames < required {
        return Err(CoreError::Infeasible {
            frames,
            labels: target.len(),
            required,
        });
    }
    Ok(())
}

/// log(sum(exp(..))) of a few scalar nodes.
fn lse_scalars(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    debug_assert!(!xs.is_empty());
    if xs.len() == 1 {
        return Ok(xs[0]);
    }
    let cols: Vec<Var> = xs
        .iter()
        .map(|&x| tape.reshape(x, [1]))
        .collect::<Result<_>>()?;
    let row = tape.concat(&cols)?;
    tape.logsumexp(row)
}

/// Forward recursion over memoized log-probability cells. `cell(t, label)`
/// must return a scalar tape node holding log p_t(label).
fn ctc_forward<C>(
    tape: &mut Tape,
    mut cell: C,
    frames: usize,
    target: &Transcript,
    blank: usize,
) -> Result<Var>
where
    C: FnMut(&mut Tape, usize, usize) -> Result<Var>,
{
    check_feasible(frames, target)?;
    let labels = target.ids();
    let states = lattice_states(labels.len());
    let mut memo: BTreeMap<(usize, usize), Var> = BTreeMap::new();
    let mut cell_at = |tape: &mut Tape, t: usize, lbl: usize| -> Result<Var> {
        if let Some(v) = memo.get(&(t, lbl)) {
            return Ok(*v);
        }
        let v = cell(tape, t, lbl)?;
        memo.insert((t, lbl), v);
        Ok(v)
    };

    // alpha[s] is present only when some prefix alignment reaches state s.
    let mut alpha: Vec<Option<Var>> = vec![None; states];
    alpha[0] = Some(cell_at(tape, 0, blank)?);
    if states > 1 {
        alpha[1] = Some(cell_at(tape, 0, state_label(1, labels, blank))?);
    }

    for t in 1..frames {
        let mut next: Vec<Option<Var>> = vec![None; states];
        for s in 0..states {
            let lbl = state_label(s, labels, blank);
            let mut preds: Vec<Var> = Vec::with_capacity(3);
            if let Some(v) = alpha[s] {
                preds.push(v);
            }
            if s >= 1 {
                if let Some(v) = alpha[s - 1] {
                    preds.push(v);
                }
            }
            let can_skip = s >= 2 && lbl != blank && lbl != state_label(s - 2, labels, blank);
            if can_skip {
                if let Some(v) = alpha[s - 2] {
                    preds.push(v);
                }
            }
            if preds.is_empty() {
                continue;
            }
            let agg = lse_scalars(tape, &preds)?;
            let lp = cell_at(tape, t, lbl)?;
            next[s] = Some(tape.add(agg, lp)?);
        }
        alpha = next;
    }

    let mut finals: Vec<Var> = Vec::with_capacity(2);
    if let Some(v) = alpha[states - 1] {
        finals.push(v);
    }
    if states >= 2 {
        if let Some(v) = alpha[states - 2] {
            finals.push(v);
        }
    }
    // Feasibility guarantees at least one reachable final state.
    debug_assert!(!finals.is_empty());
    let total = lse_scalars(tape, &finals)?;
    tape.neg(total)
}

/// CTC loss over per-frame log-probability rows already on the tape (the
/// training path; rows come straight from the ASR head's log-softmax).
pub fn ctc_loss_on_tape(tape: &mut Tape, log_rows: &[Var], target: &Transcript) -> Result<Var> {
    if log_rows.is_empty() {
        return Err(CoreError::Input("ctc over an empty output sequence".into()));
    }
    let width = tape.value(log_rows[0]).numel();
    if width < 2 {
        return Err(CoreError::Input("ctc needs at least one token plus blank".into()));
    }
    let blank = width - 1;
    if let Some(&bad) = target.ids().iter().find(|&&id| id >= blank) {
        return Err(CoreError::Input(format!(
            "transcript label {bad} outside posterior width {width} (blank at {blank})"
        )));
    }
    let rows: Vec<Var> = log_rows.to_vec();
    ctc_forward(
        tape,
        move |tape, t, lbl| {
            let col = tape.slice(rows[t], lbl, 1)?;
            tape.reshape(col, Vec::new())
        },
        log_rows.len(),
        target,
        blank,
    )
}

/// Value-level CTC loss of a posterior grid. Cells a valid alignment can
/// touch must be strictly positive (log space); zero elsewhere is fine.
pub fn ctc_loss(grid: &PosteriorGrid, target: &Transcript) -> Result<f64> {
    let blank = grid.width() - 1;
    if let Some(&bad) = target.ids().iter().find(|&&id| id >= blank) {
        return Err(CoreError::Input(format!(
            "transcript label {bad} outside posterior width {} (blank at {blank})",
            grid.width()
        )));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(grid.tensor().clone())?;
    let loss = ctc_forward(
        &mut tape,
        move |tape, t, lbl| {
            let row = tape.slice(leaf, t, 1)?;
            let cell = tape.reshape(row, [grid.width()])?;
            let p = tape.slice(cell, lbl, 1)?;
            let lp = tape.log(p)?;
            tape.reshape(lp, Vec::new())
        },
        grid.frames(),
        target,
        blank,
    )?;
    tape.value(loss).item()
}

/// Exhaustive reference: enumerates every length-T output sequence, collapses
/// it (merge adjacent repeats, then drop blanks), and sums the probability of
/// those that spell the target. Returns +inf when no sequence does.
pub fn ctc_loss_bruteforce(grid: &PosteriorGrid, target: &Transcript) -> Result<f64> {
    let (t, w) = (grid.frames(), grid.width());
    let blank = w - 1;
    if let Some(&bad) = target.ids().iter().find(|&&id| id >= blank) {
        return Err(CoreError::Input(format!(
            "transcript label {bad} outside posterior width {w} (blank at {blank})"
        )));
    }
    let space = libm::pow(w as f64, t as f64);
    if space > 1e6 {
        return Err(CoreError::TooLarge(format!(
            "{w}^{t} = {space:.0} alignments exceeds the 1e6 enumeration budget"
        )));
    }

    let mut path = vec![0usize; t];
    let mut total = 0.0f64;
    let mut collapsed: Vec<usize> = Vec::with_capacity(t);
    loop {
        collapsed.clear();
        let mut prev = usize::MAX;
        for &lbl in &path {
            if lbl != prev {
                if lbl != blank {
                    collapsed.push(lbl);
                }
                prev = lbl;
            }
        }
        if collapsed == target.ids() {
            let mut p = 1.0;
            for (step, &lbl) in path.iter().enumerate() {
                p *= grid.prob(step, lbl);
            }
            total += p;
        }
        // Odometer increment over base-w digits.
        let mut pos = t;
        loop {
            if pos == 0 {
                return Ok(-fmath::ln(total));
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < w {
                break;
            }
            path[pos] = 0;
        }
    }
}

/// Best-path decoding: per-frame argmax (first index wins ties), merge
/// adjacent repeats, drop blanks.
pub fn greedy_decode(grid: &PosteriorGrid, vocab: &Vocabulary) -> Result<Transcript> {
    if grid.width() != vocab.width() {
        return Err(CoreError::Input(format!(
            "grid width {} does not match vocabulary width {}",
            grid.width(),
            vocab.width()
        )));
    }
    let blank = vocab.blank();
    let mut ids = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..grid.frames() {
        let row = grid.tensor().row(t);
        let mut arg = 0usize;
        let mut best = row[0];
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                arg = j;
            }
        }
        if arg != prev {
            if arg != blank {
                ids.push(arg);
            }
            prev = arg;
        }
    }
    Transcript::new(ids, vocab.size())
}
