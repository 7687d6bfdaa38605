//! Pool-and-mix frame encoder and the utterance-level integrator.
//!
//! A `[T, D]` feature sequence is viewed as a one-channel image. Each stage
//! halves both spatial extents with ceil-mode 2x2 max pooling, then mixes
//! channels pointwise (linear + relu). After k stages the grid is flattened
//! to `ceil(T/2^k) * ceil(D/2^k)` local descriptors, projected to width H,
//! and contextualized by a bidirectional GRU (H/2 per direction) in
//! many-to-many mode. The integrator is a second bidirectional GRU read out
//! in many-to-one mode, so one utterance becomes one `[H]` embedding.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::gru;
use crate::params::{uniform_init, ParameterStore, TapeBinding};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Spatial extent after one pooling: ceil(x / 2).
fn halve(x: usize) -> usize {
    x.div_ceil(2)
}

/// Number of local descriptors a `[t, d]` input yields after `k` pool-mix
/// stages.
pub fn descriptor_count(t: usize, d: usize, k: usize) -> usize {
    debug_assert!(t > 0 && d > 0);
    let (mut t, mut d) = (t, d);
    for _ in 0..k {
        t = halve(t);
        d = halve(d);
    }
    t * d
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Pool-mix stage count k.
    pub stages: usize,
    /// Output channels per stage; length must equal `stages`.
    pub channels: Vec<usize>,
    /// Descriptor width H; the GRUs use H/2 per direction.
    pub descriptor_dim: usize,
    /// Stacked bidirectional GRU layers in the contextualizer.
    pub gru_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stages: 5,
            channels: alloc::vec![16, 32, 64, 128, 256],
            descriptor_dim: 256,
            gru_layers: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(CoreError::Config("encoder stages must be >= 1".into()));
        }
        if self.channels.len() != self.stages {
            return Err(CoreError::Config(format!(
                "encoder channels lists {} entries for {} stages",
                self.channels.len(),
                self.stages
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(CoreError::Config("encoder channel widths must be >= 1".into()));
        }
        if self.descriptor_dim == 0 || self.descriptor_dim % 2 != 0 {
            return Err(CoreError::Config(format!(
                "descriptor_dim must be a positive even number, got {}",
                self.descriptor_dim
            )));
        }
        if self.gru_layers == 0 {
            return Err(CoreError::Config("encoder gru_layers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hidden_per_dir(&self) -> usize {
        self.descriptor_dim / 2
    }
}

/// One utterance's input features, `[T, D]`.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub id: String,
    pub frames: Tensor,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, frames: Tensor) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(CoreError::Input(format!(
                "feature sequence must be rank 2, got {:?}",
                frames.shape()
            )));
        }
        frames.assert_finite("feature sequence")?;
        Ok(FeatureSequence { id: id.into(), frames })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false // rank-2 tensors have positive extents
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Contextualized local descriptors, `[C, H]`.
#[derive(Debug, Clone)]
pub struct DescriptorSequence {
    pub descriptors: Tensor,
}

impl DescriptorSequence {
    pub fn count(&self) -> usize {
        self.descriptors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.descriptors.shape()[1]
    }
}

/// One utterance-level embedding, `[H]`.
#[derive(Debug, Clone)]
pub struct EmbeddingVector {
    pub values: Tensor,
    pub label: Option<usize>,
}

fn stage_weight(i: usize) -> String {
    format!("encoder.stage{i}.weight")
}

fn stage_bias(i: usize) -> String {
    format!("encoder.stage{i}.bias")
}

pub fn init_encoder_params(
    store: &mut ParameterStore,
    rng: &mut impl Rng,
    cfg: &EncoderConfig,
) -> Result<()> {
    cfg.validate()?;
    let mut ch_in = 1usize;
    for (i, &ch_out) in cfg.channels.iter().enumerate() {
        let bound = 1.0 / crate::fmath::sqrt(ch_in as f64);
        store.insert(&stage_weight(i), uniform_init(rng, &[ch_in, ch_out], bound))?;
        store.insert(&stage_bias(i), Tensor::zeros([ch_out]))?;
        ch_in = ch_out;
    }
    let h = cfg.descriptor_dim;
    let bound = 1.0 / crate::fmath::sqrt(ch_in as f64);
    store.insert("encoder.proj.weight", uniform_init(rng, &[ch_in, h], bound))?;
    store.insert("encoder.proj.bias", Tensor::zeros([h]))?;
    for l in 0..cfg.gru_layers {
        gru::init_bigru_params(store, rng, &format!("encoder.gru.l{l}"), h, h / 2)?;
    }
    Ok(())
}

pub fn init_integrator_params(
    store: &mut ParameterStore,
    rng: &mut impl Rng,
    descriptor_dim: usize,
) -> Result<()> {
    gru::init_bigru_params(store, rng, "integrator.gru", descriptor_dim, descriptor_dim / 2)
}

/// Builds the encoder on a tape and returns one `[H]` row per descriptor.
pub fn encode_rows_on_tape(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParameterStore,
    cfg: &EncoderConfig,
    frames: &Tensor,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    if frames.rank() != 2 {
        return Err(CoreError::Input(format!(
            "encoder input must be rank 2, got {:?}",
            frames.shape()
        )));
    }
    let (t0, d0) = (frames.shape()[0], frames.shape()[1]);
    let x = tape.leaf(frames.clone())?;
    let mut v = tape.reshape(x, [t0, d0, 1])?;
    let (mut t, mut d, mut ch) = (t0, d0, 1usize);

    for (i, &ch_out) in cfg.channels.iter().enumerate() {
        v = tape.max_pool2(v)?;
        t = halve(t);
        d = halve(d);
        let flat = tape.reshape(v, [t * d, ch])?;
        let w = binding.bind(tape, store, &stage_weight(i))?;
        let b = binding.bind(tape, store, &stage_bias(i))?;
        let mixed = tape.matmul(flat, w)?;
        let biased = tape.add(mixed, b)?;
        let activated = tape.relu(biased)?;
        v = tape.reshape(activated, [t, d, ch_out])?;
        ch = ch_out;
    }

    let c = t * d;
    debug_assert_eq!(c, descriptor_count(t0, d0, cfg.stages));
    let flat = tape.reshape(v, [c, ch])?;
    let w = binding.bind(tape, store, "encoder.proj.weight")?;
    let b = binding.bind(tape, store, "encoder.proj.bias")?;
    let projected = tape.matmul(flat, w)?;
    let local = tape.add(projected, b)?;

    let h = cfg.descriptor_dim;
    let mut rows: Vec<Var> = (0..c)
        .map(|i| {
            let r = tape.slice(local, i, 1)?;
            tape.reshape(r, [h])
        })
        .collect::<Result<_>>()?;
    for l in 0..cfg.gru_layers {
        let p = gru::bind_bigru(tape, binding, store, &format!("encoder.gru.l{l}"))?;
        rows = gru::bigru_rows(tape, &p, &rows, h / 2)?;
    }
    Ok(rows)
}

/// Integrator on the tape: descriptor rows to one `[H]` embedding.
pub fn integrate_on_tape(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParameterStore,
    rows: &[Var],
    descriptor_dim: usize,
) -> Result<Var> {
    if rows.is_empty() {
        return Err(CoreError::Input("integrate over an empty descriptor sequence".into()));
    }
    let p = gru::bind_bigru(tape, binding, store, "integrator.gru")?;
    gru::bigru_final(tape, &p, rows, descriptor_dim / 2)
}

/// Value-level encoder: builds a scratch tape internally.
pub fn encode_frames(
    x: &FeatureSequence,
    cfg: &EncoderConfig,
    store: &ParameterStore,
) -> Result<DescriptorSequence> {
    let mut tape = Tape::new();
    let mut binding = TapeBinding::new();
    let rows = encode_rows_on_tape(&mut tape, &mut binding, store, cfg, &x.frames)?;
    let h = cfg.descriptor_dim;
    let mats: Vec<Var> = rows
        .iter()
        .map(|&r| tape.reshape(r, [1, h]))
        .collect::<Result<_>>()?;
    let stacked = tape.concat(&mats)?;
    Ok(DescriptorSequence {
        descriptors: tape.value(stacked).clone(),
    })
}

/// Value-level integrator.
pub fn integrate(d: &DescriptorSequence, store: &ParameterStore) -> Result<EmbeddingVector> {
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
    let g = integrate_on_tape(&mut tape, &mut binding, store, &rows, h)?;
    Ok(EmbeddingVector {
        values: tape.value(g).clone(),
        label: None,
    })
}
