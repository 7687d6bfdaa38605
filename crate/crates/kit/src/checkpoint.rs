//! Checkpoint container: magic bytes, a format version, a JSON header that
//! carries the model configuration plus a (name, shape, offset) manifest,
//! and one raw little-endian f64 payload. Offsets are byte positions into
//! the payload, which starts immediately after the header.

use crate::error::{KitError, Result};
use accent_core::ctc::Vocabulary;
use accent_core::encoder::EncoderConfig;
use accent_core::loss::{MarginConfig, MarginKind};
use accent_core::model::ModelConfig;
use accent_core::optim::AdamState;
use accent_core::{ParameterStore, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"ACNTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub dev_accuracy: f64,
}

/// Optimizer state captured alongside the parameters, so a run can resume
/// mid-trajectory bit-exactly.
#[derive(Debug, Clone)]
pub struct AdamSnapshot {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamSnapshot {
    pub fn capture(state: &AdamState) -> Self {
        AdamSnapshot {
            step: state.step_count(),
            moments: state
                .moments()
                .map(|(name, m, v)| (name.to_string(), (m.clone(), v.clone())))
                .collect(),
        }
    }

    pub fn restore(&self, params: &ParameterStore) -> Result<AdamState> {
        Ok(AdamState::from_parts(
            params,
            self.step,
            self.moments.clone(),
        )?)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParameterStore,
    pub adam: Option<AdamSnapshot>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct EncoderJson {
    stages: usize,
    channels: Vec<usize>,
    descriptor_dim: usize,
    gru_layers: usize,
}

#[derive(Serialize, Deserialize)]
struct MarginJson {
    kind: String,
    scale: f64,
    margin: f64,
    unscaled_negatives: bool,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct AdamEntry {
    name: String,
    offset_m: u64,
    offset_v: u64,
}

#[derive(Serialize, Deserialize)]
struct AdamJson {
    step: u64,
    entries: Vec<AdamEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderJson {
    encoder: EncoderJson,
    classes: usize,
    vocab: Vec<String>,
    margin: MarginJson,
    bottleneck: Option<usize>,
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
    adam: Option<AdamJson>,
}

fn tensor_bytes(t: &Tensor, out: &mut Vec<u8>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn tensor_from_bytes(shape: Vec<usize>, payload: &[u8], offset: u64) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    let start = offset as usize;
    let end = start + numel * 8;
    if end > payload.len() {
        return Err(KitError::Format(format!(
            "tensor at offset {offset} with shape {shape:?} runs past the payload"
        )));
    }
    let data: Vec<f64> = payload[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        let mut names: Vec<&str> = self.params.names();
        names.sort_unstable();
        for name in &names {
            let t = self.params.get(name)?;
            entries.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            tensor_bytes(t, &mut payload);
        }

        let adam = match &self.adam {
            None => None,
            Some(snap) => {
                let mut adam_entries = Vec::new();
                for (name, (m, v)) in &snap.moments {
                    let offset_m = payload.len() as u64;
                    tensor_bytes(m, &mut payload);
                    let offset_v = payload.len() as u64;
                    tensor_bytes(v, &mut payload);
                    adam_entries.push(AdamEntry {
                        name: name.clone(),
                        offset_m,
                        offset_v,
                    });
                }
                Some(AdamJson {
                    step: snap.step,
                    entries: adam_entries,
                })
            }
        };

        let header = HeaderJson {
            encoder: EncoderJson {
                stages: self.model.encoder.stages,
                channels: self.model.encoder.channels.clone(),
                descriptor_dim: self.model.encoder.descriptor_dim,
                gru_layers: self.model.encoder.gru_layers,
            },
            classes: self.model.classes,
            vocab: (0..self.model.vocab.size())
                .map(|i| self.model.vocab.token(i).expect("in range").to_string())
                .collect(),
            margin: MarginJson {
                kind: self.model.margin.kind.as_str().to_string(),
                scale: self.model.margin.scale,
                margin: self.model.margin.margin,
                unscaled_negatives: self.model.margin.unscaled_negatives,
            },
            bottleneck: self.model.bottleneck,
            meta: self.meta,
            params: entries,
            adam,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| KitError::Format(format!("checkpoint header: {e}")))?;

        let mut bytes =
            Vec::with_capacity(16 + header_bytes.len() + payload.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header_bytes);
        bytes.extend_from_slice(&payload);
        fs::write(path, bytes).map_err(KitError::io(path))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(KitError::io(path))?;
        if bytes.len() < 16 {
            return Err(KitError::Format(format!(
                "{}: too short for a checkpoint",
                path.display()
            )));
        }
        if &bytes[0..8] != MAGIC {
            return Err(KitError::Format(format!(
                "{}: bad magic, not a checkpoint",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(KitError::Format(format!(
                "{}: unrecognized checkpoint version {version}",
                path.display()
            )));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if 16 + header_len > bytes.len() {
            return Err(KitError::Format(format!(
                "{}: header length {header_len} runs past the file",
                path.display()
            )));
        }
        let header: HeaderJson = serde_json::from_slice(&bytes[16..16 + header_len])
            .map_err(|e| KitError::Format(format!("{}: header: {e}", path.display())))?;
        let payload = &bytes[16 + header_len..];

        let kind: MarginKind = header
            .margin
            .kind
            .parse()
            .map_err(|e: accent_core::CoreError| KitError::Format(e.to_string()))?;
        let model = ModelConfig {
            encoder: EncoderConfig {
                stages: header.encoder.stages,
                channels: header.encoder.channels,
                descriptor_dim: header.encoder.descriptor_dim,
                gru_layers: header.encoder.gru_layers,
            },
            classes: header.classes,
            vocab: Vocabulary::new(header.vocab)?,
            margin: MarginConfig {
                kind,
                scale: header.margin.scale,
                margin: header.margin.margin,
                unscaled_negatives: header.margin.unscaled_negatives,
            },
            bottleneck: header.bottleneck,
        };

        let mut params = ParameterStore::new();
        for entry in &header.params {
            if params.contains(&entry.name) {
                return Err(KitError::Format(format!(
                    "{}: parameter {:?} appears twice",
                    path.display(),
                    entry.name
                )));
            }
            let t = tensor_from_bytes(entry.shape.clone(), payload, entry.offset)?;
            params.insert(&entry.name, t)?;
        }

        // The model must be able to name exactly these parameters.
        let expected = accent_core::model::init_params(&model, 0)?;
        let mut want: Vec<&str> = expected.names();
        let mut have: Vec<&str> = params.names();
        want.sort_unstable();
        have.sort_unstable();
        if want != have {
            return Err(KitError::Format(format!(
                "{}: parameter set does not match the declared model",
                path.display()
            )));
        }
        for name in &want {
            if params.get(name)?.shape() != expected.get(name)?.shape() {
                return Err(KitError::Format(format!(
                    "{}: parameter {name:?} has the wrong shape for the declared model",
                    path.display()
                )));
            }
        }

        let adam = match header.adam {
            None => None,
            Some(a) => {
                let mut moments = BTreeMap::new();
                for entry in a.entries {
                    let shape = params.get(&entry.name)?.shape().to_vec();
                    let m = tensor_from_bytes(shape.clone(), payload, entry.offset_m)?;
                    let v = tensor_from_bytes(shape, payload, entry.offset_v)?;
                    moments.insert(entry.name, (m, v));
                }
                Some(AdamSnapshot {
                    step: a.step,
                    moments,
                })
            }
        };

        Ok(Checkpoint {
            model,
            params,
            adam,
            meta: header.meta,
        })
    }
}
