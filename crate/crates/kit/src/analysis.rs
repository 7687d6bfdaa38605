//! Embedding export for external plotting and the reverse ingestion used by
//! the similarity diagnostics. The file is comma-separated with a header
//! row: id, label, then one column per coordinate. Floats are written in
//! shortest round-trip form, so import reproduces them exactly.

use crate::data::{Dataset, Split};
use crate::error::{KitError, Result};
use crate::trainer::utterance_embedding;
use accent_core::model::{utterance_nodes, ModelConfig};
use accent_core::params::TapeBinding;
use accent_core::stats::EmbeddingSet;
use accent_core::tape::Tape;
use accent_core::{ParameterStore, Tensor};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Coordinates for one record: the full embedding at `dim` 0, otherwise the
/// trained bottleneck projection, which must match `dim`.
fn coordinates(
    model: &ModelConfig,
    params: &ParameterStore,
    ds: &Dataset,
    record: &crate::data::UtteranceRecord,
    dim: usize,
    max_frames: usize,
) -> Result<Vec<f64>> {
    if dim == 0 {
        return Ok(utterance_embedding(model, params, ds, record, max_frames)?
            .data()
            .to_vec());
    }
    let full = ds.features(record)?;
    let t = record.frames.min(max_frames);
    let frames = Tensor::new(vec![t, record.dim], full.data()[..t * record.dim].to_vec())?;
    let mut tape = Tape::new();
    let mut binding = TapeBinding::new();
    let nodes = utterance_nodes(&mut tape, &mut binding, params, model, &frames)?;
    Ok(tape.value(nodes.disc_input).data().to_vec())
}

/// Writes one CSV row per utterance of the split. `dim` 0 exports the full
/// embedding; 2 or 3 export the bottleneck coordinates, and 3D rows are
/// scaled to unit length.
pub fn export_embeddings(
    model: &ModelConfig,
    params: &ParameterStore,
    ds: &Dataset,
    split: Split,
    dim: usize,
    max_frames: usize,
    out: &Path,
) -> Result<usize> {
    if !matches!(dim, 0 | 2 | 3) {
        return Err(KitError::Config(format!(
            "export dim must be 0, 2, or 3, got {dim}"
        )));
    }
    if dim != 0 && model.bottleneck != Some(dim) {
        return Err(KitError::Config(format!(
            "checkpoint has no {dim}-wide bottleneck head (bottleneck: {:?})",
            model.bottleneck
        )));
    }
    let records = ds.split(split);
    if records.is_empty() {
        return Err(KitError::Data("split has no utterances".into()));
    }

    let width = if dim == 0 {
        model.encoder.descriptor_dim
    } else {
        dim
    };
    let mut text = String::from("id,label");
    for i in 0..width {
        write!(text, ",e{i}").expect("string write");
    }
    text.push('\n');

    for r in &records {
        let mut coords = coordinates(model, params, ds, r, dim, max_frames)?;
        if dim == 3 {
            let norm: f64 = coords.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(KitError::Data(format!(
                    "record {:?}: zero-norm 3D coordinates cannot be normalized",
                    r.id
                )));
            }
            for v in &mut coords {
                *v /= norm + 1e-12;
            }
        }
        write!(text, "{},{}", r.id, r.label).expect("string write");
        for v in &coords {
            write!(text, ",{v}").expect("string write");
        }
        text.push('\n');
    }

    fs::write(out, &text).map_err(KitError::io(out))?;
    Ok(records.len())
}

/// Parses an exported embedding file back into an embedding set.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let text = fs::read_to_string(path).map_err(KitError::io(path))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| KitError::Format(format!("{}: empty file", path.display())))?;
    if !header.starts_with("id,label") {
        return Err(KitError::Format(format!(
            "{}: expected an id,label,... header row",
            path.display()
        )));
    }
    let width = header.split(',').count() - 2;

    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width + 2 {
            return Err(KitError::Format(format!(
                "{} line {}: {} fields, expected {}",
                path.display(),
                lineno + 2,
                fields.len(),
                width + 2
            )));
        }
        ids.push(fields[0].to_string());
        labels.push(fields[1].parse::<usize>().map_err(|e| {
            KitError::Format(format!("{} line {}: label: {e}", path.display(), lineno + 2))
        })?);
        for f in &fields[2..] {
            data.push(f.parse::<f64>().map_err(|e| {
                KitError::Format(format!("{} line {}: {e}", path.display(), lineno + 2))
            })?);
        }
    }
    let n = ids.len();
    Ok(EmbeddingSet::new(
        Tensor::new(vec![n, width], data)?,
        labels,
        ids,
    )?)
}

/// Collects a split's embeddings in manifest order for similarity
/// statistics.
pub fn embedding_set(
    model: &ModelConfig,
    params: &ParameterStore,
    ds: &Dataset,
    split: Split,
    max_frames: usize,
) -> Result<EmbeddingSet> {
    let records = ds.split(split);
    if records.is_empty() {
        return Err(KitError::Data("split has no utterances".into()));
    }
    let h = model.encoder.descriptor_dim;
    let mut data = Vec::with_capacity(records.len() * h);
    let mut labels = Vec::with_capacity(records.len());
    let mut ids = Vec::with_capacity(records.len());
    for r in &records {
        let emb = utterance_embedding(model, params, ds, r, max_frames)?;
        data.extend_from_slice(emb.data());
        labels.push(r.label);
        ids.push(r.id.clone());
    }
    Ok(EmbeddingSet::new(
        Tensor::new(vec![records.len(), h], data)?,
        labels,
        ids,
    )?)
}
