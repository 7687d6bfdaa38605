//! Exact all-pairs cosine similarity statistics over an embedding set.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::tensor::Tensor;

/// Histogram resolution over the cosine range [-1, 1].
pub const HIST_BINS: usize = 20;

/// N embeddings with labels and stable ids, `vectors` is `[N, dim]`.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub vectors: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(vectors: Tensor, labels: Vec<usize>, ids: Vec<String>) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(CoreError::Input(format!(
                "embedding set must be [N, dim], got {:?}",
                vectors.shape()
            )));
        }
        let n = vectors.shape()[0];
        if labels.len() != n || ids.len() != n {
            return Err(CoreError::Input(format!(
                "{n} embeddings with {} labels and {} ids",
                labels.len(),
                ids.len()
            )));
        }
        vectors.assert_finite("embedding set")?;
        Ok(EmbeddingSet { vectors, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Intra-class pair statistics for one class with at least two members.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassIntraStats {
    pub class: usize,
    pub pair_count: usize,
    pub mean: f64,
    pub min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterStats {
    pub pair_count: usize,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone)]
pub struct SimilarityReport {
    /// One entry per class that has >= 2 members, ascending by class.
    pub intra: Vec<ClassIntraStats>,
    /// Classes present in the set but with a single member: no intra pairs,
    /// deliberately absent from `intra` rather than reported as zero.
    pub singleton_classes: Vec<usize>,
    /// Pooled mean over every intra-class pair, when any exist.
    pub intra_mean: Option<f64>,
    /// Cross-class statistics, when any cross-class pair exists.
    pub inter: Option<InterStats>,
    pub intra_hist: [u64; HIST_BINS],
    pub inter_hist: [u64; HIST_BINS],
}

fn bin_of(s: f64) -> usize {
    // Cosines live in [-1, 1]; 1.0 (and any rounding spill) lands in the
    // last bin.
    let idx = ((s + 1.0) / 2.0 * HIST_BINS as f64) as isize;
    idx.clamp(0, HIST_BINS as isize - 1) as usize
}

/// Deterministic exact sweep over all N(N-1)/2 pairs.
pub fn similarity_stats(set: &EmbeddingSet) -> Result<SimilarityReport> {
    let n = set.len();
    let dim = set.vectors.shape()[1];
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            let row = set.vectors.row(i);
            fmath::sqrt(row.iter().map(|v| v * v).sum())
        })
        .collect();

    let max_class = set.labels.iter().copied().max().unwrap_or(0);
    let mut class_counts = vec![0usize; max_class + 1];
    for &l in &set.labels {
        class_counts[l] += 1;
    }

    let mut per_class_sum = vec![0.0f64; max_class + 1];
    let mut per_class_min = vec![f64::INFINITY; max_class + 1];
    let mut per_class_pairs = vec![0usize; max_class + 1];
    let mut intra_sum = 0.0f64;
    let mut intra_pairs = 0usize;
    let mut inter_sum = 0.0f64;
    let mut inter_max = f64::NEG_INFINITY;
    let mut inter_pairs = 0usize;
    let mut intra_hist = [0u64; HIST_BINS];
    let mut inter_hist = [0u64; HIST_BINS];

    for i in 0..n {
        let ri = set.vectors.row(i);
        for j in (i + 1)..n {
            let rj = set.vectors.row(j);
            let dot: f64 = (0..dim).map(|k| ri[k] * rj[k]).sum();
            let s = dot / ((norms[i] + 1e-12) * (norms[j] + 1e-12));
            if set.labels[i] == set.labels[j] {
                let c = set.labels[i];
                per_class_sum[c] += s;
                per_class_pairs[c] += 1;
                if s < per_class_min[c] {
                    per_class_min[c] = s;
                }
                intra_sum += s;
                intra_pairs += 1;
                intra_hist[bin_of(s)] += 1;
            } else {
                inter_sum += s;
                inter_pairs += 1;
                if s > inter_max {
                    inter_max = s;
                }
                inter_hist[bin_of(s)] += 1;
            }
        }
    }

    let mut intra = Vec::new();
    let mut singletons = Vec::new();
    for c in 0..=max_class {
        match class_counts[c] {
            0 => {}
            1 => singletons.push(c),
            _ => intra.push(ClassIntraStats {
                class: c,
                pair_count: per_class_pairs[c],
                mean: per_class_sum[c] / per_class_pairs[c] as f64,
                min: per_class_min[c],
            }),
        }
    }

    Ok(SimilarityReport {
        intra,
        singleton_classes: singletons,
        intra_mean: (intra_pairs > 0).then(|| intra_sum / intra_pairs as f64),
        inter: (inter_pairs > 0).then(|| InterStats {
            pair_count: inter_pairs,
            mean: inter_sum / inter_pairs as f64,
            max: inter_max,
        }),
        intra_hist,
        inter_hist,
    })
}
