//! Synthetic accent-like corpus generation and manifest ingestion.
//!
//! A corpus directory holds `manifest.jsonl` (one utterance record per
//! line), `header.json` (label and vocabulary tables), and a `features/`
//! subdirectory of per-utterance binaries: two little-endian u32 words
//! (frame count, feature dim) followed by row-major little-endian f64
//! frames.

use crate::error::{KitError, Result};
use accent_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

/// Utterances of one class are dealt round-robin onto this many speaker
/// groups; the last group of every class forms the dev split.
pub const SPEAKERS_PER_CLASS: usize = 5;

/// Sinusoid components per class signature.
const COMPONENTS: usize = 3;

/// Frame index is divided by this before entering the sinusoids, so
/// component frequencies are cycles per 64 frames.
const FRAME_SCALE: f64 = 64.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub utterances_per_class: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub transcript_min: usize,
    pub transcript_max: usize,
    /// Scales every stochastic part of the generator: per-frame Gaussian
    /// noise, per-speaker phase offsets, and per-speaker amplitude jitter.
    /// At zero, utterances of one class with equal frame counts are
    /// identical.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            utterances_per_class: 40,
            frames_min: 48,
            frames_max: 120,
            feature_dim: 20,
            vocab_size: 16,
            transcript_min: 3,
            transcript_max: 10,
            noise_level: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(KitError::Config(format!(
                "classes must be >= 2, got {}",
                self.classes
            )));
        }
        if self.utterances_per_class < SPEAKERS_PER_CLASS {
            return Err(KitError::Config(format!(
                "utterances_per_class must cover the {SPEAKERS_PER_CLASS} speaker groups, got {}",
                self.utterances_per_class
            )));
        }
        if self.frames_min < 1 || self.frames_min > self.frames_max {
            return Err(KitError::Config(format!(
                "frame range [{}, {}] is empty or zero",
                self.frames_min, self.frames_max
            )));
        }
        if self.feature_dim < 1 {
            return Err(KitError::Config("feature_dim must be >= 1".into()));
        }
        if self.vocab_size < 1 {
            return Err(KitError::Config("vocab_size must be >= 1".into()));
        }
        if self.transcript_min < 1 || self.transcript_min > self.transcript_max {
            return Err(KitError::Config(format!(
                "transcript length range [{}, {}] is empty or zero",
                self.transcript_min, self.transcript_max
            )));
        }
        if !(self.noise_level >= 0.0) {
            return Err(KitError::Config(format!(
                "noise_level must be >= 0, got {}",
                self.noise_level
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

impl std::str::FromStr for Split {
    type Err = KitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            other => Err(KitError::Usage(format!(
                "unknown split {other:?}, expected train or dev"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub path: String,
    pub frames: usize,
    pub dim: usize,
    pub label: usize,
    pub transcript: Vec<usize>,
    pub speaker: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub classes: usize,
    pub label_names: Vec<String>,
    pub vocab: Vec<String>,
    pub feature_dim: usize,
    pub train_count: usize,
    pub dev_count: usize,
    pub seed: u64,
}

/// A loaded manifest. Feature payloads stay on disk until asked for.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub header: CorpusHeader,
    pub records: Vec<UtteranceRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&UtteranceRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn features(&self, record: &UtteranceRecord) -> Result<Tensor> {
        let t = read_features(&self.root.join(&record.path))?;
        if t.shape() != [record.frames, record.dim] {
            return Err(KitError::Data(format!(
                "record {:?}: feature file shape {:?} does not match manifest ({} x {})",
                record.id,
                t.shape(),
                record.frames,
                record.dim
            )));
        }
        Ok(t)
    }
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let t = features.shape()[0] as u32;
    let d = features.shape()[1] as u32;
    let mut bytes = Vec::with_capacity(8 + features.numel() * 8);
    bytes.extend_from_slice(&t.to_le_bytes());
    bytes.extend_from_slice(&d.to_le_bytes());
    for v in features.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(KitError::io(path))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut file = fs::File::open(path).map_err(KitError::io(path))?;
    let mut head = [0u8; 8];
    file.read_exact(&mut head).map_err(KitError::io(path))?;
    let t = u32::from_le_bytes(head[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(KitError::io(path))?;
    if payload.len() != t * d * 8 {
        return Err(KitError::Format(format!(
            "{}: payload holds {} bytes, header promises {} frames x {} dims",
            path.display(),
            payload.len(),
            t,
            d
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(vec![t, d], data)?)
}

/// One class's signature: amplitude pattern, frequency, and phase per
/// sinusoid component.
struct ClassSignature {
    freq: [f64; COMPONENTS],
    phase: [f64; COMPONENTS],
    amp: Vec<[f64; COMPONENTS]>,
}

/// Per-speaker deviations, applied scaled by the noise level.
struct SpeakerJitter {
    phase: [f64; COMPONENTS],
    amp: [f64; COMPONENTS],
}

/// Generates the corpus into `out`. Same spec, same bytes.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<CorpusHeader> {
    spec.validate()?;
    let feature_dir = out.join("features");
    fs::create_dir_all(&feature_dir).map_err(KitError::io(&feature_dir))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // All class signatures are drawn before any utterance so that the
    // stream position of utterance draws does not depend on class count
    // internals changing later.
    let signatures: Vec<ClassSignature> = (0..spec.classes)
        .map(|_| {
            let mut freq = [0.0; COMPONENTS];
            let mut phase = [0.0; COMPONENTS];
            for j in 0..COMPONENTS {
                freq[j] = rng.gen_range(0.5..8.0);
                phase[j] = rng.gen_range(0.0..TAU);
            }
            let amp = (0..spec.feature_dim)
                .map(|_| {
                    let mut a = [0.0; COMPONENTS];
                    for slot in &mut a {
                        *slot = rng.gen_range(-1.0..1.0);
                    }
                    a
                })
                .collect();
            ClassSignature { freq, phase, amp }
        })
        .collect();

    let jitters: Vec<Vec<SpeakerJitter>> = (0..spec.classes)
        .map(|_| {
            (0..SPEAKERS_PER_CLASS)
                .map(|_| {
                    let mut phase = [0.0; COMPONENTS];
                    let mut amp = [0.0; COMPONENTS];
                    for j in 0..COMPONENTS {
                        phase[j] = rng.gen_range(-1.5..1.5);
                        amp[j] = rng.gen_range(-0.5..0.5);
                    }
                    SpeakerJitter { phase, amp }
                })
                .collect()
        })
        .collect();

    let mut records = Vec::new();
    for class in 0..spec.classes {
        let sig = &signatures[class];
        for utt in 0..spec.utterances_per_class {
            let speaker = utt % SPEAKERS_PER_CLASS;
            let jit = &jitters[class][speaker];
            let split = if speaker == SPEAKERS_PER_CLASS - 1 {
                Split::Dev
            } else {
                Split::Train
            };

            let t = rng.gen_range(spec.frames_min..=spec.frames_max);
            let len = rng.gen_range(spec.transcript_min..=spec.transcript_max);
            let transcript: Vec<usize> =
                (0..len).map(|_| rng.gen_range(0..spec.vocab_size)).collect();

            let mut data = vec![0.0; t * spec.feature_dim];
            for ti in 0..t {
                let arg = ti as f64 / FRAME_SCALE;
                let mut waves = [0.0; COMPONENTS];
                for j in 0..COMPONENTS {
                    let ph = sig.phase[j] + spec.noise_level * jit.phase[j];
                    waves[j] = 1.0 + (TAU * sig.freq[j] * arg + ph).sin();
                }
                for d in 0..spec.feature_dim {
                    let mut v = 0.0;
                    for j in 0..COMPONENTS {
                        let a = sig.amp[d][j] * (1.0 + spec.noise_level * jit.amp[j]);
                        v += a * waves[j];
                    }
                    v += spec.noise_level * normal.sample(&mut rng);
                    data[ti * spec.feature_dim + d] = v;
                }
            }

            let id = format!("c{class}_s{speaker}_u{utt:04}");
            let rel = format!("features/{id}.bin");
            let features = Tensor::new(vec![t, spec.feature_dim], data)?;
            write_features(&out.join(&rel), &features)?;
            records.push(UtteranceRecord {
                id,
                path: rel,
                frames: t,
                dim: spec.feature_dim,
                label: class,
                transcript,
                speaker: format!("c{class}_s{speaker}"),
                split,
            });
        }
    }

    let header = CorpusHeader {
        classes: spec.classes,
        label_names: (0..spec.classes).map(|c| format!("accent{c}")).collect(),
        vocab: (0..spec.vocab_size).map(|v| format!("tok{v:02}")).collect(),
        feature_dim: spec.feature_dim,
        train_count: records.iter().filter(|r| r.split == Split::Train).count(),
        dev_count: records.iter().filter(|r| r.split == Split::Dev).count(),
        seed: spec.seed,
    };

    let manifest_path = out.join("manifest.jsonl");
    let mut manifest = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut manifest, r)
            .map_err(|e| KitError::Format(format!("manifest record {:?}: {e}", r.id)))?;
        manifest.push(b'\n');
    }
    fs::write(&manifest_path, manifest).map_err(KitError::io(&manifest_path))?;

    let header_path = out.join("header.json");
    let mut header_bytes = serde_json::to_vec_pretty(&header)
        .map_err(|e| KitError::Format(format!("header: {e}")))?;
    header_bytes.push(b'\n');
    fs::write(&header_path, header_bytes).map_err(KitError::io(&header_path))?;

    Ok(header)
}

/// Reads and validates `manifest.jsonl` plus its sibling `header.json`.
/// Accepts either the manifest path or the corpus directory.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let path = if path.is_dir() {
        path.join("manifest.jsonl")
    } else {
        path.to_path_buf()
    };
    let path = path.as_path();
    let root = path
        .parent()
        .ok_or_else(|| KitError::Data(format!("{}: no parent directory", path.display())))?
        .to_path_buf();

    let header_path = root.join("header.json");
    let header_text = fs::read_to_string(&header_path).map_err(KitError::io(&header_path))?;
    let header: CorpusHeader = serde_json::from_str(&header_text)
        .map_err(|e| KitError::Format(format!("{}: {e}", header_path.display())))?;
    if header.label_names.len() != header.classes {
        return Err(KitError::Format(format!(
            "{}: {} label names for {} classes",
            header_path.display(),
            header.label_names.len(),
            header.classes
        )));
    }

    let text = fs::read_to_string(path).map_err(KitError::io(path))?;
    let mut records = Vec::new();
    let mut ids = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: UtteranceRecord = serde_json::from_str(line).map_err(|e| {
            KitError::Format(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        if r.frames < 1 || r.dim < 1 {
            return Err(KitError::Data(format!(
                "record {:?}: frames and dim must be >= 1",
                r.id
            )));
        }
        if r.dim != header.feature_dim {
            return Err(KitError::Data(format!(
                "record {:?}: dim {} does not match corpus feature_dim {}",
                r.id, r.dim, header.feature_dim
            )));
        }
        if r.label >= header.classes {
            return Err(KitError::Data(format!(
                "record {:?}: label {} out of range for {} classes",
                r.id, r.label, header.classes
            )));
        }
        if let Some(&tok) = r.transcript.iter().find(|&&t| t >= header.vocab.len()) {
            return Err(KitError::Data(format!(
                "record {:?}: transcript token {} out of range for vocabulary of {}",
                r.id,
                tok,
                header.vocab.len()
            )));
        }
        if !ids.insert(r.id.clone()) {
            return Err(KitError::Data(format!("record {:?}: duplicate id", r.id)));
        }
        records.push(r);
    }

    Ok(Dataset {
        root,
        header,
        records,
    })
}

/// One assembled batch. Features are zero-padded (or truncated) to a common
/// frame count; `lengths` keeps each utterance's true frame count so
/// descriptor arithmetic can use it.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Tensor,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    pub transcripts: Vec<Vec<usize>>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// The unpadded `[T, D]` frames of utterance `i`.
    pub fn utterance_frames(&self, i: usize) -> Result<Tensor> {
        let d = self.features.shape()[2];
        let max = self.features.shape()[1];
        let t = self.lengths[i];
        let start = i * max * d;
        let data = self.features.data()[start..start + t * d].to_vec();
        Ok(Tensor::new(vec![t, d], data)?)
    }
}

/// Shuffles the records with the given seed and groups them in that order.
/// Every batch's features are padded to `max_frames`; longer utterances are
/// truncated to it.
pub fn batch_assemble(
    ds: &Dataset,
    records: &[&UtteranceRecord],
    batch_size: usize,
    max_frames: usize,
    shuffle_seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(KitError::Config("batch_size must be >= 1".into()));
    }
    if max_frames < 1 {
        return Err(KitError::Config("max_frames must be >= 1".into()));
    }
    if records.is_empty() {
        return Err(KitError::Data("no records to batch".into()));
    }

    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    // Fisher-Yates so the permutation depends only on the seed, not on any
    // hash iteration order.
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let d = ds.header.feature_dim;
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let b = chunk.len();
        let mut data = vec![0.0; b * max_frames * d];
        let mut lengths = Vec::with_capacity(b);
        let mut labels = Vec::with_capacity(b);
        let mut transcripts = Vec::with_capacity(b);
        let mut ids = Vec::with_capacity(b);
        for (slot, &idx) in chunk.iter().enumerate() {
            let record = records[idx];
            let full = ds.features(record)?;
            let t = record.frames.min(max_frames);
            let src = &full.data()[..t * d];
            data[slot * max_frames * d..slot * max_frames * d + t * d].copy_from_slice(src);
            lengths.push(t);
            labels.push(record.label);
            transcripts.push(record.transcript.clone());
            ids.push(record.id.clone());
        }
        batches.push(Batch {
            features: Tensor::new(vec![b, max_frames, d], data)?,
            lengths,
            labels,
            transcripts,
            ids,
        });
    }
    Ok(batches)
}

/// Writes generation output and returns the loaded dataset in one step.
pub fn generate_and_load(spec: &SyntheticSpec, out: &Path) -> Result<Dataset> {
    generate_synthetic(spec, out)?;
    load_manifest(&out.join("manifest.jsonl"))
}
