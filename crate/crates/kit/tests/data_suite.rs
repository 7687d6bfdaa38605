use accent_core::tensor::Tensor;
use accent_kit::data::{
    batch_assemble, generate_and_load, generate_synthetic, load_manifest, read_features,
    write_features, Split, SyntheticSpec, SPEAKERS_PER_CLASS,
};
use accent_kit::KitError;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use tempfile::TempDir;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        classes: 3,
        utterances_per_class: 10,
        frames_min: 12,
        frames_max: 24,
        feature_dim: 5,
        vocab_size: 6,
        transcript_min: 2,
        transcript_max: 4,
        noise_level: 0.1,
        seed: 11,
    }
}

fn dir_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn regeneration_is_byte_identical() {
    let spec = small_spec();
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    generate_synthetic(&spec, a.path()).unwrap();
    generate_synthetic(&spec, b.path()).unwrap();
    let fa = dir_bytes(a.path());
    let fb = dir_bytes(b.path());
    assert_eq!(fa.len(), fb.len());
    assert!(fa.len() > 30, "expected one file per utterance plus metadata");
    for (name, bytes) in &fa {
        assert_eq!(Some(bytes), fb.get(name).as_deref(), "{name} differs");
    }
}

#[test]
fn feature_file_layout_is_two_u32_then_f64_rows() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("x.bin");
    let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 4.5, -6.0]).unwrap();
    write_features(&path, &t).unwrap();

    let bytes = fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 8 + 6 * 8);
    assert_eq!(u32::from_le_bytes(bytes[0..4].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
    let first = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
    assert_eq!(first, 1.0);
    let last = f64::from_le_bytes(bytes[48..56].try_into().unwrap());
    assert_eq!(last, -6.0);

    let back = read_features(&path).unwrap();
    assert_eq!(back.shape(), &[2, 3]);
    assert_eq!(back.data(), t.data());
}

#[test]
fn read_features_rejects_short_payload() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("short.bin");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&3u32.to_le_bytes());
    bytes.extend_from_slice(&2u32.to_le_bytes());
    bytes.extend_from_slice(&1.0f64.to_le_bytes());
    fs::write(&path, bytes).unwrap();
    assert!(read_features(&path).is_err());
}

#[test]
fn splits_are_disjoint_and_class_balanced() {
    let dir = TempDir::new().unwrap();
    let ds = generate_and_load(&small_spec(), dir.path()).unwrap();

    let train = ds.split(Split::Train);
    let dev = ds.split(Split::Dev);
    assert_eq!(train.len() + dev.len(), ds.records.len());
    assert_eq!(ds.header.train_count, train.len());
    assert_eq!(ds.header.dev_count, dev.len());
    for t in &train {
        assert!(dev.iter().all(|d| d.id != t.id), "{} in both splits", t.id);
    }

    // Every class contributes the same utterance count, and the dev split
    // holds exactly the last speaker group of each class.
    let mut per_class = vec![0usize; ds.header.classes];
    for r in &ds.records {
        per_class[r.label] += 1;
    }
    assert!(per_class.iter().all(|&c| c == 10));
    let last_group = format!("s{}", SPEAKERS_PER_CLASS - 1);
    for r in &ds.records {
        let expect_dev = r.speaker.ends_with(&last_group);
        assert_eq!(r.split == Split::Dev, expect_dev, "{}", r.id);
    }
}

#[test]
fn speakers_within_a_class_differ() {
    let mut spec = small_spec();
    spec.frames_min = 16;
    spec.frames_max = 16;
    let dir = TempDir::new().unwrap();
    let ds = generate_and_load(&spec, dir.path()).unwrap();
    let c0: Vec<_> = ds.records.iter().filter(|r| r.label == 0).collect();
    let a = ds.features(c0[0]).unwrap();
    let different = c0.iter().skip(1).any(|r| {
        ds.features(r).unwrap().data() != a.data()
    });
    assert!(different, "noise 0.1 should vary utterances within a class");
}

#[test]
fn zero_noise_makes_same_length_classmates_identical() {
    let mut spec = small_spec();
    spec.noise_level = 0.0;
    spec.frames_min = 16;
    spec.frames_max = 16;
    let dir = TempDir::new().unwrap();
    let ds = generate_and_load(&spec, dir.path()).unwrap();

    for class in 0..spec.classes {
        let members: Vec<_> = ds.records.iter().filter(|r| r.label == class).collect();
        let first = ds.features(members[0]).unwrap();
        for r in &members[1..] {
            let f = ds.features(r).unwrap();
            assert_eq!(f.data(), first.data(), "{} differs from {}", r.id, members[0].id);
        }
    }

    // Transcripts still differ: they are drawn independently of the class.
    let all_same = ds
        .records
        .iter()
        .all(|r| r.transcript == ds.records[0].transcript);
    assert!(!all_same);
}

#[test]
fn mean_pooled_centroid_probe_separates_default_classes() {
    let dir = TempDir::new().unwrap();
    let ds = generate_and_load(&SyntheticSpec::default(), dir.path()).unwrap();

    let pool = |r: &accent_kit::data::UtteranceRecord| -> Vec<f64> {
        let f = ds.features(r).unwrap();
        let (t, d) = (f.shape()[0], f.shape()[1]);
        let mut m = vec![0.0; d];
        for row in 0..t {
            for col in 0..d {
                m[col] += f.data()[row * d + col];
            }
        }
        m.iter_mut().for_each(|v| *v /= t as f64);
        m
    };

    let train = ds.split(Split::Train);
    let dim = ds.header.feature_dim;
    let mut centroids = vec![vec![0.0; dim]; ds.header.classes];
    let mut counts = vec![0usize; ds.header.classes];
    for r in &train {
        let m = pool(r);
        for (c, v) in centroids[r.label].iter_mut().zip(&m) {
            *c += v;
        }
        counts[r.label] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }

    let mut correct = 0usize;
    let mut total = 0usize;
    for r in ds.split(Split::Dev) {
        let m = pool(r);
        let pred = centroids
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let da: f64 = a.1.iter().zip(&m).map(|(x, y)| (x - y) * (x - y)).sum();
                let db: f64 = b.1.iter().zip(&m).map(|(x, y)| (x - y) * (x - y)).sum();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap()
            .0;
        correct += (pred == r.label) as usize;
        total += 1;
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.9, "probe accuracy {acc} below 0.9");
}

fn patch_manifest(dir: &Path, from: &str, to: &str) {
    let path = dir.join("manifest.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.contains(from), "pattern {from:?} not found");
    fs::write(&path, text.replacen(from, to, 1)).unwrap();
}

#[test]
fn load_rejects_out_of_range_label_naming_the_record() {
    let dir = TempDir::new().unwrap();
    generate_synthetic(&small_spec(), dir.path()).unwrap();
    patch_manifest(dir.path(), "\"label\":0", "\"label\":9");
    let err = load_manifest(dir.path()).unwrap_err().to_string();
    assert!(err.contains("label 9"), "{err}");
    assert!(err.contains("c0_"), "error should name the record: {err}");
}

#[test]
fn load_rejects_out_of_vocabulary_token_naming_the_record() {
    let dir = TempDir::new().unwrap();
    generate_synthetic(&small_spec(), dir.path()).unwrap();
    let path = dir.path().join("manifest.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let patched = text.replacen("\"transcript\":[", "\"transcript\":[77,", 1);
    fs::write(&path, patched).unwrap();
    let err = load_manifest(dir.path()).unwrap_err().to_string();
    assert!(err.contains("token 77"), "{err}");
}

#[test]
fn load_rejects_duplicate_ids() {
    let dir = TempDir::new().unwrap();
    generate_synthetic(&small_spec(), dir.path()).unwrap();
    let path = dir.path().join("manifest.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let first_line = text.lines().next().unwrap();
    fs::write(&path, format!("{first_line}\n{text}")).unwrap();
    let err = load_manifest(dir.path()).unwrap_err().to_string();
    assert!(err.contains("duplicate id"), "{err}");
}

#[test]
fn load_rejects_unknown_manifest_fields() {
    let dir = TempDir::new().unwrap();
    generate_synthetic(&small_spec(), dir.path()).unwrap();
    patch_manifest(dir.path(), "\"frames\":", "\"surprise\":1,\"frames\":");
    assert!(load_manifest(dir.path()).is_err());
}

#[test]
fn empty_manifest_is_an_empty_dataset() {
    let dir = TempDir::new().unwrap();
    generate_synthetic(&small_spec(), dir.path()).unwrap();
    fs::write(dir.path().join("manifest.jsonl"), "").unwrap();
    let ds = load_manifest(dir.path()).unwrap();
    assert!(ds.records.is_empty());
}

#[test]
fn roundtrip_preserves_every_record_field() {
    let dir = TempDir::new().unwrap();
    let spec = small_spec();
    generate_synthetic(&spec, dir.path()).unwrap();
    let ds = load_manifest(dir.path()).unwrap();
    let again = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(ds.records.len(), again.records.len());
    for (a, b) in ds.records.iter().zip(&again.records) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.path, b.path);
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.dim, b.dim);
        assert_eq!(a.label, b.label);
        assert_eq!(a.transcript, b.transcript);
        assert_eq!(a.speaker, b.speaker);
        assert_eq!(a.split, b.split);
    }
}

#[test]
fn batches_pad_with_zeros_and_keep_true_lengths() {
    let dir = TempDir::new().unwrap();
    let ds = generate_and_load(&small_spec(), dir.path()).unwrap();
    let train = ds.split(Split::Train);
    let max_frames = 30;
    let batches = batch_assemble(&ds, &train, 4, max_frames, 5).unwrap();

    let total: usize = batches.iter().map(|b| b.len()).sum();
    assert_eq!(total, train.len());
    for b in &batches {
        assert_eq!(b.features.shape()[1], max_frames);
        assert_eq!(b.features.shape()[2], ds.header.feature_dim);
        for i in 0..b.len() {
            let t = b.lengths[i];
            assert!(t <= max_frames);
            let d = ds.header.feature_dim;
            let base = i * max_frames * d;
            let pad = &b.features.data()[base + t * d..base + max_frames * d];
            assert!(pad.iter().all(|&v| v == 0.0), "pad region not zero");

            let record = ds.records.iter().find(|r| r.id == b.ids[i]).unwrap();
            assert_eq!(t, record.frames.min(max_frames));
            let original = ds.features(record).unwrap();
            assert_eq!(
                b.utterance_frames(i).unwrap().data(),
                &original.data()[..t * d]
            );
        }
    }
}

#[test]
fn long_utterances_are_truncated_to_max_frames() {
    let dir = TempDir::new().unwrap();
    let mut spec = small_spec();
    spec.frames_min = 20;
    spec.frames_max = 25;
    let ds = generate_and_load(&spec, dir.path()).unwrap();
    let all: Vec<_> = ds.records.iter().collect();
    let batches = batch_assemble(&ds, &all, 8, 16, 1).unwrap();
    for b in &batches {
        assert!(b.lengths.iter().all(|&t| t == 16));
    }
}

#[test]
fn singleton_batch_keeps_three_axes() {
    let dir = TempDir::new().unwrap();
    let ds = generate_and_load(&small_spec(), dir.path()).unwrap();
    let one = vec![&ds.records[0]];
    let batches = batch_assemble(&ds, &one, 1, 40, 0).unwrap();
    assert_eq!(batches.len(), 1);
    assert_eq!(batches[0].features.shape(), &[1, 40, 5]);
}

#[test]
fn batching_rejects_empty_input() {
    let dir = TempDir::new().unwrap();
    let ds = generate_and_load(&small_spec(), dir.path()).unwrap();
    assert!(matches!(
        batch_assemble(&ds, &[], 4, 30, 0),
        Err(KitError::Data(_))
    ));
}

#[test]
fn shuffle_depends_only_on_the_seed() {
    let dir = TempDir::new().unwrap();
    let ds = generate_and_load(&small_spec(), dir.path()).unwrap();
    let train = ds.split(Split::Train);
    let a = batch_assemble(&ds, &train, 4, 30, 9).unwrap();
    let b = batch_assemble(&ds, &train, 4, 30, 9).unwrap();
    let c = batch_assemble(&ds, &train, 4, 30, 10).unwrap();
    let ids = |bs: &[accent_kit::data::Batch]| -> Vec<String> {
        bs.iter().flat_map(|b| b.ids.clone()).collect()
    };
    assert_eq!(ids(&a), ids(&b));
    assert_ne!(ids(&a), ids(&c));
}

#[test]
fn spec_validation_names_the_problem() {
    let mut s = small_spec();
    s.classes = 1;
    assert!(s.validate().unwrap_err().to_string().contains("classes"));

    let mut s = small_spec();
    s.frames_min = 30;
    s.frames_max = 10;
    assert!(s.validate().is_err());

    let mut s = small_spec();
    s.noise_level = -0.5;
    assert!(s.validate().unwrap_err().to_string().contains("noise_level"));

    let mut s = small_spec();
    s.utterances_per_class = 3;
    assert!(s.validate().is_err());
}

#[test]
fn split_parsing_accepts_only_the_two_names() {
    assert_eq!("train".parse::<Split>().unwrap(), Split::Train);
    assert_eq!("dev".parse::<Split>().unwrap(), Split::Dev);
    assert!(matches!(
        "test".parse::<Split>(),
        Err(KitError::Usage(_))
    ));
}
