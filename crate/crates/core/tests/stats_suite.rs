//! All-pairs cosine statistics checked against a per-pair reference sweep.

mod common;

use accent_core::stats::{similarity_stats, EmbeddingSet, HIST_BINS};
use accent_core::tensor::Tensor;
use common::{assert_close, random_tensor, rng};
use rand::Rng;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("utt{i}")).collect()
}

#[test]
fn duplicate_vectors_have_unit_intra_similarity() {
    let vectors = Tensor::new(
        [4, 2],
        vec![
            1.0, 2.0, //
            1.0, 2.0, //
            -3.0, 0.5, //
            -3.0, 0.5,
        ],
    )
    .unwrap();
    let set = EmbeddingSet::new(vectors, vec![0, 0, 1, 1], ids(4)).unwrap();
    let rep = similarity_stats(&set).unwrap();

    assert_eq!(rep.intra.len(), 2);
    for c in &rep.intra {
        assert_eq!(c.pair_count, 1);
        assert_close(c.mean, 1.0, 1e-9, "identical pair");
        assert_close(c.min, 1.0, 1e-9, "identical pair min");
    }
    assert_close(rep.intra_mean.unwrap(), 1.0, 1e-9, "pooled");
    // Unit cosines land in the top histogram bin.
    assert_eq!(rep.intra_hist[HIST_BINS - 1], 2);
    assert_eq!(rep.intra_hist.iter().sum::<u64>(), 2);
}

#[test]
fn orthogonal_classes_have_zero_inter_similarity() {
    let vectors = Tensor::new(
        [4, 2],
        vec![
            2.0, 0.0, //
            1.0, 0.0, //
            0.0, 1.0, //
            0.0, 5.0,
        ],
    )
    .unwrap();
    let set = EmbeddingSet::new(vectors, vec![0, 0, 1, 1], ids(4)).unwrap();
    let rep = similarity_stats(&set).unwrap();
    let inter = rep.inter.unwrap();
    assert_eq!(inter.pair_count, 4);
    assert_close(inter.mean, 0.0, 1e-9, "orthogonal mean");
    assert_close(inter.max, 0.0, 1e-9, "orthogonal max");
}

#[test]
fn matches_per_pair_reference_on_random_set() {
    let mut r = rng(401);
    let (n, dim, classes) = (50usize, 6usize, 4usize);
    let vectors = random_tensor(&mut r, &[n, dim], -1.0, 1.0);
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
    let set = EmbeddingSet::new(vectors.clone(), labels.clone(), ids(n)).unwrap();
    let rep = similarity_stats(&set).unwrap();

    // Reference: independent accumulation over explicit index pairs.
    let cos = |i: usize, j: usize| {
        let (ri, rj) = (vectors.row(i), vectors.row(j));
        let dot: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
        let ni: f64 = ri.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nj: f64 = rj.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / ((ni + 1e-12) * (nj + 1e-12))
    };
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i] == labels[j] {
                intra.push(cos(i, j));
            } else {
                inter.push(cos(i, j));
            }
        }
    }

    assert_eq!(
        rep.intra.iter().map(|c| c.pair_count).sum::<usize>(),
        intra.len()
    );
    assert_close(
        rep.intra_mean.unwrap(),
        intra.iter().sum::<f64>() / intra.len() as f64,
        1e-12,
        "pooled intra mean",
    );
    let got_inter = rep.inter.unwrap();
    assert_eq!(got_inter.pair_count, inter.len());
    assert_close(
        got_inter.mean,
        inter.iter().sum::<f64>() / inter.len() as f64,
        1e-12,
        "inter mean",
    );
    assert_close(
        got_inter.max,
        inter.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        1e-15,
        "inter max",
    );
    assert_eq!(rep.intra_hist.iter().sum::<u64>() as usize, intra.len());
    assert_eq!(rep.inter_hist.iter().sum::<u64>() as usize, inter.len());

    // Per-class means against the same reference.
    for c in &rep.intra {
        let vals: Vec<f64> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .filter(|&(i, j)| labels[i] == c.class && labels[j] == c.class)
            .map(|(i, j)| cos(i, j))
            .collect();
        assert_eq!(c.pair_count, vals.len());
        assert_close(
            c.mean,
            vals.iter().sum::<f64>() / vals.len() as f64,
            1e-12,
            "class mean",
        );
        assert_close(
            c.min,
            vals.iter().cloned().fold(f64::INFINITY, f64::min),
            1e-15,
            "class min",
        );
    }
}

#[test]
fn positive_scaling_leaves_cosines_unchanged() {
    let mut r = rng(409);
    let n = 12;
    let vectors = random_tensor(&mut r, &[n, 4], -1.0, 1.0);
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let base = similarity_stats(&EmbeddingSet::new(vectors.clone(), labels.clone(), ids(n)).unwrap())
        .unwrap();
    let scaled = similarity_stats(
        &EmbeddingSet::new(vectors.map(|v| 5.0 * v), labels, ids(n)).unwrap(),
    )
    .unwrap();
    assert_close(
        base.intra_mean.unwrap(),
        scaled.intra_mean.unwrap(),
        1e-9,
        "intra mean",
    );
    assert_close(
        base.inter.unwrap().mean,
        scaled.inter.unwrap().mean,
        1e-9,
        "inter mean",
    );
}

#[test]
fn singletons_are_reported_not_averaged() {
    let vectors = Tensor::new([3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    // Labels 0, 0, 3: class 3 is a singleton; labels 1 and 2 never occur.
    let set = EmbeddingSet::new(vectors, vec![0, 0, 3], ids(3)).unwrap();
    let rep = similarity_stats(&set).unwrap();
    assert_eq!(rep.intra.len(), 1);
    assert_eq!(rep.intra[0].class, 0);
    assert_eq!(rep.singleton_classes, vec![3]);
}

#[test]
fn single_class_set_has_no_inter_stats() {
    let mut r = rng(419);
    let vectors = random_tensor(&mut r, &[5, 3], -1.0, 1.0);
    let set = EmbeddingSet::new(vectors, vec![2; 5], ids(5)).unwrap();
    let rep = similarity_stats(&set).unwrap();
    assert!(rep.inter.is_none());
    assert!(rep.intra_mean.is_some());
}

#[test]
fn all_distinct_labels_have_no_intra_stats() {
    let mut r = rng(421);
    let vectors = random_tensor(&mut r, &[4, 3], -1.0, 1.0);
    let set = EmbeddingSet::new(vectors, vec![0, 1, 2, 3], ids(4)).unwrap();
    let rep = similarity_stats(&set).unwrap();
    assert!(rep.intra.is_empty());
    assert!(rep.intra_mean.is_none());
    assert_eq!(rep.singleton_classes, vec![0, 1, 2, 3]);
    assert_eq!(rep.inter.unwrap().pair_count, 6);
}

#[test]
fn construction_guards() {
    let v = Tensor::ones([3, 2]);
    assert!(EmbeddingSet::new(v.clone(), vec![0, 1], ids(3)).is_err());
    assert!(EmbeddingSet::new(v.clone(), vec![0, 1, 2], ids(2)).is_err());
    assert!(EmbeddingSet::new(Tensor::ones([4]), vec![0], ids(1)).is_err());
    let nan = Tensor::new([1, 2], vec![f64::NAN, 0.0]).unwrap();
    assert!(EmbeddingSet::new(nan, vec![0], ids(1)).is_err());
}
