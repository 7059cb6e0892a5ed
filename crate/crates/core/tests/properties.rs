use std::collections::HashSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use umeta::data::{split_dataset, synth_mixture, Representation, Split, SplitSpec, SynthSpec, Whitening};
use umeta::linalg::Mat;
use umeta::partition::{
    generate_partitions, partition_from_labels, partition_from_text, partition_to_text, KMeansInit, KMeansOptions, Partition,
    Provenance, ScalingMode,
};
use umeta::seed;
use umeta::taskgen::{sample_supervised_task, sample_task_from_partition, EpisodeShape};

fn dataset(classes: usize, per_class: usize, seed: u64) -> umeta::data::DataSet {
    synth_mixture(&SynthSpec::new(classes, per_class, 6, 3, 0.3, seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_are_valid(way in 2usize..6, shots in 1usize..4, queries in 1usize..4, s in any::<u64>()) {
        let ds = dataset(6, 10, s % 7);
        let shape = EpisodeShape::new(way, shots, queries).unwrap();
        let parts = generate_partitions(&ds, 1, 6, s, ScalingMode::Random, &KMeansOptions::default()).unwrap();
        let mut rng = seed::rng(s);
        if let Ok(task) = sample_task_from_partition(&parts[0], &ds, shape, Representation::Raw, &mut rng) {
            task.validate(&ds, Some(Split::MetaTrain)).unwrap();
            let assignment = parts[0].assignment();
            for (r, &i) in task.train_idx.iter().enumerate() {
                prop_assert_eq!(assignment[i], task.sources[r / shots]);
            }
            for (r, &i) in task.query_idx.iter().enumerate() {
                prop_assert_eq!(assignment[i], task.sources[r / queries]);
            }
        }
        let task = sample_supervised_task(&ds, Split::MetaTrain, shape, Representation::Embedding, &mut rng).unwrap();
        task.validate(&ds, Some(Split::MetaTrain)).unwrap();
        let labels = ds.labels().unwrap();
        for (r, &i) in task.train_idx.iter().enumerate() {
            prop_assert_eq!(labels[i] as i64, task.sources[r / shots]);
        }
    }

    #[test]
    fn fraction_splits_are_disjoint_and_complete(n in 3usize..200, a in 0.0f64..1.0, b in 0.0f64..1.0, s in any::<u64>()) {
        let (train, val) = (a, (1.0 - a) * b);
        let raw = Mat::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        let ds = umeta::data::DataSet::new(raw, None, None, None).unwrap();
        let out = split_dataset(&ds, &SplitSpec::ByFraction { train, val, test: 1.0 - train - val }, &mut seed::rng(s)).unwrap();
        let mut all: Vec<usize> = Split::ALL.iter().flat_map(|&sp| out.rows_in(sp)).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(out.rows_in(Split::MetaTrain).len(), (train * n as f64).round() as usize);
    }

    #[test]
    fn class_splits_keep_classes_whole(classes in 3usize..9, s in any::<u64>()) {
        let ds = dataset(classes, 4, s);
        let mut order: Vec<usize> = (0..classes).collect();
        order.shuffle(&mut seed::rng(s));
        let spec = SplitSpec::ByClass { train: order[..1].to_vec(), val: order[1..2].to_vec(), test: order[2..].to_vec() };
        let out = split_dataset(&ds, &spec, &mut seed::rng(s)).unwrap();
        let labels = out.labels().unwrap();
        let seen: Vec<HashSet<usize>> = Split::ALL.iter().map(|&sp| out.rows_in(sp).iter().map(|&i| labels[i]).collect()).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                prop_assert!(seen[i].is_disjoint(&seen[j]));
            }
        }
    }

    #[test]
    fn whitening_ignores_row_order(n in 8usize..40, s in any::<u64>()) {
        let ds = dataset(2, n / 2, s);
        let x = ds.raw();
        let mut order: Vec<usize> = (0..x.rows()).collect();
        order.shuffle(&mut seed::rng(s ^ 1));
        let a = Whitening::fit(x, 3).unwrap().transform(x).unwrap();
        let b = Whitening::fit(&x.select_rows(&order), 3).unwrap().transform(x).unwrap();
        // Eigenvector signs are only defined up to a flip per component.
        for j in 0..3 {
            let dot: f64 = (0..x.rows()).map(|i| a[(i, j)] * b[(i, j)]).sum();
            let sign = dot.signum();
            for i in 0..x.rows() {
                prop_assert!((a[(i, j)] - sign * b[(i, j)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn partitions_validate_and_round_trip(codes in prop::collection::vec(-1i64..6, 1..60)) {
        let p = Partition::from_assignment(&codes, Provenance::Random);
        p.validate().unwrap();
        let covered: usize = p.clusters().iter().map(Vec::len).sum();
        prop_assert_eq!(covered, codes.iter().filter(|&&c| c >= 0).count());
        let back = partition_from_text(&partition_to_text(&p, &[])).unwrap();
        prop_assert_eq!(back.assignment(), p.assignment());
        prop_assert_eq!(back.clusters(), p.clusters());
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn kmeans_recovers_generating_components() {
    let classes = 5;
    let mut spec = SynthSpec::new(classes, 40, 10, 4, 0.01, 8);
    spec.emb_noise = 0.01;
    let ds = synth_mixture(&spec).unwrap();
    let opts = KMeansOptions { init: KMeansInit::PlusPlus, ..KMeansOptions::default() };
    let p = generate_partitions(&ds, 1, classes, 3, ScalingMode::Ones, &opts).unwrap().remove(0);
    let labels = ds.labels().unwrap();
    let best = permutations(classes)
        .iter()
        .map(|perm| (0..ds.len()).filter(|&i| perm[p.assignment()[i] as usize] == labels[i]).count())
        .max()
        .unwrap();
    let accuracy = best as f64 / ds.len() as f64;
    assert!(accuracy >= 0.99, "pairing accuracy {accuracy}");
    assert_eq!(partition_from_labels(&ds, Split::MetaTrain).unwrap().num_clusters(), classes);
}
