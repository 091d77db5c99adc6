//! Checks against independently written reference computations.

use std::collections::BTreeSet;

use itertools::Itertools;
use offshelf_core::backend::CountingReader;
use offshelf_core::{
    kmeans, make_nc_scenario, predict, predict_task_aware, run_training, synth_gaussian,
    BankOptions, Classifier, ClassifierOptions, Embedding, KMeansParams, LabeledEmbedding,
    MemoryBank, Metric, RunConfig, SynthParams, SynthSplit,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive nearest-prototype scan over `(class, vector)` pairs.
/// Ties resolve to the smallest class id.
fn oracle_predict(protos: &[(u32, Vec<f32>)], query: &[f32], metric: Metric) -> u32 {
    let score = |p: &[f32]| -> f64 {
        match metric {
            Metric::L2 => {
                let mut acc = 0.0f64;
                for i in 0..p.len() {
                    let d = query[i] as f64 - p[i] as f64;
                    acc += d * d;
                }
                acc.sqrt()
            }
            Metric::Cosine => {
                let (mut dot, mut qq, mut pp) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..p.len() {
                    dot += query[i] as f64 * p[i] as f64;
                }
                for i in 0..p.len() {
                    qq += query[i] as f64 * query[i] as f64;
                    pp += p[i] as f64 * p[i] as f64;
                }
                (dot / (qq.sqrt() * pp.sqrt())).clamp(-1.0, 1.0)
            }
        }
    };
    let mut best_class = u32::MAX;
    let mut best = match metric {
        Metric::L2 => f64::INFINITY,
        Metric::Cosine => f64::NEG_INFINITY,
    };
    for (c, p) in protos {
        let s = score(p);
        let wins = match metric {
            Metric::L2 => s < best || (s == best && *c < best_class),
            Metric::Cosine => s > best || (s == best && *c < best_class),
        };
        if wins {
            best = s;
            best_class = *c;
        }
    }
    best_class
}

fn random_vec(rng: &mut ChaCha8Rng, dim: usize, grid: bool) -> Vec<f32> {
    (0..dim)
        .map(|_| {
            if grid {
                // small integer grid forces frequent exact ties
                rng.gen_range(-2i32..=2) as f32
            } else {
                rng.gen_range(-10.0f32..10.0)
            }
        })
        .collect()
}

#[test]
fn classifier_agrees_with_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1A5);
    let mut ties_seen = 0;
    for round in 0..100 {
        let grid = round % 2 == 0;
        let dim = rng.gen_range(1..6);
        let n = rng.gen_range(1..12);
        let mut ids: Vec<u32> = (0..40).collect();
        ids.shuffle(&mut rng);
        let mut protos = Vec::new();
        let mut bank = MemoryBank::default();
        for &c in &ids[..n] {
            let mut v = random_vec(&mut rng, dim, grid);
            if grid && v.iter().all(|&x| x == 0.0) {
                v[0] = 1.0;
            }
            bank.observe_class_group(c, &[Embedding::new(v.clone()).unwrap()])
                .unwrap();
            protos.push((c, v));
        }
        for _ in 0..100 {
            let mut q = random_vec(&mut rng, dim, grid);
            if q.iter().all(|&x| x == 0.0) {
                q[0] = -1.0;
            }
            let query = Embedding::new(q.clone()).unwrap();
            for metric in [Metric::L2, Metric::Cosine] {
                let got = predict(&bank, &query, metric).unwrap();
                assert_eq!(got.predicted_class, oracle_predict(&protos, &q, metric));
                if got.margin == 0.0 && got.runner_up_class.is_some() {
                    ties_seen += 1;
                }
            }
        }
    }
    assert!(ties_seen > 0, "the grid rounds should exercise ties");
}

#[test]
fn streamed_mean_matches_batch_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let rows: Vec<Vec<f32>> = (0..1000)
        .map(|_| {
            (0..64)
                .map(|_| rng.gen_range(-1.0f32..1.0) * 100.0)
                .collect()
        })
        .collect();
    let feats: Vec<Embedding> = rows
        .iter()
        .map(|r| Embedding::new(r.clone()).unwrap())
        .collect();

    // same-order f64 sum: the bank must agree bit for bit
    let mut in_order = vec![0.0f64; 64];
    for r in &rows {
        for j in 0..64 {
            in_order[j] += r[j] as f64;
        }
    }
    let exact: Vec<f32> = in_order.iter().map(|s| (s / 1000.0) as f32).collect();

    // reversed-order sum as an independent route, compared with tolerance
    let mut reversed = vec![0.0f64; 64];
    for r in rows.iter().rev() {
        for j in 0..64 {
            reversed[j] += r[j] as f64;
        }
    }

    let lenient = BankOptions {
        strict_nc: false,
        ..BankOptions::default()
    };
    for _ in 0..10 {
        let mut cuts: Vec<usize> = (0..rng.gen_range(0..20))
            .map(|_| rng.gen_range(1..1000))
            .collect();
        cuts.push(0);
        cuts.push(1000);
        cuts.sort_unstable();
        cuts.dedup();
        let mut bank = MemoryBank::new(lenient);
        for (a, b) in cuts.iter().tuple_windows() {
            bank.observe_class_group(5, &feats[*a..*b]).unwrap();
        }
        let mean = bank.get(5).unwrap().mean().values().to_vec();
        assert_eq!(
            mean.iter().map(|v| v.to_bits()).collect_vec(),
            exact.iter().map(|v| v.to_bits()).collect_vec()
        );
        for (m, s) in mean.iter().zip(&reversed) {
            let want = s / 1000.0;
            assert!((*m as f64 - want).abs() <= 1e-6 * want.abs().max(1e-3));
        }
    }
}

fn synth(
    classes: u32,
    per_class: u32,
    dim: usize,
    sep: f64,
    seed: u64,
    split: SynthSplit,
) -> Vec<LabeledEmbedding> {
    synth_gaussian(&SynthParams {
        classes,
        per_class,
        dim,
        separation: sep,
        seed,
        split,
    })
    .unwrap()
    .into_records()
}

#[test]
fn two_well_separated_classes_are_classified() {
    let train = synth(2, 100, 8, 10.0, 11, SynthSplit::Train);
    let test = synth(2, 100, 8, 10.0, 11, SynthSplit::Test);
    let stream = make_nc_scenario(train, 1, None).unwrap();
    let learner = run_training(
        &stream,
        &RunConfig {
            tasks: 1,
            ..RunConfig::default()
        },
    )
    .unwrap();
    let clf = Classifier::new(learner.bank(), ClassifierOptions::default()).unwrap();
    let report = clf.evaluate(&test, None).unwrap();
    assert_eq!(report.total, 200);
    assert!(report.accuracy() >= 0.99, "accuracy {}", report.accuracy());
}

#[test]
fn classifier_agrees_with_oracle_on_gaussian_queries() {
    let train = synth(6, 20, 8, 2.0, 3, SynthSplit::Train);
    let test = synth(6, 30, 8, 2.0, 3, SynthSplit::Test);
    let stream = make_nc_scenario(train, 3, None).unwrap();
    let learner = run_training(
        &stream,
        &RunConfig {
            tasks: 3,
            ..RunConfig::default()
        },
    )
    .unwrap();
    let protos: Vec<(u32, Vec<f32>)> = learner
        .bank()
        .prototypes()
        .map(|p| (p.class_id(), p.mean().values().to_vec()))
        .collect();
    let clf = Classifier::new(learner.bank(), ClassifierOptions::default()).unwrap();
    let report = clf.evaluate(&test, None).unwrap();
    let oracle_hits = test
        .iter()
        .filter(|x| oracle_predict(&protos, x.embedding.values(), Metric::L2) == x.label)
        .count();
    assert_eq!(report.hits, oracle_hits as u64);
}

#[test]
fn task_aware_dominates_per_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut bank = MemoryBank::default();
    let mut tasks: Vec<BTreeSet<u32>> = Vec::new();
    for t in 0..5u32 {
        let mut set = BTreeSet::new();
        for c in 0..2 {
            let id = t * 2 + c;
            let v: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            bank.observe_class_group(id, &[Embedding::new(v).unwrap()])
                .unwrap();
            set.insert(id);
        }
        tasks.push(set);
    }
    let (mut agnostic, mut aware) = (0, 0);
    for _ in 0..100 {
        let label = rng.gen_range(0..10u32);
        let proto = bank.get(label).unwrap().mean().values().to_vec();
        let q: Vec<f32> = proto.iter().map(|v| v + rng.gen_range(-0.8..0.8)).collect();
        let q = Embedding::new(q).unwrap();
        let a = predict(&bank, &q, Metric::L2).unwrap().predicted_class == label;
        let b = predict_task_aware(&bank, &q, &tasks[label as usize / 2], Metric::L2)
            .unwrap()
            .predicted_class
            == label;
        assert!(!a || b);
        agnostic += a as u32;
        aware += b as u32;
    }
    assert!(aware >= agnostic);
    assert!(
        aware > agnostic,
        "noise level should make the restriction matter"
    );
}

/// Best accuracy over all relabelings of `found` onto `truth`.
fn permutation_accuracy(found: &[usize], truth: &[u32], k: usize) -> f64 {
    (0..k)
        .permutations(k)
        .map(|perm| {
            found
                .iter()
                .zip(truth)
                .filter(|(&f, &t)| perm[f] as u32 == t)
                .count()
        })
        .max()
        .unwrap() as f64
        / found.len() as f64
}

#[test]
fn kmeans_recovers_well_separated_clusters() {
    let data = synth(2, 200, 8, 20.0, 5, SynthSplit::Train);
    let feats: Vec<&Embedding> = data.iter().map(|x| &x.embedding).collect();
    let truth: Vec<u32> = data.iter().map(|x| x.label).collect();
    let a = kmeans(&feats, &KMeansParams::new(2, 5)).unwrap();
    assert_eq!(permutation_accuracy(&a.labels, &truth, 2), 1.0);

    let data = synth(4, 100, 8, 20.0, 6, SynthSplit::Train);
    let feats: Vec<&Embedding> = data.iter().map(|x| &x.embedding).collect();
    let truth: Vec<u32> = data.iter().map(|x| x.label).collect();
    let a = kmeans(&feats, &KMeansParams::new(4, 6)).unwrap();
    assert!(permutation_accuracy(&a.labels, &truth, 4) >= 0.99);
}

#[test]
fn training_reads_each_record_once() {
    let ds = synth_gaussian(&SynthParams {
        classes: 5,
        per_class: 40,
        dim: 8,
        separation: 10.0,
        seed: 8,
        split: SynthSplit::Train,
    })
    .unwrap();
    let bytes = ds.to_bytes();
    let mut counting = CountingReader::new(bytes.as_slice());
    let loaded = offshelf_core::backend::read_from(&mut counting).unwrap();
    assert_eq!(counting.bytes_read(), bytes.len() as u64);

    let stream = make_nc_scenario(loaded.into_records(), 5, None).unwrap();
    let learner = run_training(
        &stream,
        &RunConfig {
            tasks: 5,
            ..RunConfig::default()
        },
    )
    .unwrap();
    assert_eq!(learner.examples_seen(), 200);
    assert_eq!(learner.bank().total_count(), 200);
}
