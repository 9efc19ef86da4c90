use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use simoe::data::{
    generate_stream, load_embeddings, parse_split_manifest, read_embedding_set,
    split_manifest_path, store_embeddings, stream_from_embeddings, EmbeddingSet,
    SyntheticStreamConfig, TEST_EVERY,
};
use simoe::Error;

fn class_mean<'a>(samples: impl Iterator<Item = &'a [f64]>, d: usize) -> (Vec<f64>, usize) {
    let mut m = vec![0.0; d];
    let mut n = 0;
    for s in samples {
        for (a, b) in m.iter_mut().zip(s) {
            *a += b;
        }
        n += 1;
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    (m, n)
}

#[test]
fn full_overlap_reuses_the_class_generators() {
    let d = 8;
    for seed in 0..5 {
        let config = SyntheticStreamConfig {
            tasks: 2,
            dim: d,
            classes_per_task: 4,
            overlap_fraction: 1.0,
            train_per_class: 200,
            test_per_class: 10,
            seed,
            ..SyntheticStreamConfig::default()
        };
        let s = generate_stream(&config).unwrap();
        assert_eq!(s.tasks[1].classes, s.tasks[0].classes);
        for &c in &s.tasks[0].classes {
            let pick = |t: usize| {
                class_mean(
                    s.tasks[t].train.iter().filter(|x| x.label == c).map(|x| x.features.as_slice()),
                    d,
                )
            };
            let ((m0, n0), (m1, n1)) = (pick(0), pick(1));
            // isotropic noise with known variance: squared standardized gap is chi-square(d)
            let var = config.noise_scale.powi(2) * (1.0 / n0 as f64 + 1.0 / n1 as f64);
            let stat: f64 = m0.iter().zip(&m1).map(|(a, b)| (a - b).powi(2) / var).sum();
            let p = 1.0 - ChiSquared::new(d as f64).unwrap().cdf(stat);
            assert!(p > 0.01, "seed {seed} class {c}: p = {p}");
        }
    }
}

#[test]
fn zero_overlap_gives_disjoint_tasks_and_splits() {
    let s = generate_stream(&SyntheticStreamConfig {
        tasks: 4,
        overlap_fraction: 0.0,
        ..SyntheticStreamConfig::default()
    })
    .unwrap();
    for i in 0..4 {
        for j in i + 1..4 {
            assert!(s.tasks[i].classes.iter().all(|c| !s.tasks[j].classes.contains(c)));
        }
        let t = &s.tasks[i];
        assert!(t.train.iter().all(|a| t.test.iter().all(|b| a.features != b.features)));
    }
}

#[test]
fn partial_overlap_draws_from_seen_classes() {
    let s = generate_stream(&SyntheticStreamConfig {
        tasks: 6,
        classes_per_task: 10,
        overlap_fraction: 0.3,
        dim: 8,
        ..SyntheticStreamConfig::default()
    })
    .unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for (t, task) in s.tasks.iter().enumerate() {
        let old = task.classes.iter().filter(|c| seen.contains(*c)).count();
        assert_eq!(old, if t == 0 { 0 } else { 3 });
        seen.extend(task.classes.iter().copied());
    }
}

#[test]
fn repeats_replay_the_class_set() {
    let s = generate_stream(&SyntheticStreamConfig {
        tasks: 3,
        repeats: vec![(2, 1)],
        ..SyntheticStreamConfig::default()
    })
    .unwrap();
    assert_eq!(s.tasks[2].classes, s.tasks[1].classes);
    assert_ne!(s.tasks[2].train, s.tasks[1].train);
    let bad = SyntheticStreamConfig {
        tasks: 3,
        repeats: vec![(1, 2)],
        ..SyntheticStreamConfig::default()
    };
    assert!(generate_stream(&bad).is_err());
}

#[test]
fn generation_is_deterministic_in_the_seed() {
    let c = SyntheticStreamConfig {
        seed: 42,
        overlap_fraction: 0.4,
        ..SyntheticStreamConfig::default()
    };
    let a = generate_stream(&c).unwrap().to_bytes();
    assert_eq!(a, generate_stream(&c).unwrap().to_bytes());
    let other = SyntheticStreamConfig { seed: 43, ..c };
    assert_ne!(a, generate_stream(&other).unwrap().to_bytes());
}

#[test]
fn embedding_file_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 7;
    let feats: Vec<Vec<f64>> = (0..1000)
        .map(|_| (0..d).map(|_| rng.sample::<f32, _>(StandardNormal) as f64).collect())
        .collect();
    let rows: Vec<(&[f64], u32, Option<u16>)> = feats
        .iter()
        .enumerate()
        .map(|(i, f)| (f.as_slice(), (i % 13) as u32, Some((i % 3) as u16)))
        .collect();
    let set = EmbeddingSet::from_rows(d, &rows).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.cleb");
    store_embeddings(&set, &path).unwrap();
    let back = read_embedding_set(&path).unwrap();
    assert_eq!(back, set);
    for (i, f) in feats.iter().enumerate() {
        assert!(back.row(i).iter().zip(f).all(|(a, b)| *a as f64 == *b));
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let set = EmbeddingSet::from_rows(2, &[(&[1.0, 2.0][..], 0, None)]).unwrap();
    let bytes = set.encode();
    assert!(matches!(EmbeddingSet::decode(b"NOPE1xxxx"), Err(Error::BadMagic)));
    assert!(matches!(
        EmbeddingSet::decode(&bytes[..bytes.len() - 1]),
        Err(Error::Truncated { .. })
    ));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(EmbeddingSet::decode(&longer).is_err());
}

#[test]
fn sidecar_split_groups_classes_into_tasks() {
    let rows: Vec<(Vec<f64>, u32)> = (0..40).map(|i| (vec![i as f64, 1.0], (i % 4) as u32)).collect();
    let refs: Vec<(&[f64], u32, Option<u16>)> =
        rows.iter().map(|(f, l)| (f.as_slice(), *l, None)).collect();
    let set = EmbeddingSet::from_rows(2, &refs).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("real.cleb");
    store_embeddings(&set, &path).unwrap();

    assert!(load_embeddings(&path).is_err(), "no task ids and no sidecar");
    std::fs::write(split_manifest_path(&path), "# two tasks\n0, 1\n2,3\n").unwrap();
    let stream = load_embeddings(&path).unwrap();
    assert_eq!(stream.len(), 2);
    assert_eq!(stream.tasks[0].classes, vec![0, 1]);
    assert_eq!(stream.tasks[1].classes, vec![2, 3]);
    assert_eq!(stream.tasks[0].test.len(), 20 / TEST_EVERY);
    assert_eq!(stream.tasks[0].train.len() + stream.tasks[0].test.len(), 20);
}

#[test]
fn split_manifest_errors_carry_line_numbers() {
    match parse_split_manifest("0,1\n\n2,x\n") {
        Err(Error::SplitManifest { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let set = EmbeddingSet::from_rows(1, &[(&[0.0][..], 0, None), (&[1.0][..], 1, None)]).unwrap();
    let dup = vec![vec![0, 1], vec![1]];
    assert!(stream_from_embeddings(&set, Some(&dup)).is_err());
}

#[test]
fn subsampling_keeps_the_requested_fraction() {
    let s = generate_stream(&SyntheticStreamConfig::default()).unwrap();
    let half = s.subsample_train(0.5, 1).unwrap();
    for (a, b) in s.tasks.iter().zip(&half.tasks) {
        assert_eq!(b.train.len(), (a.train.len() as f64 * 0.5).round() as usize);
        assert_eq!(a.test, b.test);
        assert!(b.train.iter().all(|x| a.train.contains(x)));
    }
    assert!(s.subsample_train(0.0, 1).is_err());
}
