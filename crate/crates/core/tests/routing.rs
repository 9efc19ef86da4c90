use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use simoe::gate::MaskDecision;
use simoe::linalg::dot;
use simoe::model::{modulate, predict, train_task, ClassifierHead, TrainConfig};
use simoe::pool::{candidate_set, query_score, select_top_k, PromptPool, Route};

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn pool_with(seed: u64, d: usize, lp: usize, births: &[usize]) -> PromptPool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = PromptPool::new(d, lp);
    for &b in births {
        pool.grow(1, b, &mut rng).unwrap();
    }
    // move keys off their orthogonal start so scores are not all tied
    for id in pool.all_ids() {
        let e = pool.expert_mut(id).unwrap();
        e.key = gaussian(&mut rng, d);
        for v in e.params.as_mut_slice() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
    }
    pool
}

#[test]
fn top_k_maximizes_score_sum_over_all_subsets() {
    let d = 10;
    let pool = pool_with(3, d, 2, &[0; 10]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ids = pool.all_ids();
    for _ in 0..50 {
        let z = gaussian(&mut rng, d);
        let got = select_top_k(&z, &pool, &ids, 3).unwrap();
        let score = |id: usize| query_score(&z, &pool.expert(id).unwrap().key).unwrap();
        let mut best = f64::NEG_INFINITY;
        for a in 0..10 {
            for b in a + 1..10 {
                for c in b + 1..10 {
                    best = best.max(score(a) + score(b) + score(c));
                }
            }
        }
        let sum: f64 = got.iter().map(|&id| score(id)).sum();
        assert!((sum - best).abs() < 1e-12);
        assert!(got.windows(2).all(|w| score(w[0]) >= score(w[1])));
    }
}

#[test]
fn grow_keeps_keys_orthonormal_until_rank_runs_out() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pool = PromptPool::new(8, 3);
    for t in 0..4 {
        pool.grow(2, t, &mut rng).unwrap();
        assert!(pool.max_key_coherence() <= 1e-6);
        for e in pool.experts() {
            assert!((dot(&e.key, &e.key) - 1.0).abs() < 1e-12);
        }
    }
    let err = pool.grow(1, 4, &mut rng).unwrap_err();
    assert!(err.to_string().contains("increase the feature dimension"), "{err}");
    assert_eq!(pool.len(), 8);
}

#[test]
fn predict_matches_compositional_oracle() {
    let d = 5;
    let pool = pool_with(8, d, 3, &[0, 0, 1, 1, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut head = ClassifierHead::new(d);
    head.ensure_classes([4, 1, 9]);
    for v in head.weights_mut() {
        *v = rng.sample(StandardNormal);
    }
    for v in head.bias_mut() {
        *v = rng.sample(StandardNormal);
    }
    for k in [1, 2] {
        for _ in 0..100 {
            let z = gaussian(&mut rng, d);
            // select
            let mut scored: Vec<(usize, f64)> = pool
                .experts()
                .iter()
                .map(|e| {
                    let c = dot(&z, &e.key) / (dot(&z, &z).sqrt() * dot(&e.key, &e.key).sqrt());
                    (e.id, c)
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            // modulate
            let mut zp = z.clone();
            let rows = (k * 3) as f64;
            for &(id, _) in &scored[..k] {
                let p = &pool.expert(id).unwrap().params;
                for r in 0..p.rows() {
                    for (o, v) in zp.iter_mut().zip(p.row(r)) {
                        *o += v / rows;
                    }
                }
            }
            // affine + argmax
            let mut best = (f64::NEG_INFINITY, u32::MAX);
            for (r, &c) in head.classes().iter().enumerate() {
                let l = dot(head.weight_row(r), &zp) + head.bias()[r];
                if l > best.0 || (l == best.0 && c < best.1) {
                    best = (l, c);
                }
            }
            assert_eq!(predict(&z, &head, &pool, k).unwrap(), best.1);
        }
    }
}

fn separable_task(seed: u64, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = (i % 2) as u32;
        let mut v = gaussian(&mut rng, d);
        v[0] += if c == 0 { -3.0 } else { 3.0 };
        x.push(v);
        y.push(c + 10);
    }
    (x, y)
}

#[test]
fn defaults_fit_a_separable_two_class_task() {
    let d = 6;
    let (x, y) = separable_task(12, 200, d);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pool = PromptPool::new(d, 5);
    pool.grow(2, 0, &mut rng).unwrap();
    let mut head = ClassifierHead::new(d);
    let routes = vec![Route::TaskSpecific; x.len()];
    train_task(&x, &y, &routes, &mut pool, &mut head, 1, &TrainConfig::default(), 0).unwrap();
    let correct = x
        .iter()
        .zip(&y)
        .filter(|(z, &l)| predict(z, &head, &pool, 1).unwrap() == l)
        .count();
    assert!(correct as f64 / x.len() as f64 >= 0.95, "{correct}/200");
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let d = 4;
    let (x, y) = separable_task(5, 40, d);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pool = PromptPool::new(d, 2);
    pool.grow(2, 0, &mut rng).unwrap();
    let mut head = ClassifierHead::new(d);
    head.ensure_classes([10, 11]);
    let (p0, h0) = (pool.clone(), head.clone());
    let config = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    let usage = train_task(&x, &y, &vec![Route::Global; 40], &mut pool, &mut head, 1, &config, 0).unwrap();
    assert_eq!(pool, p0);
    assert_eq!(head, h0);
    assert_eq!(usage.iter().sum::<u64>(), 40 * config.epochs as u64);
}

#[test]
fn experts_outside_every_candidate_set_are_untouched() {
    let d = 6;
    let (x, y) = separable_task(6, 60, d);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pool = PromptPool::new(d, 2);
    pool.grow(2, 0, &mut rng).unwrap();
    pool.grow(2, 1, &mut rng).unwrap();
    let old = pool.clone();
    let mut head = ClassifierHead::new(d);
    // every sample novel: only task-1 experts may move
    let routes = vec![Route::Masked(MaskDecision::cold_start()); x.len()];
    let usage = train_task(&x, &y, &routes, &mut pool, &mut head, 1, &TrainConfig::default(), 1).unwrap();
    assert_eq!(&pool.experts()[..2], &old.experts()[..2]);
    assert_eq!(usage[..2], [0, 0]);
    assert_ne!(&pool.experts()[2..], &old.experts()[2..]);
}

#[test]
fn training_is_deterministic() {
    let d = 5;
    let (x, y) = separable_task(7, 50, d);
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pool = PromptPool::new(d, 2);
        pool.grow(3, 0, &mut rng).unwrap();
        let mut head = ClassifierHead::new(d);
        let u = train_task(&x, &y, &vec![Route::Global; 50], &mut pool, &mut head, 2, &TrainConfig::default(), 0)
            .unwrap();
        (pool, head, u)
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn top_k_ignores_positive_rescaling(seed in 0u64..500, a in 1e-3f64..1e3, k in 1usize..5) {
        let pool = pool_with(seed, 6, 1, &[0; 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let z = gaussian(&mut rng, 6);
        let zs: Vec<f64> = z.iter().map(|v| v * a).collect();
        let ids = pool.all_ids();
        prop_assert_eq!(select_top_k(&z, &pool, &ids, k).unwrap(), select_top_k(&zs, &pool, &ids, k).unwrap());
    }

    #[test]
    fn large_k_returns_every_candidate(seed in 0u64..500, extra in 0usize..4) {
        let pool = pool_with(seed, 5, 1, &[0; 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let z = gaussian(&mut rng, 5);
        let cands = vec![4, 1, 3];
        let mut got = select_top_k(&z, &pool, &cands, 3 + extra).unwrap();
        got.sort_unstable();
        prop_assert_eq!(got, vec![1, 3, 4]);
    }

    #[test]
    fn mask_bits_partition_the_reachable_pool(
        births in prop::collection::vec(0usize..4, 1..12), t in 1usize..4,
    ) {
        let mut births = births;
        births.sort_unstable();
        prop_assume!(births.iter().any(|&b| b < t) && births.contains(&t));
        let pool = pool_with(1, 16, 1, &births);
        let old = candidate_set(&pool, Route::Masked(MaskDecision::from_score(0.0, 1.0)), t).unwrap();
        let new = candidate_set(&pool, Route::Masked(MaskDecision::cold_start()), t).unwrap();
        prop_assert!(old.iter().all(|id| !new.contains(id)));
        let mut union: Vec<usize> = old.into_iter().chain(new).collect();
        union.sort_unstable();
        let reachable: Vec<usize> =
            pool.experts().iter().filter(|e| e.birth_task <= t).map(|e| e.id).collect();
        prop_assert_eq!(union, reachable);
        prop_assert_eq!(candidate_set(&pool, Route::Global, t).unwrap(), pool.all_ids());
    }

    #[test]
    fn modulation_is_linear_in_prompts(seed in 0u64..500, a in -4.0f64..4.0) {
        let pool = pool_with(seed, 4, 3, &[0, 0]);
        let mut scaled = pool.clone();
        for id in scaled.all_ids() {
            let e = scaled.expert_mut(id).unwrap();
            e.params = e.params.scaled(a);
        }
        let z = vec![0.5, -1.0, 2.0, 0.25];
        let sel = |p: &PromptPool| -> Vec<f64> {
            let ex: Vec<_> = p.experts().iter().collect();
            modulate(&z, &ex).unwrap()
        };
        let base = sel(&pool);
        let lin = sel(&scaled);
        for i in 0..4 {
            prop_assert!(((lin[i] - z[i]) - a * (base[i] - z[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_bias_shift_keeps_the_argmax(seed in 0u64..500, shift in -100.0f64..100.0) {
        let d = 4;
        let pool = pool_with(seed, d, 2, &[0, 0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 4);
        let mut head = ClassifierHead::new(d);
        head.ensure_classes(0..5);
        for v in head.weights_mut() {
            *v = rng.sample(StandardNormal);
        }
        let mut shifted = head.clone();
        shifted.bias_mut().iter_mut().for_each(|b| *b += shift);
        for _ in 0..10 {
            let z = gaussian(&mut rng, d);
            prop_assert_eq!(predict(&z, &head, &pool, 2).unwrap(), predict(&z, &shifted, &pool, 2).unwrap());
        }
    }
}
