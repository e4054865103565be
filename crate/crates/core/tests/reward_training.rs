use std::time::{Duration, Instant};

use imeforge::feedback::RewardSample;
use imeforge::reward::{
    acc_binary, acc_rank, loss_and_grad, synthetic_binary, synthetic_rank, train_reward_model, Batch,
    FeaturizerConfig, Method, TrainConfig,
};
use imeforge::TaskKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SMALL: FeaturizerConfig = FeaturizerConfig { buckets: 64, max_n: 2 };

fn random_batch(rng: &mut ChaCha8Rng, method: Method) -> Vec<RewardSample> {
    let pool: Vec<char> = "我爱你中国北京天安门的是了不在有人".chars().collect();
    let word = |rng: &mut ChaCha8Rng, n: usize| -> String { (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect() };
    let mut out = Vec::new();
    for q in 0..2 {
        let query = word(rng, 3);
        // answers to one query share its task, as in a real log
        let task = TaskKind::ALL[rng.gen_range(0..3)];
        for a in 0..4 {
            let label = if method.uses_rank_labels() {
                [0.0, 1.0, 25.0, 50.0, 100.0][rng.gen_range(0..5)]
            } else {
                // both classes always present
                f64::from(u8::from((q * 4 + a) % 3 == 0))
            };
            let len = rng.gen_range(1..5);
            out.push(RewardSample {
                task,
                query: query.clone(),
                answer: word(rng, len),
                label,
            });
        }
    }
    // a query-wise batch needs at least one comparable pair
    if method.uses_rank_labels() {
        out[0].label = 100.0;
        out[1].label = 0.0;
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-6;
    for method in Method::ALL {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let samples = random_batch(&mut rng, method);
            let batch = Batch::new(&samples, &SMALL);
            let center = if method == Method::ContraWise { 1.0 } else { 0.0 };
            let w: Vec<f64> = (0..SMALL.dim()).map(|_| center + rng.gen_range(-0.5..0.5)).collect();
            let (_, analytic) = loss_and_grad(method, &w, &batch, 0.5).unwrap();
            let numeric: Vec<f64> = (0..w.len())
                .map(|k| {
                    let mut plus = w.clone();
                    plus[k] += h;
                    let mut minus = w.clone();
                    minus[k] -= h;
                    let lp = loss_and_grad(method, &plus, &batch, 0.5).unwrap().0;
                    let lm = loss_and_grad(method, &minus, &batch, 0.5).unwrap().0;
                    (lp - lm) / (2.0 * h)
                })
                .collect();
            let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
            let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "{method}: worst relative error {worst:e}");
    }
}

#[test]
fn pairwise_losses_ignore_score_translation() {
    // the bias feature is constant 1, so shifting its weight shifts every score
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bias = SMALL.dim() - 1;
    for method in [Method::QueryWise, Method::ClassWise, Method::BatchWise] {
        for _ in 0..20 {
            let samples = random_batch(&mut rng, method);
            let batch = Batch::new(&samples, &SMALL);
            let w: Vec<f64> = (0..SMALL.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut shifted = w.clone();
            shifted[bias] += rng.gen_range(-50.0..50.0);
            let a = loss_and_grad(method, &w, &batch, 1.0).unwrap().0;
            let b = loss_and_grad(method, &shifted, &batch, 1.0).unwrap().0;
            assert!((a - b).abs() <= 1e-9, "{method}: {a} vs {b}");
        }
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed())
}

#[test]
fn separable_binary_data_is_learned() {
    let data = synthetic_binary(2000, 7);
    for method in [Method::SampleWise, Method::BatchWise, Method::ClassWise] {
        let (report, took) = timed(|| train_reward_model(&data, method, &TrainConfig::default()).unwrap());
        let acc = acc_binary(&data, &report.model).unwrap();
        assert!(report.curve.len() <= 50);
        assert!(took < Duration::from_secs(30), "{method} took {took:?}");
        assert!(acc >= 0.99, "{method}: Acc_B {acc}");
    }
}

#[test]
fn separable_rank_data_is_learned() {
    let data = synthetic_rank(400, 5, 7);
    assert_eq!(data.len(), 2000);
    let (report, took) = timed(|| train_reward_model(&data, Method::QueryWise, &TrainConfig::default()).unwrap());
    let acc = acc_rank(&data, &report.model).unwrap();
    assert!(took < Duration::from_secs(30), "took {took:?}");
    assert!(acc >= 0.99, "Acc_R {acc}");
}

#[test]
fn full_batch_sample_wise_loss_decreases_every_epoch() {
    let data = synthetic_binary(400, 3);
    let cfg = TrainConfig {
        batch_size: 0,
        epochs: 30,
        ..TrainConfig::default()
    };
    let curve = train_reward_model(&data, Method::SampleWise, &cfg).unwrap().curve;
    assert!(curve.windows(2).all(|w| w[1] < w[0]), "{curve:?}");
}

#[test]
fn contrastive_training_separates_classes() {
    let data = synthetic_binary(300, 9);
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let report = train_reward_model(&data, Method::ContraWise, &cfg).unwrap();
    assert!(report.curve.last() < report.curve.first(), "{:?}", report.curve);
    assert!(acc_binary(&data, &report.model).unwrap() >= 0.9);
}

#[test]
fn training_is_deterministic() {
    let data = synthetic_binary(200, 1);
    let cfg = TrainConfig {
        epochs: 5,
        seed: 42,
        ..TrainConfig::default()
    };
    let a = train_reward_model(&data, Method::BatchWise, &cfg).unwrap();
    let b = train_reward_model(&data, Method::BatchWise, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.curve, b.curve);
}
