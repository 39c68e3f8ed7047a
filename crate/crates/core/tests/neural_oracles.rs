use covalign::linalg::Mat;
use covalign::neural::{
    adamw_step, linear_probe, log_softmax, train, AdamWParams, AdamWState, ConvClassifier, ModelConfig, TrainConfig,
    LOG_EPS,
};
use covalign::trialdata::Trial;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn cfg() -> ModelConfig {
    ModelConfig {
        channels: 3,
        samples: 24,
        n_temporal: 2,
        temporal_kernel: 5,
        n_spatial: 3,
        pool_window: 8,
        pool_stride: 4,
    }
}

fn random_trials(c: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<Trial> {
    (0..n)
        .map(|i| {
            let x = Mat::from_fn(c.channels, c.samples, |_, _| rng.sample::<f64, _>(StandardNormal));
            Trial::new(x, (i % 2) as u8).unwrap()
        })
        .collect()
}

/// Direct transcription of the network from its parameter layout.
fn oracle_log_probs(m: &ConvClassifier, x: &Mat<f64>) -> [f64; 2] {
    let c = m.config;
    let p = &m.params;
    let (tr, sr, hw, hb) = (c.temporal_range(), c.spatial_range(), c.head_weight_range(), c.head_bias_range());
    let len = c.samples - c.temporal_kernel + 1;
    let np = (len - c.pool_window) / c.pool_stride + 1;
    let mut feats = Vec::new();
    for g in 0..c.n_spatial {
        let mut s = vec![0.0; len];
        for f in 0..c.n_temporal {
            for ch in 0..c.channels {
                let w = p[sr.start + g * c.n_temporal * c.channels + f * c.channels + ch];
                for (tau, st) in s.iter_mut().enumerate() {
                    let mut conv = 0.0;
                    for j in 0..c.temporal_kernel {
                        conv += p[tr.start + f * c.temporal_kernel + j] * x[(ch, tau + j)];
                    }
                    *st += w * conv;
                }
            }
        }
        for q in 0..np {
            let win = &s[q * c.pool_stride..q * c.pool_stride + c.pool_window];
            let power = win.iter().map(|v| v * v).sum::<f64>() / c.pool_window as f64;
            feats.push((power + LOG_EPS).ln());
        }
    }
    let d = feats.len();
    let z: Vec<f64> = (0..2)
        .map(|cls| p[hb.start + cls] + (0..d).map(|i| p[hw.start + cls * d + i] * feats[i]).sum::<f64>())
        .collect();
    let lse = (z[0].exp() + z[1].exp()).ln();
    [z[0] - lse, z[1] - lse]
}

#[test]
fn forward_matches_oracle() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..5 {
        let m = ConvClassifier::new(c, seed).unwrap();
        for t in random_trials(&c, 4, &mut rng) {
            let got = m.forward_cached(&t.data, None).unwrap().log_probs;
            let want = oracle_log_probs(&m, &t.data);
            assert!((got[0] - want[0]).abs() <= 1e-10 && (got[1] - want[1]).abs() <= 1e-10);
        }
    }
}

#[test]
fn gradients_match_central_differences() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let m = ConvClassifier::new(c, 100 + seed).unwrap();
        let trials = random_trials(&c, 6, &mut rng);
        let batch: Vec<&Trial> = trials.iter().collect();
        let (_, g) = m.loss_and_gradient(&batch, None).unwrap();
        for idx in rand::seq::index::sample(&mut rng, c.n_params(), 50) {
            let mut plus = m.clone();
            plus.params[idx] += h;
            let mut minus = m.clone();
            minus.params[idx] -= h;
            let lp = plus.loss_and_gradient(&batch, None).unwrap().0;
            let lm = minus.loss_and_gradient(&batch, None).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (g[idx] - fd).abs() / g[idx].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

#[test]
fn log_softmax_stays_normalized_for_extreme_logits() {
    for z in [[1000.0, -1000.0], [-745.0, -746.0], [0.0, 0.0], [3.5, 3.5 + 1e-12]] {
        let lp = log_softmax(z);
        let lse = lp[0].exp() + lp[1].exp();
        assert!((lse - 1.0).abs() < 1e-12, "{z:?}");
        assert!(lp.iter().all(|v| v.is_finite() && *v <= 0.0));
    }
}

/// Textbook Adam with bias correction.
fn plain_adam(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, lr: f64) {
    for i in 0..p.len() {
        m[i] = 0.9 * m[i] + 0.1 * g[i];
        v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
        let mh = m[i] / (1.0 - 0.9f64.powi(t));
        let vh = v[i] / (1.0 - 0.999f64.powi(t));
        p[i] -= lr * mh / (vh.sqrt() + 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adamw_without_decay_is_adam(
        init in prop::collection::vec(-3.0f64..3.0, 1..8),
        seed in any::<u64>(),
    ) {
        let n = init.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = init.clone();
        let mut b = init;
        let mut st = AdamWState::new(n);
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        let hp = AdamWParams::new(1e-2, 0.0);
        for t in 1..=20 {
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            adamw_step(&mut a, &g, &mut st, &hp).unwrap();
            plain_adam(&mut b, &g, &mut m, &mut v, t, 1e-2);
        }
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_step_is_pure_decay(init in prop::collection::vec(-3.0f64..3.0, 1..8), wd in 0.0f64..0.5) {
        let mut p = init.clone();
        let mut st = AdamWState::new(p.len());
        let hp = AdamWParams::new(1e-2, wd);
        adamw_step(&mut p, &vec![0.0; init.len()], &mut st, &hp).unwrap();
        for (x, x0) in p.iter().zip(&init) {
            prop_assert!((x - x0 * (1.0 - 1e-2 * wd)).abs() < 1e-15);
        }
    }
}

/// Class 0 carries a strong 4-cycle tone on channel 0, class 1 on channel 2.
fn separable(c: &ModelConfig, n: usize, seed: u64) -> Vec<Trial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let y = (i % 2) as u8;
            let loud = if y == 0 { 0 } else { 2 };
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let x = Mat::from_fn(c.channels, c.samples, |ch, t| {
                let tone = if ch == loud {
                    3.0 * (std::f64::consts::TAU * t as f64 / 6.0 + phase).sin()
                } else {
                    0.0
                };
                tone + 0.3 * rng.sample::<f64, _>(StandardNormal)
            });
            Trial::new(x, y).unwrap()
        })
        .collect()
}

fn toy_train_cfg() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        weight_decay: 0.0,
        batch_size: 16,
        max_epochs: 200,
        patience: 200,
        dropout_rate: 0.0,
        rng_seed: 5,
    }
}

#[test]
fn separable_toy_is_learned() {
    let c = cfg();
    let tr = separable(&c, 120, 10);
    let va = separable(&c, 40, 11);
    let (m, h) = train(&ConvClassifier::new(c, 3).unwrap(), &tr, &va, &toy_train_cfg()).unwrap();
    assert!(h.epochs_run() <= 200);
    assert!(m.accuracy(&tr).unwrap() >= 0.99);
    assert!(m.accuracy(&separable(&c, 100, 12)).unwrap() >= 0.99);
}

fn mean_nll(m: &ConvClassifier, trials: &[Trial]) -> f64 {
    let batch: Vec<&Trial> = trials.iter().collect();
    m.loss_and_gradient(&batch, None).unwrap().0
}

#[test]
fn probe_keeps_trunk_and_fits_head() {
    let c = cfg();
    let tr = separable(&c, 120, 20);
    let va = separable(&c, 40, 21);
    let (m, _) = train(&ConvClassifier::new(c, 4).unwrap(), &tr, &va, &toy_train_cfg()).unwrap();
    let probe_cfg = TrainConfig {
        max_epochs: 100,
        patience: 30,
        ..toy_train_cfg()
    };

    let (kept, _) = linear_probe(&m, &tr, &probe_cfg).unwrap();
    let trunk = c.temporal_range().start..c.spatial_range().end;
    assert_eq!(kept.params[trunk.clone()], m.params[trunk.clone()]);
    assert!(mean_nll(&kept, &tr) <= mean_nll(&m, &tr) * 1.05 + 1e-9);

    let mut fresh = m.clone();
    fresh.reset_head(99);
    let (probed, _) = linear_probe(&fresh, &tr, &probe_cfg).unwrap();
    assert_eq!(probed.params[trunk.clone()], m.params[trunk]);
    assert!(probed.accuracy(&separable(&c, 100, 22)).unwrap() >= 0.95);
}
