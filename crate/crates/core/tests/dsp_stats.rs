use std::f64::consts::TAU;

use covalign::dsp::{
    bandpass_overlap_add, default_block_size, design_bandpass, frequency_response, resample, FilterSpec,
};
use covalign::stats::{
    pearson_corr, permutation_paired_ttest, significance_matrix, standardized_mean_difference, PermutationMode,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(n_taps: usize) -> FilterSpec<f64> {
    FilterSpec {
        low_hz: 8.0,
        high_hz: 32.0,
        fs: 250.0,
        n_taps,
    }
}

/// Naive full convolution, trimmed to the centered same-length window.
fn direct_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    let (n, m) = (x.len(), h.len());
    let off = (m - 1) / 2;
    (0..n)
        .map(|i| {
            let k = i + off;
            let mut s = 0.0;
            for (j, &hj) in h.iter().enumerate() {
                if k >= j && k - j < n {
                    s += hj * x[k - j];
                }
            }
            s
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn tone(f: f64, fs: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (TAU * f * i as f64 / fs).sin()).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[test]
fn long_signal_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h = design_bandpass(&spec(251)).unwrap();
    let got = bandpass_overlap_add(&x, &h, default_block_size(251)).unwrap();
    assert!(rel_err(&got, &direct_same(&x, &h)) <= 1e-9);
}

#[test]
fn band_edges_and_centre() {
    let h = design_bandpass(&spec(251)).unwrap();
    let db = |f: f64| 20.0 * frequency_response(&h, f, 250.0).log10();
    assert!(db(20.0).abs() <= 1.0, "{}", db(20.0));
    assert!(h.iter().sum::<f64>().abs() < 1e-3);

    // Time-domain check away from the edges of the window.
    let x20 = tone(20.0, 250.0, 2500);
    let y20 = bandpass_overlap_add(&x20, &h, 1024).unwrap();
    let ratio = rms(&y20[500..2000]) / rms(&x20[500..2000]);
    assert!((20.0 * ratio.log10()).abs() <= 1.0);

    let x2 = tone(2.0, 250.0, 2500);
    let y2 = bandpass_overlap_add(&x2, &h, 1024).unwrap();
    let att = 20.0 * (rms(&y2[500..2000]) / rms(&x2[500..2000])).log10();
    assert!(att <= -20.0, "{att}");
}

/// Crossings of zero from below, per second.
fn rising_crossings(x: &[f64], fs: f64) -> f64 {
    let idx: Vec<f64> = x
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] < 0.0 && w[1] >= 0.0)
        .map(|(i, w)| i as f64 + w[0] / (w[0] - w[1]))
        .collect();
    (idx.len() - 1) as f64 / ((idx[idx.len() - 1] - idx[0]) / fs)
}

#[test]
fn resampling_keeps_tone() {
    let x = tone(10.0, 500.0, 2000);
    let y = resample(&x, 500.0, 250.0).unwrap();
    assert_eq!(y.len(), 1000);
    let mid = &y[100..900];
    assert!((rising_crossings(mid, 250.0) - 10.0).abs() <= 0.1);
    // Least-squares amplitude of the known-frequency sinusoid.
    let (mut ss, mut cc, mut sc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &v) in mid.iter().enumerate() {
        let t = TAU * 10.0 * (i + 100) as f64 / 250.0;
        let (s, c) = t.sin_cos();
        ss += s * s;
        cc += c * c;
        sc += s * c;
        ys += v * s;
        yc += v * c;
    }
    let det = ss * cc - sc * sc;
    let a = (ys * cc - yc * sc) / det;
    let b = (yc * ss - ys * sc) / det;
    assert!(((a * a + b * b).sqrt() - 1.0).abs() <= 0.01);

    let up = resample(&tone(12.0, 160.0, 800), 160.0, 250.0).unwrap();
    assert_eq!(up.len(), 1250);
    assert!((rising_crossings(&up[150..1100], 250.0) - 12.0).abs() <= 0.12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn overlap_add_matches_direct_on_any_block(
        x in prop::collection::vec(-1.0f64..1.0, 1..600),
        half in 1usize..20,
        extra in 0usize..200,
    ) {
        let n_taps = 2 * half + 1;
        let h = design_bandpass(&FilterSpec { low_hz: 5.0, high_hz: 40.0, fs: 250.0, n_taps }).unwrap();
        let got = bandpass_overlap_add(&x, &h, n_taps + extra).unwrap();
        let want = direct_same(&x, &h);
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn filtering_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..700).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..700).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = design_bandpass(&spec(101)).unwrap();
        let f = |s: &[f64]| bandpass_overlap_add(s, &h, 256).unwrap();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (fx, fy, fm) = (f(&x), f(&y), f(&mix));
        for i in 0..700 {
            prop_assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() <= 1e-9);
        }
    }
}

#[test]
fn p_value_hand_cases() {
    let a = [0.9, 0.8, 0.85, 0.7, 0.95];
    let b = [0.8, 0.7, 0.80, 0.6, 0.90];
    let r = permutation_paired_ttest(&a, &b, PermutationMode::Exhaustive, 0, 0).unwrap();
    assert_eq!(r.p_value, 1.0 / 32.0);

    let a9: Vec<f64> = (0..9).map(|i| 0.6 + 0.03 * i as f64).collect();
    let b9: Vec<f64> = a9.iter().enumerate().map(|(i, v)| v - 0.01 * (i + 1) as f64).collect();
    let m = significance_matrix(
        &[("dominant".into(), a9.clone()), ("other".into(), b9.clone())],
        PermutationMode::Auto,
        0,
        0,
    )
    .unwrap();
    assert_eq!(m.p_values[(0, 1)], 1.0 / 512.0);
    assert_eq!(m.p_values[(1, 1)], 1.0);
    assert_eq!(m.smd[(0, 0)], 0.0);
}

/// Sign-flip enumeration written independently of the library.
fn exhaustive_oracle(d: &[f64]) -> f64 {
    let n = d.len();
    let obs: f64 = d.iter().sum();
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).map(|i| if mask & (1 << i) != 0 { -d[i] } else { d[i] }).sum();
        if s >= obs - 1e-12 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

#[test]
fn monte_carlo_agrees_with_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a: Vec<f64> = (0..20).map(|_| rng.random_range(0.5..0.9)).collect();
    let b: Vec<f64> = a.iter().map(|v| v - rng.random_range(-0.04..0.08)).collect();
    let (a10, b10) = (&a[..10], &b[..10]);
    let d: Vec<f64> = a10.iter().zip(b10).map(|(x, y)| x - y).collect();
    let exact = permutation_paired_ttest(a10, b10, PermutationMode::Exhaustive, 0, 0).unwrap();
    assert!((exact.p_value - exhaustive_oracle(&d)).abs() < 1e-15);
    let n_perm = 100_000;
    let mc = permutation_paired_ttest(a10, b10, PermutationMode::MonteCarlo, n_perm, 11).unwrap();
    let p = exact.p_value;
    let se = (p * (1.0 - p) / n_perm as f64).sqrt();
    assert!((mc.p_value - p).abs() <= 3.0 * se + 1.0 / n_perm as f64, "{} vs {p}", mc.p_value);
    let full = permutation_paired_ttest(&a, &b, PermutationMode::Auto, n_perm, 12).unwrap();
    assert!(!full.exact && full.p_value >= 1.0 / (n_perm + 1) as f64);
}

#[test]
fn effect_size_and_correlation_cases() {
    assert!((pearson_corr(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - 0.98198).abs() < 1e-5);
    assert!((pearson_corr(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
    assert!((pearson_corr(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
    assert!(pearson_corr(&[1.0, 1.0], &[1.0, 2.0]).is_err());

    let b = [0.1, 0.2, 0.3];
    assert!((standardized_mean_difference(&[0.3, 0.3, 0.6], &b).unwrap() - 2.0).abs() < 1e-9);
    assert_eq!(standardized_mean_difference(&[0.2, 0.1], &[0.1, 0.2]).unwrap(), 0.0);
    let shifted: Vec<f64> = b.iter().map(|v| v + 0.1).collect();
    assert!(standardized_mean_difference(&shifted, &b).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pearson_is_affine_invariant(
        xy in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..30),
        s in 0.1f64..10.0,
        t in -10.0f64..10.0,
    ) {
        let x: Vec<f64> = xy.iter().map(|p| p.0).collect();
        let y: Vec<f64> = xy.iter().map(|p| p.1).collect();
        if let Ok(r) = pearson_corr(&x, &y) {
            let xs: Vec<f64> = x.iter().map(|v| s * v + t).collect();
            prop_assert!((pearson_corr(&xs, &y).unwrap() - r).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_a_never_raises_p(
        pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..10),
        bump in prop::collection::vec(0.0f64..0.2, 10),
    ) {
        // Dyadic grid keeps sums exact, so ties are exact ties.
        let q = |v: f64| (v * 64.0).round() / 64.0;
        let a: Vec<f64> = pairs.iter().map(|p| q(p.0)).collect();
        let b: Vec<f64> = pairs.iter().map(|p| q(p.1)).collect();
        let up: Vec<f64> = a.iter().zip(&bump).map(|(v, e)| v + q(*e)).collect();
        let p0 = permutation_paired_ttest(&a, &b, PermutationMode::Exhaustive, 0, 0).unwrap().p_value;
        let p1 = permutation_paired_ttest(&up, &b, PermutationMode::Exhaustive, 0, 0).unwrap().p_value;
        prop_assert!(p1 <= p0);
    }

    #[test]
    fn smd_matrix_is_antisymmetric(seed in any::<u64>(), k in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res: Vec<(String, Vec<f64>)> = (0..k)
            .map(|i| (format!("p{i}"), (0..6).map(|_| rng.random_range(0.4..1.0)).collect()))
            .collect();
        let m = significance_matrix(&res, PermutationMode::Auto, 0, 0).unwrap();
        for i in 0..k {
            for j in 0..k {
                prop_assert!((m.smd[(i, j)] + m.smd[(j, i)]).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(&m.p_values[(i, j)]));
            }
        }
    }
}
