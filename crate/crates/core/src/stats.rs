//! Paired comparisons between pipelines: sign-flip permutation test,
//! standardized mean difference and Pearson correlation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Real;

/// Largest sample for which `Auto` enumerates every sign pattern.
pub const EXHAUSTIVE_MAX_N: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PermutationMode {
    /// Exhaustive up to [`EXHAUSTIVE_MAX_N`] pairs, Monte Carlo above.
    Auto,
    Exhaustive,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    /// Mean paired difference `a - b`.
    pub statistic: f64,
    /// One-tailed p-value for `a > b`.
    pub p_value: f64,
    pub n_permutations: usize,
    pub exact: bool,
}

fn differences<T: Real>(a: &[T], b: &[T]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} paired values", a.len()),
            got: format!("{}", b.len()),
        });
    }
    if a.len() < 2 {
        return Err(Error::invalid("paired comparison needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x.as_f64() - y.as_f64()).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("paired values must be finite"));
    }
    Ok(d)
}

/// One-tailed paired sign-flip permutation test of `a > b` on the mean
/// difference.
pub fn permutation_paired_ttest<T: Real>(
    a: &[T],
    b: &[T],
    mode: PermutationMode,
    n_perm: usize,
    rng_seed: u64,
) -> Result<PermutationResult> {
    let d = differences(a, b)?;
    let n = d.len();
    let observed = d.iter().sum::<f64>() / n as f64;
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale.max(1.0);
    let threshold = observed - tol;

    let exhaustive = match mode {
        PermutationMode::Exhaustive => {
            if n > 30 {
                return Err(Error::invalid(format!("exhaustive test over {n} pairs is too large")));
            }
            true
        }
        PermutationMode::MonteCarlo => false,
        PermutationMode::Auto => n <= EXHAUSTIVE_MAX_N,
    };

    if exhaustive {
        let total = 1usize << n;
        let mut count = 0usize;
        for mask in 0..total {
            let s: f64 = d
                .iter()
                .enumerate()
                .map(|(i, &v)| if mask >> i & 1 == 1 { -v } else { v })
                .sum();
            if s / n as f64 >= threshold {
                count += 1;
            }
        }
        return Ok(PermutationResult {
            statistic: observed,
            p_value: count as f64 / total as f64,
            n_permutations: total,
            exact: true,
        });
    }

    if n_perm == 0 {
        return Err(Error::invalid("Monte Carlo test needs at least one permutation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut count = 0usize;
    for _ in 0..n_perm {
        let s: f64 = d.iter().map(|&v| if rng.random::<bool>() { -v } else { v }).sum();
        if s / n as f64 >= threshold {
            count += 1;
        }
    }
    // The observed labelling counts as one of the draws.
    Ok(PermutationResult {
        statistic: observed,
        p_value: (count + 1) as f64 / (n_perm + 1) as f64,
        n_permutations: n_perm,
        exact: false,
    })
}

/// Paired standardized mean difference: mean(a - b) / sd(a - b), with the
/// sample (n - 1) standard deviation.
pub fn standardized_mean_difference<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    let d = differences(a, b)?;
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    // Rounding can leave a tiny spread in nominally constant differences.
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if var.sqrt() <= 1e-12 * scale || var <= 0.0 {
        return Err(Error::invalid("paired differences have zero variance"));
    }
    Ok(mean / var.sqrt())
}

pub fn pearson_corr<T: Real>(x: &[T], y: &[T]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} values", x.len()),
            got: format!("{}", y.len()),
        });
    }
    if x.len() < 2 {
        return Err(Error::invalid("correlation needs at least two points"));
    }
    let n = x.len() as f64;
    let xs: Vec<f64> = x.iter().map(|&v| v.as_f64()).collect();
    let ys: Vec<f64> = y.iter().map(|&v| v.as_f64()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b) in xs.iter().zip(&ys) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::invalid("correlation of a constant series"));
    }
    if !sxy.is_finite() || !sxx.is_finite() || !syy.is_finite() {
        return Err(Error::invalid("correlation inputs must be finite"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pairwise tests between named accuracy vectors (row minus column).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceMatrix {
    pub names: Vec<String>,
    pub p_values: Mat<f64>,
    pub smd: Mat<f64>,
}

pub fn significance_matrix(
    results: &[(String, Vec<f64>)],
    mode: PermutationMode,
    n_perm: usize,
    rng_seed: u64,
) -> Result<SignificanceMatrix> {
    let k = results.len();
    let mut p_values = Mat::from_fn(k, k, |_, _| 1.0);
    let mut smd = Mat::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let (a, b) = (&results[i].1, &results[j].1);
            p_values[(i, j)] = permutation_paired_ttest(a, b, mode, n_perm, rng_seed)?.p_value;
            smd[(i, j)] = match standardized_mean_difference(a, b) {
                Ok(v) => v,
                Err(Error::InvalidInput(_)) if a.len() >= 2 => {
                    // Constant difference: zero when identical, else unbounded.
                    let m = a.iter().zip(b).map(|(x, y)| x - y).sum::<f64>();
                    if m == 0.0 {
                        0.0
                    } else {
                        m.signum() * f64::INFINITY
                    }
                }
                Err(e) => return Err(e),
            };
        }
    }
    Ok(SignificanceMatrix {
        names: results.iter().map(|(n, _)| n.clone()).collect(),
        p_values,
        smd,
    })
}
