//! Synthetic multi-subject motor-imagery data with a controllable
//! per-subject covariance shift.
//!
//! Each trial is `A_k · S + σ N`: white Gaussian sources `S` whose variance
//! depends on the class (class 0 boosts source 0, class 1 boosts source 1),
//! a subject-specific mixing matrix `A_k` and white sensor noise. An optional
//! SPD drift `G` makes the session nonstationary: trial `j` of `n` is mixed by
//! `A_k · G^{j/(n-1)}`, a geodesic from `A_k` to `A_k · G`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::seed::derive_seed;
use crate::spdcore::{eig_symmetric, powm, sym_eig, SpdMatrix};
use crate::trialdata::{quantize_to_storage, Dataset, Label, Trial, TrialSet};

/// Mixing matrices above this condition number are rejected.
pub const MAX_CONDITION: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSubjectSpec {
    pub subject_id: u32,
    pub mixing: Mat<f64>,
    /// End-of-session drift multiplier; `None` for a stationary session.
    #[serde(default)]
    pub drift: Option<Mat<f64>>,
    /// Latent source variances for class 0 and class 1.
    pub class_source_variances: [Vec<f64>; 2],
    pub noise_std: f64,
    pub trials_per_class: usize,
    pub samples: usize,
    pub fs: f64,
    pub rng_seed: u64,
}

/// 2-norm condition number of a square matrix.
pub fn condition_number(a: &Mat<f64>) -> Result<f64> {
    let eig = eig_symmetric(&a.transpose().matmul(a)?)?;
    let (hi, lo) = (eig.max_value(), eig.min_value());
    if lo <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((hi / lo).sqrt())
}

impl SyntheticSubjectSpec {
    pub fn channels(&self) -> usize {
        self.mixing.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.mixing.rows();
        if c == 0 || !self.mixing.is_square() || !self.mixing.is_finite() {
            return Err(Error::invalid("mixing must be a finite non-empty square matrix"));
        }
        let cond = condition_number(&self.mixing)?;
        if cond > MAX_CONDITION {
            return Err(Error::invalid(format!("mixing condition number {cond:.3e} exceeds {MAX_CONDITION:e}")));
        }
        if let Some(g) = &self.drift {
            if g.rows() != c || g.cols() != c {
                return Err(Error::invalid("drift must match the mixing shape"));
            }
            SpdMatrix::new(g.clone())?;
        }
        for v in &self.class_source_variances {
            if v.len() != c || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(Error::invalid("source variances must be positive, one per channel"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise std must be non-negative"));
        }
        if self.trials_per_class == 0 || self.samples < 2 || !(self.fs > 0.0) {
            return Err(Error::invalid("trial count, length and rate must be positive"));
        }
        Ok(())
    }

    /// Mixing at session position `s ∈ [0, 1]`.
    pub fn mixing_at(&self, s: f64) -> Result<Mat<f64>> {
        match &self.drift {
            None => Ok(self.mixing.clone()),
            Some(g) => self.mixing.matmul(&powm(&SpdMatrix::new(g.clone())?, s)?.into_mat()),
        }
    }

    /// `A · diag(v_class) · Aᵀ + σ² I` at the start of the session.
    pub fn expected_covariance(&self, class: Label) -> Result<Mat<f64>> {
        self.expected_covariance_at(class, 0.0)
    }

    pub fn expected_covariance_at(&self, class: Label, s: f64) -> Result<Mat<f64>> {
        let a = self.mixing_at(s)?;
        let v = &self.class_source_variances[class as usize];
        let av = Mat::from_fn(self.channels(), self.channels(), |i, j| a[(i, j)] * v[j]);
        let mut cov = av.matmul(&a.transpose())?;
        for i in 0..self.channels() {
            cov[(i, i)] += self.noise_std * self.noise_std;
        }
        Ok(cov)
    }
}

/// Balanced labels, shuffled within consecutive runs of 24 (12 per class).
fn block_labels(per_class: usize, rng: &mut ChaCha8Rng) -> Vec<Label> {
    let mut remaining = [per_class, per_class];
    let mut labels = Vec::with_capacity(2 * per_class);
    while remaining[0] + remaining[1] > 0 {
        let take = [remaining[0].min(12), remaining[1].min(12)];
        let mut block: Vec<Label> = std::iter::repeat_n(0, take[0]).chain(std::iter::repeat_n(1, take[1])).collect();
        block.shuffle(rng);
        labels.extend(block);
        remaining[0] -= take[0];
        remaining[1] -= take[1];
    }
    labels
}

/// Draws one subject's trials. Samples are rounded to `f32` so the set
/// round-trips through EEGB unchanged.
pub fn generate_subject(spec: &SyntheticSubjectSpec) -> Result<TrialSet> {
    spec.validate()?;
    let c = spec.channels();
    let t = spec.samples;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let labels = block_labels(spec.trials_per_class, &mut rng);
    let sd: [Vec<f64>; 2] = [
        spec.class_source_variances[0].iter().map(|v| v.sqrt()).collect(),
        spec.class_source_variances[1].iter().map(|v| v.sqrt()).collect(),
    ];
    let drift = match &spec.drift {
        Some(g) => Some(sym_eig(&SpdMatrix::new(g.clone())?)?),
        None => None,
    };
    let n = labels.len();
    let mut trials = Vec::with_capacity(n);
    for (j, &label) in labels.iter().enumerate() {
        let mixing = match &drift {
            Some(eig) => {
                let pos = if n > 1 { j as f64 / (n - 1) as f64 } else { 0.0 };
                spec.mixing.mul(&eig.map(|l| l.powf(pos)))
            }
            None => spec.mixing.clone(),
        };
        let s = Mat::from_fn(c, t, |i, _| sd[label as usize][i] * rng.sample::<f64, _>(StandardNormal));
        let mut x = mixing.matmul(&s)?;
        if spec.noise_std > 0.0 {
            for v in x.as_mut_slice() {
                *v += spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        trials.push(Trial::new(x, label)?);
    }
    let mut set = TrialSet::new(spec.subject_id, "synthetic", spec.fs, trials)?;
    quantize_to_storage(&mut set);
    Ok(set)
}

/// Haar-random orthogonal matrix via Gram-Schmidt on a Gaussian draw.
pub fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
    loop {
        let g = Mat::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut ok = true;
        for j in 0..n {
            let mut v: Vec<f64> = (0..n).map(|i| g[(i, j)]).collect();
            // Two passes keep the basis orthogonal to machine precision.
            for _ in 0..2 {
                for q in &cols {
                    let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                    for (vi, qi) in v.iter_mut().zip(q) {
                        *vi -= dot * qi;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
        if ok {
            return Mat::from_fn(n, n, |i, j| cols[j][i]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftLevel {
    None,
    Weak,
    Strong,
}

impl ShiftLevel {
    /// Condition number of the per-subject mixing.
    pub fn condition(self) -> f64 {
        match self {
            ShiftLevel::None => 1.0,
            ShiftLevel::Weak => 3.0,
            ShiftLevel::Strong => 30.0,
        }
    }

    /// Condition number of the end-of-session drift.
    pub fn drift_condition(self) -> f64 {
        match self {
            ShiftLevel::None => 1.0,
            ShiftLevel::Weak => 1.5,
            ShiftLevel::Strong => 2.0,
        }
    }
}

impl std::str::FromStr for ShiftLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ShiftLevel::None),
            "weak" => Ok(ShiftLevel::Weak),
            "strong" => Ok(ShiftLevel::Strong),
            other => Err(Error::invalid(format!("unknown shift level {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub n_subjects: usize,
    pub channels: usize,
    pub samples: usize,
    pub fs: f64,
    pub trials_per_class: usize,
    pub shift: ShiftLevel,
    /// Extra variance on the class's own source.
    pub class_boost: f64,
    pub noise_std: f64,
    /// Drift condition number; `None` uses the shift level's default.
    pub session_drift: Option<f64>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            n_subjects: 8,
            channels: 8,
            samples: 64,
            fs: 128.0,
            trials_per_class: 48,
            shift: ShiftLevel::Strong,
            class_boost: 0.8,
            noise_std: 0.1,
            session_drift: None,
        }
    }
}

/// Mixing `Q · D · Qᵀ` with log-uniform diagonal `D` spanning condition
/// number `kappa` exactly (for `n ≥ 2`).
pub fn shifted_mixing(n: usize, kappa: f64, rng: &mut ChaCha8Rng) -> Mat<f64> {
    if kappa <= 1.0 || n == 1 {
        return Mat::identity(n);
    }
    let q = random_orthogonal(n, rng);
    let half = kappa.ln() / 2.0;
    let mut logs: Vec<f64> = (0..n).map(|_| rng.random_range(-half..half)).collect();
    logs[0] = -half;
    logs[n - 1] = half;
    let qd = Mat::from_fn(n, n, |i, j| q[(i, j)] * logs[j].exp());
    qd.mul(&q.transpose())
}

/// Spec of subject `id`; depends only on `(cfg, seed, id)`.
pub fn benchmark_subject_spec(cfg: &BenchmarkConfig, seed: u64, id: u32) -> SyntheticSubjectSpec {
    let sub_seed = derive_seed(seed, &["synth-subject", &id.to_string()]);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
    let mixing = shifted_mixing(cfg.channels, cfg.shift.condition(), &mut rng);
    let drift_kappa = cfg.session_drift.unwrap_or(cfg.shift.drift_condition());
    let drift = (drift_kappa > 1.0).then(|| shifted_mixing(cfg.channels, drift_kappa, &mut rng));
    let mut v0 = vec![1.0; cfg.channels];
    let mut v1 = vec![1.0; cfg.channels];
    v0[0] += cfg.class_boost;
    if cfg.channels > 1 {
        v1[1] += cfg.class_boost;
    }
    SyntheticSubjectSpec {
        subject_id: id,
        mixing,
        drift,
        class_source_variances: [v0, v1],
        noise_std: cfg.noise_std,
        trials_per_class: cfg.trials_per_class,
        samples: cfg.samples,
        fs: cfg.fs,
        rng_seed: rng.random(),
    }
}

/// Subjects numbered `1..=n_subjects`.
pub fn make_benchmark(cfg: &BenchmarkConfig, seed: u64) -> Result<Dataset> {
    if cfg.n_subjects < 2 {
        return Err(Error::invalid("a benchmark needs at least two subjects"));
    }
    if cfg.channels < 2 {
        return Err(Error::invalid("a benchmark needs at least two channels"));
    }
    let subjects = (1..=cfg.n_subjects as u32)
        .map(|id| generate_subject(&benchmark_subject_spec(cfg, seed, id)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(format!("synthetic-{:?}-{seed}", cfg.shift).to_lowercase(), subjects)
}
