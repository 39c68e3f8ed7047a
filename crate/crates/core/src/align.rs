//! Euclidean and Riemannian alignment of trial sets.
//!
//! Both whiten each trial with `R^{-1/2}`, where `R` is a reference matrix:
//! the arithmetic mean of trial covariances (Euclidean) or their geometric
//! mean (Riemannian recentering). Offline alignment computes one reference per
//! consecutive group of trials; pseudo-online alignment freezes the reference
//! from the first group and applies it to everything after.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::spdcore::{arithmetic_mean, invsqrtm, karcher_mean, KarcherOptions, SpdMatrix};
use crate::trialdata::{Trial, TrialSet};

pub const DEFAULT_GROUP_SIZE: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Euclidean,
    Riemannian,
}

impl ReferenceKind {
    pub fn short_name(self) -> &'static str {
        match self {
            ReferenceKind::Euclidean => "EA",
            ReferenceKind::Riemannian => "RA",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    OfflineGrouped,
    PseudoOnline,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPolicy {
    pub mode: AlignmentMode,
    pub group_size: usize,
    pub kind: ReferenceKind,
    /// Optional ridge `ε`: adds `ε · trace(C) / c · I` to every trial covariance.
    #[serde(default)]
    pub ridge: Option<f64>,
    #[serde(default)]
    pub karcher: KarcherOptions,
}

impl AlignmentPolicy {
    pub fn new(mode: AlignmentMode, kind: ReferenceKind) -> Self {
        AlignmentPolicy {
            mode,
            group_size: DEFAULT_GROUP_SIZE,
            kind,
            ridge: None,
            karcher: KarcherOptions::default(),
        }
    }

    pub fn none() -> Self {
        Self::new(AlignmentMode::None, ReferenceKind::Euclidean)
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::invalid(format!("group size {} must be at least 2", self.group_size)));
        }
        if let Some(r) = self.ridge {
            if !(r >= 0.0) {
                return Err(Error::invalid("ridge must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn is_aligned(&self) -> bool {
        self.mode != AlignmentMode::None
    }
}

/// Alignment reference with its cached whitener `matrix^{-1/2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMatrix {
    pub kind: ReferenceKind,
    pub matrix: SpdMatrix<f64>,
    pub whitener: SpdMatrix<f64>,
}

impl ReferenceMatrix {
    pub fn from_matrix(kind: ReferenceKind, matrix: SpdMatrix<f64>) -> Result<Self> {
        let whitener = invsqrtm(&matrix)?;
        Ok(ReferenceMatrix { kind, matrix, whitener })
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }
}

/// Scatter matrix normalized by sample count, `X Xᵀ / t`.
pub fn trial_covariance(trial: &Trial, ridge: Option<f64>) -> Result<SpdMatrix<f64>> {
    let c = trial.channels();
    let t = trial.samples() as f64;
    let mut cov = trial.data.gram().scale(1.0 / t);
    if let Some(eps) = ridge {
        let shift = eps * cov.trace() / c as f64;
        for i in 0..c {
            cov[(i, i)] += shift;
        }
    }
    SpdMatrix::new_well_conditioned(cov).map_err(|e| match e {
        Error::NearSingular { .. } | Error::NotSpd(_) => Error::RankDeficient {
            channels: c,
            samples: trial.samples(),
        },
        other => other,
    })
}

fn covariances(trials: &[Trial], ridge: Option<f64>) -> Result<Vec<SpdMatrix<f64>>> {
    if trials.is_empty() {
        return Err(Error::invalid("reference needs at least one trial"));
    }
    trials.iter().map(|t| trial_covariance(t, ridge)).collect()
}

/// Arithmetic mean of trial covariances.
pub fn euclidean_reference(trials: &[Trial], ridge: Option<f64>) -> Result<ReferenceMatrix> {
    let covs = covariances(trials, ridge)?;
    ReferenceMatrix::from_matrix(ReferenceKind::Euclidean, arithmetic_mean(&covs)?)
}

/// Geometric (Karcher) mean of trial covariances.
pub fn riemannian_reference(trials: &[Trial], ridge: Option<f64>, opts: KarcherOptions) -> Result<ReferenceMatrix> {
    let covs = covariances(trials, ridge)?;
    ReferenceMatrix::from_matrix(ReferenceKind::Riemannian, karcher_mean(&covs, opts)?)
}

pub fn compute_reference(trials: &[Trial], policy: &AlignmentPolicy) -> Result<ReferenceMatrix> {
    match policy.kind {
        ReferenceKind::Euclidean => euclidean_reference(trials, policy.ridge),
        ReferenceKind::Riemannian => riemannian_reference(trials, policy.ridge, policy.karcher),
    }
}

/// `whitener · X`, label unchanged.
pub fn apply_reference(r: &ReferenceMatrix, trial: &Trial) -> Result<Trial> {
    if trial.channels() != r.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} channels", r.dim()),
            got: format!("{}", trial.channels()),
        });
    }
    Ok(Trial {
        data: r.whitener.as_mat().matmul(&trial.data)?,
        label: trial.label,
    })
}

fn apply_all(r: &ReferenceMatrix, trials: &[Trial]) -> Result<Vec<Trial>> {
    trials.iter().map(|t| apply_reference(r, t)).collect()
}

/// Aligns consecutive groups of `group_size` trials, each with its own reference.
pub fn align_offline(set: &TrialSet, policy: &AlignmentPolicy) -> Result<TrialSet> {
    policy.validate()?;
    if !policy.is_aligned() {
        return Ok(set.clone());
    }
    let g = policy.group_size;
    if set.len() % g != 0 {
        return Err(Error::invalid(format!(
            "{} trials is not a multiple of group size {g}; trim first",
            set.len()
        )));
    }
    let mut out = Vec::with_capacity(set.len());
    for group in set.trials.chunks(g) {
        let r = compute_reference(group, policy)?;
        out.extend(apply_all(&r, group)?);
    }
    Ok(set.with_trials(out))
}

/// Aligns a whole set with a single reference computed from all of it.
pub fn align_whole(set: &TrialSet, policy: &AlignmentPolicy) -> Result<TrialSet> {
    if !policy.is_aligned() || set.is_empty() {
        return Ok(set.clone());
    }
    let r = compute_reference(&set.trials, policy)?;
    Ok(set.with_trials(apply_all(&r, &set.trials)?))
}

/// Reference from the first `group_size` trials, applied to the whole set.
/// Returns `(calibration, rest)`, both aligned with that single reference.
pub fn align_pseudo_online(set: &TrialSet, policy: &AlignmentPolicy) -> Result<(TrialSet, TrialSet)> {
    policy.validate()?;
    let g = policy.group_size;
    if set.len() < 2 * g {
        return Err(Error::invalid(format!(
            "pseudo-online alignment needs at least {} trials, got {}",
            2 * g,
            set.len()
        )));
    }
    let (calib, rest) = set.trials.split_at(g);
    if !policy.is_aligned() {
        return Ok((set.with_trials(calib.to_vec()), set.with_trials(rest.to_vec())));
    }
    let r = compute_reference(calib, policy)?;
    Ok((set.with_trials(apply_all(&r, calib)?), set.with_trials(apply_all(&r, rest)?)))
}

/// Arithmetic mean of `X Xᵀ / t` over a slice of trials.
pub fn mean_covariance(trials: &[Trial]) -> Result<Mat<f64>> {
    let first = trials.first().ok_or_else(|| Error::invalid("no trials"))?;
    let c = first.channels();
    let mut acc = Mat::zeros(c, c);
    for t in trials {
        acc = acc.add(&t.data.gram().scale(1.0 / t.samples() as f64));
    }
    Ok(acc.scale(1.0 / trials.len() as f64))
}
