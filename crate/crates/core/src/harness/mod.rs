//! Experiment orchestration: leave-one-subject-out shared models, individual
//! models and their transfer matrix, ensembles, grid search and result files.

mod ensemble;
mod grid;
mod individual;
mod report;
mod shared;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::align::{AlignmentMode, AlignmentPolicy, ReferenceKind, DEFAULT_GROUP_SIZE};
use crate::error::{Error, Result};
use crate::neural::{ModelConfig, TrainConfig};
use crate::seed::sha256_hex;
use crate::spdcore::KarcherOptions;
use crate::trialdata::Dataset;

pub use ensemble::{
    ensemble_name, ensemble_predict, run_ensembles, select_k_best, weighted_vote, EnsembleFoldRecord, EnsembleRun,
    EnsembleSpec,
};
pub use grid::{grid_point_score, grid_search, GridPoint, GridResult, GridSpace};
pub use individual::{run_individual_models, IndividualModel, IndividualRun, TransferReport};
pub use report::{
    convergence_epochs, learning_curves_csv, read_results_csv, summarize, write_results_csv, PipelineSummary,
};
pub use shared::{
    audit_fold, run_shared_pipeline, run_shared_pipelines, BaseRecord, FoldRecord, PipelineSpec, SharedRun, SourceKey,
    TrialId,
};

/// Leave-one-subject-out fold: one target, every other subject a source.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub target: u32,
    pub sources: Vec<u32>,
}

pub fn loso_folds(dataset: &Dataset) -> Result<Vec<Fold>> {
    let ids = dataset.subject_ids();
    if ids.len() < 2 {
        return Err(Error::invalid("leave-one-subject-out needs at least two subjects"));
    }
    Ok(ids
        .iter()
        .map(|&target| Fold {
            target,
            sources: ids.iter().copied().filter(|&s| s != target).collect(),
        })
        .collect())
}

/// Layer sizes; the input shape comes from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_temporal: usize,
    pub temporal_kernel: usize,
    pub n_spatial: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::for_shape(1, 1);
        ModelShape {
            n_temporal: c.n_temporal,
            temporal_kernel: c.temporal_kernel,
            n_spatial: c.n_spatial,
            pool_window: c.pool_window,
            pool_stride: c.pool_stride,
        }
    }
}

impl ModelShape {
    pub fn config(&self, channels: usize, samples: usize) -> ModelConfig {
        ModelConfig {
            channels,
            samples,
            n_temporal: self.n_temporal,
            temporal_kernel: self.temporal_kernel,
            n_spatial: self.n_spatial,
            pool_window: self.pool_window,
            pool_stride: self.pool_stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelShape,
    pub train: TrainConfig,
    pub fine_tune: TrainConfig,
    pub val_frac: f64,
    /// Offline alignment group size and calibration run length.
    pub group_size: usize,
    pub seed: u64,
    pub ridge: Option<f64>,
    pub karcher: KarcherOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelShape::default(),
            train: TrainConfig::default(),
            fine_tune: TrainConfig::fine_tune_default(),
            val_frac: 0.2,
            group_size: DEFAULT_GROUP_SIZE,
            seed: 0,
            ridge: None,
            karcher: KarcherOptions::default(),
        }
    }
}

impl ExperimentConfig {
    /// Smaller layers and budgets sized for the synthetic benchmark
    /// (8 channels, 64 samples) on a single core.
    pub fn desk_scale(seed: u64) -> Self {
        ExperimentConfig {
            model: ModelShape {
                n_temporal: 4,
                temporal_kernel: 9,
                n_spatial: 4,
                pool_window: 16,
                pool_stride: 8,
            },
            train: TrainConfig {
                learning_rate: 5e-3,
                weight_decay: 1e-4,
                max_epochs: 300,
                patience: 75,
                ..TrainConfig::default()
            },
            fine_tune: TrainConfig {
                learning_rate: 1e-2,
                max_epochs: 200,
                patience: 50,
                ..TrainConfig::fine_tune_default()
            },
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.fine_tune.validate()?;
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(Error::invalid("validation fraction must lie in (0, 1)"));
        }
        if self.group_size < 2 {
            return Err(Error::invalid("group size must be at least 2"));
        }
        Ok(())
    }

    /// Stable digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        sha256_hex(json.to_string().as_bytes())
    }

    pub fn policy(&self, mode: AlignmentMode, kind: ReferenceKind) -> AlignmentPolicy {
        AlignmentPolicy {
            mode,
            group_size: self.group_size,
            kind,
            ridge: self.ridge,
            karcher: self.karcher,
        }
    }

    pub fn model_config(&self, dataset: &Dataset) -> Result<ModelConfig> {
        let (c, t) = dataset
            .shape()
            .ok_or_else(|| Error::invalid("dataset has no trials"))?;
        let cfg = self.model.config(c, t);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectAccuracy {
    pub subject: u32,
    pub accuracy: f64,
}

/// One pipeline's per-target accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub pipeline: String,
    pub dataset: String,
    pub seed: u64,
    pub config_hash: String,
    pub per_subject: Vec<SubjectAccuracy>,
    /// Folds that failed; they are excluded, never imputed.
    pub missing: Vec<u32>,
}

impl PipelineResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.per_subject.iter().map(|s| s.accuracy).collect()
    }

    pub fn subjects(&self) -> Vec<u32> {
        self.per_subject.iter().map(|s| s.subject).collect()
    }

    pub fn mean(&self) -> Option<f64> {
        if self.per_subject.is_empty() {
            return None;
        }
        Some(self.per_subject.iter().map(|s| s.accuracy).sum::<f64>() / self.per_subject.len() as f64)
    }

    pub fn as_map(&self) -> BTreeMap<u32, f64> {
        self.per_subject.iter().map(|s| (s.subject, s.accuracy)).collect()
    }
}

/// Paired per-subject accuracy vectors for the significance matrix. Every
/// result must cover the same subjects.
pub fn paired_accuracies(results: &[PipelineResult]) -> Result<Vec<(String, Vec<f64>)>> {
    let Some(first) = results.first() else {
        return Ok(Vec::new());
    };
    let subjects: BTreeSet<u32> = first.subjects().into_iter().collect();
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        let map = r.as_map();
        if map.keys().copied().collect::<BTreeSet<_>>() != subjects || map.len() != r.per_subject.len() {
            return Err(Error::invalid(format!(
                "pipeline {} covers a different subject set than {}",
                r.pipeline, first.pipeline
            )));
        }
        out.push((r.pipeline.clone(), map.values().copied().collect()));
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_benchmark, BenchmarkConfig};

    #[test]
    fn folds_cover_every_subject_once() {
        let ds = make_benchmark(
            &BenchmarkConfig {
                n_subjects: 4,
                trials_per_class: 12,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let folds = loso_folds(&ds).unwrap();
        assert_eq!(folds.len(), 4);
        for f in &folds {
            assert_eq!(f.sources.len(), 3);
            assert!(!f.sources.contains(&f.target));
        }
        let targets: BTreeSet<u32> = folds.iter().map(|f| f.target).collect();
        assert_eq!(targets.len(), 4);
        let one = Dataset::new("x", vec![ds.subjects[0].clone()]).unwrap();
        assert!(loso_folds(&one).is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn paired_requires_same_subjects() {
        let mk = |name: &str, subs: &[u32]| PipelineResult {
            pipeline: name.into(),
            dataset: "d".into(),
            seed: 0,
            config_hash: String::new(),
            per_subject: subs.iter().map(|&s| SubjectAccuracy { subject: s, accuracy: 0.5 }).collect(),
            missing: vec![],
        };
        assert!(paired_accuracies(&[mk("a", &[1, 2]), mk("b", &[2, 1])]).is_ok());
        assert!(paired_accuracies(&[mk("a", &[1, 2]), mk("b", &[1, 3])]).is_err());
    }
}
