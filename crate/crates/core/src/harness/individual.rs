use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::shared::{prepare_sources, PreparedSource, SourceKey};
use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::neural::{train, ConvClassifier, TrainConfig, TrainHistory};
use crate::seed::derive_seed;
use crate::stats::pearson_corr;
use crate::trialdata::{split_indices, Dataset, Trial};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndividualModel {
    pub subject: u32,
    pub model: ConvClassifier,
    pub history: TrainHistory,
    /// Accuracy on the subject's own held-out split.
    pub self_accuracy: f64,
}

/// `acc[s][t]`: model of subject `s` scored on subject `t`. The diagonal holds
/// self accuracy and is left out of every mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub subjects: Vec<u32>,
    pub acc: Mat<f64>,
    pub transferability: Vec<f64>,
    pub receivability: Vec<f64>,
}

impl TransferReport {
    pub fn from_matrix(subjects: Vec<u32>, acc: Mat<f64>) -> Result<Self> {
        let n = subjects.len();
        if n < 2 || acc.rows() != n || acc.cols() != n {
            return Err(Error::invalid("transfer matrix must be square over at least two subjects"));
        }
        if acc.as_slice().iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("transfer accuracies must lie in [0, 1]"));
        }
        let off = (n - 1) as f64;
        let transferability = (0..n)
            .map(|s| (0..n).filter(|&t| t != s).map(|t| acc[(s, t)]).sum::<f64>() / off)
            .collect();
        let receivability = (0..n)
            .map(|t| (0..n).filter(|&s| s != t).map(|s| acc[(s, t)]).sum::<f64>() / off)
            .collect();
        Ok(TransferReport {
            subjects,
            acc,
            transferability,
            receivability,
        })
    }

    pub fn mean_transferability(&self) -> f64 {
        self.transferability.iter().sum::<f64>() / self.transferability.len() as f64
    }

    /// Correlation between a subject's mean accuracy as donor and as receiver.
    pub fn donor_receiver_correlation(&self) -> Result<f64> {
        pearson_corr(&self.transferability, &self.receivability)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndividualRun {
    pub source: SourceKey,
    pub models: Vec<IndividualModel>,
    /// Subjects whose model failed to train; absent from the report.
    pub failed: Vec<u32>,
    pub report: TransferReport,
}

impl IndividualRun {
    pub fn model(&self, subject: u32) -> Option<&IndividualModel> {
        self.models.iter().find(|m| m.subject == subject)
    }
}

fn train_one(p: &PreparedSource, cfg: &ExperimentConfig, dataset: &Dataset) -> Result<IndividualModel> {
    let tag = p.subject.to_string();
    let (tr, va) = split_indices(p.trials.len(), cfg.val_frac, derive_seed(cfg.seed, &["individual-split", &tag]))?;
    let pick = |idx: &[usize]| -> Vec<Trial> { idx.iter().map(|&i| p.trials[i].clone()).collect() };
    let (train_set, val_set) = (pick(&tr), pick(&va));
    let init = ConvClassifier::new(cfg.model_config(dataset)?, derive_seed(cfg.seed, &["individual-init", &tag]))?;
    let tc = TrainConfig {
        rng_seed: derive_seed(cfg.seed, &["individual-train", &tag]),
        ..cfg.train
    };
    let (model, history) = train(&init, &train_set, &val_set, &tc)?;
    let self_accuracy = model.accuracy(&val_set)?;
    Ok(IndividualModel {
        subject: p.subject,
        model,
        history,
        self_accuracy,
    })
}

/// One model per subject on its own (aligned) data, then every model scored
/// on every other subject.
pub fn run_individual_models(dataset: &Dataset, source: SourceKey, cfg: &ExperimentConfig) -> Result<IndividualRun> {
    cfg.validate()?;
    dataset.validate()?;
    let ids = dataset.subject_ids();
    if ids.len() < 2 {
        return Err(Error::invalid("transfer analysis needs at least two subjects"));
    }
    let prepared = prepare_sources(dataset, &ids, source, cfg)?;
    let trained: Vec<Result<IndividualModel>> = prepared.par_iter().map(|p| train_one(p, cfg, dataset)).collect();

    let mut models = Vec::new();
    let mut failed = Vec::new();
    for (p, r) in prepared.iter().zip(trained) {
        match r {
            Ok(m) => models.push(m),
            Err(e) => {
                warn!("individual model {}: {e}", p.subject);
                failed.push(p.subject);
            }
        }
    }
    let kept: Vec<&PreparedSource> = prepared.iter().filter(|p| !failed.contains(&p.subject)).collect();
    let n = models.len();
    let cells: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|k| {
            let (s, t) = (k / n, k % n);
            if s == t {
                return Ok(models[s].self_accuracy);
            }
            models[s].model.accuracy(&kept[t].trials)
        })
        .collect::<Result<_>>()?;
    let report = TransferReport::from_matrix(
        models.iter().map(|m| m.subject).collect(),
        Mat::from_vec(n, n, cells)?,
    )?;
    Ok(IndividualRun {
        source,
        models,
        failed,
        report,
    })
}
