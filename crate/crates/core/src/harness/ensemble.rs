use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::individual::IndividualRun;
use super::shared::{SourceKey, TrialId};
use super::{loso_folds, ExperimentConfig, PipelineResult, SubjectAccuracy};
use crate::align::{align_pseudo_online, AlignmentMode};
use crate::error::{Error, Result};
use crate::neural::ConvClassifier;
use crate::trialdata::{Dataset, Label, Trial};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub k: usize,
    pub members: Vec<u32>,
    pub weights: Vec<f64>,
}

impl EnsembleSpec {
    /// Same members with equal votes.
    pub fn unweighted(&self) -> EnsembleSpec {
        EnsembleSpec {
            weights: vec![1.0; self.members.len()],
            ..self.clone()
        }
    }
}

/// Top `k` by calibration accuracy, ties to the lower subject id, each
/// weighted by `exp(accuracy)`.
pub fn select_k_best(scores: &[(u32, f64)], k: usize) -> Result<EnsembleSpec> {
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!("cannot pick {k} of {} models", scores.len())));
    }
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(EnsembleSpec {
        k,
        members: ranked.iter().map(|r| r.0).collect(),
        weights: ranked.iter().map(|r| r.1.exp()).collect(),
    })
}

/// Class with the larger summed weight; class 0 on an exact tie.
pub fn weighted_vote(weights: &[f64], votes: &[Label]) -> Label {
    let mut total = [0.0f64; 2];
    for (w, &v) in weights.iter().zip(votes) {
        total[v as usize] += w;
    }
    if total[1] > total[0] {
        1
    } else {
        0
    }
}

pub fn ensemble_predict(spec: &EnsembleSpec, models: &BTreeMap<u32, &ConvClassifier>, trial: &Trial) -> Result<Label> {
    let votes = spec
        .members
        .iter()
        .map(|id| {
            models
                .get(id)
                .ok_or_else(|| Error::invalid(format!("ensemble member {id} has no model")))?
                .predict(&trial.data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(weighted_vote(&spec.weights, &votes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFoldRecord {
    pub target: u32,
    pub pipeline: String,
    pub spec: EnsembleSpec,
    pub accuracy: f64,
    pub calib_ids: Vec<TrialId>,
    pub test_ids: Vec<TrialId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRun {
    pub results: Vec<PipelineResult>,
    pub folds: Vec<EnsembleFoldRecord>,
}

pub fn ensemble_name(k: usize, source: SourceKey) -> String {
    let base = if k == 1 {
        "best-model".to_string()
    } else {
        format!("{k}-models")
    };
    match source.kind() {
        Some(kind) => format!("{base}-{}", kind.short_name()),
        None => base,
    }
}

/// For each target, scores the other subjects' individual models on its
/// first run, keeps the best `k` and votes on the remaining trials.
pub fn run_ensembles(
    dataset: &Dataset,
    individual: &IndividualRun,
    ks: &[usize],
    weighted: bool,
    cfg: &ExperimentConfig,
) -> Result<EnsembleRun> {
    cfg.validate()?;
    let g = cfg.group_size;
    let folds = loso_folds(dataset)?;
    let per_fold: Vec<Result<Vec<std::result::Result<EnsembleFoldRecord, (usize, Error)>>>> = folds
        .par_iter()
        .map(|fold| {
            let set = dataset
                .subject(fold.target)
                .ok_or_else(|| Error::invalid(format!("subject {} missing", fold.target)))?;
            let (calib, test) = match individual.source.kind() {
                Some(kind) => {
                    let (c, r) = align_pseudo_online(set, &cfg.policy(AlignmentMode::PseudoOnline, kind))?;
                    (c.trials, r.trials)
                }
                None => {
                    if set.len() <= g {
                        return Err(Error::invalid(format!("target {} too short for calibration", fold.target)));
                    }
                    (set.trials[..g].to_vec(), set.trials[g..].to_vec())
                }
            };
            let models: BTreeMap<u32, &ConvClassifier> = fold
                .sources
                .iter()
                .filter_map(|s| individual.model(*s).map(|m| (*s, &m.model)))
                .collect();
            let scores = models
                .iter()
                .map(|(&s, m)| Ok((s, m.accuracy(&calib)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(ks
                .iter()
                .map(|&k| {
                    let run = || -> Result<EnsembleFoldRecord> {
                        let mut spec = select_k_best(&scores, k)?;
                        if !weighted {
                            spec = spec.unweighted();
                        }
                        let mut hits = 0usize;
                        for t in &test {
                            if ensemble_predict(&spec, &models, t)? == t.label {
                                hits += 1;
                            }
                        }
                        Ok(EnsembleFoldRecord {
                            target: fold.target,
                            pipeline: ensemble_name(k, individual.source),
                            spec,
                            accuracy: hits as f64 / test.len() as f64,
                            calib_ids: (0..g).map(|i| (fold.target, i)).collect(),
                            test_ids: (g..set.len()).map(|i| (fold.target, i)).collect(),
                        })
                    };
                    run().map_err(|e| (k, e))
                })
                .collect())
        })
        .collect();

    let hash = cfg.hash();
    let mut results: Vec<PipelineResult> = ks
        .iter()
        .map(|&k| PipelineResult {
            pipeline: ensemble_name(k, individual.source),
            dataset: dataset.name.clone(),
            seed: cfg.seed,
            config_hash: hash.clone(),
            per_subject: Vec::new(),
            missing: Vec::new(),
        })
        .collect();
    let mut records = Vec::new();
    for (fold, out) in folds.iter().zip(per_fold) {
        match out {
            Ok(recs) => {
                for (i, r) in recs.into_iter().enumerate() {
                    match r {
                        Ok(rec) => {
                            results[i].per_subject.push(SubjectAccuracy {
                                subject: fold.target,
                                accuracy: rec.accuracy,
                            });
                            records.push(rec);
                        }
                        Err((k, e)) => {
                            warn!("{}-model ensemble, target {}: {e}", k, fold.target);
                            results[i].missing.push(fold.target);
                        }
                    }
                }
            }
            Err(e) => {
                warn!("ensemble target {}: {e}", fold.target);
                for r in &mut results {
                    r.missing.push(fold.target);
                }
            }
        }
    }
    Ok(EnsembleRun {
        results,
        folds: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::individual::run_individual_models;
    use crate::harness::testutil::{tiny_cfg, tiny_data};

    #[test]
    fn selection_examples() {
        let s = select_k_best(&[(0, 0.9), (1, 0.6), (2, 0.8), (3, 0.7)], 3).unwrap();
        let mut m = s.members.clone();
        m.sort();
        assert_eq!(m, vec![0, 2, 3]);
        assert_eq!(s.weights[0], 0.9f64.exp());
        let tie = select_k_best(&[(5, 0.8), (2, 0.8), (1, 0.5)], 1).unwrap();
        assert_eq!(tie.members, vec![2]);
        assert!(select_k_best(&[(1, 0.5)], 2).is_err());
    }

    #[test]
    fn vote_examples() {
        let w = |a: &[f64]| a.iter().map(|x| x.exp()).collect::<Vec<_>>();
        assert_eq!(weighted_vote(&w(&[0.5, 0.75, 1.0]), &[0, 1, 1]), 1);
        assert_eq!(weighted_vote(&w(&[1.0, 0.5, 0.5]), &[0, 1, 1]), 1);
        assert_eq!(weighted_vote(&w(&[1.0, 0.1, 0.1]), &[0, 1, 1]), 0);
        assert_eq!(weighted_vote(&[1.0, 1.0], &[1, 1]), 1);
    }

    #[test]
    fn names() {
        assert_eq!(ensemble_name(1, SourceKey::None), "best-model");
        assert_eq!(ensemble_name(3, SourceKey::Euclidean), "3-models-EA");
        assert_eq!(ensemble_name(5, SourceKey::Riemannian), "5-models-RA");
    }

    #[test]
    fn single_member_matches_model() {
        let ds = tiny_data();
        let cfg = tiny_cfg();
        let ind = run_individual_models(&ds, SourceKey::Euclidean, &cfg).unwrap();
        let run = run_ensembles(&ds, &ind, &[1, 3], true, &cfg).unwrap();
        // Only two sources per fold, so k = 3 fails everywhere.
        assert_eq!(run.results[1].missing, vec![1, 2, 3]);
        for rec in &run.folds {
            let m = &ind.model(rec.spec.members[0]).unwrap().model;
            let set = ds.subject(rec.target).unwrap();
            let (_, rest) =
                align_pseudo_online(set, &cfg.policy(AlignmentMode::PseudoOnline, crate::align::ReferenceKind::Euclidean))
                    .unwrap();
            let direct = m.accuracy(&rest.trials).unwrap();
            assert_eq!(rec.accuracy, direct);
            assert!(rec.test_ids.iter().all(|id| !rec.calib_ids.contains(id)));
        }
    }
}
