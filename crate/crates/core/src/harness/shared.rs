use std::collections::{BTreeMap, HashSet};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{loso_folds, ExperimentConfig, PipelineResult, SubjectAccuracy};
use crate::align::{align_offline, align_pseudo_online, AlignmentMode, ReferenceKind};
use crate::error::{Error, Result};
use crate::neural::{linear_probe, train, ConvClassifier, TrainConfig, TrainHistory};
use crate::seed::derive_seed;
use crate::trialdata::{split_indices, trim_indices, Dataset, Trial};

/// `(subject, index into that subject's trial set as loaded)`.
pub type TrialId = (u32, usize);

/// How source subjects are aligned before training. Pipelines sharing a key
/// share the trained model within a fold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKey {
    None,
    Euclidean,
    Riemannian,
}

impl SourceKey {
    pub fn kind(self) -> Option<ReferenceKind> {
        match self {
            SourceKey::None => None,
            SourceKey::Euclidean => Some(ReferenceKind::Euclidean),
            SourceKey::Riemannian => Some(ReferenceKind::Riemannian),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SourceKey::None => "none",
            SourceKey::Euclidean => "ea",
            SourceKey::Riemannian => "ra",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub name: String,
    pub source: SourceKey,
    /// How the target is aligned; ignored (must be `None`) for unaligned sources.
    pub target_mode: AlignmentMode,
    /// Retrain the head on the calibration run plus early source trials.
    pub fine_tune: bool,
}

impl PipelineSpec {
    pub const STANDARD: [&'static str; 8] = [
        "No-EA",
        "Offline-EA",
        "Online-EA",
        "Offline-RA",
        "Online-RA",
        "No-EA fine-tuning",
        "EA fine-tuning",
        "RA fine-tuning",
    ];

    /// One of [`Self::STANDARD`].
    pub fn standard(name: &str) -> Result<Self> {
        use AlignmentMode::{None as Plain, OfflineGrouped, PseudoOnline};
        let (source, target_mode, fine_tune) = match name {
            "No-EA" => (SourceKey::None, Plain, false),
            "Offline-EA" => (SourceKey::Euclidean, OfflineGrouped, false),
            "Online-EA" => (SourceKey::Euclidean, PseudoOnline, false),
            "Offline-RA" => (SourceKey::Riemannian, OfflineGrouped, false),
            "Online-RA" => (SourceKey::Riemannian, PseudoOnline, false),
            "No-EA fine-tuning" => (SourceKey::None, Plain, true),
            "EA fine-tuning" => (SourceKey::Euclidean, PseudoOnline, true),
            "RA fine-tuning" => (SourceKey::Riemannian, PseudoOnline, true),
            other => return Err(Error::invalid(format!("unknown pipeline {other:?}"))),
        };
        Ok(PipelineSpec {
            name: name.to_string(),
            source,
            target_mode,
            fine_tune,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let aligned_target = self.target_mode != AlignmentMode::None;
        let aligned_source = self.source != SourceKey::None;
        if aligned_target != aligned_source {
            return Err(Error::invalid(format!(
                "pipeline {}: source and target must both be aligned or both unaligned",
                self.name
            )));
        }
        Ok(())
    }

    /// Whether the first run of the target is consumed rather than scored.
    pub fn uses_calibration_run(&self) -> bool {
        self.fine_tune || self.target_mode == AlignmentMode::PseudoOnline
    }
}

/// One (target, pipeline) evaluation with the trial ids it touched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub target: u32,
    pub pipeline: String,
    pub source: SourceKey,
    pub accuracy: f64,
    pub n_scored: usize,
    pub train_ids: Vec<TrialId>,
    pub val_ids: Vec<TrialId>,
    /// Trials used for reference estimation or probing.
    pub calib_ids: Vec<TrialId>,
    pub test_ids: Vec<TrialId>,
}

/// Training trace of the model shared by pipelines with one source key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseRecord {
    pub target: u32,
    pub source: SourceKey,
    pub history: TrainHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedRun {
    pub results: Vec<PipelineResult>,
    pub folds: Vec<FoldRecord>,
    pub bases: Vec<BaseRecord>,
}

impl SharedRun {
    pub fn result(&self, pipeline: &str) -> Option<&PipelineResult> {
        self.results.iter().find(|r| r.pipeline == pipeline)
    }

    pub fn histories(&self, source: SourceKey) -> Vec<&TrainHistory> {
        self.bases.iter().filter(|b| b.source == source).map(|b| &b.history).collect()
    }
}

/// Checks that no target trial reached training or validation and that no
/// calibration trial is scored.
pub fn audit_fold(rec: &FoldRecord) -> Result<()> {
    let fail = |what: &str| Err(Error::invalid(format!("leakage in {} / target {}: {what}", rec.pipeline, rec.target)));
    let train: HashSet<_> = rec.train_ids.iter().collect();
    let val: HashSet<_> = rec.val_ids.iter().collect();
    let calib: HashSet<_> = rec.calib_ids.iter().collect();
    if train.len() != rec.train_ids.len() || val.len() != rec.val_ids.len() {
        return fail("duplicate ids in training or validation");
    }
    if !train.is_disjoint(&val) {
        return fail("training and validation overlap");
    }
    if train.iter().chain(val.iter()).any(|id| id.0 == rec.target) {
        return fail("target trial used for training");
    }
    if rec.test_ids.iter().any(|id| calib.contains(id)) {
        return fail("calibration trial scored");
    }
    if rec.test_ids.iter().any(|id| id.0 != rec.target) {
        return fail("non-target trial scored");
    }
    Ok(())
}

pub(super) struct PreparedSource {
    pub subject: u32,
    /// Original indices of the kept (trimmed) trials.
    pub ids: Vec<usize>,
    pub trials: Vec<Trial>,
}

/// Trims each subject to whole groups and aligns it offline under `key`.
pub(super) fn prepare_sources(dataset: &Dataset, sources: &[u32], key: SourceKey, cfg: &ExperimentConfig) -> Result<Vec<PreparedSource>> {
    sources
        .iter()
        .map(|&s| {
            let set = dataset
                .subject(s)
                .ok_or_else(|| Error::invalid(format!("subject {s} missing")))?;
            let ids = trim_indices(set, cfg.group_size, derive_seed(cfg.seed, &["trim", &s.to_string()]))?;
            let kept = set.select(&ids);
            let trials = match key.kind() {
                Some(kind) => align_offline(&kept, &cfg.policy(AlignmentMode::OfflineGrouped, kind))?.trials,
                None => kept.trials,
            };
            Ok(PreparedSource { subject: s, ids, trials })
        })
        .collect()
}

struct TargetView {
    calib: Vec<(TrialId, Trial)>,
    test: Vec<(TrialId, Trial)>,
}

fn prepare_target(dataset: &Dataset, target: u32, spec: &PipelineSpec, cfg: &ExperimentConfig) -> Result<TargetView> {
    let set = dataset
        .subject(target)
        .ok_or_else(|| Error::invalid(format!("subject {target} missing")))?;
    let g = cfg.group_size;
    let tagged = |ids: &[usize], trials: Vec<Trial>| -> Vec<(TrialId, Trial)> {
        ids.iter().map(|&i| (target, i)).zip(trials).collect()
    };
    let (ids, trials): (Vec<usize>, Vec<Trial>) = match (spec.target_mode, spec.source.kind()) {
        (AlignmentMode::OfflineGrouped, Some(kind)) => {
            let ids = trim_indices(set, g, derive_seed(cfg.seed, &["trim", &target.to_string()]))?;
            let aligned = align_offline(&set.select(&ids), &cfg.policy(AlignmentMode::OfflineGrouped, kind))?;
            (ids, aligned.trials)
        }
        (AlignmentMode::PseudoOnline, Some(kind)) => {
            let (calib, rest) = align_pseudo_online(set, &cfg.policy(AlignmentMode::PseudoOnline, kind))?;
            ((0..set.len()).collect(), calib.trials.into_iter().chain(rest.trials).collect())
        }
        _ => ((0..set.len()).collect(), set.trials.clone()),
    };
    let all = tagged(&ids, trials);
    if !spec.uses_calibration_run() {
        return Ok(TargetView {
            calib: Vec::new(),
            test: all,
        });
    }
    if all.len() <= g {
        return Err(Error::invalid(format!(
            "target {target} has {} trials; nothing left after a calibration run of {g}",
            all.len()
        )));
    }
    let mut all = all;
    let test = all.split_off(g);
    Ok(TargetView { calib: all, test })
}

pub(super) fn accuracy_on(model: &ConvClassifier, trials: &[(TrialId, Trial)]) -> Result<f64> {
    let mut hits = 0usize;
    for (_, t) in trials {
        if model.predict(&t.data)? == t.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials.len() as f64)
}

struct TaskOutput {
    base: BaseRecord,
    records: Vec<std::result::Result<FoldRecord, (String, Error)>>,
}

fn run_task(
    dataset: &Dataset,
    target: u32,
    sources: &[u32],
    key: SourceKey,
    specs: &[&PipelineSpec],
    cfg: &ExperimentConfig,
) -> Result<TaskOutput> {
    let model_cfg = cfg.model_config(dataset)?;
    let prepared = prepare_sources(dataset, sources, key, cfg)?;
    let pool: Vec<(TrialId, &Trial)> = prepared
        .iter()
        .flat_map(|p| p.ids.iter().map(move |&i| (p.subject, i)).zip(p.trials.iter()))
        .collect();
    // Seeds depend on the target only, so every source key starts from the
    // same weights and split.
    let tag = target.to_string();
    let (tr, va) = split_indices(pool.len(), cfg.val_frac, derive_seed(cfg.seed, &["split", &tag]))?;
    let train_trials: Vec<Trial> = tr.iter().map(|&i| pool[i].1.clone()).collect();
    let val_trials: Vec<Trial> = va.iter().map(|&i| pool[i].1.clone()).collect();
    let train_ids: Vec<TrialId> = tr.iter().map(|&i| pool[i].0).collect();
    let val_ids: Vec<TrialId> = va.iter().map(|&i| pool[i].0).collect();

    let init = ConvClassifier::new(model_cfg, derive_seed(cfg.seed, &["init", &tag]))?;
    let tc = TrainConfig {
        rng_seed: derive_seed(cfg.seed, &["train", &tag]),
        ..cfg.train
    };
    let (base, history) = train(&init, &train_trials, &val_trials, &tc)?;

    let g = cfg.group_size;
    let records = specs
        .iter()
        .map(|spec| {
            let run = || -> Result<FoldRecord> {
                let view = prepare_target(dataset, target, spec, cfg)?;
                let mut calib_ids: Vec<TrialId> = view.calib.iter().map(|(id, _)| *id).collect();
                let model = if spec.fine_tune {
                    let mut probe_set: Vec<Trial> = view.calib.iter().map(|(_, t)| t.clone()).collect();
                    for p in &prepared {
                        let n = g.min(p.trials.len());
                        probe_set.extend(p.trials[..n].iter().cloned());
                        calib_ids.extend(p.ids[..n].iter().map(|&i| (p.subject, i)));
                    }
                    let mut m = base.clone();
                    m.reset_head(derive_seed(cfg.seed, &["head", &tag, &spec.name]));
                    let ft = TrainConfig {
                        rng_seed: derive_seed(cfg.seed, &["probe", &tag, &spec.name]),
                        ..cfg.fine_tune
                    };
                    linear_probe(&m, &probe_set, &ft)?.0
                } else {
                    base.clone()
                };
                Ok(FoldRecord {
                    target,
                    pipeline: spec.name.clone(),
                    source: key,
                    accuracy: accuracy_on(&model, &view.test)?,
                    n_scored: view.test.len(),
                    train_ids: train_ids.clone(),
                    val_ids: val_ids.clone(),
                    calib_ids,
                    test_ids: view.test.iter().map(|(id, _)| *id).collect(),
                })
            };
            run().map_err(|e| (spec.name.clone(), e))
        })
        .collect();
    Ok(TaskOutput {
        base: BaseRecord {
            target,
            source: key,
            history,
        },
        records,
    })
}

/// Runs every pipeline in `specs` under leave-one-subject-out. One model is
/// trained per (fold, source key) and shared by the pipelines using that key.
/// A failed fold is logged and listed as missing.
pub fn run_shared_pipelines(dataset: &Dataset, specs: &[PipelineSpec], cfg: &ExperimentConfig) -> Result<SharedRun> {
    cfg.validate()?;
    dataset.validate()?;
    cfg.model_config(dataset)?;
    for s in specs {
        s.validate()?;
    }
    let folds = loso_folds(dataset)?;
    let mut keys: Vec<SourceKey> = specs.iter().map(|s| s.source).collect();
    keys.sort();
    keys.dedup();
    let tasks: Vec<(usize, SourceKey)> = (0..folds.len()).flat_map(|f| keys.iter().map(move |&k| (f, k))).collect();

    let outputs: Vec<Result<TaskOutput>> = tasks
        .par_iter()
        .map(|&(f, key)| {
            let fold = &folds[f];
            let mine: Vec<&PipelineSpec> = specs.iter().filter(|s| s.source == key).collect();
            run_task(dataset, fold.target, &fold.sources, key, &mine, cfg)
        })
        .collect();

    let hash = cfg.hash();
    let mut per_pipeline: BTreeMap<&str, (Vec<SubjectAccuracy>, Vec<u32>)> =
        specs.iter().map(|s| (s.name.as_str(), (Vec::new(), Vec::new()))).collect();
    let mut fold_records = Vec::new();
    let mut bases = Vec::new();
    for (&(f, key), out) in tasks.iter().zip(outputs) {
        let target = folds[f].target;
        match out {
            Ok(o) => {
                bases.push(o.base);
                for r in o.records {
                    match r {
                        Ok(rec) => {
                            let entry = per_pipeline.get_mut(rec.pipeline.as_str()).expect("known pipeline");
                            entry.0.push(SubjectAccuracy {
                                subject: target,
                                accuracy: rec.accuracy,
                            });
                            fold_records.push(rec);
                        }
                        Err((name, e)) => {
                            warn!("pipeline {name}, target {target}: {e}");
                            per_pipeline.get_mut(name.as_str()).expect("known pipeline").1.push(target);
                        }
                    }
                }
            }
            Err(e) => {
                warn!("target {target}, sources {}: {e}", key.name());
                for s in specs.iter().filter(|s| s.source == key) {
                    per_pipeline.get_mut(s.name.as_str()).expect("known pipeline").1.push(target);
                }
            }
        }
    }
    let results = specs
        .iter()
        .map(|s| {
            let (per_subject, missing) = per_pipeline.remove(s.name.as_str()).unwrap_or_default();
            PipelineResult {
                pipeline: s.name.clone(),
                dataset: dataset.name.clone(),
                seed: cfg.seed,
                config_hash: hash.clone(),
                per_subject,
                missing,
            }
        })
        .collect();
    Ok(SharedRun {
        results,
        folds: fold_records,
        bases,
    })
}

pub fn run_shared_pipeline(dataset: &Dataset, spec: &PipelineSpec, cfg: &ExperimentConfig) -> Result<PipelineResult> {
    let run = run_shared_pipelines(dataset, std::slice::from_ref(spec), cfg)?;
    Ok(run.results.into_iter().next().expect("one pipeline requested"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::testutil::{tiny_cfg, tiny_data};

    #[test]
    fn standard_specs_parse_and_validate() {
        for name in PipelineSpec::STANDARD {
            PipelineSpec::standard(name).unwrap().validate().unwrap();
        }
        assert!(PipelineSpec::standard("Half-EA").is_err());
        let bad = PipelineSpec {
            name: "x".into(),
            source: SourceKey::None,
            target_mode: AlignmentMode::PseudoOnline,
            fine_tune: false,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn every_mode_passes_leakage_audit() {
        let ds = tiny_data();
        let specs: Vec<_> = PipelineSpec::STANDARD
            .iter()
            .map(|n| PipelineSpec::standard(n).unwrap())
            .collect();
        let run = run_shared_pipelines(&ds, &specs, &tiny_cfg()).unwrap();
        assert_eq!(run.folds.len(), 3 * specs.len());
        assert_eq!(run.bases.len(), 3 * 3);
        for rec in &run.folds {
            audit_fold(rec).unwrap();
            assert!((0.0..=1.0).contains(&rec.accuracy));
            let spec = PipelineSpec::standard(&rec.pipeline).unwrap();
            let expect = if spec.uses_calibration_run() { 24 } else { 48 };
            assert_eq!(rec.n_scored, expect, "{}", rec.pipeline);
        }
        for r in &run.results {
            assert_eq!(r.per_subject.len(), 3);
            assert!(r.missing.is_empty());
        }
    }

    #[test]
    fn audit_catches_overlap() {
        let rec = FoldRecord {
            target: 1,
            pipeline: "x".into(),
            source: SourceKey::None,
            accuracy: 0.5,
            n_scored: 1,
            train_ids: vec![(2, 0)],
            val_ids: vec![(2, 1)],
            calib_ids: vec![(1, 0)],
            test_ids: vec![(1, 1)],
        };
        audit_fold(&rec).unwrap();
        let mut r = rec.clone();
        r.test_ids.push((1, 0));
        assert!(audit_fold(&r).is_err());
        let mut r = rec.clone();
        r.train_ids.push((1, 5));
        assert!(audit_fold(&r).is_err());
        let mut r = rec;
        r.val_ids.push((2, 0));
        assert!(audit_fold(&r).is_err());
    }

    #[test]
    fn deterministic_and_partial_failure() {
        let ds = tiny_data();
        let spec = PipelineSpec::standard("Online-EA").unwrap();
        let a = run_shared_pipeline(&ds, &spec, &tiny_cfg()).unwrap();
        let b = run_shared_pipeline(&ds, &spec, &tiny_cfg()).unwrap();
        assert_eq!(a, b);

        // Subject 2 too short for a calibration run plus scoring.
        let mut short = ds.clone();
        let s = &mut short.subjects[1];
        s.trials.truncate(24);
        let r = run_shared_pipeline(&short, &spec, &tiny_cfg()).unwrap();
        assert_eq!(r.missing, vec![2]);
        assert_eq!(r.subjects(), vec![1, 3]);
    }
}
