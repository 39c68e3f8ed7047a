use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::shared::{accuracy_on, prepare_sources, SourceKey};
use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::neural::{train, ConvClassifier, TrainConfig};
use crate::seed::derive_seed;
use crate::trialdata::{split_indices, Dataset, Trial};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpace {
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
}

impl Default for GridSpace {
    /// Shared-model search space.
    fn default() -> Self {
        GridSpace {
            learning_rates: vec![12.5e-4, 10.0e-4, 8.25e-4, 6.25e-4],
            weight_decays: vec![0.0, 0.1e-4, 1e-4],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Mean held-out accuracy; diverged folds count as 0.
    pub score: f64,
    pub diverged_folds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best_learning_rate: f64,
    pub best_weight_decay: f64,
    pub points: Vec<GridPoint>,
}

/// Held-out accuracy for one source subject left out of training.
fn held_out_score(
    dataset: &Dataset,
    held_out: u32,
    source: SourceKey,
    tc: &TrainConfig,
    cfg: &ExperimentConfig,
) -> Result<f64> {
    let ids = dataset.subject_ids();
    let rest: Vec<u32> = ids.iter().copied().filter(|&s| s != held_out).collect();
    let prepared = prepare_sources(dataset, &rest, source, cfg)?;
    let pool: Vec<&Trial> = prepared.iter().flat_map(|p| p.trials.iter()).collect();
    let tag = held_out.to_string();
    let (tr, va) = split_indices(pool.len(), cfg.val_frac, derive_seed(cfg.seed, &["grid-split", &tag]))?;
    let pick = |idx: &[usize]| -> Vec<Trial> { idx.iter().map(|&i| pool[i].clone()).collect() };
    let init = ConvClassifier::new(cfg.model_config(dataset)?, derive_seed(cfg.seed, &["grid-init", &tag]))?;
    let tc = TrainConfig {
        rng_seed: derive_seed(cfg.seed, &["grid-train", &tag]),
        ..*tc
    };
    let (model, _) = train(&init, &pick(&tr), &pick(&va), &tc)?;
    let held = prepare_sources(dataset, &[held_out], source, cfg)?;
    let tagged: Vec<_> = held[0].trials.iter().map(|t| ((held_out, 0), t.clone())).collect();
    accuracy_on(&model, &tagged)
}

/// Mean held-out accuracy of one `(η, w_d)` point over
/// leave-one-source-subject-out folds, with the number of diverged folds.
pub fn grid_point_score(
    dataset: &Dataset,
    learning_rate: f64,
    weight_decay: f64,
    source: SourceKey,
    cfg: &ExperimentConfig,
) -> Result<(f64, usize)> {
    let tc = TrainConfig {
        learning_rate,
        weight_decay,
        ..cfg.train
    };
    let ids = dataset.subject_ids();
    let mut total = 0.0;
    let mut diverged = 0;
    for &h in &ids {
        match held_out_score(dataset, h, source, &tc, cfg) {
            Ok(a) => total += a,
            Err(Error::Divergence { epoch }) => {
                warn!("η={learning_rate:e} w_d={weight_decay:e}: fold {h} diverged at epoch {epoch}");
                diverged += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((total / ids.len() as f64, diverged))
}

/// Picks the point with the best mean held-out accuracy; ties go to the
/// smaller learning rate, then the smaller weight decay.
pub fn grid_search(dataset: &Dataset, space: &GridSpace, source: SourceKey, cfg: &ExperimentConfig) -> Result<GridResult> {
    cfg.validate()?;
    if space.learning_rates.is_empty() || space.weight_decays.is_empty() {
        return Err(Error::invalid("grid search space is empty"));
    }
    if dataset.subjects.len() < 3 {
        return Err(Error::invalid("grid search needs at least three source subjects"));
    }
    let mut combos: Vec<(f64, f64)> = space
        .learning_rates
        .iter()
        .flat_map(|&lr| space.weight_decays.iter().map(move |&wd| (lr, wd)))
        .collect();
    combos.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    combos.dedup();
    let points = combos
        .par_iter()
        .map(|&(lr, wd)| {
            let (score, diverged_folds) = grid_point_score(dataset, lr, wd, source, cfg)?;
            Ok(GridPoint {
                learning_rate: lr,
                weight_decay: wd,
                score,
                diverged_folds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = points[0];
    for p in &points[1..] {
        if p.score > best.score {
            best = *p;
        }
    }
    Ok(GridResult {
        best_learning_rate: best.learning_rate,
        best_weight_decay: best.weight_decay,
        points,
    })
}
