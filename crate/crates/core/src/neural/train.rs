use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, AdamWParams, AdamWState};
use super::{dropout_mask, log_softmax, ConvClassifier};
use crate::error::{Error, Result};
use crate::trialdata::{split_indices, Label, Trial};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once this many epochs pass without a new best validation loss.
    pub patience: usize,
    pub dropout_rate: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 8.25e-4,
            weight_decay: 1e-5,
            batch_size: 64,
            max_epochs: 1000,
            patience: 250,
            dropout_rate: 0.25,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Shorter budget used when only the head is retrained.
    pub fn fine_tune_default() -> Self {
        TrainConfig {
            max_epochs: 600,
            patience: 150,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch size and epoch budget must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWParams {
        AdamWParams::new(self.learning_rate, self.weight_decay)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    /// Epoch (0-based) whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.val_loss.len()
    }
}

fn eval_loss_acc(model: &ConvClassifier, trials: &[Trial]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut hits = 0usize;
    for t in trials {
        let lp = model.forward_cached(&t.data, None)?.log_probs;
        loss -= lp[t.label as usize];
        if (lp[1] > lp[0]) as Label == t.label {
            hits += 1;
        }
    }
    let n = trials.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Tracks the best validation loss and decides when to stop.
struct EarlyStop {
    best_loss: f64,
    best_epoch: usize,
    patience: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        EarlyStop {
            best_loss: f64::INFINITY,
            best_epoch: 0,
            patience,
        }
    }

    /// Returns `(improved, stop)`.
    fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            return (true, false);
        }
        (false, epoch - self.best_epoch > self.patience)
    }
}

fn check_sets(train: &[Trial], val: &[Trial], model: &ConvClassifier) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    for t in train.iter().chain(val) {
        if t.channels() != model.config.channels || t.samples() != model.config.samples {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", model.config.channels, model.config.samples),
                got: format!("{}x{}", t.channels(), t.samples()),
            });
        }
    }
    Ok(())
}

/// Mini-batch AdamW with early stopping on validation loss. Returns the
/// parameters from the best epoch.
pub fn train(
    model: &ConvClassifier,
    train_set: &[Trial],
    val_set: &[Trial],
    cfg: &TrainConfig,
) -> Result<(ConvClassifier, TrainHistory)> {
    cfg.validate()?;
    check_sets(train_set, val_set, model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let hp = cfg.adamw();
    let mut current = model.clone();
    let mut best = model.clone();
    let mut state = AdamWState::new(current.params.len());
    let mut history = TrainHistory::default();
    let mut stop = EarlyStop::new(cfg.patience);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Trial> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = match current.loss_and_gradient(&batch, Some((cfg.dropout_rate, &mut rng))) {
                Ok(v) => v,
                Err(Error::NonFiniteGradient) => return Err(Error::Divergence { epoch }),
                Err(e) => return Err(e),
            };
            epoch_loss += loss * chunk.len() as f64;
            adamw_step(&mut current.params, &grads, &mut state, &hp)?;
        }
        let (val_loss, val_acc) = eval_loss_acc(&current, val_set)?;
        let train_loss = epoch_loss / train_set.len() as f64;
        if !train_loss.is_finite() || !val_loss.is_finite() || !current.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.val_acc.push(val_acc);
        let (improved, done) = stop.observe(epoch, val_loss);
        if improved {
            best.params.copy_from_slice(&current.params);
        }
        if done {
            debug!("early stop at epoch {epoch}, best {}", stop.best_epoch);
            break;
        }
    }
    history.best_epoch = stop.best_epoch;
    Ok((best, history))
}

/// Retrains only the linear head on frozen features from `calib`, holding
/// out a fifth of it for early stopping. The head starts from its current
/// values; call [`ConvClassifier::reset_head`] first for a fresh head.
pub fn linear_probe(
    model: &ConvClassifier,
    calib: &[Trial],
    cfg: &TrainConfig,
) -> Result<(ConvClassifier, TrainHistory)> {
    cfg.validate()?;
    if calib.len() < 3 {
        return Err(Error::invalid("linear probe needs at least three calibration trials"));
    }
    let (tr_idx, va_idx) = split_indices(calib.len(), 0.2, cfg.rng_seed)?;
    let feats: Vec<Vec<f64>> = calib.iter().map(|t| model.features(&t.data)).collect::<Result<_>>()?;
    let labels: Vec<Label> = calib.iter().map(|t| t.label).collect();

    let c = model.config;
    let d = c.feature_dim();
    let head = c.head_range();
    let mut current = model.clone();
    let mut best = model.clone();
    let mut state = AdamWState::new(head.len());
    let hp = cfg.adamw();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut history = TrainHistory::default();
    let mut stop = EarlyStop::new(cfg.patience);
    let mut order = tr_idx.clone();

    let head_logp = |p: &[f64], x: &[f64]| -> [f64; 2] {
        let (w, b) = p.split_at(2 * d);
        let z0 = b[0] + w[..d].iter().zip(x).map(|(a, f)| a * f).sum::<f64>();
        let z1 = b[1] + w[d..].iter().zip(x).map(|(a, f)| a * f).sum::<f64>();
        log_softmax([z0, z1])
    };

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let scale = 1.0 / chunk.len() as f64;
            let mut grads = vec![0.0; head.len()];
            for &i in chunk {
                let mask = dropout_mask(d, cfg.dropout_rate, &mut rng);
                let x: Vec<f64> = feats[i].iter().zip(&mask).map(|(f, m)| f * m).collect();
                let lp = head_logp(&current.params[head.clone()], &x);
                epoch_loss -= lp[labels[i] as usize];
                for cls in 0..2 {
                    let y = if cls == labels[i] as usize { 1.0 } else { 0.0 };
                    let dz = (lp[cls].exp() - y) * scale;
                    for (g, xi) in grads[cls * d..(cls + 1) * d].iter_mut().zip(&x) {
                        *g += dz * xi;
                    }
                    grads[2 * d + cls] += dz;
                }
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            adamw_step(&mut current.params[head.clone()], &grads, &mut state, &hp)?;
        }
        let mut val_loss = 0.0;
        let mut hits = 0usize;
        for &i in &va_idx {
            let lp = head_logp(&current.params[head.clone()], &feats[i]);
            val_loss -= lp[labels[i] as usize];
            if (lp[1] > lp[0]) as Label == labels[i] {
                hits += 1;
            }
        }
        val_loss /= va_idx.len() as f64;
        let train_loss = epoch_loss / tr_idx.len() as f64;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.val_acc.push(hits as f64 / va_idx.len() as f64);
        let (improved, done) = stop.observe(epoch, val_loss);
        if improved {
            best.params[head.clone()].copy_from_slice(&current.params[head.clone()]);
        }
        if done {
            break;
        }
    }
    history.best_epoch = stop.best_epoch;
    debug_assert!(best.params[..head.start] == model.params[..head.start]);
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::neural::ModelConfig;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            channels: 2,
            samples: 24,
            n_temporal: 2,
            temporal_kernel: 5,
            n_spatial: 2,
            pool_window: 8,
            pool_stride: 4,
        }
    }

    /// Class 0 has power on channel 0, class 1 on channel 1.
    fn toy(n: usize, seed: u64) -> Vec<Trial> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = (i % 2) as Label;
                let data = Mat::from_fn(2, 24, |ch, _| {
                    let amp = if ch == label as usize { 2.0 } else { 0.5 };
                    amp * rng.random_range(-1.0..1.0)
                });
                Trial::new(data, label).unwrap()
            })
            .collect()
    }

    #[test]
    fn learns_power_task_and_is_reproducible() {
        let model = ConvClassifier::new(cfg(), 11).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 16,
            max_epochs: 60,
            patience: 20,
            ..Default::default()
        };
        let (a, ha) = train(&model, &toy(80, 1), &toy(40, 2), &tc).unwrap();
        let (b, hb) = train(&model, &toy(80, 1), &toy(40, 2), &tc).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert!(a.accuracy(&toy(60, 3)).unwrap() > 0.8);
        let best = ha.best_epoch;
        assert!(ha.val_loss.iter().all(|&l| l >= ha.val_loss[best]));
    }

    #[test]
    fn early_stop_counts_epochs_past_best() {
        let mut s = EarlyStop::new(2);
        assert_eq!(s.observe(0, 1.0), (true, false));
        assert_eq!(s.observe(1, 1.0), (false, false));
        assert_eq!(s.observe(2, 2.0), (false, false));
        assert_eq!(s.observe(3, 2.0), (false, true));
    }

    #[test]
    fn huge_learning_rate_diverges_or_survives_cleanly() {
        let model = ConvClassifier::new(cfg(), 5).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e6,
            max_epochs: 5,
            ..Default::default()
        };
        match train(&model, &toy(20, 1), &toy(10, 2), &tc) {
            Ok((m, _)) => assert!(m.is_finite()),
            Err(e) => assert!(matches!(e, Error::Divergence { .. })),
        }
    }

    #[test]
    fn probe_only_touches_head() {
        let model = ConvClassifier::new(cfg(), 3).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e-2,
            max_epochs: 30,
            patience: 10,
            ..Default::default()
        };
        let (p, h) = linear_probe(&model, &toy(40, 4), &tc).unwrap();
        let head = model.config.head_range();
        assert_eq!(p.params[..head.start], model.params[..head.start]);
        assert_ne!(p.params[head.clone()], model.params[head]);
        assert!(h.epochs_run() > 0);
        assert!(linear_probe(&model, &toy(1, 4), &tc).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let model = ConvClassifier::new(cfg(), 3).unwrap();
        let mut tc = TrainConfig::default();
        tc.dropout_rate = 1.0;
        assert!(train(&model, &toy(4, 1), &toy(4, 2), &tc).is_err());
        assert!(train(&model, &[], &toy(4, 2), &TrainConfig::default()).is_err());
    }
}
