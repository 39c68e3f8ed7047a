//! Compact convolutional EEG classifier with hand-written gradients.
//!
//! Layer chain: temporal convolution (shared kernels, every channel) →
//! spatial mixing over (kernel, channel) maps → square → mean pool → log →
//! dropout → linear → log-softmax. All parameters live in one flat vector so
//! the optimizer and checkpoints can treat them uniformly.

mod checkpoint;
mod optim;
mod train;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::trialdata::{Label, Trial};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use optim::{adamw_step, AdamWParams, AdamWState};
pub use train::{linear_probe, train, TrainConfig, TrainHistory};

/// Added inside the pooling log so silent filters stay finite.
pub const LOG_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub samples: usize,
    pub n_temporal: usize,
    pub temporal_kernel: usize,
    pub n_spatial: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
}

impl ModelConfig {
    /// Default layer sizes for `channels x samples` trials.
    pub fn for_shape(channels: usize, samples: usize) -> Self {
        ModelConfig {
            channels,
            samples,
            n_temporal: 8,
            temporal_kernel: 25,
            n_spatial: 8,
            pool_window: 32,
            pool_stride: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.channels,
            self.samples,
            self.n_temporal,
            self.temporal_kernel,
            self.n_spatial,
            self.pool_window,
            self.pool_stride,
        ];
        if positive.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.samples < self.temporal_kernel + self.pool_window - 1 {
            return Err(Error::invalid(format!(
                "{} samples is too short for kernel {} and pool window {}",
                self.samples, self.temporal_kernel, self.pool_window
            )));
        }
        Ok(())
    }

    pub fn conv_len(&self) -> usize {
        self.samples - self.temporal_kernel + 1
    }

    pub fn n_pools(&self) -> usize {
        (self.conv_len() - self.pool_window) / self.pool_stride + 1
    }

    pub fn feature_dim(&self) -> usize {
        self.n_spatial * self.n_pools()
    }

    pub fn temporal_range(&self) -> Range<usize> {
        0..self.n_temporal * self.temporal_kernel
    }

    pub fn spatial_range(&self) -> Range<usize> {
        let s = self.temporal_range().end;
        s..s + self.n_spatial * self.n_temporal * self.channels
    }

    pub fn head_weight_range(&self) -> Range<usize> {
        let s = self.spatial_range().end;
        s..s + 2 * self.feature_dim()
    }

    pub fn head_bias_range(&self) -> Range<usize> {
        let s = self.head_weight_range().end;
        s..s + 2
    }

    /// Head weights and bias together; everything a linear probe may touch.
    pub fn head_range(&self) -> Range<usize> {
        self.head_weight_range().start..self.head_bias_range().end
    }

    pub fn n_params(&self) -> usize {
        self.head_bias_range().end
    }
}

fn glorot(rng: &mut ChaCha8Rng, out: &mut [f64], fan_in: usize, fan_out: usize) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for w in out {
        *w = rng.random_range(-limit..limit);
    }
}

/// Intermediate activations of one trial, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Temporal conv output, `[kernel][channel][time]`.
    temporal: Vec<f64>,
    /// Spatial mixing output, `[filter][time]`.
    spatial: Vec<f64>,
    /// Mean-pooled power, `[filter][pool]`.
    pooled: Vec<f64>,
    /// Head input after dropout.
    dropped: Vec<f64>,
    /// Dropout scale per feature (`1` in eval mode).
    mask: Vec<f64>,
    pub log_probs: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvClassifier {
    pub config: ModelConfig,
    pub params: Vec<f64>,
}

impl ConvClassifier {
    /// Glorot-uniform weights from `seed`, zero head bias.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut model = ConvClassifier {
            config,
            params: vec![0.0; config.n_params()],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        glorot(
            &mut rng,
            &mut model.params[c.temporal_range()],
            c.temporal_kernel,
            c.n_temporal * c.temporal_kernel,
        );
        glorot(
            &mut rng,
            &mut model.params[c.spatial_range()],
            c.n_temporal * c.channels,
            c.n_spatial * c.channels,
        );
        model.reset_head(rng.random());
        Ok(model)
    }

    /// Fresh Glorot head weights and zero bias; conv layers untouched.
    pub fn reset_head(&mut self, seed: u64) {
        let c = self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        glorot(&mut rng, &mut self.params[c.head_weight_range()], c.feature_dim(), 2);
        for b in &mut self.params[c.head_bias_range()] {
            *b = 0.0;
        }
    }

    pub fn zero_head(&mut self) {
        let r = self.config.head_range();
        for p in &mut self.params[r] {
            *p = 0.0;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_input(&self, x: &Mat<f64>) -> Result<()> {
        if x.rows() != self.config.channels || x.cols() != self.config.samples {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", self.config.channels, self.config.samples),
                got: format!("{}x{}", x.rows(), x.cols()),
            });
        }
        Ok(())
    }

    /// Convolution, pooling and log: the head's input before dropout.
    pub fn features(&self, x: &Mat<f64>) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let (_, _, pooled) = self.conv_forward(x);
        Ok(pooled.iter().map(|&p| (p + LOG_EPS).ln()).collect())
    }

    fn conv_forward(&self, x: &Mat<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let c = &self.config;
        let (f1, k, ch, f2) = (c.n_temporal, c.temporal_kernel, c.channels, c.n_spatial);
        let len = c.conv_len();
        let wt = &self.params[c.temporal_range()];
        let ws = &self.params[c.spatial_range()];

        let mut temporal = vec![0.0; f1 * ch * len];
        for f in 0..f1 {
            let kernel = &wt[f * k..(f + 1) * k];
            for chan in 0..ch {
                let row = x.row(chan);
                let out = &mut temporal[(f * ch + chan) * len..(f * ch + chan + 1) * len];
                for (tau, o) in out.iter_mut().enumerate() {
                    *o = kernel.iter().zip(&row[tau..tau + k]).map(|(a, b)| a * b).sum();
                }
            }
        }

        let mut spatial = vec![0.0; f2 * len];
        for g in 0..f2 {
            let out = &mut spatial[g * len..(g + 1) * len];
            for m in 0..f1 * ch {
                let w = ws[g * f1 * ch + m];
                let src = &temporal[m * len..(m + 1) * len];
                for (o, &v) in out.iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }

        let np = c.n_pools();
        let inv_w = 1.0 / c.pool_window as f64;
        let mut pooled = vec![0.0; f2 * np];
        for g in 0..f2 {
            let s = &spatial[g * len..(g + 1) * len];
            for p in 0..np {
                let start = p * c.pool_stride;
                pooled[g * np + p] = s[start..start + c.pool_window].iter().map(|v| v * v).sum::<f64>() * inv_w;
            }
        }
        (temporal, spatial, pooled)
    }

    fn head_forward(&self, feats: &[f64]) -> [f64; 2] {
        let c = &self.config;
        let d = c.feature_dim();
        let w = &self.params[c.head_weight_range()];
        let b = &self.params[c.head_bias_range()];
        let mut z = [b[0], b[1]];
        for (cls, zc) in z.iter_mut().enumerate() {
            *zc += w[cls * d..(cls + 1) * d].iter().zip(feats).map(|(a, f)| a * f).sum::<f64>();
        }
        log_softmax(z)
    }

    /// Forward pass for one trial. `mask` holds per-feature dropout scales
    /// (training); `None` is eval mode.
    pub fn forward_cached(&self, x: &Mat<f64>, mask: Option<Vec<f64>>) -> Result<ForwardCache> {
        self.check_input(x)?;
        let d = self.config.feature_dim();
        let (temporal, spatial, pooled) = self.conv_forward(x);
        let mask = match mask {
            Some(m) if m.len() == d => m,
            Some(m) => {
                return Err(Error::DimensionMismatch {
                    expected: format!("dropout mask of {d}"),
                    got: format!("{}", m.len()),
                })
            }
            None => vec![1.0; d],
        };
        let dropped: Vec<f64> = pooled.iter().zip(&mask).map(|(&p, &m)| (p + LOG_EPS).ln() * m).collect();
        let log_probs = self.head_forward(&dropped);
        Ok(ForwardCache {
            temporal,
            spatial,
            pooled,
            dropped,
            mask,
            log_probs,
        })
    }

    /// Eval-mode log-probabilities, one row per trial.
    pub fn forward(&self, batch: &[&Mat<f64>]) -> Result<Mat<f64>> {
        let mut out = Mat::zeros(batch.len(), 2);
        for (i, x) in batch.iter().enumerate() {
            let lp = self.forward_cached(x, None)?.log_probs;
            out.row_mut(i).copy_from_slice(&lp);
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Mat<f64>) -> Result<Label> {
        let lp = self.forward_cached(x, None)?.log_probs;
        Ok(if lp[1] > lp[0] { 1 } else { 0 })
    }

    pub fn accuracy(&self, trials: &[Trial]) -> Result<f64> {
        if trials.is_empty() {
            return Err(Error::invalid("accuracy of an empty set"));
        }
        let mut hits = 0usize;
        for t in trials {
            if self.predict(&t.data)? == t.label {
                hits += 1;
            }
        }
        Ok(hits as f64 / trials.len() as f64)
    }

    /// Accumulates `scale · ∂(-log p[label]) / ∂θ` into `grads`.
    pub fn backward(&self, x: &Mat<f64>, cache: &ForwardCache, label: Label, scale: f64, grads: &mut [f64]) {
        let c = &self.config;
        let (f1, k, ch, f2) = (c.n_temporal, c.temporal_kernel, c.channels, c.n_spatial);
        let len = c.conv_len();
        let d = c.feature_dim();
        let np = c.n_pools();

        let mut dz = [0.0; 2];
        for (cls, dzc) in dz.iter_mut().enumerate() {
            let y = if cls == label as usize { 1.0 } else { 0.0 };
            *dzc = (cache.log_probs[cls].exp() - y) * scale;
        }

        let w = &self.params[c.head_weight_range()];
        let hw = c.head_weight_range();
        let hb = c.head_bias_range();
        let mut dfeat = vec![0.0; d];
        for cls in 0..2 {
            let g = &mut grads[hw.start + cls * d..hw.start + (cls + 1) * d];
            for (gi, &xi) in g.iter_mut().zip(&cache.dropped) {
                *gi += dz[cls] * xi;
            }
            grads[hb.start + cls] += dz[cls];
            for (df, &wi) in dfeat.iter_mut().zip(&w[cls * d..(cls + 1) * d]) {
                *df += wi * dz[cls];
            }
        }
        // Through dropout and the log.
        let dpool: Vec<f64> = dfeat
            .iter()
            .zip(&cache.mask)
            .zip(&cache.pooled)
            .map(|((&g, &m), &p)| g * m / (p + LOG_EPS))
            .collect();

        // Through mean pooling and the square.
        let inv_w = 1.0 / c.pool_window as f64;
        let mut dspatial = vec![0.0; f2 * len];
        for g in 0..f2 {
            let ds = &mut dspatial[g * len..(g + 1) * len];
            for p in 0..np {
                let v = dpool[g * np + p] * inv_w;
                let start = p * c.pool_stride;
                for e in &mut ds[start..start + c.pool_window] {
                    *e += v;
                }
            }
            for (e, &s) in ds.iter_mut().zip(&cache.spatial[g * len..(g + 1) * len]) {
                *e *= 2.0 * s;
            }
        }

        // Spatial weights and the temporal maps.
        let ws = &self.params[c.spatial_range()];
        let sr = c.spatial_range();
        let mut dtemporal = vec![0.0; f1 * ch * len];
        for g in 0..f2 {
            let ds = &dspatial[g * len..(g + 1) * len];
            for m in 0..f1 * ch {
                let src = &cache.temporal[m * len..(m + 1) * len];
                grads[sr.start + g * f1 * ch + m] += ds.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                let wgm = ws[g * f1 * ch + m];
                for (dt, &dv) in dtemporal[m * len..(m + 1) * len].iter_mut().zip(ds) {
                    *dt += wgm * dv;
                }
            }
        }

        // Temporal kernels.
        let tr = c.temporal_range();
        for f in 0..f1 {
            for chan in 0..ch {
                let row = x.row(chan);
                let dt = &dtemporal[(f * ch + chan) * len..(f * ch + chan + 1) * len];
                for j in 0..k {
                    grads[tr.start + f * k + j] += dt.iter().zip(&row[j..j + len]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }

    /// Mean NLL over the batch and its gradient. `dropout` supplies the rate
    /// and RNG for training-mode masks.
    pub fn loss_and_gradient(
        &self,
        batch: &[&Trial],
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let d = self.config.feature_dim();
        let mut grads = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for t in batch {
            let mask = dropout.as_mut().map(|(rate, rng)| dropout_mask(d, *rate, rng));
            let cache = self.forward_cached(&t.data, mask)?;
            loss -= cache.log_probs[t.label as usize];
            self.backward(&t.data, &cache, t.label, scale, &mut grads);
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        Ok((loss * scale, grads))
    }
}

/// Inverted-dropout scales: `0` with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask(d: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; d];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..d)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn log_softmax(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    [z[0] - lse, z[1] - lse]
}

/// Mean of `-log_prob[label]` over rows.
pub fn nll_loss(log_probs: &Mat<f64>, labels: &[Label]) -> Result<f64> {
    if log_probs.rows() != labels.len() || log_probs.cols() != 2 {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x2 log-probabilities", labels.len()),
            got: format!("{}x{}", log_probs.rows(), log_probs.cols()),
        });
    }
    if labels.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y > 1 {
            return Err(Error::invalid(format!("label {y} is not binary")));
        }
        total -= log_probs[(i, y as usize)];
    }
    Ok(total / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            channels: 3,
            samples: 20,
            n_temporal: 2,
            temporal_kernel: 4,
            n_spatial: 2,
            pool_window: 6,
            pool_stride: 3,
        }
    }

    fn random_trial(cfg: &ModelConfig, rng: &mut ChaCha8Rng, label: Label) -> Trial {
        Trial::new(Mat::from_fn(cfg.channels, cfg.samples, |_, _| rng.random_range(-1.0..1.0)), label).unwrap()
    }

    #[test]
    fn layout_and_validation() {
        let c = small_config();
        assert_eq!(c.conv_len(), 17);
        assert_eq!(c.n_pools(), 4);
        assert_eq!(c.feature_dim(), 8);
        assert_eq!(c.n_params(), 8 + 12 + 16 + 2);
        let mut bad = c;
        bad.samples = 5;
        assert!(bad.validate().is_err());
        assert!(ModelConfig::for_shape(22, 250).validate().is_ok());
    }

    #[test]
    fn zero_head_gives_uniform_output() {
        let cfg = small_config();
        let mut m = ConvClassifier::new(cfg, 1).unwrap();
        m.zero_head();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_trial(&cfg, &mut rng, 0);
        let lp = m.forward(&[&t.data]).unwrap();
        assert!((lp[(0, 0)] - 0.5f64.ln()).abs() < 1e-15);
        assert!((lp[(0, 1)] - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn eval_forward_is_deterministic_and_normalized() {
        let cfg = small_config();
        let m = ConvClassifier::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials: Vec<_> = (0..5).map(|_| random_trial(&cfg, &mut rng, 1)).collect();
        let refs: Vec<_> = trials.iter().map(|t| &t.data).collect();
        let a = m.forward(&refs).unwrap();
        let b = m.forward(&refs).unwrap();
        assert_eq!(a, b);
        for i in 0..5 {
            let s = a[(i, 0)].exp() + a[(i, 1)].exp();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let wrong = Mat::zeros(2, 20);
        assert!(m.forward(&[&wrong]).is_err());
    }

    #[test]
    fn nll_cases() {
        let perfect = Mat::from_rows(&[vec![0.0, f64::NEG_INFINITY]]);
        assert_eq!(nll_loss(&perfect, &[0]).unwrap(), 0.0);
        let uniform = Mat::from_rows(&[vec![0.5f64.ln(), 0.5f64.ln()]]);
        assert!((nll_loss(&uniform, &[1]).unwrap() - 0.693_147_180_559_945_3).abs() < 1e-12);
        let mixed = Mat::from_rows(&[vec![0.0, f64::NEG_INFINITY], vec![0.5f64.ln(), 0.5f64.ln()]]);
        assert!((nll_loss(&mixed, &[0, 0]).unwrap() - 2f64.ln() / 2.0).abs() < 1e-12);
        assert!(nll_loss(&mixed, &[0]).is_err());
        assert!(nll_loss(&mixed, &[0, 2]).is_err());
    }

    #[test]
    fn zero_head_bias_gradient_is_softmax_residual() {
        let cfg = small_config();
        let mut m = ConvClassifier::new(cfg, 5).unwrap();
        m.zero_head();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let trials = [
            random_trial(&cfg, &mut rng, 0),
            random_trial(&cfg, &mut rng, 1),
            random_trial(&cfg, &mut rng, 1),
        ];
        let refs: Vec<_> = trials.iter().collect();
        let (loss, g) = m.loss_and_gradient(&refs, None).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        let hb = cfg.head_bias_range();
        // Σ (0.5 - y) / n per class.
        assert!((g[hb.start] - (0.5 - 1.0 + 0.5 + 0.5) / 3.0).abs() < 1e-15);
        assert!((g[hb.start + 1] - (0.5 - 0.5 - 0.5) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn equal_features_give_equal_head_gradients() {
        // Identical temporal kernels and spatial rows make every filter's
        // pooled power the same, so each class's head gradient is constant
        // across filters at a given pool position.
        let cfg = small_config();
        let mut m = ConvClassifier::new(cfg, 7).unwrap();
        let tr = cfg.temporal_range();
        let k = cfg.temporal_kernel;
        let first: Vec<f64> = m.params[tr.start..tr.start + k].to_vec();
        for f in 1..cfg.n_temporal {
            m.params[tr.start + f * k..tr.start + (f + 1) * k].copy_from_slice(&first);
        }
        let sr = cfg.spatial_range();
        let row = cfg.n_temporal * cfg.channels;
        let first: Vec<f64> = m.params[sr.start..sr.start + row].to_vec();
        for g in 1..cfg.n_spatial {
            m.params[sr.start + g * row..sr.start + (g + 1) * row].copy_from_slice(&first);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_trial(&cfg, &mut rng, 1);
        let (_, g) = m.loss_and_gradient(&[&t], None).unwrap();
        let hw = cfg.head_weight_range();
        let d = cfg.feature_dim();
        let np = cfg.n_pools();
        for cls in 0..2 {
            for p in 0..np {
                let a = g[hw.start + cls * d + p];
                for f in 1..cfg.n_spatial {
                    assert!((g[hw.start + cls * d + f * np + p] - a).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn dropout_mask_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = dropout_mask(1000, 0.25, &mut rng);
        assert!(m.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        let dropped = m.iter().filter(|&&v| v == 0.0).count();
        assert!((150..350).contains(&dropped));
        assert!(dropout_mask(5, 0.0, &mut rng).iter().all(|&v| v == 1.0));
    }
}
