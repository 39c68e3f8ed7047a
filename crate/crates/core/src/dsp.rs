//! Band-pass filtering by FFT overlap-add and rational polyphase resampling.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::{FftNum, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Real;
use crate::trialdata::{Trial, TrialSet};

/// Largest numerator or denominator accepted for a resampling ratio.
pub const MAX_RATIO_TERM: usize = 1000;

/// Half-length of the resampling kernel, in units of the larger rate factor.
const RESAMPLE_ZERO_CROSSINGS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec<T> {
    pub low_hz: T,
    pub high_hz: T,
    pub fs: T,
    pub n_taps: usize,
}

impl<T: Real> FilterSpec<T> {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.fs / T::lit(2.0);
        if !(self.fs > T::zero()) {
            return Err(Error::invalid("sampling rate must be positive"));
        }
        if !(self.low_hz > T::zero() && self.low_hz < self.high_hz && self.high_hz < nyquist) {
            return Err(Error::invalid(format!(
                "band edges must satisfy 0 < {} < {} < {}",
                self.low_hz, self.high_hz, nyquist
            )));
        }
        if self.n_taps % 2 == 0 || self.n_taps < 3 {
            return Err(Error::invalid(format!("tap count {} must be odd and >= 3", self.n_taps)));
        }
        Ok(())
    }
}

fn hamming(k: usize, n: usize) -> f64 {
    if n == 1 {
        return 1.0;
    }
    0.54 - 0.46 * (2.0 * PI * k as f64 / (n - 1) as f64).cos()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Hamming-windowed sinc low-pass with unit DC gain. `cutoff` is in cycles per sample.
fn lowpass_taps(cutoff: f64, n: usize) -> Vec<f64> {
    let mid = (n - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..n)
        .map(|k| 2.0 * cutoff * sinc(2.0 * cutoff * (k as f64 - mid)) * hamming(k, n))
        .collect();
    let dc: f64 = h.iter().sum();
    for x in &mut h {
        *x /= dc;
    }
    h
}

/// Magnitude of the DTFT of `taps` at `freq_hz`.
pub fn frequency_response<T: Real>(taps: &[T], freq_hz: T, fs: T) -> T {
    let w = 2.0 * PI * (freq_hz / fs).as_f64();
    let (mut re, mut im) = (0.0, 0.0);
    for (k, &h) in taps.iter().enumerate() {
        re += h.as_f64() * (w * k as f64).cos();
        im -= h.as_f64() * (w * k as f64).sin();
    }
    T::lit((re * re + im * im).sqrt())
}

/// Linear-phase band-pass FIR: difference of two unit-DC windowed-sinc
/// low-passes, scaled to unit gain at the band center.
pub fn design_bandpass<T: Real>(spec: &FilterSpec<T>) -> Result<Vec<T>> {
    spec.validate()?;
    let fs = spec.fs.as_f64();
    let hi = lowpass_taps(spec.high_hz.as_f64() / fs, spec.n_taps);
    let lo = lowpass_taps(spec.low_hz.as_f64() / fs, spec.n_taps);
    let mut h: Vec<f64> = hi.iter().zip(&lo).map(|(a, b)| a - b).collect();
    let center = (spec.low_hz.as_f64() + spec.high_hz.as_f64()) / 2.0;
    let gain = frequency_response(&h, center, fs);
    for x in &mut h {
        *x /= gain;
    }
    // Exact symmetry, regardless of rounding in the window.
    let n = h.len();
    for k in 0..n / 2 {
        let m = (h[k] + h[n - 1 - k]) / 2.0;
        h[k] = m;
        h[n - 1 - k] = m;
    }
    Ok(h.into_iter().map(T::lit).collect())
}

/// FIR filtering by FFT overlap-add, returning the `same`-length output
/// centered on the filter's group delay.
///
/// `block_size` is the FFT length; each input segment holds
/// `block_size - taps.len() + 1` samples.
pub fn bandpass_overlap_add<T: Real + FftNum>(x: &[T], taps: &[T], block_size: usize) -> Result<Vec<T>> {
    let m = taps.len();
    if m == 0 {
        return Err(Error::invalid("empty filter"));
    }
    if block_size < m {
        return Err(Error::invalid(format!("block size {block_size} is smaller than {m} taps")));
    }
    let n = x.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let seg = block_size - m + 1;
    let mut planner = FftPlanner::<T>::new();
    let fwd = planner.plan_fft_forward(block_size);
    let inv = planner.plan_fft_inverse(block_size);

    let mut h_spec: Vec<Complex<T>> = taps.iter().map(|&h| Complex::new(h, T::zero())).collect();
    h_spec.resize(block_size, Complex::new(T::zero(), T::zero()));
    fwd.process(&mut h_spec);

    let full_len = n + m - 1;
    let mut full = vec![T::zero(); full_len];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); block_size];
    let norm = T::one() / T::from_usize_lossy(block_size);
    let mut start = 0;
    while start < n {
        let end = (start + seg).min(n);
        for (b, i) in buf.iter_mut().zip(start..start + block_size) {
            *b = if i < end {
                Complex::new(x[i], T::zero())
            } else {
                Complex::new(T::zero(), T::zero())
            };
        }
        fwd.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&h_spec) {
            *b = *b * *h;
        }
        inv.process(&mut buf);
        let produced = (end - start) + m - 1;
        for (k, b) in buf.iter().take(produced).enumerate() {
            full[start + k] += b.re * norm;
        }
        start = end;
    }
    let offset = (m - 1) / 2;
    Ok(full[offset..offset + n].to_vec())
}

/// Default FFT block for a filter: a power of two at least four times its length.
pub fn default_block_size(n_taps: usize) -> usize {
    (4 * n_taps).next_power_of_two()
}

/// Smallest `(p, q)` with `p / q == fs_out / fs_in` and both terms at most [`MAX_RATIO_TERM`].
pub fn rational_ratio(fs_in: f64, fs_out: f64) -> Result<(usize, usize)> {
    if !(fs_in > 0.0 && fs_out > 0.0) || !fs_in.is_finite() || !fs_out.is_finite() {
        return Err(Error::invalid("sampling rates must be positive"));
    }
    let r = fs_out / fs_in;
    for q in 1..=MAX_RATIO_TERM {
        let p = (r * q as f64).round();
        if p >= 1.0 && ((p / q as f64) - r).abs() <= 1e-9 * r {
            let p = p as usize;
            if p > MAX_RATIO_TERM {
                break;
            }
            return Ok((p, q));
        }
    }
    Err(Error::invalid(format!(
        "resampling ratio {fs_out}/{fs_in} is not expressible with terms <= {MAX_RATIO_TERM}"
    )))
}

/// Rational polyphase resampling. Output length is `round(len * fs_out / fs_in)`.
pub fn resample<T: Real>(x: &[T], fs_in: T, fs_out: T) -> Result<Vec<T>> {
    let (p, q) = rational_ratio(fs_in.as_f64(), fs_out.as_f64())?;
    if p == q {
        return Ok(x.to_vec());
    }
    let len = x.len();
    let out_len = ((len * p) as f64 / q as f64).round() as usize;
    let factor = p.max(q);
    let half = RESAMPLE_ZERO_CROSSINGS * factor;
    let n_taps = 2 * half + 1;
    // Anti-aliasing cut at the lower of the two Nyquist rates, on the upsampled grid.
    let h: Vec<f64> = lowpass_taps(0.5 / factor as f64, n_taps)
        .into_iter()
        .map(|v| v * p as f64)
        .collect();

    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        // Upsampled position aligned with the kernel center.
        let pos = m * q + half;
        let i_hi = (pos / p).min(len.saturating_sub(1));
        let i_lo = (pos + p).saturating_sub(n_taps) / p;
        let mut acc = 0.0;
        if len > 0 {
            for i in i_lo..=i_hi {
                let up = i * p;
                if up > pos {
                    break;
                }
                let k = pos - up;
                if k < n_taps {
                    acc += h[k] * x[i].as_f64();
                }
            }
        }
        out.push(T::lit(acc));
    }
    Ok(out)
}

/// Preprocessing applied to every channel of every trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub low_hz: f64,
    pub high_hz: f64,
    pub n_taps: usize,
    pub resample_to: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            low_hz: 8.0,
            high_hz: 32.0,
            n_taps: 251,
            resample_to: Some(250.0),
        }
    }
}

/// Band-pass at the native rate, then resample.
pub fn preprocess_set(set: &TrialSet, cfg: &PreprocessConfig) -> Result<TrialSet> {
    let taps = design_bandpass(&FilterSpec {
        low_hz: cfg.low_hz,
        high_hz: cfg.high_hz,
        fs: set.fs,
        n_taps: cfg.n_taps,
    })?;
    let block = default_block_size(cfg.n_taps);
    let fs_out = cfg.resample_to.unwrap_or(set.fs);
    let mut trials = Vec::with_capacity(set.len());
    for trial in &set.trials {
        let mut rows = Vec::with_capacity(trial.channels());
        for ch in 0..trial.channels() {
            let filtered = bandpass_overlap_add(trial.data.row(ch), &taps, block)?;
            rows.push(resample(&filtered, set.fs, fs_out)?);
        }
        trials.push(Trial::new(Mat::from_rows(&rows), trial.label)?);
    }
    TrialSet::new(set.subject_id, set.session_id.clone(), fs_out, trials)
}
