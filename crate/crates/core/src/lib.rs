//! Euclidean and Riemannian alignment for cross-subject EEG decoding.
//!
//! The numeric kernels (`spdcore`, `dsp`, `stats`) are generic over [`Real`]
//! so they run in `f32` or `f64`; the trial pipeline itself computes in `f64`.

pub mod align;
pub mod dsp;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod neural;
pub mod scalar;
pub mod seed;
pub mod spdcore;
pub mod stats;
pub mod synth;
pub mod trialdata;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use scalar::Real;
pub use spdcore::SpdMatrix;
pub use trialdata::{Dataset, Trial, TrialSet};

pub type Mat64 = Mat<f64>;
pub type Mat32 = Mat<f32>;
pub type SpdMatrix64 = SpdMatrix<f64>;
pub type SpdMatrix32 = SpdMatrix<f32>;
