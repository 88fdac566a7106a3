//! Hybrid-field cascaded channel simulation and estimation for XL-RIS-aided
//! massive MIMO.
//!
//! The crate provides:
//!
//! * [`tensor`] / [`tape`] — a dense `f64` tensor type and a reverse-mode
//!   autodiff tape carrying exactly the primitives the unrolled estimation
//!   networks need.
//! * [`channel`] — far-field, near-field, and hybrid-field channel synthesis
//!   for a ULA base station and a UPA reflecting surface, including the
//!   cascaded channel and its Khatri-Rao factorization.
//! * [`measurement`] — pilot-phase matrices, the matrix-free measurement
//!   operator `Φ = Θᵀ ⊗ I_N`, noise injection, and dataset files.
//! * [`recovery`] — classical estimators: grid dictionaries, OMP, ISTA,
//!   oracle least squares, and the NMSE metric.
//! * [`nets`] — the three unrolled estimators (CISTA-Net, CISTA-Net+,
//!   CNN-CDL) with their losses and checkpoint format.
//! * [`train`] — Adam, batched training loops, logs, and reproducible runs.
//! * [`eval`] — experiment driver sweeping SNR, pilot count, multipath mix,
//!   layer depth, and spectral efficiency, with CSV export.

pub mod channel;
pub mod config;
pub mod error;
pub mod eval;
pub mod measurement;
pub mod nets;
pub mod recovery;
pub mod seeds;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
