//! Core library for reticle-heating prediction experiments.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`plant`] — a finite-difference thermal / thermo-elastic reticle plant
//!   with regime-dependent boundary conditions, dense overlay fields and
//!   sparse alignment-mark measurements.
//! - [`reduction`] — Krylov moment-matching model reduction per regime and
//!   centering of the resulting model family into a nominal model plus a
//!   peak-gain-normalized uncertainty set.
//! - [`predictor`] — the history-driven scheduler, the sparse-to-dense
//!   measurement map, observer-gain design and state handoff between models.
//! - [`certify`] — LFT assembly of the closed loop, an H-infinity norm
//!   engine and the small-gain stability certificate.
//! - [`harness`] — lot-level scenario simulation, strategy comparison,
//!   throughput accounting and deterministic result files.
//! - [`config`] / [`io`] — scenario configuration and on-disk formats.

pub mod certify;
pub mod config;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod noise;
pub mod pipeline;
pub mod plant;
pub mod predictor;
pub mod reduction;
pub mod ssm;

pub use error::{Error, Result};
