//! Desk-scale mixture-of-experts laboratory for growing the expert count of a
//! trained model mid-training.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: seeded RNG, matrices, statistics, finite-difference checks.
//! - [`model`]: the FFN-only MoE network, top-K routing with loss-free load
//!   balancing, exact reverse-mode gradients, Adam and the WSD schedule.
//! - [`upcycle`]: expert duplication with router extension, replica
//!   allocation (uniform or utility-guided), canonical lifting, initialization
//!   heuristics and the dense→MoE conversion baseline.
//! - [`bound`]: capacity-gap / initialization-gain bound calculator.
//! - [`harness`]: synthetic data, the Fixed-E / Upcycled / Fixed-mE protocol,
//!   efficiency and cost metrics, sweeps and diagnostics.
//! - [`checkpoint`] and [`cli`]: persistence and the command-line front end.

// NaN must fail validation, hence `!(x >= 0.0)` style checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bound;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod upcycle;

pub use error::{Error, Result};
