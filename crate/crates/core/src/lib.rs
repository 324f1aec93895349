//! Probabilistic deterioration modeling of infrastructure elements from
//! visual-inspection time series.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod dataset;
pub mod domain;
pub mod error;
pub mod fsutil;
pub mod ingest;
pub mod inspectors;
pub mod interventions;
pub mod kernel;
pub mod numeric;
pub mod optim;
pub mod ssm;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
