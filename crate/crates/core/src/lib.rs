//! Short-term load forecasting toolkit.
//!
//! Four competing forecasters share one data pipeline: recurrent networks
//! ([`neural`], LSTM and GRU cells with per-step parameters), regime-switching
//! expectile curves ([`fastec`] on top of a Gaussian mixture from [`gmm`]),
//! and an ARX benchmark ([`baselines`]). [`evaluation`] scores forecasts and
//! compares them with the Diebold-Mariano test; [`diagnostics`] covers the
//! exploratory statistics; [`synth`] generates regime-switching load data.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod diagnostics;
pub mod evaluation;
pub mod fastec;
pub mod gmm;
pub mod linalg;
pub mod neural;
pub mod plot;
pub mod series;
pub mod stats;
pub mod synth;

pub use series::{LoadDataset, SamplePair, SampleSplit, ScaleParams};
