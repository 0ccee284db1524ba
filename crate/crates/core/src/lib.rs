//! Recession prediction from monthly U.S. macroeconomic indicators.
//!
//! The pipeline runs from raw monthly series to a trained
//! BiLSTM-autoencoder-attention classifier:
//!
//! - [`ingest`] loads and aligns the 14 indicator series and labels each
//!   month from the recession calendar.
//! - [`features`] derives first/second half-difference features,
//!   standardizes on the training split and cuts sliding windows.
//! - [`autodiff`], [`layers`] and [`model`] implement the classifier and its
//!   composite objective, trained by backpropagation through time.
//! - [`baselines`] holds the comparison models, [`eval`] the metrics, and
//!   [`experiments`] the config-driven experiment runners.

pub mod autodiff;
pub mod baselines;
pub mod eval;
pub mod experiments;
pub mod features;
pub mod ingest;
pub mod layers;
pub mod model;
pub mod month;
pub mod synth;

pub use month::YearMonth;
