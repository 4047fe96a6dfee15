//! Cross-series attention forecasting for regional incidence data.
//!
//! Each region's daily series is detrended with a learnable Holt smoother;
//! rolling windows of the residuals are normalized and embedded with a
//! small convolutional encoder, and the latest window of a target region
//! attends over historical windows of every region to borrow what happened
//! next. All parameters are trained jointly on mean absolute error.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod detrend;
pub mod embedding;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod optim;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
