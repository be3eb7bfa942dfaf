//! Spatio-temporal transformer for multi-attribute grid forecasting with
//! parameter-sharing pretraining and prompt tuning on a frozen backbone.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
