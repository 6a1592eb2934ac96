//! Train small normalizing flows on low-dimensional data and tame them:
//! fine-tune a trained flow so that a chosen subset's likelihood moves to a
//! target offset from the rest of the data while the remaining likelihood
//! distribution stays put.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod seed;
pub mod tame;
pub mod train;

pub use error::{Error, Result};
