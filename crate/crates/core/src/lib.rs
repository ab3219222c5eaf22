//! Contrastive separative coding: joint speech separation and speaker
//! representation learning on a reverse-mode autodiff tape.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod csc;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pit;
pub mod plot;
pub mod report;
pub mod run;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::{CscError, Result};
