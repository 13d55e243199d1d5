//! Experiment harness: synthetic corpora, degradation pairing, training
//! loops, metrics, evaluation runs, and the on-disk artifact formats.

pub mod config;
pub mod eval;
pub mod io;
pub mod metrics;
pub mod pairs;
pub mod synth;
pub mod train;
