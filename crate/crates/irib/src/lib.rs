#![forbid(unsafe_code)]

//! Desk-scale blind image restoration as an information bottleneck: a seeded
//! differentiable degradation pipeline, an extreme-to-mild quality projector
//! trained against a frozen restorer, the full bottleneck loss suite, and
//! look-forward-once inference conditioning.

mod error;
pub mod degrade;
pub mod harness;
pub mod lfo;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod seed;

pub use error::{Error, Result};
