//! Desk-scale federated learning testbed with a client-side AugMix
//! consistency defense and a gradient-leakage attack harness.
//!
//! The crate is organized around the experiment pipeline:
//! train a federation ([`federation`]), attack shared client updates
//! ([`attack`]), score reconstructions ([`metrics`]), and report the
//! privacy-utility trade-off ([`runner`]).

pub mod attack;
pub mod augment;
pub mod config;
pub mod data_io;
pub mod error;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
