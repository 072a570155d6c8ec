//! Federated-learning threat laboratory.
//!
//! A desk-scale simulated federation together with the attacks and defenses
//! studied against it: gradient-matching reconstruction of private inputs,
//! targeted data poisoning, gradient compression and differential-privacy
//! noise (fixed and decaying, with Rényi accounting), and server-side
//! forensics over per-class gradient slices.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod federation;
pub mod forensics;
pub mod harness;
pub mod leakage;
pub mod metrics;
pub mod numcore;
pub mod poisoning;
pub mod privacy;
pub mod rng;

pub use error::{Error, Result};
