//! MIMO symbol detection: inverse-free variational Bayesian detectors, their
//! unrolled trainable networks, classical and learned baselines, a training
//! engine and a Monte-Carlo SER harness.

pub mod baselines;
pub mod channel;
pub mod classic;
pub mod constellation;
pub mod detection;
pub mod error;
pub mod harness;
pub mod ifvb;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod training;
pub mod unrolled;

pub use error::{Error, Result};
