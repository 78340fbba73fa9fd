//! Uncertainty estimation for small feed-forward networks by marginalizing
//! the random variables of training: iteration count, initialization,
//! optimizer hyperparameters, algorithm choice, and masked model families.
//!
//! The pipeline is: train ([`optim`]) → draw parameter samples
//! ([`marginals`]) → estimate the predictive distribution by Monte Carlo
//! ([`predictive`]) or in one pass ([`adf`]) → score. [`runner`] drives
//! whole experiments from a config file.

pub mod adf;
pub mod data;
pub mod error;
pub mod marginals;
pub mod nn;
pub mod optim;
pub mod predictive;
pub mod runner;
pub mod seed;

pub use error::{Error, Result};
