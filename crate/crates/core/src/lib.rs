//! Time-delay embedding of scalar time series and precision-annealed
//! training of multilayer perceptrons on the resulting one-step map.
//!
//! The pipeline runs: [`data`] (generate, perturb and rescale a series),
//! [`embed`] (delay and dimension selection, delay vectors), [`lyap`]
//! (Lyapunov spectrum from local Jacobians), [`netaction`] (network, pair
//! library and action), [`anneal`] (precision annealing), [`evaluate`]
//! (training/validation error and prediction) and [`experiments`] (sweeps).

pub mod anneal;
pub mod data;
pub mod embed;
pub mod error;
pub mod evaluate;
pub mod experiments;
pub mod lyap;
pub mod neighbors;
pub mod netaction;
pub mod optim;
pub mod sum;

pub use error::{Error, Result};
