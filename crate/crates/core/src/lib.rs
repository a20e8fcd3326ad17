//! Standard-model action for layered perceptrons and discrete-time
//! dynamical systems, minimized by variational annealing over the model
//! precision.

pub mod action;
pub mod anneal;
pub mod continuum;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod forge;
pub mod io;
pub mod lbfgs;
pub mod network;
pub mod seed;

pub use error::{Error, Result};
