//! Meta-learned click-through-rate models for users with little data.
//!
//! A small embedding + MLP CTR network is meta trained offline with a
//! first-order Reptile update, then adapted online user by user while part of
//! the network stays fixed.

pub mod checkpoint;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod metalearn;
pub mod model;
pub mod nncore;

pub use error::{Error, Result};
pub use eval::{auc, EvalLog, ExperimentConfig, Method};
pub use metalearn::{Hyperparams, MetaState};
pub use model::{build_topology, Example, ModelConfig, NetworkTopology, PartitionSpec};
pub use nncore::{GradientSet, ParameterSet};
