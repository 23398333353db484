//! Random Hierarchy Model laboratory.
//!
//! Generates CFG-induced hierarchical grammars, computes their exact
//! statistics via transition matrices, trains a layerwise deep convolutional
//! learner built on RBF random features and per-level ridge regression, and
//! runs reproducible scaling sweeps. A separate module handles the deep
//! quadratic boolean task, a second instance of the same layerwise recipe.
//!
//! Everything is seed-deterministic: all randomness flows through explicit
//! [`rng::RngStream`]s, and data-parallel loops (enabled by the default
//! `parallel` feature) are structured so results do not depend on thread
//! count.

pub mod deepquad;
pub mod error;
pub mod experiments;
pub mod features;
pub mod grammar;
pub mod learner;
pub mod linalg;
pub mod oracle;
pub mod par;
pub mod rng;

pub use error::{Error, Result};
pub use grammar::{RhmInstance, RhmParams, Sample, Symbol};
pub use learner::{predict, train_layerwise, TrainedModel};
pub use oracle::TransitionStats;
pub use rng::RngStream;
