//! Bayesian additive regression trees with varying coefficients and
//! compound-symmetry errors for longitudinal panels.

pub mod benchmark;
pub mod config;
pub mod data;
pub mod error;
pub mod error_model;
pub mod eval;
pub mod geweke;
pub mod io;
pub mod posterior;
pub mod priors;
pub mod sampler;
pub mod synthetic;
pub mod tree;

pub use data::{ColumnNames, ModifierScaling, OutcomeScale, PanelDataset};
pub use error::{Error, Result};
pub use error_model::CompoundSymmetry;
pub use priors::{default_hyperparameters, Hyperparameters, SparsityState};
pub use tree::{Cutpoints, DecisionRule, DecisionTree, RegressionTree, SplitPrior, TreePrior};
