//! Robustness certification for graph convolutional network node classifiers
//! under bounded binary feature flips.
//!
//! Two abstract domains bound the classifier's outputs over every reachable
//! feature matrix: intervals, and per-node linear lower/upper forms over the
//! input features ("polyhedra"). A node is certified when the bound on its
//! score gap to every rival label stays positive. Flip sets suggested by the
//! polyhedra bounds are replayed concretely to find counterexamples, giving an
//! upper bound on robustness alongside the certified lower bound.

pub mod certification;
pub mod cli;
pub mod collective;
pub mod error;
pub mod fixtures;
pub mod graph_model;
pub mod interval;
pub mod io;
pub mod metrics;
pub mod perturbation;
pub mod polyhedra;
pub mod synthetic;
pub mod training;

pub use certification::{
    certify_complete, certify_sound, certify_with_counterexamples, generate_counterexample,
    label_difference_transform, minimize_delta, Certifier, Counterexample, LabelMargin, Method,
    NodeJudgment,
};
pub use collective::{max_robust_limit, robust_limits, RobustLimit};
pub use error::{Error, Result};
pub use graph_model::{normalize_adjacency, predict, GcnModel, Graph, Layer, Prediction};
pub use interval::{InputVariant, IntervalElement};
pub use metrics::{graph_robustness_ratio, run_sweep, uncertainty_region, RobustnessSweep};
pub use perturbation::{FlipMode, FlipSet, PerturbationBudget};
pub use polyhedra::{PolyElement, PolyNodeElement, ReluRelaxation};
pub use training::{train_robust, LossKind, RobustLossConfig};
