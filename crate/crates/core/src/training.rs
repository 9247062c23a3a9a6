//! Certification-guided training.
//!
//! The loss of a node is computed from its certified margins against every
//! other label, so lowering it pushes the certified lower bounds up. Gradients
//! are central finite differences over all parameters, which is only practical
//! for toy models.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::certification::{Certifier, Method};
use crate::error::{Error, Result};
use crate::graph_model::{predict, GcnModel, Graph};
use crate::perturbation::PerturbationBudget;
use crate::polyhedra::ReluRelaxation;

pub const MAX_TRAINABLE_PARAMETERS: usize = 2000;
pub const FINITE_DIFFERENCE_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    Bce,
    #[default]
    Hinge,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Bce => "bce",
            LossKind::Hinge => "hinge",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "hinge" => Ok(LossKind::Hinge),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss {other:?}; expected bce or hinge"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustLossConfig {
    pub kind: LossKind,
    pub hinge_threshold_labeled: f64,
    pub hinge_threshold_unlabeled: f64,
    /// Unlabeled nodes contribute with the model's own prediction as label;
    /// otherwise they are ignored.
    pub use_predicted_labels_for_unlabeled: bool,
    pub method: Method,
    pub relaxation: ReluRelaxation,
    /// Nodes per step, shuffled by the training seed; `None` for full batch.
    pub batch_size: Option<usize>,
}

impl Default for RobustLossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Hinge,
            hinge_threshold_labeled: (90.0f64 / 10.0).ln(),
            hinge_threshold_unlabeled: (60.0f64 / 40.0).ln(),
            use_predicted_labels_for_unlabeled: true,
            method: Method::PolyTopK,
            relaxation: ReluRelaxation::default(),
            batch_size: None,
        }
    }
}

/// `-Σ log σ(δ)`, evaluated as `Σ softplus(-δ)`.
pub fn bce_loss(margins: &[f64]) -> f64 {
    margins
        .iter()
        .map(|&m| {
            let x = -m;
            x.max(0.0) + (-x.abs()).exp().ln_1p()
        })
        .sum()
}

/// `Σ max(t - δ, 0)`.
pub fn hinge_loss(margins: &[f64], threshold: f64) -> f64 {
    margins.iter().map(|&m| (threshold - m).max(0.0)).sum()
}

fn check_labels(model: &GcnModel, graph: &Graph, labels: &[Option<usize>]) -> Result<()> {
    if labels.len() != graph.num_nodes() {
        return Err(Error::dimension(
            "training labels",
            graph.num_nodes(),
            labels.len(),
        ));
    }
    if let Some((i, c)) = labels
        .iter()
        .enumerate()
        .find_map(|(i, l)| l.filter(|&c| c >= model.num_labels()).map(|c| (i, c)))
    {
        return Err(Error::InvalidArgument(format!(
            "label {c} of node {i} out of range for {} outputs",
            model.num_labels()
        )));
    }
    Ok(())
}

/// Mean robust loss over `nodes`.
pub fn robust_loss(
    model: &GcnModel,
    graph: &Graph,
    labels: &[Option<usize>],
    nodes: &[usize],
    budget: &PerturbationBudget,
    config: &RobustLossConfig,
) -> Result<f64> {
    check_labels(model, graph, labels)?;
    let certifier =
        Certifier::with_relaxation(model, graph, *budget, config.method, config.relaxation)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for &i in nodes {
        let (label, threshold) = match labels[i] {
            Some(c) => (c, config.hinge_threshold_labeled),
            None if config.use_predicted_labels_for_unlabeled => {
                (certifier.labels()[i], config.hinge_threshold_unlabeled)
            }
            None => continue,
        };
        let margins: Vec<f64> = certifier
            .label_margins(i, label)?
            .into_iter()
            .map(|m| m.margin)
            .collect();
        total += match config.kind {
            LossKind::Bce => bce_loss(&margins),
            LossKind::Hinge => hinge_loss(&margins, threshold),
        };
        counted += 1;
    }
    Ok(if counted == 0 {
        0.0
    } else {
        total / counted as f64
    })
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: GcnModel,
    /// Batch loss before each step.
    pub losses: Vec<f64>,
}

/// Plain gradient descent on the robust loss.
#[allow(clippy::too_many_arguments)]
pub fn train_robust(
    model: &GcnModel,
    graph: &Graph,
    labels: &[Option<usize>],
    budget: &PerturbationBudget,
    config: &RobustLossConfig,
    steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<TrainingOutcome> {
    let num_params = model.num_parameters();
    if num_params > MAX_TRAINABLE_PARAMETERS {
        return Err(Error::TooManyParameters {
            params: num_params,
            limit: MAX_TRAINABLE_PARAMETERS,
        });
    }
    if !learning_rate.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate {learning_rate} is not finite"
        )));
    }
    if config.batch_size == Some(0) {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    check_labels(model, graph, labels)?;
    model.check_input(graph)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..graph.num_nodes()).collect();
    let mut cursor = order.len();
    let mut params = model.parameters();
    let mut current = model.clone();
    let mut losses = Vec::with_capacity(steps);

    for _ in 0..steps {
        let batch: Vec<usize> = match config.batch_size {
            None => order.clone(),
            Some(size) => {
                let size = size.min(order.len());
                if cursor + size > order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += size;
                order[cursor - size..cursor].to_vec()
            }
        };
        losses.push(robust_loss(
            &current, graph, labels, &batch, budget, config,
        )?);
        let gradient: Vec<f64> = (0..num_params)
            .into_par_iter()
            .map(|p| {
                let mut shifted = params.clone();
                shifted[p] = params[p] + FINITE_DIFFERENCE_STEP;
                let plus = robust_loss(
                    &model.with_parameters(&shifted)?,
                    graph,
                    labels,
                    &batch,
                    budget,
                    config,
                )?;
                shifted[p] = params[p] - FINITE_DIFFERENCE_STEP;
                let minus = robust_loss(
                    &model.with_parameters(&shifted)?,
                    graph,
                    labels,
                    &batch,
                    budget,
                    config,
                )?;
                Ok((plus - minus) / (2.0 * FINITE_DIFFERENCE_STEP))
            })
            .collect::<Result<_>>()?;
        for (w, g) in params.iter_mut().zip(&gradient) {
            *w -= learning_rate * g;
        }
        current = model.with_parameters(&params)?;
    }
    Ok(TrainingOutcome {
        model: current,
        losses,
    })
}

/// Fraction of nodes whose predicted label equals `truth`.
pub fn accuracy(model: &GcnModel, graph: &Graph, truth: &[usize]) -> Result<f64> {
    if truth.len() != graph.num_nodes() || truth.is_empty() {
        return Err(Error::dimension(
            "ground-truth labels",
            graph.num_nodes(),
            truth.len(),
        ));
    }
    let predicted = predict(model, graph)?.labels;
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}
