//! Graph-level robustness ratios and the uncertainty region between a lower
//! and an upper bound on robustness over a range of global budgets.

use std::time::Instant;

use crate::certification::{certify_with_counterexamples, Method, NodeJudgment};
use crate::error::{Error, Result};
use crate::graph_model::{GcnModel, Graph};
use crate::perturbation::{FlipMode, PerturbationBudget};

/// Fraction of certified nodes.
pub fn graph_robustness_ratio(judgments: &[NodeJudgment]) -> Result<f64> {
    let flags: Vec<bool> = judgments.iter().map(|j| j.certified).collect();
    ratio(&flags)
}

/// Fraction of `true` entries.
pub fn ratio(flags: &[bool]) -> Result<f64> {
    if flags.is_empty() {
        return Err(Error::InvalidArgument(
            "robustness ratio of an empty graph".into(),
        ));
    }
    Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

/// Lower and upper robustness ratios for one local budget and a list of
/// global budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessSweep {
    pub local_budget: usize,
    pub global_budgets: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub runtime_ms: Vec<f64>,
}

impl RobustnessSweep {
    pub fn new(
        local_budget: usize,
        global_budgets: Vec<usize>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    ) -> Result<Self> {
        let len = global_budgets.len();
        if lower.len() != len {
            return Err(Error::dimension("sweep lower bounds", len, lower.len()));
        }
        if upper.len() != len {
            return Err(Error::dimension("sweep upper bounds", len, upper.len()));
        }
        Ok(Self {
            local_budget,
            global_budgets,
            lower,
            upper,
            runtime_ms: vec![0.0; len],
        })
    }

    /// Budgets at which the upper bound rises above its value at the previous
    /// budget. A stronger counterexample search would remove these.
    pub fn upper_monotonicity_violations(&self) -> Vec<usize> {
        self.upper
            .windows(2)
            .zip(&self.global_budgets[1..])
            .filter(|(w, _)| w[1] > w[0])
            .map(|(_, &b)| b)
            .collect()
    }

    /// Budgets at which the lower bound rises above its value at the previous
    /// budget.
    pub fn lower_monotonicity_violations(&self) -> Vec<usize> {
        self.lower
            .windows(2)
            .zip(&self.global_budgets[1..])
            .filter(|(w, _)| w[1] > w[0])
            .map(|(_, &b)| b)
            .collect()
    }
}

/// `Σ (upper - lower)` over the sweep's budgets.
pub fn uncertainty_region(sweep: &RobustnessSweep) -> Result<f64> {
    if sweep.lower.len() != sweep.upper.len() {
        return Err(Error::dimension(
            "sweep bounds",
            sweep.lower.len(),
            sweep.upper.len(),
        ));
    }
    let mut total = 0.0;
    for (k, (lo, up)) in sweep.lower.iter().zip(&sweep.upper).enumerate() {
        if lo > up {
            return Err(Error::InvalidArgument(format!(
                "lower bound {lo} exceeds upper bound {up} at sweep entry {k}"
            )));
        }
        total += up - lo;
    }
    Ok(total)
}

/// Certified ratio (lower) and counterexample-based ratio (upper) for each
/// global budget.
pub fn run_sweep(
    model: &GcnModel,
    graph: &Graph,
    local: usize,
    mode: FlipMode,
    global_budgets: &[usize],
    method: Method,
) -> Result<RobustnessSweep> {
    let mut lower = Vec::with_capacity(global_budgets.len());
    let mut upper = Vec::with_capacity(global_budgets.len());
    let mut runtime_ms = Vec::with_capacity(global_budgets.len());
    for &global in global_budgets {
        let start = Instant::now();
        let budget = PerturbationBudget::new(local, global).with_mode(mode);
        let judged = certify_with_counterexamples(model, graph, &budget, method)?;
        let certified: Vec<bool> = judged.iter().map(|(j, _)| j.certified).collect();
        let no_counterexample: Vec<bool> = judged.iter().map(|(_, ce)| ce.is_none()).collect();
        lower.push(ratio(&certified)?);
        upper.push(ratio(&no_counterexample)?);
        runtime_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mut sweep = RobustnessSweep::new(local, global_budgets.to_vec(), lower, upper)?;
    sweep.runtime_ms = runtime_ms;
    Ok(sweep)
}
