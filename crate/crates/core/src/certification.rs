//! Node-level robustness judgments from output bounds, and counterexamples.
//!
//! A node `i` with clean label `c` is certified when, for every rival label
//! `c'`, the smallest value of the lower bound on `score[c] - score[c']` over
//! the perturbation space is strictly positive. For polyhedra bounds that
//! minimum is found exactly by a greedy choice of flips; the same flips are
//! the counterexample candidates, kept only after a concrete forward pass
//! confirms that the prediction changes.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph_model::{forward, labels_from_scores, normalize_adjacency, GcnModel, Graph};
use crate::interval::{
    interval_label_margins, interval_layer_bounds, InputVariant, IntervalElement,
};
use crate::perturbation::{apply_flips, FlipSet, PerturbationBudget};
use crate::polyhedra::{back_substitute, linear_poly, PolyNodeElement, ReluRelaxation};

/// Certifier configuration: abstract domain and interval input variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Method {
    #[default]
    PolyTopK,
    PolyMax,
    IntervalTopK,
    IntervalMax,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::PolyTopK,
        Method::PolyMax,
        Method::IntervalTopK,
        Method::IntervalMax,
    ];

    pub fn variant(self) -> InputVariant {
        match self {
            Method::PolyTopK | Method::IntervalTopK => InputVariant::TopK,
            Method::PolyMax | Method::IntervalMax => InputVariant::Max,
        }
    }

    pub fn is_poly(self) -> bool {
        matches!(self, Method::PolyTopK | Method::PolyMax)
    }

    /// The polyhedra method sharing this method's interval variant.
    pub fn poly_counterpart(self) -> Method {
        match self.variant() {
            InputVariant::TopK => Method::PolyTopK,
            InputVariant::Max => Method::PolyMax,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::PolyTopK => "poly-topk",
            Method::PolyMax => "poly-max",
            Method::IntervalTopK => "interval-topk",
            Method::IntervalMax => "interval-max",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown method {s:?}; expected poly-topk, poly-max, interval-topk or interval-max"
                ))
            })
    }
}

/// Certified lower bound on `score[c] - score[label]` and the flips that
/// attain it (empty for interval methods).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMargin {
    pub label: usize,
    pub margin: f64,
    pub flips: FlipSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeJudgment {
    pub node: usize,
    /// Clean predicted label `c`.
    pub label: usize,
    /// Minimum over [`Self::per_label`]; `+inf` with a single output label.
    pub margin: f64,
    pub certified: bool,
    pub per_label: Vec<LabelMargin>,
}

impl NodeJudgment {
    fn from_margins(node: usize, label: usize, per_label: Vec<LabelMargin>) -> Self {
        let margin = per_label
            .iter()
            .map(|m| m.margin)
            .fold(f64::INFINITY, f64::min);
        Self {
            node,
            label,
            margin,
            certified: margin > 0.0,
            per_label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Counterexample {
    pub node: usize,
    pub flips: FlipSet,
    /// Label predicted for `node` after applying `flips`.
    pub flipped_label: usize,
    pub verified: bool,
}

/// Bounds on `score[c] - score[c']`: the output element through a one-column
/// linear layer with `+1` at `c` and `-1` at `c'`.
pub fn label_difference_transform(
    elem: &PolyNodeElement,
    original_label: usize,
    other_label: usize,
) -> Result<PolyNodeElement> {
    let width = elem.width();
    if original_label == other_label {
        return Err(Error::InvalidArgument(format!(
            "label difference needs two distinct labels, got {original_label} twice"
        )));
    }
    if original_label >= width || other_label >= width {
        return Err(Error::InvalidArgument(format!(
            "labels {original_label}, {other_label} out of range for {width} outputs"
        )));
    }
    let mut delta = Array2::zeros((width, 1));
    delta[[original_label, 0]] = 1.0;
    delta[[other_label, 0]] = -1.0;
    linear_poly(elem, &delta, &Array1::zeros(1))
}

/// Exact minimum of the first lower-bound row of `elem` over the perturbation
/// space of `features`, and a flip set attaining it.
///
/// Flipping `x_{k,f}` changes the form by `θ = q_{k,f}·P[k][f]`. The admissible
/// flip sets are the independent sets of a truncated partition matroid (at
/// most `p_l` per node, at most `p_g` overall), so taking the `p_l` most
/// negative `θ` per node and then the `p_g` most negative of those is optimal.
/// Ties go to the lowest `(node, feature)`.
pub fn minimize_delta(
    elem: &PolyNodeElement,
    features: &Array2<u8>,
    budget: &PerturbationBudget,
) -> Result<(f64, FlipSet)> {
    if elem.width() == 0 {
        return Err(Error::InvalidArgument(
            "cannot minimize an element with no rows".into(),
        ));
    }
    let (n, m) = features.dim();
    let coef = elem.lower_coef.row(0);
    let mut value = elem.lower_const[0];
    let mut per_node: Vec<Vec<(f64, usize, usize)>> = vec![Vec::new(); n];
    for (&(k, f), &q) in elem.vars.iter().zip(coef.iter()) {
        if k >= n || f >= m {
            return Err(Error::InvalidArgument(format!(
                "variable ({k}, {f}) outside the {n}x{m} feature matrix"
            )));
        }
        let x = features[[k, f]];
        value += q * f64::from(x);
        let theta = if x == 0 { q } else { -q };
        if theta < 0.0 && budget.mode.allows(x) {
            per_node[k].push((theta, k, f));
        }
    }
    let by_gain = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
        a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2)))
    };
    let mut pool = Vec::new();
    for mut candidates in per_node {
        candidates.sort_by(by_gain);
        candidates.truncate(budget.local);
        pool.extend(candidates);
    }
    pool.sort_by(by_gain);
    pool.truncate(budget.global);
    let mut flips = FlipSet::new();
    for &(theta, k, f) in &pool {
        value += theta;
        flips.insert(k, f);
    }
    Ok((value, flips))
}

/// Shared, read-only state for certifying the nodes of one graph under one
/// budget. Node judgments may be computed in any order or in parallel.
#[derive(Debug)]
pub struct Certifier<'a> {
    model: &'a GcnModel,
    graph: &'a Graph,
    budget: PerturbationBudget,
    method: Method,
    relaxation: ReluRelaxation,
    norm_adj: Array2<f64>,
    labels: Vec<usize>,
    bounds: Vec<IntervalElement>,
}

impl<'a> Certifier<'a> {
    pub fn new(
        model: &'a GcnModel,
        graph: &'a Graph,
        budget: PerturbationBudget,
        method: Method,
    ) -> Result<Self> {
        Self::with_relaxation(model, graph, budget, method, ReluRelaxation::default())
    }

    pub fn with_relaxation(
        model: &'a GcnModel,
        graph: &'a Graph,
        budget: PerturbationBudget,
        method: Method,
        relaxation: ReluRelaxation,
    ) -> Result<Self> {
        model.check_input(graph)?;
        let norm_adj = normalize_adjacency(graph);
        let scores = forward(model, norm_adj.view(), graph.features_f64().view())?;
        let labels = labels_from_scores(&scores);
        let bounds =
            interval_layer_bounds(model, graph, norm_adj.view(), &budget, method.variant())?;
        Ok(Self {
            model,
            graph,
            budget,
            method,
            relaxation,
            norm_adj,
            labels,
            bounds,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn budget(&self) -> &PerturbationBudget {
        &self.budget
    }

    /// Clean predicted labels.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn check_node(&self, node: usize) -> Result<()> {
        if node >= self.graph.num_nodes() {
            return Err(Error::InvalidArgument(format!(
                "node {node} out of range for {} nodes",
                self.graph.num_nodes()
            )));
        }
        Ok(())
    }

    /// Output-layer polyhedra bounds of `node` over input variables.
    pub fn output_bounds(&self, node: usize) -> Result<PolyNodeElement> {
        self.check_node(node)?;
        back_substitute(
            self.model,
            self.graph,
            self.norm_adj.view(),
            node,
            &self.bounds,
            self.relaxation,
        )
    }

    /// Certified margins of `label` against every other label at `node`.
    ///
    /// Polyhedra methods report the larger of the polyhedra minimum and the
    /// interval gap `L[c] - U[c']`; both are sound lower bounds.
    pub fn label_margins(&self, node: usize, label: usize) -> Result<Vec<LabelMargin>> {
        self.check_node(node)?;
        let num_labels = self.model.num_labels();
        if label >= num_labels {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {num_labels} outputs"
            )));
        }
        if !self.method.is_poly() {
            let output = self.bounds.last().expect("at least one layer");
            return Ok(interval_label_margins(output, node, label)
                .into_iter()
                .map(|(other, margin)| LabelMargin {
                    label: other,
                    margin,
                    flips: FlipSet::new(),
                })
                .collect());
        }
        let output = self.output_bounds(node)?;
        let interval =
            interval_label_margins(self.bounds.last().expect("at least one layer"), node, label);
        interval
            .into_iter()
            .map(|(other, interval_margin)| {
                let delta = label_difference_transform(&output, label, other)?;
                let (margin, flips) = minimize_delta(&delta, self.graph.features(), &self.budget)?;
                Ok(LabelMargin {
                    label: other,
                    margin: margin.max(interval_margin),
                    flips,
                })
            })
            .collect()
    }

    pub fn judge(&self, node: usize) -> Result<NodeJudgment> {
        self.check_node(node)?;
        let label = self.labels[node];
        Ok(NodeJudgment::from_margins(
            node,
            label,
            self.label_margins(node, label)?,
        ))
    }

    /// Judgments for every node, in node order.
    pub fn judge_all(&self) -> Result<Vec<NodeJudgment>> {
        (0..self.graph.num_nodes())
            .into_par_iter()
            .map(|i| self.judge(i))
            .collect()
    }

    /// Verified counterexample for a node judged by a polyhedra certifier, or
    /// `None`. Certified nodes are skipped.
    pub fn counterexample(&self, judgment: &NodeJudgment) -> Result<Option<Counterexample>> {
        self.check_node(judgment.node)?;
        if judgment.certified {
            return Ok(None);
        }
        let mut candidates: Vec<&LabelMargin> = judgment
            .per_label
            .iter()
            .filter(|m| m.margin <= 0.0)
            .collect();
        candidates.sort_by(|a, b| a.margin.total_cmp(&b.margin).then(a.label.cmp(&b.label)));
        let features = self.graph.features();
        for candidate in candidates {
            let perturbed = apply_flips(features, &candidate.flips)?.mapv(f64::from);
            let scores = forward(self.model, self.norm_adj.view(), perturbed.view())?;
            let new_label = labels_from_scores(&scores)[judgment.node];
            if new_label != judgment.label {
                return Ok(Some(Counterexample {
                    node: judgment.node,
                    flips: candidate.flips.clone(),
                    flipped_label: new_label,
                    verified: true,
                }));
            }
        }
        Ok(None)
    }
}

/// Sound judgments for every node.
pub fn certify_sound(
    model: &GcnModel,
    graph: &Graph,
    budget: &PerturbationBudget,
    method: Method,
) -> Result<Vec<NodeJudgment>> {
    Certifier::new(model, graph, *budget, method)?.judge_all()
}

/// Counterexample for `node` based on polyhedra `judgments` (as returned by
/// [`certify_sound`] with a polyhedra method for the same budget).
pub fn generate_counterexample(
    model: &GcnModel,
    graph: &Graph,
    budget: &PerturbationBudget,
    node: usize,
    judgments: &[NodeJudgment],
) -> Result<Option<Counterexample>> {
    let judgment = judgments
        .iter()
        .find(|j| j.node == node)
        .ok_or_else(|| Error::InvalidArgument(format!("no judgment for node {node}")))?;
    let certifier = Certifier::new(model, graph, *budget, Method::PolyTopK)?;
    certifier.counterexample(judgment)
}

/// Sound judgments and, for every uncertified node, a counterexample search.
/// Interval methods borrow the flip sets of their polyhedra counterpart.
pub fn certify_with_counterexamples(
    model: &GcnModel,
    graph: &Graph,
    budget: &PerturbationBudget,
    method: Method,
) -> Result<Vec<(NodeJudgment, Option<Counterexample>)>> {
    let certifier = Certifier::new(model, graph, *budget, method)?;
    let poly = if method.is_poly() {
        None
    } else {
        Some(Certifier::new(
            model,
            graph,
            *budget,
            method.poly_counterpart(),
        )?)
    };
    (0..graph.num_nodes())
        .into_par_iter()
        .map(|i| {
            let judgment = certifier.judge(i)?;
            let example = if judgment.certified {
                None
            } else {
                match &poly {
                    None => certifier.counterexample(&judgment)?,
                    Some(p) => p.counterexample(&p.judge(i)?)?,
                }
            };
            Ok((judgment, example))
        })
        .collect()
}

/// Upper bound on robustness per node: `0` when a verified counterexample
/// exists, else `1`.
pub fn certify_complete(
    model: &GcnModel,
    graph: &Graph,
    budget: &PerturbationBudget,
    method: Method,
) -> Result<Vec<f64>> {
    Ok(certify_with_counterexamples(model, graph, budget, method)?
        .into_iter()
        .map(|(_, ce)| if ce.is_some() { 0.0 } else { 1.0 })
        .collect())
}
