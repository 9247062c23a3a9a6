//! Interval abstract interpretation of a GCN.
//!
//! Abstracting the binary input directly gives the useless box `[0, 1]` for
//! every feature, so the abstraction starts after the first layer: for each
//! latent entry the largest increase (and decrease) reachable within the
//! budget is found by selecting the best flips per node and then over the
//! whole neighborhood. The remaining layers use plain interval arithmetic.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::graph_model::{forward, labels_from_scores, normalize_adjacency, GcnModel, Graph};
use crate::perturbation::{sign_matrix, PerturbationBudget};

/// How the first-layer perturbation effect is bounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum InputVariant {
    /// Sum of the best `p_g` candidates after keeping the best `p_l` per node.
    /// Exact for the first layer.
    #[default]
    TopK,
    /// `p_g` times the single best candidate. Cheaper and looser.
    Max,
}

impl fmt::Display for InputVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputVariant::TopK => "topk",
            InputVariant::Max => "max",
        })
    }
}

/// Entrywise bounds `lower ≤ H ≤ upper` on a latent matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalElement {
    pub lower: Array2<f64>,
    pub upper: Array2<f64>,
}

impl IntervalElement {
    pub fn new(lower: Array2<f64>, upper: Array2<f64>) -> Result<Self> {
        if lower.dim() != upper.dim() {
            return Err(Error::dimension(
                "interval bounds",
                lower.len(),
                upper.len(),
            ));
        }
        if let Some(((i, j), _)) = lower.indexed_iter().find(|&(idx, &l)| l > upper[idx]) {
            return Err(Error::InvalidArgument(format!(
                "interval lower bound exceeds upper bound at ({i}, {j})"
            )));
        }
        Ok(Self { lower, upper })
    }

    /// The degenerate interval `[values, values]`.
    pub fn point(values: Array2<f64>) -> Self {
        Self {
            lower: values.clone(),
            upper: values,
        }
    }

    pub fn contains(&self, values: &Array2<f64>, tolerance: f64) -> bool {
        values.dim() == self.lower.dim()
            && Zip::from(values)
                .and(&self.lower)
                .and(&self.upper)
                .all(|&v, &l, &u| l - tolerance <= v && v <= u + tolerance)
    }
}

/// Sum of the `k` largest (or smallest) values that have the right sign.
fn best_k_sum(values: &mut [f64], k: usize, maximize: bool) -> f64 {
    if maximize {
        values.sort_by(|a, b| b.total_cmp(a));
        values.iter().take(k).filter(|&&v| v > 0.0).sum()
    } else {
        values.sort_by(|a, b| a.total_cmp(b));
        values.iter().take(k).filter(|&&v| v < 0.0).sum()
    }
}

/// Per-node candidates for latent feature `j`: the `p_l` strongest flip
/// effects of the right sign, unscaled.
fn per_node_candidates(
    effects: &Array2<f64>,
    allowed: &Array2<bool>,
    local: usize,
    maximize: bool,
) -> Vec<Vec<f64>> {
    effects
        .rows()
        .into_iter()
        .zip(allowed.rows())
        .map(|(row, ok)| {
            let mut vals: Vec<f64> = row
                .iter()
                .zip(ok.iter())
                .filter(|&(&v, &ok)| ok && if maximize { v > 0.0 } else { v < 0.0 })
                .map(|(&v, _)| v)
                .collect();
            if maximize {
                vals.sort_by(|a, b| b.total_cmp(a));
            } else {
                vals.sort_by(|a, b| a.total_cmp(b));
            }
            vals.truncate(local);
            vals
        })
        .collect()
}

/// Bounds on the first layer's pre-activation `Ã·X'·W_0 + b_0` valid for
/// every `X'` in the perturbation space.
pub fn interval_input_abstraction(
    model: &GcnModel,
    graph: &Graph,
    budget: &PerturbationBudget,
    variant: InputVariant,
) -> Result<IntervalElement> {
    model.check_input(graph)?;
    let norm_adj = normalize_adjacency(graph);
    input_abstraction_with(model, graph, norm_adj.view(), budget, variant)
}

pub(crate) fn input_abstraction_with(
    model: &GcnModel,
    graph: &Graph,
    norm_adj: ArrayView2<f64>,
    budget: &PerturbationBudget,
    variant: InputVariant,
) -> Result<IntervalElement> {
    let layer = &model.layers()[0];
    let features = graph.features();
    let exact = norm_adj.dot(&graph.features_f64()).dot(&layer.weight) + &layer.bias;
    if budget.is_empty() {
        return Ok(IntervalElement::point(exact));
    }
    let n = graph.num_nodes();
    let width = layer.output_width();
    let signs = sign_matrix(features);
    let allowed = features.mapv(|v| budget.mode.allows(v));

    let mut lower = exact.clone();
    let mut upper = exact;
    for j in 0..width {
        // effects[k][f]: change of (X·W)[k][j] when X[k][f] flips
        let column = layer.weight.column(j);
        let effects = &signs * &column.insert_axis(ndarray::Axis(0));
        let ups = per_node_candidates(&effects, &allowed, budget.local, true);
        let downs = per_node_candidates(&effects, &allowed, budget.local, false);
        for i in 0..n {
            let neighbors = (0..n).filter(|&k| norm_adj[[i, k]] > 0.0);
            match variant {
                InputVariant::TopK => {
                    let mut up_vals = Vec::new();
                    let mut down_vals = Vec::new();
                    for k in neighbors {
                        let a = norm_adj[[i, k]];
                        up_vals.extend(ups[k].iter().map(|v| a * v));
                        down_vals.extend(downs[k].iter().map(|v| a * v));
                    }
                    upper[[i, j]] += best_k_sum(&mut up_vals, budget.global, true);
                    lower[[i, j]] += best_k_sum(&mut down_vals, budget.global, false);
                }
                InputVariant::Max => {
                    let (mut best_up, mut best_down) = (0.0f64, 0.0f64);
                    for k in neighbors {
                        let a = norm_adj[[i, k]];
                        if let Some(v) = ups[k].first() {
                            best_up = best_up.max(a * v);
                        }
                        if let Some(v) = downs[k].first() {
                            best_down = best_down.min(a * v);
                        }
                    }
                    let count = budget.global as f64;
                    upper[[i, j]] += count * best_up;
                    lower[[i, j]] += count * best_down;
                }
            }
        }
    }
    Ok(IntervalElement { lower, upper })
}

/// `L' = L·max(W,0) + U·min(W,0) + b`, `U' = U·max(W,0) + L·min(W,0) + b`.
pub fn linear_interval(
    elem: &IntervalElement,
    weight: &Array2<f64>,
    bias: &Array1<f64>,
) -> Result<IntervalElement> {
    if elem.lower.ncols() != weight.nrows() {
        return Err(Error::dimension(
            "interval linear input width",
            weight.nrows(),
            elem.lower.ncols(),
        ));
    }
    if weight.ncols() != bias.len() {
        return Err(Error::dimension(
            "interval linear bias",
            weight.ncols(),
            bias.len(),
        ));
    }
    let pos = weight.mapv(|w| w.max(0.0));
    let neg = weight.mapv(|w| w.min(0.0));
    let lower = elem.lower.dot(&pos) + elem.upper.dot(&neg) + bias;
    let upper = elem.upper.dot(&pos) + elem.lower.dot(&neg) + bias;
    Ok(IntervalElement { lower, upper })
}

/// `(Ã·L, Ã·U)`; sound only because `Ã` is non-negative.
pub fn gc_interval(elem: &IntervalElement, norm_adj: ArrayView2<f64>) -> Result<IntervalElement> {
    if norm_adj.ncols() != elem.lower.nrows() {
        return Err(Error::dimension(
            "interval graph convolution",
            elem.lower.nrows(),
            norm_adj.ncols(),
        ));
    }
    if let Some(((i, k), v)) = norm_adj.indexed_iter().find(|(_, &v)| v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "normalized adjacency has negative entry {v} at ({i}, {k})"
        )));
    }
    Ok(IntervalElement {
        lower: norm_adj.dot(&elem.lower),
        upper: norm_adj.dot(&elem.upper),
    })
}

pub fn relu_interval(elem: &IntervalElement) -> IntervalElement {
    IntervalElement {
        lower: elem.lower.mapv(|v| v.max(0.0)),
        upper: elem.upper.mapv(|v| v.max(0.0)),
    }
}

/// Pre-activation interval bounds of every layer; the last entry bounds the
/// output scores.
pub fn interval_layer_bounds(
    model: &GcnModel,
    graph: &Graph,
    norm_adj: ArrayView2<f64>,
    budget: &PerturbationBudget,
    variant: InputVariant,
) -> Result<Vec<IntervalElement>> {
    let mut bounds = Vec::with_capacity(model.num_layers());
    let mut current = input_abstraction_with(model, graph, norm_adj, budget, variant)?;
    for layer in &model.layers()[1..] {
        let activated = relu_interval(&current);
        let convolved = gc_interval(&activated, norm_adj)?;
        let next = linear_interval(&convolved, &layer.weight, &layer.bias)?;
        bounds.push(std::mem::replace(&mut current, next));
    }
    bounds.push(current);
    Ok(bounds)
}

/// Lower bounds on `score[c] - score[c']` for each rival label `c'`, from the
/// output interval: `L[i][c] - U[i][c']`.
pub(crate) fn interval_label_margins(
    output: &IntervalElement,
    node: usize,
    label: usize,
) -> Vec<(usize, f64)> {
    (0..output.lower.ncols())
        .filter(|&c| c != label)
        .map(|c| (c, output.lower[[node, label]] - output.upper[[node, c]]))
        .collect()
}

/// Interval certifier: per node, the smallest lower bound on the score gap
/// between the predicted label and any rival. Positive means certified.
pub fn interval_certify(
    model: &GcnModel,
    graph: &Graph,
    budget: &PerturbationBudget,
    variant: InputVariant,
) -> Result<Vec<f64>> {
    model.check_input(graph)?;
    let norm_adj = normalize_adjacency(graph);
    let labels = labels_from_scores(&forward(
        model,
        norm_adj.view(),
        graph.features_f64().view(),
    )?);
    let bounds = interval_layer_bounds(model, graph, norm_adj.view(), budget, variant)?;
    let output = bounds.last().expect("at least one layer");
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            interval_label_margins(output, i, c)
                .into_iter()
                .map(|(_, m)| m)
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::worked_example;
    use crate::graph_model::forward_layers;
    use crate::perturbation::{apply_flips, enumerate_perturbations, exact_robustness, FlipMode};
    use crate::synthetic::{random_instance, InstanceShape};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_example_input_bounds() {
        let (graph, model) = worked_example();
        let b = interval_input_abstraction(
            &model,
            &graph,
            &PerturbationBudget::new(1, 1),
            InputVariant::TopK,
        )
        .unwrap();
        assert_eq!((b.lower[[0, 0]], b.upper[[0, 0]]), (0.5, 1.0));
        assert_eq!((b.lower[[0, 1]], b.upper[[0, 1]]), (1.0, 2.0));
    }

    #[test]
    fn worked_example_margin() {
        let (graph, model) = worked_example();
        let r = interval_certify(
            &model,
            &graph,
            &PerturbationBudget::new(1, 1),
            InputVariant::TopK,
        )
        .unwrap();
        assert!((r[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_budget_is_exact() {
        let (graph, model) = worked_example();
        let b = interval_input_abstraction(
            &model,
            &graph,
            &PerturbationBudget::new(2, 0),
            InputVariant::TopK,
        )
        .unwrap();
        assert_eq!(b.lower, b.upper);
        let r = interval_certify(
            &model,
            &graph,
            &PerturbationBudget::new(2, 0),
            InputVariant::Max,
        )
        .unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_examples() {
        let w = array![[1.0], [-1.0]];
        let b = array![0.0];
        let point = IntervalElement::point(array![[1.0, 2.0]]);
        let out = linear_interval(&point, &w, &b).unwrap();
        assert_eq!((out.lower[[0, 0]], out.upper[[0, 0]]), (-1.0, -1.0));

        let boxed = IntervalElement::new(array![[0.0, 0.0]], array![[1.0, 1.0]]).unwrap();
        let out = linear_interval(&boxed, &w, &b).unwrap();
        assert_eq!((out.lower[[0, 0]], out.upper[[0, 0]]), (-1.0, 1.0));
        // corners of the box attain exactly these extremes
        let corners = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
        let vals: Vec<f64> = corners.iter().map(|c| c[0] - c[1]).collect();
        assert_eq!(vals.iter().cloned().fold(f64::INFINITY, f64::min), -1.0);
        assert_eq!(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);

        let out = linear_interval(&boxed, &Array2::zeros((2, 2)), &array![0.3, -0.2]).unwrap();
        assert_eq!(out.lower, array![[0.3, -0.2]]);
        assert_eq!(out.upper, array![[0.3, -0.2]]);
        assert!(linear_interval(&boxed, &Array2::zeros((3, 1)), &array![0.0]).is_err());
    }

    #[test]
    fn gc_examples() {
        let a = array![[0.5, 0.5], [0.5, 0.5]];
        let e = IntervalElement::new(array![[0.0], [2.0]], array![[1.0], [2.0]]).unwrap();
        let out = gc_interval(&e, a.view()).unwrap();
        assert_eq!(out.lower, array![[1.0], [1.0]]);
        assert_eq!(out.upper, array![[1.5], [1.5]]);
        let id = Array2::<f64>::eye(2);
        assert_eq!(gc_interval(&e, id.view()).unwrap(), e);
        assert!(gc_interval(&e, array![[1.0, -0.1], [0.0, 1.0]].view()).is_err());
    }

    #[test]
    fn relu_examples() {
        let e = IntervalElement::new(array![[-1.0, 1.0, -3.0]], array![[2.0, 2.0, -1.0]]).unwrap();
        let r = relu_interval(&e);
        assert_eq!(r.lower, array![[0.0, 1.0, 0.0]]);
        assert_eq!(r.upper, array![[2.0, 2.0, 0.0]]);
    }

    #[test]
    fn rejects_inverted_interval() {
        assert!(IntervalElement::new(array![[1.0]], array![[0.0]]).is_err());
    }

    /// Brute force over every perturbed matrix: extremes of each layer.
    fn enumerate_layer_values(
        model: &GcnModel,
        graph: &Graph,
        budget: &PerturbationBudget,
    ) -> Vec<Vec<Array2<f64>>> {
        let a = normalize_adjacency(graph);
        enumerate_perturbations(graph.features(), budget, 1_000_000)
            .unwrap()
            .map(|flips| {
                let x = apply_flips(graph.features(), &flips)
                    .unwrap()
                    .mapv(f64::from);
                forward_layers(model, a.view(), x.view())
                    .unwrap()
                    .into_iter()
                    .map(|(pre, _)| pre)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn topk_is_exact_on_first_layer_and_sound_after() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let shape = InstanceShape::default();
        for _ in 0..60 {
            let (graph, model) = random_instance(&mut rng, &shape);
            for (local, global, mode) in [
                (1, 1, FlipMode::Both),
                (2, 2, FlipMode::Both),
                (1, 3, FlipMode::AddOnly),
                (2, 3, FlipMode::DeleteOnly),
            ] {
                let budget = PerturbationBudget::new(local, global).with_mode(mode);
                let a = normalize_adjacency(&graph);
                let topk =
                    interval_layer_bounds(&model, &graph, a.view(), &budget, InputVariant::TopK)
                        .unwrap();
                let max =
                    interval_layer_bounds(&model, &graph, a.view(), &budget, InputVariant::Max)
                        .unwrap();
                let samples = enumerate_layer_values(&model, &graph, &budget);
                let first_min = samples
                    .iter()
                    .map(|s| s[0].clone())
                    .reduce(|a, b| Zip::from(&a).and(&b).map_collect(|&x, &y| x.min(y)));
                let first_max = samples
                    .iter()
                    .map(|s| s[0].clone())
                    .reduce(|a, b| Zip::from(&a).and(&b).map_collect(|&x, &y| x.max(y)));
                let diff_lo = (&first_min.unwrap() - &topk[0].lower).mapv(f64::abs);
                let diff_hi = (&first_max.unwrap() - &topk[0].upper).mapv(f64::abs);
                assert!(diff_lo.iter().all(|&d| d < 1e-9), "{diff_lo}");
                assert!(diff_hi.iter().all(|&d| d < 1e-9), "{diff_hi}");
                for s in &samples {
                    for (l, values) in s.iter().enumerate() {
                        assert!(topk[l].contains(values, 1e-9));
                        assert!(max[l].contains(values, 1e-9));
                    }
                }
                Zip::from(&topk[0].lower)
                    .and(&max[0].lower)
                    .for_each(|&t, &m| assert!(t >= m - 1e-12));
                Zip::from(&topk[0].upper)
                    .and(&max[0].upper)
                    .for_each(|&t, &m| assert!(t <= m + 1e-12));
            }
        }
    }

    #[test]
    fn certified_nodes_are_robust() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = InstanceShape::default();
        for _ in 0..60 {
            let (graph, model) = random_instance(&mut rng, &shape);
            let budget = PerturbationBudget::new(1, 2);
            let truth = exact_robustness(&model, &graph, &budget, 1_000_000).unwrap();
            for variant in [InputVariant::TopK, InputVariant::Max] {
                let r = interval_certify(&model, &graph, &budget, variant).unwrap();
                for (i, &m) in r.iter().enumerate() {
                    assert!(m <= 0.0 || truth[i]);
                }
            }
        }
    }
}
