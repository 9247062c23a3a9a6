//! Polyhedra abstract interpretation of a GCN.
//!
//! Every latent feature `h_{i,j}` of node `i` is bounded by one lower and one
//! upper linear form over input-feature variables `x_{k,f}` of the nodes in
//! `i`'s receptive field:
//!
//! ```text
//! Q_low[j]·x + d_low[j]  ≤  h_{i,j}  ≤  Q_up[j]·x + d_up[j]
//! ```
//!
//! Linear layers and graph convolution are captured exactly. ReLU is relaxed
//! with one lower and one upper line chosen from numeric interval bounds; the
//! chord is the upper line and the lower line is either the identity or zero,
//! whichever encloses the smaller area.
//!
//! All abstract operators are linear maps on the coefficient matrices, so the
//! output bounds of a node can be computed either forwards, layer by layer for
//! the whole graph ([`forward_poly`]), or backwards from the node's output
//! ([`back_substitute`]), touching only its receptive field. Both orders give
//! the same forms up to floating-point reassociation.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::graph_model::{GcnModel, Graph};
use crate::interval::IntervalElement;

/// An input-feature variable `x_{node, feature}`.
pub type Var = (usize, usize);

/// Symbolic lower and upper bounds for the latent features of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyNodeElement {
    /// Variables in canonical `(node, feature)` order, without duplicates.
    pub vars: Vec<Var>,
    pub lower_coef: Array2<f64>,
    pub lower_const: Array1<f64>,
    pub upper_coef: Array2<f64>,
    pub upper_const: Array1<f64>,
}

impl PolyNodeElement {
    pub fn new(
        vars: Vec<Var>,
        lower_coef: Array2<f64>,
        lower_const: Array1<f64>,
        upper_coef: Array2<f64>,
        upper_const: Array1<f64>,
    ) -> Result<Self> {
        if !vars.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "polyhedra variables must be strictly sorted".into(),
            ));
        }
        let rows = lower_const.len();
        for (name, coef) in [("lower", &lower_coef), ("upper", &upper_coef)] {
            if coef.ncols() != vars.len() {
                return Err(Error::dimension(
                    format!("{name} coefficient columns"),
                    vars.len(),
                    coef.ncols(),
                ));
            }
            if coef.nrows() != rows {
                return Err(Error::dimension(
                    format!("{name} coefficient rows"),
                    rows,
                    coef.nrows(),
                ));
            }
        }
        if upper_const.len() != rows {
            return Err(Error::dimension("upper constants", rows, upper_const.len()));
        }
        Ok(Self {
            vars,
            lower_coef,
            lower_const,
            upper_coef,
            upper_const,
        })
    }

    /// An element whose lower and upper forms coincide.
    pub fn exact(vars: Vec<Var>, coef: Array2<f64>, constant: Array1<f64>) -> Result<Self> {
        Self::new(vars, coef.clone(), constant.clone(), coef, constant)
    }

    /// Number of latent features bounded.
    pub fn width(&self) -> usize {
        self.lower_const.len()
    }

    /// Whether the lower and upper forms agree within `tolerance`.
    pub fn is_exact(&self, tolerance: f64) -> bool {
        let close = |a: &f64, b: &f64| (a - b).abs() <= tolerance;
        self.lower_coef
            .iter()
            .zip(&self.upper_coef)
            .all(|(a, b)| close(a, b))
            && self
                .lower_const
                .iter()
                .zip(&self.upper_const)
                .all(|(a, b)| close(a, b))
    }

    fn assignment(&self, features: ArrayView2<f64>) -> Array1<f64> {
        self.vars.iter().map(|&(k, f)| features[[k, f]]).collect()
    }

    /// Values of the lower and upper forms at a concrete feature matrix.
    pub fn evaluate(&self, features: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
        let x = self.assignment(features);
        (
            self.lower_coef.dot(&x) + &self.lower_const,
            self.upper_coef.dot(&x) + &self.upper_const,
        )
    }

    /// Largest absolute difference in coefficients or constants between two
    /// elements over the same variables.
    pub fn max_abs_difference(&self, other: &Self) -> Option<f64> {
        if self.vars != other.vars || self.width() != other.width() {
            return None;
        }
        let pairs = self
            .lower_coef
            .iter()
            .zip(&other.lower_coef)
            .chain(self.upper_coef.iter().zip(&other.upper_coef))
            .chain(self.lower_const.iter().zip(&other.lower_const))
            .chain(self.upper_const.iter().zip(&other.upper_const));
        Some(pairs.map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }
}

/// Polyhedra abstract element for a whole graph, one entry per node.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyElement {
    pub per_node: Vec<PolyNodeElement>,
}

/// Each input feature bounded by itself: identity coefficients, zero constants.
pub fn poly_input_abstraction(graph: &Graph) -> PolyElement {
    let m = graph.num_features();
    let per_node = (0..graph.num_nodes())
        .map(|i| PolyNodeElement {
            vars: (0..m).map(|f| (i, f)).collect(),
            lower_coef: Array2::eye(m),
            lower_const: Array1::zeros(m),
            upper_coef: Array2::eye(m),
            upper_const: Array1::zeros(m),
        })
        .collect();
    PolyElement { per_node }
}

/// Fully connected layer `h·W + b` on symbolic bounds: positive weights carry
/// lower to lower, negative weights carry upper to lower, and vice versa.
pub fn linear_poly(
    elem: &PolyNodeElement,
    weight: &Array2<f64>,
    bias: &Array1<f64>,
) -> Result<PolyNodeElement> {
    if weight.nrows() != elem.width() {
        return Err(Error::dimension(
            "polyhedra linear input width",
            weight.nrows(),
            elem.width(),
        ));
    }
    if weight.ncols() != bias.len() {
        return Err(Error::dimension(
            "polyhedra linear bias",
            weight.ncols(),
            bias.len(),
        ));
    }
    let pos = weight.t().mapv(|w| w.max(0.0));
    let neg = weight.t().mapv(|w| w.min(0.0));
    Ok(PolyNodeElement {
        vars: elem.vars.clone(),
        lower_coef: pos.dot(&elem.lower_coef) + neg.dot(&elem.upper_coef),
        lower_const: pos.dot(&elem.lower_const) + neg.dot(&elem.upper_const) + bias,
        upper_coef: pos.dot(&elem.upper_coef) + neg.dot(&elem.lower_coef),
        upper_const: pos.dot(&elem.upper_const) + neg.dot(&elem.lower_const) + bias,
    })
}

/// Graph convolution for one node: the `Ã`-weighted sum of its neighbors'
/// bounds. `elems[k]` is node `k`'s element and `norm_adj_row[k]` its weight;
/// nodes with weight zero are not neighbors. Variables shared by several
/// neighbors end up in one column with the summed coefficient.
pub fn gc_poly(
    elems: &[PolyNodeElement],
    norm_adj_row: ArrayView1<f64>,
) -> Result<PolyNodeElement> {
    if norm_adj_row.len() != elems.len() {
        return Err(Error::dimension(
            "graph convolution row",
            elems.len(),
            norm_adj_row.len(),
        ));
    }
    if let Some((k, &w)) = norm_adj_row.indexed_iter().find(|(_, &w)| w < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "negative adjacency weight {w} for neighbor {k}"
        )));
    }
    let neighbors: Vec<(f64, &PolyNodeElement)> = norm_adj_row
        .iter()
        .zip(elems)
        .filter(|(&w, _)| w > 0.0)
        .map(|(&w, e)| (w, e))
        .collect();
    let width = neighbors
        .first()
        .map(|(_, e)| e.width())
        .ok_or_else(|| Error::InvalidArgument("node has no neighbors, not even itself".into()))?;
    if let Some((_, e)) = neighbors.iter().find(|(_, e)| e.width() != width) {
        return Err(Error::dimension("neighbor element width", width, e.width()));
    }

    let mut index: BTreeMap<Var, usize> = BTreeMap::new();
    for (_, e) in &neighbors {
        for &v in &e.vars {
            index.insert(v, 0);
        }
    }
    for (pos, slot) in index.values_mut().enumerate() {
        *slot = pos;
    }
    let mut out = PolyNodeElement {
        vars: index.keys().copied().collect(),
        lower_coef: Array2::zeros((width, index.len())),
        lower_const: Array1::zeros(width),
        upper_coef: Array2::zeros((width, index.len())),
        upper_const: Array1::zeros(width),
    };
    for (w, e) in neighbors {
        for (col, v) in e.vars.iter().enumerate() {
            let target = index[v];
            out.lower_coef
                .column_mut(target)
                .scaled_add(w, &e.lower_coef.column(col));
            out.upper_coef
                .column_mut(target)
                .scaled_add(w, &e.upper_coef.column(col));
        }
        out.lower_const.scaled_add(w, &e.lower_const);
        out.upper_const.scaled_add(w, &e.upper_const);
    }
    Ok(out)
}

/// Knobs of the ReLU relaxation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReluRelaxation {
    /// Slope `λ ∈ [0, 1]` of the lower line when the minimum-area choice is
    /// the zero line. `0` gives the minimum-area bound; larger values keep a
    /// gradient through inactive-leaning neurons and remain sound.
    pub zero_case_lower_slope: f64,
}

impl Default for ReluRelaxation {
    fn default() -> Self {
        Self {
            zero_case_lower_slope: 0.0,
        }
    }
}

impl ReluRelaxation {
    pub fn with_lower_slope(slope: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&slope) {
            return Err(Error::InvalidArgument(format!(
                "ReLU lower slope {slope} outside [0, 1]"
            )));
        }
        Ok(Self {
            zero_case_lower_slope: slope,
        })
    }
}

/// How a ReLU is bounded given numeric bounds `[lo, up]` on its input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReluCase {
    /// `lo ≥ 0`: identity.
    Active,
    /// `up ≤ 0`: constant zero.
    Inactive,
    /// `lo < 0 < up`, `up ≥ -lo`: keep the lower form, chord as upper.
    MixedKeepLower,
    /// `lo < 0 < up`, `up < -lo`: zero lower form, chord as upper.
    MixedZeroLower,
}

pub fn relu_case(lo: f64, up: f64) -> ReluCase {
    if lo >= 0.0 {
        ReluCase::Active
    } else if up <= 0.0 {
        ReluCase::Inactive
    } else if up >= -lo {
        ReluCase::MixedKeepLower
    } else {
        ReluCase::MixedZeroLower
    }
}

/// Slope of the lower line that minimizes the relaxation area for
/// `lo < 0 < up`: `1` when `|up| ≥ |lo|`, else `0`.
pub fn min_area_lower_slope(lo: f64, up: f64) -> f64 {
    if up.abs() >= lo.abs() {
        1.0
    } else {
        0.0
    }
}

/// Chord through `(lo, 0)` and `(up, up)` as `(slope, intercept)`.
pub fn upper_chord(lo: f64, up: f64) -> (f64, f64) {
    let span = up - lo;
    (up / span, -up * lo / span)
}

/// Per-feature scalings `(lower_scale, upper_scale, upper_shift)` applied by
/// the ReLU relaxation.
fn relu_scalings(lo: f64, up: f64, relaxation: ReluRelaxation) -> (f64, f64, f64) {
    match relu_case(lo, up) {
        ReluCase::Active => (1.0, 1.0, 0.0),
        ReluCase::Inactive => (0.0, 0.0, 0.0),
        ReluCase::MixedKeepLower => {
            let (s, t) = upper_chord(lo, up);
            (1.0, s, t)
        }
        ReluCase::MixedZeroLower => {
            let (s, t) = upper_chord(lo, up);
            (relaxation.zero_case_lower_slope, s, t)
        }
    }
}

/// ReLU relaxation of one node's bounds using numeric bounds `lower`/`upper`
/// on each latent feature.
pub fn relu_poly(
    elem: &PolyNodeElement,
    lower: ArrayView1<f64>,
    upper: ArrayView1<f64>,
    relaxation: ReluRelaxation,
) -> Result<PolyNodeElement> {
    if lower.len() != elem.width() || upper.len() != elem.width() {
        return Err(Error::dimension(
            "ReLU interval bounds",
            elem.width(),
            lower.len(),
        ));
    }
    let mut out = elem.clone();
    for j in 0..elem.width() {
        if lower[j] > upper[j] {
            return Err(Error::InvalidArgument(format!(
                "ReLU bounds inverted at feature {j}: [{}, {}]",
                lower[j], upper[j]
            )));
        }
        let (a, s, t) = relu_scalings(lower[j], upper[j], relaxation);
        out.lower_coef.row_mut(j).mapv_inplace(|v| a * v);
        out.lower_const[j] *= a;
        out.upper_coef.row_mut(j).mapv_inplace(|v| s * v);
        out.upper_const[j] = s * out.upper_const[j] + t;
    }
    Ok(out)
}

/// Abstract values of one layer for the whole graph.
#[derive(Debug, Clone)]
pub struct PolyLayer {
    pub pre_activation: PolyElement,
    pub post_activation: PolyElement,
}

fn check_bounds(model: &GcnModel, graph: &Graph, bounds: &[IntervalElement]) -> Result<()> {
    model.check_input(graph)?;
    if bounds.len() + 1 < model.num_layers() {
        return Err(Error::dimension(
            "interval bounds per layer",
            model.num_layers(),
            bounds.len(),
        ));
    }
    for (l, b) in bounds.iter().take(model.num_layers() - 1).enumerate() {
        let expected = (graph.num_nodes(), model.layers()[l].output_width());
        if b.lower.dim() != expected {
            return Err(Error::dimension(
                format!("interval bounds of layer {l}"),
                expected.0 * expected.1,
                b.lower.len(),
            ));
        }
    }
    Ok(())
}

/// Layer-by-layer propagation for every node. `bounds[l]` are the
/// pre-activation interval bounds of layer `l` used to relax its ReLU.
pub fn forward_poly(
    model: &GcnModel,
    graph: &Graph,
    norm_adj: ArrayView2<f64>,
    bounds: &[IntervalElement],
    relaxation: ReluRelaxation,
) -> Result<Vec<PolyLayer>> {
    check_bounds(model, graph, bounds)?;
    let last = model.num_layers() - 1;
    let mut current = poly_input_abstraction(graph);
    let mut layers = Vec::with_capacity(model.num_layers());
    for (l, layer) in model.layers().iter().enumerate() {
        let pre = (0..graph.num_nodes())
            .map(|i| {
                let convolved = gc_poly(&current.per_node, norm_adj.row(i))?;
                linear_poly(&convolved, &layer.weight, &layer.bias)
            })
            .collect::<Result<Vec<_>>>()?;
        let post = if l == last {
            pre.clone()
        } else {
            pre.iter()
                .enumerate()
                .map(|(i, e)| {
                    relu_poly(
                        e,
                        bounds[l].lower.row(i),
                        bounds[l].upper.row(i),
                        relaxation,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        };
        current = PolyElement {
            per_node: post.clone(),
        };
        layers.push(PolyLayer {
            pre_activation: PolyElement { per_node: pre },
            post_activation: PolyElement { per_node: post },
        });
    }
    Ok(layers)
}

/// Coefficients of the tracked output rows on one node's lower and upper
/// forms at the current layer.
struct Sides {
    on_lower: Array2<f64>,
    on_upper: Array2<f64>,
}

/// Output-layer bounds of `node` over the input variables of its receptive
/// field, computed by walking the layers backwards.
///
/// Rows `0..c` track the lower bound of each score and rows `c..2c` the upper
/// bound. Each row is a combination of the current layer's lower and upper
/// forms; stepping back through an abstract operator applies the transpose
/// of the linear map that operator applies going forwards.
pub fn back_substitute(
    model: &GcnModel,
    graph: &Graph,
    norm_adj: ArrayView2<f64>,
    node: usize,
    bounds: &[IntervalElement],
    relaxation: ReluRelaxation,
) -> Result<PolyNodeElement> {
    check_bounds(model, graph, bounds)?;
    if node >= graph.num_nodes() {
        return Err(Error::InvalidArgument(format!("node {node} out of range")));
    }
    let labels = model.num_labels();
    let rows = 2 * labels;
    let mut constant = Array1::<f64>::zeros(rows);

    let mut start_lower = Array2::zeros((rows, labels));
    let mut start_upper = Array2::zeros((rows, labels));
    start_lower
        .slice_mut(s![..labels, ..])
        .assign(&Array2::eye(labels));
    start_upper
        .slice_mut(s![labels.., ..])
        .assign(&Array2::eye(labels));
    let mut frontier: BTreeMap<usize, Sides> = BTreeMap::new();
    frontier.insert(
        node,
        Sides {
            on_lower: start_lower,
            on_upper: start_upper,
        },
    );

    for (l, layer) in model.layers().iter().enumerate().rev() {
        // pre-activation of layer l -> graph-convolved input of layer l
        let pos_t = layer.weight.t().mapv(|w| w.max(0.0));
        let neg_t = layer.weight.t().mapv(|w| w.min(0.0));
        let width_in = layer.input_width();
        let mut convolved: BTreeMap<usize, Sides> = BTreeMap::new();
        for (k, sides) in frontier {
            constant += &(&sides.on_lower + &sides.on_upper).dot(&layer.bias);
            convolved.insert(
                k,
                Sides {
                    on_lower: sides.on_lower.dot(&pos_t) + sides.on_upper.dot(&neg_t),
                    on_upper: sides.on_upper.dot(&pos_t) + sides.on_lower.dot(&neg_t),
                },
            );
        }

        // graph convolution -> previous layer's activations of the neighbors
        let mut gathered: BTreeMap<usize, Sides> = BTreeMap::new();
        for (k, sides) in &convolved {
            for (q, &w) in norm_adj.row(*k).indexed_iter() {
                if w <= 0.0 {
                    continue;
                }
                let entry = gathered.entry(q).or_insert_with(|| Sides {
                    on_lower: Array2::zeros((rows, width_in)),
                    on_upper: Array2::zeros((rows, width_in)),
                });
                entry.on_lower.scaled_add(w, &sides.on_lower);
                entry.on_upper.scaled_add(w, &sides.on_upper);
            }
        }

        if l == 0 {
            frontier = gathered;
            break;
        }

        // activation of layer l-1 -> its pre-activation, through the relaxation
        let prev = &bounds[l - 1];
        for (q, sides) in gathered.iter_mut() {
            for j in 0..width_in {
                let (a, s, t) = relu_scalings(prev.lower[[*q, j]], prev.upper[[*q, j]], relaxation);
                constant.scaled_add(t, &sides.on_upper.column(j));
                sides.on_lower.column_mut(j).mapv_inplace(|v| a * v);
                sides.on_upper.column_mut(j).mapv_inplace(|v| s * v);
            }
        }
        frontier = gathered;
    }

    // at the input both forms are the variable itself
    let m0 = graph.num_features();
    let vars: Vec<Var> = frontier
        .keys()
        .flat_map(|&q| (0..m0).map(move |f| (q, f)))
        .collect();
    let mut coef = Array2::zeros((rows, vars.len()));
    for (block, sides) in frontier.values().enumerate() {
        coef.slice_mut(s![.., block * m0..(block + 1) * m0])
            .assign(&(&sides.on_lower + &sides.on_upper));
    }
    PolyNodeElement::new(
        vars,
        coef.slice(s![..labels, ..]).to_owned(),
        constant.slice(s![..labels]).to_owned(),
        coef.slice(s![labels.., ..]).to_owned(),
        constant.slice(s![labels..]).to_owned(),
    )
}

/// Drops variables whose coefficients are zero in every row.
pub fn prune_zero_columns(elem: &PolyNodeElement) -> PolyNodeElement {
    let keep: Vec<usize> = (0..elem.vars.len())
        .filter(|&c| {
            elem.lower_coef.column(c).iter().any(|&v| v != 0.0)
                || elem.upper_coef.column(c).iter().any(|&v| v != 0.0)
        })
        .collect();
    PolyNodeElement {
        vars: keep.iter().map(|&c| elem.vars[c]).collect(),
        lower_coef: elem.lower_coef.select(Axis(1), &keep),
        lower_const: elem.lower_const.clone(),
        upper_coef: elem.upper_coef.select(Axis(1), &keep),
        upper_const: elem.upper_const.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::worked_example;
    use crate::graph_model::{forward_layers, normalize_adjacency};
    use crate::interval::{interval_layer_bounds, InputVariant};
    use crate::perturbation::{apply_flips, enumerate_perturbations, PerturbationBudget};
    use crate::synthetic::{random_instance, InstanceShape};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_var(lower: (f64, f64), upper: (f64, f64)) -> PolyNodeElement {
        PolyNodeElement::new(
            vec![(0, 0)],
            array![[lower.0]],
            array![lower.1],
            array![[upper.0]],
            array![upper.1],
        )
        .unwrap()
    }

    #[test]
    fn input_abstraction_is_identity() {
        let g = Graph::from_edges(1, &[], array![[1u8, 0]]).unwrap();
        let a = poly_input_abstraction(&g);
        let e = &a.per_node[0];
        assert_eq!(e.vars, vec![(0, 0), (0, 1)]);
        assert_eq!(e.lower_coef, Array2::<f64>::eye(2));
        assert_eq!(e.upper_coef, Array2::<f64>::eye(2));
        assert_eq!(e.lower_const, array![0.0, 0.0]);
        let (lo, up) = e.evaluate(g.features_f64().view());
        assert_eq!(lo, array![1.0, 0.0]);
        assert_eq!(up, array![1.0, 0.0]);

        let (g3, _) = worked_example();
        let a = poly_input_abstraction(&g3);
        assert_eq!(a.per_node.len(), 2);
        assert_eq!(a.per_node[1].vars, vec![(1, 0), (1, 1), (1, 2), (1, 3)]);
    }

    #[test]
    fn linear_keeps_exact_elements_exact() {
        let e =
            PolyNodeElement::exact(vec![(0, 0), (0, 1)], array![[1.0, 1.0]], array![0.0]).unwrap();
        let out = linear_poly(&e, &array![[2.0]], &array![1.0]).unwrap();
        assert_eq!(out.lower_coef, array![[2.0, 2.0]]);
        assert_eq!(out.lower_const, array![1.0]);
        assert!(out.is_exact(0.0));
    }

    #[test]
    fn linear_swaps_bounds_under_negative_weight() {
        // x0 ≤ h ≤ x0 + 1
        let e = single_var((1.0, 0.0), (1.0, 1.0));
        let out = linear_poly(&e, &array![[-1.0]], &array![0.0]).unwrap();
        assert_eq!((out.lower_coef[[0, 0]], out.lower_const[0]), (-1.0, -1.0));
        assert_eq!((out.upper_coef[[0, 0]], out.upper_const[0]), (-1.0, 0.0));
        // sampling x0 ∈ {0, 1} and every h in [x0, x0 + 1]
        for x0 in [0.0, 1.0] {
            for h in [x0, x0 + 0.5, x0 + 1.0] {
                let v = -h;
                assert!(-x0 - 1.0 <= v && v <= -x0);
            }
        }
    }

    #[test]
    fn linear_with_zero_weight_is_constant() {
        let e = single_var((1.0, 0.0), (1.0, 1.0));
        let out = linear_poly(&e, &array![[0.0, 0.0]], &array![0.25, -1.0]).unwrap();
        assert!(out
            .lower_coef
            .iter()
            .chain(out.upper_coef.iter())
            .all(|&v| v == 0.0));
        assert_eq!(out.lower_const, array![0.25, -1.0]);
        assert_eq!(out.upper_const, array![0.25, -1.0]);
        assert!(linear_poly(&e, &array![[1.0], [1.0]], &array![0.0]).is_err());
    }

    #[test]
    fn gc_worked_example() {
        let (g, _) = worked_example();
        let a = normalize_adjacency(&g);
        let input = poly_input_abstraction(&g);
        let u = gc_poly(&input.per_node, a.row(0)).unwrap();
        assert_eq!(u.vars.len(), 8);
        assert!(u.is_exact(0.0));
        for j in 0..4 {
            for (c, &(k, f)) in u.vars.iter().enumerate() {
                let expected = if f == j && k < 2 { 0.5 } else { 0.0 };
                assert_eq!(u.lower_coef[[j, c]], expected);
            }
        }
    }

    #[test]
    fn gc_isolated_node_unchanged() {
        let g = Graph::from_edges(2, &[], array![[1u8, 0], [0, 1]]).unwrap();
        let a = normalize_adjacency(&g);
        let input = poly_input_abstraction(&g);
        assert_eq!(
            gc_poly(&input.per_node, a.row(1)).unwrap(),
            input.per_node[1]
        );
        assert!(gc_poly(&input.per_node, array![1.0, -0.5].view()).is_err());
    }

    #[test]
    fn gc_merges_shared_variables() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vars_a = vec![(0, 0), (1, 0), (2, 1)];
        let vars_b = vec![(1, 0), (2, 1), (3, 0)];
        let mk = |rng: &mut ChaCha8Rng, vars: Vec<Var>| {
            let lo = Array2::from_shape_fn((2, vars.len()), |_| rng.gen_range(-1.0..1.0));
            let up = &lo + 0.5;
            PolyNodeElement::new(vars, lo, array![0.1, -0.2], up, array![0.3, 0.4]).unwrap()
        };
        let a = mk(&mut rng, vars_a);
        let b = mk(&mut rng, vars_b);
        let merged = gc_poly(&[a.clone(), b.clone()], array![0.3, 0.7].view()).unwrap();
        assert_eq!(merged.vars, vec![(0, 0), (1, 0), (2, 1), (3, 0)]);
        for _ in 0..50 {
            let x = Array2::from_shape_fn((4, 2), |_| f64::from(rng.gen_range(0..2u8)));
            let (la, ua) = a.evaluate(x.view());
            let (lb, ub) = b.evaluate(x.view());
            let (lm, um) = merged.evaluate(x.view());
            let lu = &la * 0.3 + &lb * 0.7;
            let uu = &ua * 0.3 + &ub * 0.7;
            assert!((&lm - &lu).iter().all(|d| d.abs() < 1e-12));
            assert!((&um - &uu).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn relu_cases() {
        let e = single_var((1.0, 0.0), (1.0, 1.0));
        let r = ReluRelaxation::default();

        // mixed, up ≥ |lo|: chord with s = t = 2/3, lower kept
        let out = relu_poly(&e, array![-1.0].view(), array![2.0].view(), r).unwrap();
        assert!((out.upper_coef[[0, 0]] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out.upper_const[0] - (2.0 / 3.0 + 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(out.lower_coef, e.lower_coef);
        assert_eq!(out.lower_const, e.lower_const);

        let out = relu_poly(&e, array![1.0].view(), array![3.0].view(), r).unwrap();
        assert_eq!(out, e);

        let out = relu_poly(&e, array![-3.0].view(), array![-1.0].view(), r).unwrap();
        assert!(out
            .lower_coef
            .iter()
            .chain(out.upper_coef.iter())
            .all(|&v| v == 0.0));
        assert_eq!((out.lower_const[0], out.upper_const[0]), (0.0, 0.0));

        // mixed, up < |lo|: lower zeroed, s = 1/3, t = 2/3
        let out = relu_poly(&e, array![-2.0].view(), array![1.0].view(), r).unwrap();
        assert_eq!((out.lower_coef[[0, 0]], out.lower_const[0]), (0.0, 0.0));
        assert!((out.upper_coef[[0, 0]] - 1.0 / 3.0).abs() < 1e-15);
        assert!((out.upper_const[0] - (1.0 / 3.0 + 2.0 / 3.0)).abs() < 1e-15);

        let slope = ReluRelaxation::with_lower_slope(0.25).unwrap();
        let out = relu_poly(&e, array![-2.0].view(), array![1.0].view(), slope).unwrap();
        assert_eq!(out.lower_coef[[0, 0]], 0.25);
        assert!(ReluRelaxation::with_lower_slope(1.5).is_err());
    }

    #[test]
    fn relu_boundaries_are_closed() {
        assert_eq!(relu_case(0.0, 2.0), ReluCase::Active);
        assert_eq!(relu_case(-2.0, 0.0), ReluCase::Inactive);
        assert_eq!(relu_case(-1.0, 1.0), ReluCase::MixedKeepLower);
        assert_eq!(min_area_lower_slope(-1.0, 1.0), 1.0);
    }

    /// Trapezoid area of the relaxation with lower line `λx`.
    fn relaxation_area(lo: f64, up: f64, lambda: f64) -> f64 {
        0.5 * (-lambda * lo + up - lambda * up) * (up - lo)
    }

    #[test]
    fn min_area_choice_beats_lambda_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let lo = -rng.gen_range(1e-6..5.0);
            let up = rng.gen_range(1e-6..5.0);
            let chosen = relaxation_area(lo, up, min_area_lower_slope(lo, up));
            for step in 0..=20 {
                let lambda = step as f64 * 0.05;
                assert!(chosen <= relaxation_area(lo, up, lambda) + 1e-9);
            }
        }
    }

    #[test]
    fn worked_example_back_substitution() {
        let (g, m) = worked_example();
        let a = normalize_adjacency(&g);
        let budget = PerturbationBudget::new(1, 1);
        let bounds = interval_layer_bounds(&m, &g, a.view(), &budget, InputVariant::TopK).unwrap();
        let out = back_substitute(&m, &g, a.view(), 0, &bounds, ReluRelaxation::default()).unwrap();
        assert!(out.is_exact(0.0));
        // o1 - o0 = 0.5 (u_2 + v_2)
        let diff = linear_poly(&out, &array![[-1.0], [1.0]], &array![0.0]).unwrap();
        let pruned = prune_zero_columns(&diff);
        assert_eq!(pruned.vars, vec![(0, 2), (1, 2)]);
        assert_eq!(pruned.lower_coef, array![[0.5, 0.5]]);
        assert_eq!(pruned.lower_const, array![0.0]);
    }

    #[test]
    fn single_layer_back_substitution_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = InstanceShape {
            num_layers: 1,
            ..InstanceShape::default()
        };
        for _ in 0..10 {
            let (g, m) = random_instance(&mut rng, &shape);
            let a = normalize_adjacency(&g);
            let fwd = forward_poly(&m, &g, a.view(), &[], ReluRelaxation::default()).unwrap();
            for i in 0..g.num_nodes() {
                let back =
                    back_substitute(&m, &g, a.view(), i, &[], ReluRelaxation::default()).unwrap();
                let d = back
                    .max_abs_difference(&fwd[0].post_activation.per_node[i])
                    .unwrap();
                assert!(d < 1e-12);
            }
        }
    }

    #[test]
    fn back_substitution_matches_forward_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for layers in [2, 3] {
            let shape = InstanceShape {
                max_nodes: 5,
                num_layers: layers,
                ..InstanceShape::default()
            };
            for _ in 0..20 {
                let (g, m) = random_instance(&mut rng, &shape);
                let a = normalize_adjacency(&g);
                let budget = PerturbationBudget::new(1, 2);
                let bounds =
                    interval_layer_bounds(&m, &g, a.view(), &budget, InputVariant::TopK).unwrap();
                let relax = ReluRelaxation::with_lower_slope(0.1).unwrap();
                let fwd = forward_poly(&m, &g, a.view(), &bounds, relax).unwrap();
                let out = &fwd.last().unwrap().post_activation;
                for i in 0..g.num_nodes() {
                    let back = back_substitute(&m, &g, a.view(), i, &bounds, relax).unwrap();
                    let d = back
                        .max_abs_difference(&out.per_node[i])
                        .expect("same variables");
                    assert!(d < 1e-9, "node {i}: {d}");
                }
            }
        }
    }

    #[test]
    fn symbolic_bounds_enclose_every_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let shape = InstanceShape::default();
        for _ in 0..40 {
            let (g, m) = random_instance(&mut rng, &shape);
            let a = normalize_adjacency(&g);
            let budget = PerturbationBudget::new(2, 2);
            let bounds =
                interval_layer_bounds(&m, &g, a.view(), &budget, InputVariant::TopK).unwrap();
            let fwd = forward_poly(&m, &g, a.view(), &bounds, ReluRelaxation::default()).unwrap();
            for flips in enumerate_perturbations(g.features(), &budget, 1_000_000).unwrap() {
                let x = apply_flips(g.features(), &flips).unwrap().mapv(f64::from);
                let concrete = forward_layers(&m, a.view(), x.view()).unwrap();
                for (layer, (pre, post)) in fwd.iter().zip(&concrete) {
                    for (elem_set, values) in
                        [(&layer.pre_activation, pre), (&layer.post_activation, post)]
                    {
                        for (i, e) in elem_set.per_node.iter().enumerate() {
                            let (lo, up) = e.evaluate(x.view());
                            for j in 0..e.width() {
                                assert!(lo[j] <= values[[i, j]] + 1e-9);
                                assert!(values[[i, j]] <= up[j] + 1e-9);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn exact_without_mixed_relus() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let shape = InstanceShape::default();
        let mut checked = 0;
        for _ in 0..200 {
            let (g, m) = random_instance(&mut rng, &shape);
            let a = normalize_adjacency(&g);
            let budget = PerturbationBudget::new(1, 1);
            let bounds =
                interval_layer_bounds(&m, &g, a.view(), &budget, InputVariant::TopK).unwrap();
            let stable = bounds[..m.num_layers() - 1].iter().all(|b| {
                b.lower.iter().zip(&b.upper).all(|(&lo, &up)| {
                    matches!(relu_case(lo, up), ReluCase::Active | ReluCase::Inactive)
                })
            });
            if !stable {
                continue;
            }
            checked += 1;
            let fwd = forward_poly(&m, &g, a.view(), &bounds, ReluRelaxation::default()).unwrap();
            for e in &fwd.last().unwrap().post_activation.per_node {
                assert!(e.is_exact(1e-12));
            }
        }
        assert!(checked > 10, "only {checked} stable instances");
    }
}
