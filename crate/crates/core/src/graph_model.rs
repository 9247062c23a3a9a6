//! Attributed graphs, GCN classifiers and the concrete forward pass.
//!
//! A GCN layer computes `Lin(GC(H)) = Ã·H·W + b` followed by a ReLU. The
//! final layer is left linear so that the output scores keep their sign.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// An undirected attributed graph with binary node features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    adjacency: Array2<u8>,
    features: Array2<u8>,
}

impl Graph {
    /// Builds a graph, checking that the adjacency matrix is square, binary
    /// and symmetric and that the feature matrix is binary with one row per
    /// node.
    pub fn new(adjacency: Array2<u8>, features: Array2<u8>) -> Result<Self> {
        let n = adjacency.nrows();
        if n == 0 {
            return Err(Error::InvalidGraph(
                "graph must have at least one node".into(),
            ));
        }
        if adjacency.ncols() != n {
            return Err(Error::dimension("adjacency columns", n, adjacency.ncols()));
        }
        if features.nrows() != n {
            return Err(Error::dimension("feature rows", n, features.nrows()));
        }
        for ((i, j), &a) in adjacency.indexed_iter() {
            if a > 1 {
                return Err(Error::InvalidGraph(format!(
                    "adjacency[{i}][{j}] = {a} is not binary"
                )));
            }
            if a != adjacency[[j, i]] {
                return Err(Error::InvalidGraph(format!(
                    "adjacency is not symmetric at ({i}, {j})"
                )));
            }
        }
        if let Some(((i, j), v)) = features.indexed_iter().find(|(_, &v)| v > 1) {
            return Err(Error::InvalidGraph(format!(
                "features[{i}][{j}] = {v} is not binary"
            )));
        }
        Ok(Self {
            adjacency,
            features,
        })
    }

    /// Builds a graph from an undirected edge list. Edges are symmetrized and
    /// duplicates collapse.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Array2<u8>,
    ) -> Result<Self> {
        let mut adjacency = Array2::zeros((num_nodes, num_nodes));
        for &(a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) references a node outside 0..{num_nodes}"
                )));
            }
            adjacency[[a, b]] = 1;
            adjacency[[b, a]] = 1;
        }
        Self::new(adjacency, features)
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn adjacency(&self) -> &Array2<u8> {
        &self.adjacency
    }

    pub fn features(&self) -> &Array2<u8> {
        &self.features
    }

    /// Features as reals, the input `H_0` of the forward pass.
    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    /// Undirected edges `(i, j)` with `i <= j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .indexed_iter()
            .filter(|&((i, j), &a)| a == 1 && i <= j)
            .map(|((i, j), _)| (i, j))
            .collect()
    }

    /// Returns a copy of the graph with a different feature matrix.
    pub fn with_features(&self, features: Array2<u8>) -> Result<Self> {
        if features.dim() != self.features.dim() {
            return Err(Error::dimension(
                "replacement feature matrix",
                self.features.len(),
                features.len(),
            ));
        }
        Self::new(self.adjacency.clone(), features)
    }
}

/// One GCN layer: weight `m_l × m_{l+1}` and bias `m_{l+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.ncols() != bias.len() {
            return Err(Error::dimension("layer bias", weight.ncols(), bias.len()));
        }
        Ok(Self { weight, bias })
    }

    pub fn input_width(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.ncols()
    }
}

/// A GCN classifier as an ordered list of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    layers: Vec<Layer>,
}

impl GcnModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidModel("model needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(Error::InvalidModel(format!(
                    "layer {l} outputs {} features but layer {} expects {}",
                    pair[0].output_width(),
                    l + 1,
                    pair[1].input_width()
                )));
            }
        }
        if layers.last().map_or(0, Layer::output_width) == 0 {
            return Err(Error::InvalidModel("output layer has no labels".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn num_labels(&self) -> usize {
        self.layers[self.layers.len() - 1].output_width()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// All weights then biases, layer by layer, in row-major order.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for layer in &self.layers {
            out.extend(layer.weight.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    /// Inverse of [`GcnModel::parameters`].
    pub fn with_parameters(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.num_parameters() {
            return Err(Error::dimension(
                "parameter vector",
                self.num_parameters(),
                params.len(),
            ));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (rows, cols) = layer.weight.dim();
            let weight =
                Array2::from_shape_vec((rows, cols), params[offset..offset + rows * cols].to_vec())
                    .expect("shape matches slice length");
            offset += rows * cols;
            let bias = Array1::from(params[offset..offset + cols].to_vec());
            offset += cols;
            layers.push(Layer { weight, bias });
        }
        Ok(Self { layers })
    }

    pub(crate) fn check_input(&self, graph: &Graph) -> Result<()> {
        if graph.num_features() != self.input_width() {
            return Err(Error::dimension(
                "model input width vs graph features",
                self.input_width(),
                graph.num_features(),
            ));
        }
        Ok(())
    }
}

/// Output scores and the labels selected from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if i == 0 || v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

/// `Ã = D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(graph: &Graph) -> Array2<f64> {
    let n = graph.num_nodes();
    let mut with_loops = graph.adjacency().mapv(f64::from);
    for i in 0..n {
        with_loops[[i, i]] += 1.0;
    }
    let degree = with_loops.sum_axis(Axis(1));
    // 1/sqrt(d_i d_j) keeps perfect squares exact, e.g. 0.5 for two degree-2 nodes.
    Array2::from_shape_fn((n, n), |(i, j)| {
        let a = with_loops[[i, j]];
        if a == 0.0 {
            0.0
        } else {
            a / (degree[i] * degree[j]).sqrt()
        }
    })
}

/// Concrete values of every layer: `(pre_activation, post_activation)` per
/// layer. The last layer's post-activation equals its pre-activation.
pub fn forward_layers(
    model: &GcnModel,
    norm_adj: ArrayView2<f64>,
    features: ArrayView2<f64>,
) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
    let n = norm_adj.nrows();
    if norm_adj.ncols() != n {
        return Err(Error::dimension(
            "normalized adjacency columns",
            n,
            norm_adj.ncols(),
        ));
    }
    if features.nrows() != n {
        return Err(Error::dimension("feature rows", n, features.nrows()));
    }
    if features.ncols() != model.input_width() {
        return Err(Error::dimension(
            "model input width vs features",
            model.input_width(),
            features.ncols(),
        ));
    }
    let last = model.num_layers() - 1;
    let mut out = Vec::with_capacity(model.num_layers());
    let mut h = features.to_owned();
    for (l, layer) in model.layers().iter().enumerate() {
        let pre = norm_adj.dot(&h).dot(&layer.weight) + &layer.bias;
        let post = if l == last {
            pre.clone()
        } else {
            pre.mapv(|v| v.max(0.0))
        };
        h = post.clone();
        out.push((pre, post));
    }
    Ok(out)
}

/// Score matrix `H_z` of the classifier.
pub fn forward(
    model: &GcnModel,
    norm_adj: ArrayView2<f64>,
    features: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let n = norm_adj.nrows();
    if norm_adj.ncols() != n {
        return Err(Error::dimension(
            "normalized adjacency columns",
            n,
            norm_adj.ncols(),
        ));
    }
    if features.nrows() != n {
        return Err(Error::dimension("feature rows", n, features.nrows()));
    }
    if features.ncols() != model.input_width() {
        return Err(Error::dimension(
            "model input width vs features",
            model.input_width(),
            features.ncols(),
        ));
    }
    let last = model.num_layers() - 1;
    let mut h = features.to_owned();
    for (l, layer) in model.layers().iter().enumerate() {
        h = norm_adj.dot(&h).dot(&layer.weight) + &layer.bias;
        if l != last {
            h.mapv_inplace(|v| v.max(0.0));
        }
    }
    Ok(h)
}

/// Row-wise argmax of [`forward`] with lowest-index tie breaking.
pub fn labels_from_scores(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| argmax(row.iter().copied()))
        .collect()
}

pub fn predict(model: &GcnModel, graph: &Graph) -> Result<Prediction> {
    model.check_input(graph)?;
    let norm_adj = normalize_adjacency(graph);
    let scores = forward(model, norm_adj.view(), graph.features_f64().view())?;
    let labels = labels_from_scores(&scores);
    Ok(Prediction { scores, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::worked_example;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_single_edge() {
        let g = Graph::from_edges(2, &[(0, 1)], Array2::zeros((2, 1))).unwrap();
        assert_eq!(normalize_adjacency(&g), array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn normalize_isolated_node() {
        let g = Graph::from_edges(1, &[], Array2::zeros((1, 3))).unwrap();
        assert_eq!(normalize_adjacency(&g), array![[1.0]]);
    }

    #[test]
    fn normalize_path() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)], Array2::zeros((3, 1))).unwrap();
        let a = normalize_adjacency(&g);
        assert!((a[[0, 1]] - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((a[[1, 1]] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a[[0, 2]], 0.0);
        // (A+I)_{00} / sqrt(d_0 d_0) = 1/2
        assert_eq!(a[[0, 0]], 0.5);
    }

    #[test]
    fn normalize_symmetric_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(1..8);
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.gen_bool(0.4) {
                        edges.push((i, j));
                    }
                }
            }
            let g = Graph::from_edges(n, &edges, Array2::zeros((n, 1))).unwrap();
            let a = normalize_adjacency(&g);
            for i in 0..n {
                for j in 0..n {
                    assert!((a[[i, j]] - a[[j, i]]).abs() < 1e-15);
                    assert!((0.0..=1.0).contains(&a[[i, j]]));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_graphs() {
        let asym = array![[0u8, 1], [0, 0]];
        assert!(Graph::new(asym, Array2::zeros((2, 1))).is_err());
        let nonbinary = array![[1u8, 2]];
        assert!(Graph::new(Array2::zeros((1, 1)), nonbinary).is_err());
        assert!(Graph::from_edges(2, &[(0, 2)], Array2::zeros((2, 1))).is_err());
    }

    #[test]
    fn rejects_broken_dimension_chain() {
        let l0 = Layer::new(Array2::zeros((3, 2)), Array1::zeros(2)).unwrap();
        let l1 = Layer::new(Array2::zeros((4, 2)), Array1::zeros(2)).unwrap();
        assert!(GcnModel::new(vec![l0, l1]).is_err());
        assert!(Layer::new(Array2::zeros((3, 2)), Array1::zeros(3)).is_err());
    }

    #[test]
    fn worked_example_scores() {
        let (graph, model) = worked_example();
        let p = predict(&model, &graph).unwrap();
        assert_eq!(p.scores.row(0).to_vec(), vec![1.5, 2.5]);
        assert_eq!(p.labels[0], 1);
    }

    #[test]
    fn zero_features_zero_scores() {
        let (graph, model) = worked_example();
        let g = graph.with_features(Array2::zeros((2, 4))).unwrap();
        let p = predict(&model, &g).unwrap();
        assert!(p.scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_node_identity() {
        let g = Graph::from_edges(1, &[], array![[1u8]]).unwrap();
        let m = GcnModel::new(vec![Layer::new(array![[1.0]], array![0.0]).unwrap()]).unwrap();
        assert_eq!(predict(&m, &g).unwrap().scores, array![[1.0]]);
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax([2.0, 2.0]), 0);
        let scores = array![[3.0, 1.0], [0.0, 5.0]];
        assert_eq!(labels_from_scores(&scores), vec![0, 1]);
    }

    #[test]
    fn forward_rejects_width_mismatch() {
        let (graph, model) = worked_example();
        let a = normalize_adjacency(&graph);
        let bad = Array2::<f64>::zeros((2, 3));
        assert!(matches!(
            forward(&model, a.view(), bad.view()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn forward_is_linear_without_active_relu() {
        // Positive weights, biases and features keep every pre-activation positive.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4;
        let g = Graph::from_edges(
            n,
            &[(0, 1), (1, 2), (2, 3)],
            Array2::from_shape_fn((n, 3), |_| rng.gen_range(0..2)),
        )
        .unwrap();
        let w0 = Array2::from_shape_fn((3, 2), |_| rng.gen_range(0.1..1.0));
        let w1 = Array2::from_shape_fn((2, 2), |_| rng.gen_range(-1.0..1.0));
        let b0 = Array1::from_shape_fn(2, |_| rng.gen_range(0.1..1.0));
        let b1 = Array1::from_shape_fn(2, |_| rng.gen_range(-1.0..1.0));
        let m = GcnModel::new(vec![
            Layer::new(w0.clone(), b0.clone()).unwrap(),
            Layer::new(w1.clone(), b1.clone()).unwrap(),
        ])
        .unwrap();
        let a = normalize_adjacency(&g);
        let x = g.features_f64();
        let expected = a.dot(&(a.dot(&x).dot(&w0) + &b0)).dot(&w1) + &b1;
        let got = forward(&m, a.view(), x.view()).unwrap();
        assert!((got - expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let n = 4;
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.gen_bool(0.5) {
                        edges.push((i, j));
                    }
                }
            }
            let x = Array2::from_shape_fn((n, 3), |_| rng.gen_range(0..2u8));
            let g = Graph::from_edges(n, &edges, x.clone()).unwrap();
            let m = GcnModel::new(vec![
                Layer::new(
                    Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0)),
                    Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5)),
                )
                .unwrap(),
                Layer::new(
                    Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0)),
                    Array1::from_shape_fn(2, |_| rng.gen_range(-0.5..0.5)),
                )
                .unwrap(),
            ])
            .unwrap();
            let perm = [2usize, 0, 3, 1];
            let pedges: Vec<_> = edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
            let mut px = Array2::zeros((n, 3));
            for (i, &target) in perm.iter().enumerate() {
                px.row_mut(target).assign(&x.row(i));
            }
            let pg = Graph::from_edges(n, &pedges, px).unwrap();
            let s = predict(&m, &g).unwrap().scores;
            let ps = predict(&m, &pg).unwrap().scores;
            for i in 0..n {
                for c in 0..2 {
                    assert!((s[[i, c]] - ps[[perm[i], c]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn parameter_round_trip() {
        let (_, model) = worked_example();
        let p = model.parameters();
        assert_eq!(p.len(), model.num_parameters());
        assert_eq!(model.with_parameters(&p).unwrap(), model);
    }
}
