//! Seeded random graphs and models for tests, benchmarks and training demos.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::graph_model::{GcnModel, Graph, Layer};

/// Size ranges for [`random_instance`].
#[derive(Debug, Clone)]
pub struct InstanceShape {
    pub max_nodes: usize,
    pub max_features: usize,
    pub max_hidden: usize,
    pub num_layers: usize,
    pub max_labels: usize,
    pub edge_probability: f64,
    pub feature_probability: f64,
}

impl Default for InstanceShape {
    fn default() -> Self {
        Self {
            max_nodes: 4,
            max_features: 3,
            max_hidden: 3,
            num_layers: 2,
            max_labels: 3,
            edge_probability: 0.5,
            feature_probability: 0.5,
        }
    }
}

pub fn random_graph<R: Rng>(
    rng: &mut R,
    num_nodes: usize,
    num_features: usize,
    edge_probability: f64,
    feature_probability: f64,
) -> Graph {
    let mut edges = Vec::new();
    for i in 0..num_nodes {
        for j in i + 1..num_nodes {
            if rng.gen_bool(edge_probability) {
                edges.push((i, j));
            }
        }
    }
    let features = Array2::from_shape_fn((num_nodes, num_features), |_| {
        u8::from(rng.gen_bool(feature_probability))
    });
    Graph::from_edges(num_nodes, &edges, features).expect("generated graph is valid")
}

/// A model with the given layer widths (`widths[0]` is the input width),
/// weights uniform in `[-1, 1]` and biases uniform in `[-0.5, 0.5]`.
pub fn random_model<R: Rng>(rng: &mut R, widths: &[usize]) -> GcnModel {
    let layers = widths
        .windows(2)
        .map(|w| {
            Layer::new(
                Array2::from_shape_fn((w[0], w[1]), |_| rng.gen_range(-1.0..=1.0)),
                Array1::from_shape_fn(w[1], |_| rng.gen_range(-0.5..=0.5)),
            )
            .expect("generated layer is valid")
        })
        .collect();
    GcnModel::new(layers).expect("generated model is valid")
}

pub fn random_instance<R: Rng>(rng: &mut R, shape: &InstanceShape) -> (Graph, GcnModel) {
    let n = rng.gen_range(2..=shape.max_nodes.max(2));
    let m0 = rng.gen_range(2..=shape.max_features.max(2));
    let graph = random_graph(
        rng,
        n,
        m0,
        shape.edge_probability,
        shape.feature_probability,
    );
    let mut widths = vec![m0];
    for _ in 1..shape.num_layers {
        widths.push(rng.gen_range(1..=shape.max_hidden.max(1)));
    }
    widths.push(rng.gen_range(2..=shape.max_labels.max(2)));
    let model = random_model(rng, &widths);
    (graph, model)
}

/// A homophilous two-community graph whose node labels follow the community,
/// with features drawn from per-community prototypes.
///
/// Returns the graph and the ground-truth labels.
pub fn community_graph<R: Rng>(
    rng: &mut R,
    num_nodes: usize,
    num_features: usize,
    num_labels: usize,
    noise: f64,
) -> (Graph, Vec<usize>) {
    let labels: Vec<usize> = (0..num_nodes).map(|i| i % num_labels).collect();
    let mut edges = Vec::new();
    for i in 0..num_nodes {
        for j in i + 1..num_nodes {
            let p = if labels[i] == labels[j] { 0.3 } else { 0.04 };
            if rng.gen_bool(p) {
                edges.push((i, j));
            }
        }
    }
    let features = Array2::from_shape_fn((num_nodes, num_features), |(i, f)| {
        let on = f % num_labels == labels[i];
        u8::from(on ^ rng.gen_bool(noise))
    });
    let graph = Graph::from_edges(num_nodes, &edges, features).expect("generated graph is valid");
    (graph, labels)
}
