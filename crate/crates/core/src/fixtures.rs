//! Small hand-built instances shared by tests and documentation.

use ndarray::array;

use crate::graph_model::{GcnModel, Graph, Layer};

/// Two nodes `u = 0`, `v = 1` joined by an edge, with features
/// `u = [1, 0, 1, 1]` and `v = [1, 0, 1, 0]`.
///
/// The first layer maps feature 2 to hidden unit 0 and features 0 and 3 to
/// hidden unit 1; the output layer computes `o0 = h1` and `o1 = h0 + h1`.
/// Node `u` scores `(1.5, 2.5)`. With one flip allowed, interval bounds give a
/// margin of -0.5 while polyhedra bounds give the exact margin 0.5.
pub fn worked_example() -> (Graph, GcnModel) {
    let graph = Graph::from_edges(2, &[(0, 1)], array![[1u8, 0, 1, 1], [1, 0, 1, 0]])
        .expect("valid fixture graph");
    let hidden = Layer::new(
        array![[0.0, 1.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        array![0.0, 0.0],
    )
    .expect("valid fixture layer");
    let output =
        Layer::new(array![[0.0, 1.0], [1.0, 1.0]], array![0.0, 0.0]).expect("valid fixture layer");
    let model = GcnModel::new(vec![hidden, output]).expect("valid fixture model");
    (graph, model)
}
