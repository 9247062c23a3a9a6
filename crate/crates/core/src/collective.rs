//! Maximum robust global limit per node.
//!
//! The global budget is raised one flip at a time while the sound certifier
//! still certifies the node; the limit is the last budget that certified.

use rayon::prelude::*;

use crate::certification::{Certifier, Method};
use crate::error::Result;
use crate::graph_model::{GcnModel, Graph};
use crate::perturbation::{FlipMode, PerturbationBudget};

pub const DEFAULT_SEARCH_CAP: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RobustLimit {
    pub node: usize,
    pub limit: usize,
    /// Not certified even without perturbation; `limit` is then `0`.
    pub never_certified: bool,
    /// Still certified at the search cap; the true limit is at least `limit`.
    pub capped: bool,
}

/// Global budget beyond which the perturbation space stops growing.
fn saturation_budget(graph: &Graph, local: usize, mode: FlipMode) -> usize {
    graph
        .features()
        .rows()
        .into_iter()
        .map(|row| row.iter().filter(|&&v| mode.allows(v)).count().min(local))
        .sum()
}

/// Limits for every node, in node order.
pub fn robust_limits(
    model: &GcnModel,
    graph: &Graph,
    local: usize,
    mode: FlipMode,
    method: Method,
    cap: usize,
) -> Result<Vec<RobustLimit>> {
    limits_for(
        model,
        graph,
        local,
        mode,
        method,
        cap,
        (0..graph.num_nodes()).collect(),
    )
}

/// Limit for a single node.
pub fn max_robust_limit(
    model: &GcnModel,
    graph: &Graph,
    local: usize,
    mode: FlipMode,
    method: Method,
    node: usize,
    cap: usize,
) -> Result<RobustLimit> {
    if node >= graph.num_nodes() {
        return Err(crate::Error::InvalidArgument(format!(
            "node {node} out of range"
        )));
    }
    Ok(limits_for(model, graph, local, mode, method, cap, vec![node])?[0])
}

fn limits_for(
    model: &GcnModel,
    graph: &Graph,
    local: usize,
    mode: FlipMode,
    method: Method,
    cap: usize,
    nodes: Vec<usize>,
) -> Result<Vec<RobustLimit>> {
    let saturation = saturation_budget(graph, local, mode);
    let mut results: Vec<Option<RobustLimit>> = vec![None; nodes.len()];
    let mut active: Vec<usize> = (0..nodes.len()).collect();
    let mut global = 0;
    while !active.is_empty() {
        let budget = PerturbationBudget::new(local, global).with_mode(mode);
        let certifier = Certifier::new(model, graph, budget, method)?;
        let certified: Vec<bool> = active
            .par_iter()
            .map(|&slot| Ok(certifier.judge(nodes[slot])?.certified))
            .collect::<Result<_>>()?;
        let mut still = Vec::with_capacity(active.len());
        for (&slot, ok) in active.iter().zip(certified) {
            if ok {
                still.push(slot);
            } else {
                results[slot] = Some(RobustLimit {
                    node: nodes[slot],
                    limit: global.saturating_sub(1),
                    never_certified: global == 0,
                    capped: false,
                });
            }
        }
        active = still;
        // past saturation every larger budget gives the same judgments
        if global >= cap || global >= saturation {
            for &slot in &active {
                results[slot] = Some(RobustLimit {
                    node: nodes[slot],
                    limit: cap,
                    never_certified: false,
                    capped: true,
                });
            }
            break;
        }
        global += 1;
    }
    Ok(results
        .into_iter()
        .map(|r| r.expect("every node resolved"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::worked_example;
    use crate::graph_model::Layer;
    use crate::perturbation::oracle_max_robust_limits;
    use crate::synthetic::{random_instance, InstanceShape};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_example_limit() {
        let (g, m) = worked_example();
        let r = max_robust_limit(&m, &g, 1, FlipMode::Both, Method::PolyTopK, 0, 4).unwrap();
        assert!(r.limit >= 1);
        assert!(!r.never_certified);
    }

    #[test]
    fn tied_node_is_never_certified() {
        let g = Graph::from_edges(1, &[], array![[1u8]]).unwrap();
        let m = GcnModel::new(vec![
            Layer::new(array![[1.0, 1.0]], array![0.0, 0.0]).unwrap()
        ])
        .unwrap();
        let r = max_robust_limit(&m, &g, 1, FlipMode::Both, Method::PolyTopK, 0, 10).unwrap();
        assert_eq!((r.limit, r.never_certified, r.capped), (0, true, false));
    }

    #[test]
    fn saturated_nodes_report_the_cap() {
        // score gap 1 - 0.1 x can never turn negative with one feature
        let g = Graph::from_edges(1, &[], array![[0u8]]).unwrap();
        let m = GcnModel::new(vec![
            Layer::new(array![[-0.1, 0.0]], array![1.0, 0.0]).unwrap()
        ])
        .unwrap();
        let r = max_robust_limit(&m, &g, 1, FlipMode::Both, Method::PolyTopK, 0, 7).unwrap();
        assert_eq!((r.limit, r.capped), (7, true));
    }

    #[test]
    fn bounded_by_oracle_and_above_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let shape = InstanceShape::default();
        for _ in 0..30 {
            let (g, m) = random_instance(&mut rng, &shape);
            let cap = 4;
            let oracle =
                oracle_max_robust_limits(&m, &g, 1, FlipMode::Both, cap, u64::MAX).unwrap();
            let poly = robust_limits(&m, &g, 1, FlipMode::Both, Method::PolyTopK, cap).unwrap();
            let interval =
                robust_limits(&m, &g, 1, FlipMode::Both, Method::IntervalTopK, cap).unwrap();
            for i in 0..g.num_nodes() {
                assert!(poly[i].limit <= oracle[i]);
                assert!(poly[i].limit >= interval[i].limit);
            }
        }
    }
}
