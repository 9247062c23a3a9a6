//! Perturbation budgets, flip sets and the brute-force robustness oracle.
//!
//! The perturbation space of a binary feature matrix `X` holds every matrix
//! reachable by at most `local` flips per node and at most `global` flips in
//! total. The oracle enumerates that space exhaustively, so it is only usable
//! on desk-scale graphs and is guarded by a candidate cap.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph_model::{forward, labels_from_scores, normalize_adjacency, GcnModel, Graph};

/// Default cap on the number of candidate flip sets the oracle may visit.
pub const DEFAULT_ORACLE_CAP: u64 = 10_000_000;

/// Environment variable overriding [`DEFAULT_ORACLE_CAP`].
pub const ORACLE_CAP_ENV: &str = "GCN_CERT_ORACLE_CAP";

/// Which flip directions an attacker may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FlipMode {
    #[default]
    Both,
    /// Only `0 → 1` flips (feature addition).
    AddOnly,
    /// Only `1 → 0` flips (feature deletion).
    DeleteOnly,
}

impl FlipMode {
    /// Whether an entry currently holding `value` may be flipped.
    pub fn allows(self, value: u8) -> bool {
        match self {
            FlipMode::Both => true,
            FlipMode::AddOnly => value == 0,
            FlipMode::DeleteOnly => value == 1,
        }
    }
}

impl FromStr for FlipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(FlipMode::Both),
            "add-only" => Ok(FlipMode::AddOnly),
            "delete-only" => Ok(FlipMode::DeleteOnly),
            other => Err(Error::InvalidArgument(format!(
                "unknown flip mode '{other}' (expected both, add-only or delete-only)"
            ))),
        }
    }
}

impl fmt::Display for FlipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlipMode::Both => "both",
            FlipMode::AddOnly => "add-only",
            FlipMode::DeleteOnly => "delete-only",
        })
    }
}

/// Local limit `p_l`, global limit `p_g` and the allowed flip direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PerturbationBudget {
    pub local: usize,
    pub global: usize,
    pub mode: FlipMode,
}

impl PerturbationBudget {
    pub fn new(local: usize, global: usize) -> Self {
        Self {
            local,
            global,
            mode: FlipMode::Both,
        }
    }

    pub fn with_mode(mut self, mode: FlipMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_global(mut self, global: usize) -> Self {
        self.global = global;
        self
    }

    /// Most flips any single node can receive.
    pub fn per_node(&self) -> usize {
        self.local.min(self.global)
    }

    /// True when the perturbation space is `{X}`.
    pub fn is_empty(&self) -> bool {
        self.per_node() == 0
    }
}

/// A set of `(node, feature)` entries to flip, kept sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlipSet(BTreeSet<(usize, usize)>);

impl FlipSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, node: usize, feature: usize) -> bool {
        self.0.insert((node, feature))
    }

    pub fn contains(&self, node: usize, feature: usize) -> bool {
        self.0.contains(&(node, feature))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().copied()
    }

    /// Largest number of flips on one node.
    pub fn max_per_node(&self) -> usize {
        self.0
            .iter()
            .chunk_by(|(node, _)| *node)
            .into_iter()
            .map(|(_, group)| group.count())
            .max()
            .unwrap_or(0)
    }

    /// Whether the set lies in the perturbation space of `features`.
    pub fn respects(&self, features: &Array2<u8>, budget: &PerturbationBudget) -> bool {
        let (n, m) = features.dim();
        self.len() <= budget.global
            && self.max_per_node() <= budget.local
            && self
                .iter()
                .all(|(k, j)| k < n && j < m && budget.mode.allows(features[[k, j]]))
    }
}

impl FromIterator<(usize, usize)> for FlipSet {
    fn from_iter<I: IntoIterator<Item = (usize, usize)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Semicolon-joined `node:feature` tokens.
impl fmt::Display for FlipSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.iter().map(|(k, j)| format!("{k}:{j}")).join(";");
        f.write_str(&s)
    }
}

impl FromStr for FlipSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Ok(FlipSet::new());
        }
        s.split(';')
            .map(|tok| {
                let (k, j) = tok.split_once(':').ok_or_else(|| {
                    Error::InvalidArgument(format!("flip token '{tok}' is not node:feature"))
                })?;
                let parse = |v: &str| {
                    v.parse::<usize>().map_err(|_| {
                        Error::InvalidArgument(format!("flip token '{tok}' has a bad index"))
                    })
                };
                Ok((parse(k)?, parse(j)?))
            })
            .collect()
    }
}

/// `P[k][j] = +1` where `X[k][j] = 0` and `-1` where `X[k][j] = 1`: the change
/// of an entry when it is flipped.
pub fn sign_matrix(features: &Array2<u8>) -> Array2<f64> {
    features.mapv(|v| if v == 0 { 1.0 } else { -1.0 })
}

/// Flips the listed entries of `features`.
pub fn apply_flips(features: &Array2<u8>, flips: &FlipSet) -> Result<Array2<u8>> {
    let (n, m) = features.dim();
    let mut out = features.clone();
    for (k, j) in flips.iter() {
        if k >= n || j >= m {
            return Err(Error::InvalidArgument(format!(
                "flip ({k}, {j}) outside the {n}x{m} feature matrix"
            )));
        }
        out[[k, j]] = 1 - out[[k, j]];
    }
    Ok(out)
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k.min(n));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

/// Upper bound on the number of flip sets [`enumerate_perturbations`] visits.
pub fn candidate_count(features: &Array2<u8>, budget: &PerturbationBudget) -> u128 {
    let flippable = features.iter().filter(|&&v| budget.mode.allows(v)).count() as u128;
    if budget.local == 0 {
        return 1;
    }
    let max_k = (budget.global as u128).min(flippable);
    (0..=max_k).fold(0u128, |acc, k| acc.saturating_add(binomial(flippable, k)))
}

/// Oracle cap from [`ORACLE_CAP_ENV`], or the default.
pub fn oracle_cap_from_env() -> u64 {
    std::env::var(ORACLE_CAP_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_ORACLE_CAP)
}

/// Every flip set in the perturbation space, each once, ordered by
/// cardinality and then lexicographically by `(node, feature)`.
pub fn enumerate_perturbations(
    features: &Array2<u8>,
    budget: &PerturbationBudget,
    cap: u64,
) -> Result<impl Iterator<Item = FlipSet>> {
    let candidates = candidate_count(features, budget);
    if candidates > u128::from(cap) {
        return Err(Error::OracleInfeasible { candidates, cap });
    }
    let allowed: Vec<(usize, usize)> = features
        .indexed_iter()
        .filter(|(_, &v)| budget.mode.allows(v))
        .map(|(idx, _)| idx)
        .collect();
    let max_k = if budget.local == 0 {
        0
    } else {
        budget.global.min(allowed.len())
    };
    let local = budget.local;
    Ok((0..=max_k).flat_map(move |k| {
        allowed
            .clone()
            .into_iter()
            .combinations(k)
            .map(FlipSet::from_iter)
            .filter(move |set| set.max_per_node() <= local)
    }))
}

/// Smallest number of flips that changes each node's label, or `None` when no
/// flip set within `budget` changes it.
///
/// One pass over the perturbation space answers robustness for every global
/// limit up to `budget.global`: node `i` is robust at `p_g` iff the result is
/// `None` or greater than `p_g`.
pub fn minimal_breaking_flips(
    model: &GcnModel,
    graph: &Graph,
    budget: &PerturbationBudget,
    cap: u64,
) -> Result<Vec<Option<usize>>> {
    model.check_input(graph)?;
    let norm_adj = normalize_adjacency(graph);
    let features = graph.features();
    let clean = labels_from_scores(&forward(
        model,
        norm_adj.view(),
        graph.features_f64().view(),
    )?);
    let n = graph.num_nodes();
    let mut breaking: Vec<Option<usize>> = vec![None; n];
    let mut unresolved = n;
    for flips in enumerate_perturbations(features, budget, cap)? {
        if unresolved == 0 {
            break;
        }
        let size = flips.len();
        let perturbed = apply_flips(features, &flips)?.mapv(f64::from);
        let labels = labels_from_scores(&forward(model, norm_adj.view(), perturbed.view())?);
        for i in 0..n {
            if breaking[i].is_none() && labels[i] != clean[i] {
                breaking[i] = Some(size);
                unresolved -= 1;
            }
        }
    }
    Ok(breaking)
}

/// Exact robustness of every node by enumeration.
pub fn exact_robustness(
    model: &GcnModel,
    graph: &Graph,
    budget: &PerturbationBudget,
    cap: u64,
) -> Result<Vec<bool>> {
    Ok(minimal_breaking_flips(model, graph, budget, cap)?
        .into_iter()
        .map(|b| b.is_none())
        .collect())
}

/// True iff no matrix in the perturbation space changes `node`'s label.
pub fn exact_node_robustness(
    model: &GcnModel,
    graph: &Graph,
    budget: &PerturbationBudget,
    node: usize,
    cap: u64,
) -> Result<bool> {
    if node >= graph.num_nodes() {
        return Err(Error::InvalidArgument(format!("node {node} out of range")));
    }
    Ok(exact_robustness(model, graph, budget, cap)?[node])
}

/// Largest global limit (up to `cap_budget`) at which each node is exactly
/// robust, or `None` when it is not robust even at `p_g = 0` (never happens:
/// the clean matrix cannot change its own label).
pub fn oracle_max_robust_limits(
    model: &GcnModel,
    graph: &Graph,
    local: usize,
    mode: FlipMode,
    cap_budget: usize,
    cap: u64,
) -> Result<Vec<usize>> {
    let budget = PerturbationBudget::new(local, cap_budget).with_mode(mode);
    Ok(minimal_breaking_flips(model, graph, &budget, cap)?
        .into_iter()
        .map(|b| b.map_or(cap_budget, |k| k - 1))
        .collect())
}
