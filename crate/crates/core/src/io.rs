//! JSON graph and model files, label files, and CSV result export.
//!
//! Real numbers are written in the shortest form that parses back to the same
//! `f64`, so save/load round-trips are exact.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::certification::{Counterexample, NodeJudgment};
use crate::collective::RobustLimit;
use crate::error::{Error, Result};
use crate::graph_model::{GcnModel, Graph, Layer};
use crate::metrics::RobustnessSweep;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub num_nodes: usize,
    pub num_features: usize,
    pub edges: Vec<[usize; 2]>,
    pub features: Vec<Vec<u64>>,
}

impl GraphFile {
    pub fn from_graph(graph: &Graph) -> Self {
        Self {
            num_nodes: graph.num_nodes(),
            num_features: graph.num_features(),
            edges: graph.edges().into_iter().map(|(i, j)| [i, j]).collect(),
            features: graph
                .features()
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|&v| u64::from(v)).collect())
                .collect(),
        }
    }

    /// Validates and converts; error messages name the offending field.
    pub fn to_graph(&self) -> std::result::Result<Graph, String> {
        let (n, m) = (self.num_nodes, self.num_features);
        if self.features.len() != n {
            return Err(format!(
                "features: expected {n} rows, found {}",
                self.features.len()
            ));
        }
        let mut features = Array2::zeros((n, m));
        for (i, row) in self.features.iter().enumerate() {
            if row.len() != m {
                return Err(format!(
                    "features[{i}]: expected {m} values, found {}",
                    row.len()
                ));
            }
            for (j, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(format!("features[{i}][{j}]: value {v} is not 0 or 1"));
                }
                features[[i, j]] = v as u8;
            }
        }
        let mut edges = Vec::with_capacity(self.edges.len());
        for (k, &[i, j]) in self.edges.iter().enumerate() {
            if i >= n || j >= n {
                return Err(format!(
                    "edges[{k}]: [{i}, {j}] references a node outside 0..{n}"
                ));
            }
            edges.push((i, j));
        }
        Graph::from_edges(n, &edges, features).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFile {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub layers: Vec<LayerFile>,
}

impl ModelFile {
    pub fn from_model(model: &GcnModel) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| LayerFile {
                weight: l.weight.rows().into_iter().map(|r| r.to_vec()).collect(),
                bias: l.bias.to_vec(),
            })
            .collect();
        Self { layers }
    }

    pub fn to_model(&self) -> std::result::Result<GcnModel, String> {
        if self.layers.is_empty() {
            return Err("layers: at least one layer is required".into());
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let rows = layer.weight.len();
            let cols = layer.weight.first().map_or(0, Vec::len);
            if let Some((r, row)) = layer
                .weight
                .iter()
                .enumerate()
                .find(|(_, r)| r.len() != cols)
            {
                return Err(format!(
                    "layers[{l}].weight[{r}]: expected {cols} values, found {}",
                    row.len()
                ));
            }
            if let Some((pos, v)) = layer
                .weight
                .iter()
                .flatten()
                .chain(&layer.bias)
                .enumerate()
                .find(|(_, v)| !v.is_finite())
            {
                return Err(format!("layers[{l}]: parameter {pos} is not finite ({v})"));
            }
            let weight = Array2::from_shape_vec((rows, cols), layer.weight.concat())
                .map_err(|e| format!("layers[{l}].weight: {e}"))?;
            let bias = Array1::from(layer.bias.clone());
            layers.push(Layer::new(weight, bias).map_err(|e| format!("layers[{l}]: {e}"))?);
        }
        GcnModel::new(layers).map_err(|e| format!("layers: {e}"))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn format_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn parse_graph(text: &str, origin: &Path) -> Result<Graph> {
    let file: GraphFile =
        serde_json::from_str(text).map_err(|e| format_error(origin, e.to_string()))?;
    file.to_graph().map_err(|m| format_error(origin, m))
}

pub fn parse_model(text: &str, origin: &Path) -> Result<GcnModel> {
    let file: ModelFile =
        serde_json::from_str(text).map_err(|e| format_error(origin, e.to_string()))?;
    file.to_model().map_err(|m| format_error(origin, m))
}

pub fn load_graph(path: &Path) -> Result<Graph> {
    parse_graph(&read(path)?, path)
}

pub fn load_model(path: &Path) -> Result<GcnModel> {
    parse_model(&read(path)?, path)
}

pub fn graph_to_json(graph: &Graph) -> String {
    serde_json::to_string_pretty(&GraphFile::from_graph(graph)).expect("graph serializes")
}

pub fn model_to_json(model: &GcnModel) -> String {
    serde_json::to_string_pretty(&ModelFile::from_model(model)).expect("model serializes")
}

pub fn save_graph(graph: &Graph, path: &Path) -> Result<()> {
    write(path, &graph_to_json(graph))
}

pub fn save_model(model: &GcnModel, path: &Path) -> Result<()> {
    write(path, &model_to_json(model))
}

/// A JSON array with one entry per node: a label index or `null`.
pub fn load_labels(path: &Path) -> Result<Vec<Option<usize>>> {
    serde_json::from_str(&read(path)?).map_err(|e| format_error(path, e.to_string()))
}

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().flexible(false).from_writer(out)
}

/// `node,margin,certified,counterexample_flips`
pub fn write_certify_csv<W: Write>(
    out: W,
    rows: &[(NodeJudgment, Option<Counterexample>)],
) -> io::Result<()> {
    let mut w = writer(out);
    w.write_record(["node", "margin", "certified", "counterexample_flips"])?;
    for (j, ce) in rows {
        let flips = ce.as_ref().map(|c| c.flips.to_string()).unwrap_or_default();
        w.write_record([
            j.node.to_string(),
            j.margin.to_string(),
            j.certified.to_string(),
            flips,
        ])?;
    }
    w.flush()
}

/// `node,label,flipped_label,flips`, one row per verified counterexample.
pub fn write_counterexample_csv<W: Write>(
    out: W,
    rows: &[(NodeJudgment, Option<Counterexample>)],
) -> io::Result<()> {
    let mut w = writer(out);
    w.write_record(["node", "label", "flipped_label", "flips"])?;
    for (j, ce) in rows {
        if let Some(c) = ce.as_ref().filter(|c| c.verified) {
            w.write_record([
                j.node.to_string(),
                j.label.to_string(),
                c.flipped_label.to_string(),
                c.flips.to_string(),
            ])?;
        }
    }
    w.flush()
}

/// `p_l,p_g,lower,upper,runtime_ms`
pub fn write_sweep_csv<W: Write>(out: W, sweep: &RobustnessSweep) -> io::Result<()> {
    let mut w = writer(out);
    w.write_record(["p_l", "p_g", "lower", "upper", "runtime_ms"])?;
    for k in 0..sweep.global_budgets.len() {
        w.write_record([
            sweep.local_budget.to_string(),
            sweep.global_budgets[k].to_string(),
            sweep.lower[k].to_string(),
            sweep.upper[k].to_string(),
            format!("{:.3}", sweep.runtime_ms[k]),
        ])?;
    }
    w.flush()
}

/// `node,max_robust_limit,never_certified`
pub fn write_collective_csv<W: Write>(out: W, limits: &[RobustLimit]) -> io::Result<()> {
    let mut w = writer(out);
    w.write_record(["node", "max_robust_limit", "never_certified"])?;
    for r in limits {
        w.write_record([
            r.node.to_string(),
            r.limit.to_string(),
            r.never_certified.to_string(),
        ])?;
    }
    w.flush()
}

/// `node,robust,min_breaking_flips`
pub fn write_oracle_csv<W: Write>(out: W, breaking: &[Option<usize>]) -> io::Result<()> {
    let mut w = writer(out);
    w.write_record(["node", "robust", "min_breaking_flips"])?;
    for (i, b) in breaking.iter().enumerate() {
        w.write_record([
            i.to_string(),
            b.is_none().to_string(),
            b.map(|k| k.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()
}

/// Opens `path` for writing, or standard output when `path` is `None`.
pub fn output_sink(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    match path {
        None => Ok(Box::new(io::stdout())),
        Some(p) => fs::File::create(p)
            .map(|f| Box::new(io::BufWriter::new(f)) as Box<dyn Write>)
            .map_err(|source| Error::Io {
                path: p.clone(),
                source,
            }),
    }
}
