//! Graph data model, dataset ingestion, partial-data views and a synthetic
//! generator with planted group bias.

mod io;
mod synth;
mod view;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{CsrMatrix, Matrix, TensorError};

pub use io::{load_dataset, load_dataset_with_ids, write_dataset, DatasetMeta, LoadedDataset};
pub use synth::{generate_synthetic, intra_group_edge_fraction, SynthConfig, SENSITIVE_NAME};
pub use view::{make_view, GraphView, ViewKind};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: edge references unknown node id `{id}`")]
    DanglingNode { file: String, line: usize, id: String },
    #[error("{file}:{line}: duplicate node id `{id}`")]
    DuplicateNode { file: String, line: usize, id: String },
    #[error("{file}:{line}: column `{column}` has non-binary value `{value}`")]
    NonBinary {
        file: String,
        line: usize,
        column: String,
        value: String,
    },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unknown sensitive attribute `{0}`")]
    UnknownAttribute(String),
    #[error("unknown view kind `{0}`")]
    UnknownViewKind(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A binary per-node attribute used to define demographic groups.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitiveAttribute {
    pub name: String,
    pub values: Vec<u8>,
    /// Index of the matching column in the attribute matrix, when the
    /// attribute is also a model input feature.
    pub column: Option<usize>,
}

/// Train/validation/test node index sets.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split proportions and the seed used to draw them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.5,
            val: 0.25,
            test: 0.25,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || parts.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(GraphError::InvalidParameter(format!(
                "split ratios {parts:?} must be in [0,1] and sum to at most 1"
            )));
        }
        Ok(())
    }

    /// Shuffles the labelled nodes with the configured seed and cuts them
    /// into the three sets. Each set is returned sorted.
    pub fn draw(&self, labels: &[Option<u8>]) -> Result<Splits, GraphError> {
        self.validate()?;
        let mut labelled: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        labelled.shuffle(&mut rng);
        let total = labelled.len() as f64;
        let n_train = (self.train * total).floor() as usize;
        let n_val = ((self.val * total).floor() as usize).min(labelled.len() - n_train);
        let n_test = ((self.test * total).floor() as usize).min(labelled.len() - n_train - n_val);
        let take = |range: std::ops::Range<usize>| {
            let mut v = labelled[range].to_vec();
            v.sort_unstable();
            v
        };
        Ok(Splits {
            train: take(0..n_train),
            val: take(n_train..n_train + n_val),
            test: take(n_train + n_val..n_train + n_val + n_test),
        })
    }
}

/// Undirected attributed graph with binary labels and sensitive attributes.
#[derive(Clone, Debug)]
pub struct Graph {
    adjacency: Arc<CsrMatrix>,
    num_edges: usize,
    attributes: Matrix,
    attribute_names: Vec<String>,
    sensitive: Vec<SensitiveAttribute>,
    labels: Vec<Option<u8>>,
    splits: Splits,
}

impl Graph {
    /// Builds a graph from an undirected edge list. Duplicate edges are
    /// merged and self-loops dropped.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        attributes: Matrix,
        attribute_names: Vec<String>,
        sensitive: Vec<SensitiveAttribute>,
        labels: Vec<Option<u8>>,
        splits: Splits,
    ) -> Result<Self, GraphError> {
        let mut pairs: Vec<(usize, usize)> = edges
            .iter()
            .filter(|(u, v)| u != v)
            .map(|&(u, v)| (u.min(v), u.max(v)))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        if let Some(&(_, v)) = pairs.iter().find(|&&(_, v)| v >= num_nodes) {
            return Err(GraphError::Invariant(format!(
                "edge endpoint {v} outside [0, {num_nodes})"
            )));
        }
        let triplets: Vec<(usize, usize, f64)> = pairs
            .iter()
            .flat_map(|&(u, v)| [(u, v, 1.0), (v, u, 1.0)])
            .collect();
        let adjacency = CsrMatrix::from_triplets(num_nodes, num_nodes, &triplets)?;
        let g = Self {
            adjacency: Arc::new(adjacency),
            num_edges: pairs.len(),
            attributes,
            attribute_names,
            sensitive,
            labels,
            splits,
        };
        g.validate()?;
        Ok(g)
    }

    /// Checks every structural invariant of the graph.
    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.num_nodes();
        let bad = |m: String| Err(GraphError::Invariant(m));
        if self.adjacency.shape() != (n, n) {
            return bad("adjacency is not n x n".into());
        }
        for (r, c, v) in self.adjacency.iter() {
            if r == c {
                return bad(format!("self-loop stored at node {r}"));
            }
            if v != 1.0 || self.adjacency.get(c, r) != 1.0 {
                return bad(format!("adjacency not binary symmetric at ({r}, {c})"));
            }
        }
        if self.attributes.rows() != n {
            return bad(format!("{} attribute rows for {n} nodes", self.attributes.rows()));
        }
        if self.attribute_names.len() != self.attributes.cols() {
            return bad("attribute name count differs from attribute width".into());
        }
        for s in &self.sensitive {
            if s.values.len() != n {
                return bad(format!("sensitive `{}` has {} values", s.name, s.values.len()));
            }
            if s.values.iter().any(|&v| v > 1) {
                return bad(format!("sensitive `{}` is not binary", s.name));
            }
            if s.column.is_some_and(|c| c >= self.attributes.cols()) {
                return bad(format!("sensitive `{}` column out of range", s.name));
            }
        }
        if self.labels.len() != n || self.labels.iter().flatten().any(|&y| y > 1) {
            return bad("labels must be binary with one entry per node".into());
        }
        let mut seen = vec![false; n];
        for &i in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if i >= n || seen[i] {
                return bad(format!("split index {i} out of range or repeated"));
            }
            seen[i] = true;
        }
        Ok(())
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    /// Number of undirected edges.
    #[inline]
    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    /// Attribute width `d`.
    #[inline]
    pub fn num_attributes(&self) -> usize {
        self.attributes.cols()
    }

    pub fn adjacency(&self) -> &Arc<CsrMatrix> {
        &self.adjacency
    }

    pub fn attributes(&self) -> &Matrix {
        &self.attributes
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn sensitive_attributes(&self) -> &[SensitiveAttribute] {
        &self.sensitive
    }

    pub fn sensitive(&self, name: &str) -> Result<&SensitiveAttribute, GraphError> {
        self.sensitive
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| GraphError::UnknownAttribute(name.to_string()))
    }

    /// Name of the first sensitive attribute, the default one to strip.
    pub fn primary_sensitive(&self) -> Option<&str> {
        self.sensitive.first().map(|s| s.name.as_str())
    }

    pub fn labels(&self) -> &[Option<u8>] {
        &self.labels
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    /// Labels restricted to labelled nodes, with unknowns as 0.
    pub fn label_vector(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.unwrap_or(0)).collect()
    }

    /// Undirected edge list with `u < v`, sorted.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        self.adjacency.iter().filter(|&(u, v, _)| u < v).map(|(u, v, _)| (u, v)).collect()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency.row(node).0.len()
    }

    /// A copy of this graph with additional edges, used by invariance checks.
    pub fn with_extra_edges(&self, extra: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut edges = self.edge_list();
        edges.extend_from_slice(extra);
        Self::from_edges(
            self.num_nodes(),
            &edges,
            self.attributes.clone(),
            self.attribute_names.clone(),
            self.sensitive.clone(),
            self.labels.clone(),
            self.splits.clone(),
        )
    }

    /// A copy with the attribute columns reordered by `perm` (new column
    /// `j` is old column `perm[j]`).
    pub fn with_permuted_attributes(&self, perm: &[usize]) -> Result<Self, GraphError> {
        let d = self.num_attributes();
        if perm.len() != d {
            return Err(GraphError::InvalidParameter("permutation width".into()));
        }
        let mut inverse = vec![usize::MAX; d];
        for (new, &old) in perm.iter().enumerate() {
            if old >= d || inverse[old] != usize::MAX {
                return Err(GraphError::InvalidParameter("not a permutation".into()));
            }
            inverse[old] = new;
        }
        let n = self.num_nodes();
        let mut attributes = Matrix::zeros(n, d);
        for i in 0..n {
            for (new, &old) in perm.iter().enumerate() {
                attributes.set(i, new, self.attributes.get(i, old));
            }
        }
        let mut g = self.clone();
        g.attributes = attributes;
        g.attribute_names = perm.iter().map(|&old| self.attribute_names[old].clone()).collect();
        for s in &mut g.sensitive {
            s.column = s.column.map(|c| inverse[c]);
        }
        Ok(g)
    }
}

/// Symmetric GCN normalisation with self-loops: `D^-1/2 (A + I) D^-1/2`,
/// where `D` is the degree matrix of `A + I`.
pub fn normalize_adjacency(g: &Graph) -> CsrMatrix {
    gcn_normalize(g.adjacency())
}

pub(crate) fn gcn_normalize(adjacency: &CsrMatrix) -> CsrMatrix {
    let n = adjacency.rows();
    let mut triplets: Vec<(usize, usize, f64)> = adjacency.iter().collect();
    triplets.extend((0..n).map(|i| (i, i, 1.0)));
    let with_loops = CsrMatrix::from_triplets(n, n, &triplets).expect("indices within shape");
    let degree: Vec<f64> = (0..n).map(|i| with_loops.row(i).1.iter().sum()).collect();
    let normalized: Vec<(usize, usize, f64)> = with_loops
        .iter()
        .map(|(r, c, v)| (r, c, v / (degree[r] * degree[c]).sqrt()))
        .collect();
    CsrMatrix::from_triplets(n, n, &normalized).expect("indices within shape")
}


#[cfg(test)]
mod tests {
    use super::fixtures::graph;
    use super::*;

    #[test]
    fn single_edge_is_stored_both_ways() {
        let g = graph(2, &[(0, 1)], 2);
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.adjacency().get(0, 1), 1.0);
        assert_eq!(g.adjacency().get(1, 0), 1.0);
        assert_eq!(g.adjacency().nnz(), 2);
    }

    #[test]
    fn two_node_normalisation_is_one_half() {
        let a = normalize_adjacency(&graph(2, &[(0, 1)], 2)).to_dense();
        assert!(a.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn empty_graph_normalises_to_identity() {
        let a = normalize_adjacency(&graph(4, &[], 2)).to_dense();
        assert_eq!(a, Matrix::identity(4));
    }

    #[test]
    fn path_normalisation_hand_values() {
        let a = normalize_adjacency(&graph(3, &[(0, 1), (1, 2)], 2));
        assert!((a.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((a.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((a.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!(a.is_symmetric());
    }

    #[test]
    fn duplicate_edges_and_self_loops_are_dropped() {
        let g = graph(3, &[(0, 1), (1, 0), (2, 2)], 2);
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.degree(2), 0);
    }

    #[test]
    fn split_draw_is_deterministic_and_disjoint() {
        let labels: Vec<Option<u8>> = (0..100).map(|i| if i % 10 == 0 { None } else { Some(1) }).collect();
        let cfg = SplitConfig { seed: 7, ..SplitConfig::default() };
        let a = cfg.draw(&labels).unwrap();
        assert_eq!(a, cfg.draw(&labels).unwrap());
        assert_eq!(a.train.len(), 45);
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        let total = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), total);
        assert!(all.iter().all(|&i| labels[i].is_some()));
    }

    #[test]
    fn bad_split_ratios_rejected() {
        let cfg = SplitConfig { train: 0.8, val: 0.3, ..SplitConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
