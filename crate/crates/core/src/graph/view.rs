use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{gcn_normalize, Graph, GraphError};
use crate::tensor::{CsrMatrix, Matrix};

/// Which part of the graph a model is allowed to see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewKind {
    /// Attributes (minus the stripped column) and the original topology.
    Full,
    /// Attributes only; the adjacency becomes the identity.
    NodesOnly,
    /// Topology only; every attribute is replaced by 1.
    TopologyOnly,
}

impl ViewKind {
    pub const ALL: [ViewKind; 3] = [ViewKind::Full, ViewKind::NodesOnly, ViewKind::TopologyOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewKind::Full => "full",
            ViewKind::NodesOnly => "nodes-only",
            ViewKind::TopologyOnly => "topology-only",
        }
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewKind {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(ViewKind::Full),
            "nodes-only" | "nodes" => Ok(ViewKind::NodesOnly),
            "topology-only" | "topology" => Ok(ViewKind::TopologyOnly),
            other => Err(GraphError::UnknownViewKind(other.to_string())),
        }
    }
}

/// A read-only partial view over a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct GraphView<'g> {
    kind: ViewKind,
    graph: &'g Graph,
    strip_column: Option<usize>,
}

impl<'g> GraphView<'g> {
    /// Creates a view. `sensitive_column` names the attribute column to
    /// remove from the features; pass `None` to keep every column.
    pub fn new(
        graph: &'g Graph,
        kind: ViewKind,
        sensitive_column: Option<&str>,
    ) -> Result<Self, GraphError> {
        let strip_column = match sensitive_column {
            None => None,
            Some(name) => Some(
                graph
                    .attribute_names()
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| GraphError::MissingColumn(name.to_string()))?,
            ),
        };
        Ok(Self {
            kind,
            graph,
            strip_column,
        })
    }

    pub fn kind(&self) -> ViewKind {
        self.kind
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    /// Width of [`features`](Self::features).
    pub fn feature_width(&self) -> usize {
        match self.kind {
            ViewKind::TopologyOnly => self.graph.num_attributes(),
            _ => self.graph.num_attributes() - usize::from(self.strip_column.is_some()),
        }
    }

    /// The node feature matrix this view exposes.
    pub fn features(&self) -> Matrix {
        let g = self.graph;
        match (self.kind, self.strip_column) {
            (ViewKind::TopologyOnly, _) => Matrix::ones(g.num_nodes(), g.num_attributes()),
            (_, None) => g.attributes().clone(),
            (_, Some(col)) => {
                let d = g.num_attributes();
                let left = g.attributes().slice_cols(0, col);
                let right = g.attributes().slice_cols(col + 1, d);
                left.concat_cols(&right).expect("equal row counts")
            }
        }
    }

    /// Raw adjacency: the identity for nodes-only views.
    pub fn adjacency(&self) -> Arc<CsrMatrix> {
        match self.kind {
            ViewKind::NodesOnly => Arc::new(CsrMatrix::identity(self.num_nodes())),
            _ => Arc::clone(self.graph.adjacency()),
        }
    }

    /// GCN-normalised adjacency. For nodes-only views this is exactly the
    /// identity.
    pub fn normalized_adjacency(&self) -> Arc<CsrMatrix> {
        match self.kind {
            ViewKind::NodesOnly => Arc::new(CsrMatrix::identity(self.num_nodes())),
            _ => Arc::new(gcn_normalize(self.graph.adjacency())),
        }
    }
}

/// Convenience constructor matching the library's operation naming.
pub fn make_view<'g>(
    g: &'g Graph,
    kind: ViewKind,
    sensitive_column: Option<&str>,
) -> Result<GraphView<'g>, GraphError> {
    GraphView::new(g, kind, sensitive_column)
}
