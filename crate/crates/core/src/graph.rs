//! Evidence graphs: one node per evidence sequence, fully connected.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::featurize::{build_sequence, EmbeddingProvider, EvidencePiece, DEFAULT_MAX_TOKENS};
use crate::tensor::{Matrix, TensorError};

/// Node id used for the optional claim-only node.
pub const CLAIM_NODE_ID: &str = "__claim__";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphOptions {
    /// Adds a node carrying the bare claim text after the evidence nodes.
    pub claim_node: bool,
    pub max_tokens: usize,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            claim_node: false,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceGraph {
    /// `n x d` node features.
    pub features: Matrix,
    /// Raw `n x n` adjacency, zero diagonal.
    pub adjacency: Matrix,
    /// `D^-1/2 (A + I) D^-1/2`.
    pub normalized: Matrix,
    pub node_ids: Vec<String>,
    pub gold: Option<Vec<bool>>,
}

impl EvidenceGraph {
    /// Assembles a fully connected graph over precomputed features.
    pub fn fully_connected(features: Matrix, node_ids: Vec<String>, gold: Option<Vec<bool>>) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(Error::Dimension("a graph needs at least one node".into()));
        }
        if node_ids.len() != n || gold.as_ref().is_some_and(|g| g.len() != n) {
            return Err(Error::Dimension(format!(
                "{n} feature rows but {} node ids",
                node_ids.len()
            )));
        }
        let adjacency = complete_adjacency(n);
        let normalized = normalize_adjacency(&adjacency)?;
        Ok(Self {
            features,
            adjacency,
            normalized,
            node_ids,
            gold,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Directed off-diagonal entries, `n (n - 1)` for a complete graph.
    pub fn directed_edge_count(&self) -> usize {
        let n = self.num_nodes();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && self.adjacency.get(i, j) != 0.0)
            .count()
    }
}

pub fn complete_adjacency(n: usize) -> Matrix {
    let mut a = Matrix::filled(n, n, 1.0);
    for i in 0..n {
        a.set(i, i, 0.0);
    }
    a
}

/// Builds the graph for one claim: node `i` embeds `claim </s> title : evidence_i`.
pub fn build_graph(
    instance_id: &str,
    claim: &str,
    pieces: &[EvidencePiece],
    provider: &EmbeddingProvider,
    options: GraphOptions,
) -> Result<EvidenceGraph> {
    if pieces.is_empty() {
        return Err(Error::InvalidInstance {
            id: instance_id.to_string(),
            detail: "no evidence pieces".into(),
        });
    }
    let mut seen = HashSet::new();
    for p in pieces {
        if !seen.insert(p.id.as_str()) {
            return Err(Error::InvalidInstance {
                id: instance_id.to_string(),
                detail: format!("duplicate evidence id {}", p.id),
            });
        }
    }

    let mut rows = Vec::with_capacity(pieces.len() + 1);
    for (i, piece) in pieces.iter().enumerate() {
        let sequence = build_sequence(claim, piece, options.max_tokens)?;
        rows.push(provider.embed(&sequence, instance_id, i)?);
    }
    let mut node_ids: Vec<String> = pieces.iter().map(|p| p.id.clone()).collect();
    let mut gold: Option<Vec<bool>> = pieces.iter().map(|p| p.is_rationale).collect::<Option<Vec<bool>>>();
    if options.claim_node {
        let sequence = crate::featurize::truncate_tokens(claim, options.max_tokens);
        rows.push(provider.embed(&sequence, instance_id, pieces.len())?);
        node_ids.push(CLAIM_NODE_ID.to_string());
        if let Some(g) = gold.as_mut() {
            g.push(false);
        }
    }
    let features = Matrix::from_rows(&rows)?;
    if features.cols() != provider.dim() {
        return Err(Error::Dimension(format!(
            "provider produced {} features, expected {}",
            features.cols(),
            provider.dim()
        )));
    }
    EvidenceGraph::fully_connected(features, node_ids, gold)
}

/// Symmetric GCN normalization `D^-1/2 (A + I) D^-1/2` with `D_ii = sum_j (A + I)_ij`.
pub fn normalize_adjacency(a: &Matrix) -> Result<Matrix> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(TensorError::ShapeMismatch {
            op: "normalize_adjacency",
            left: (rows, cols),
            right: (cols, rows),
        }
        .into());
    }
    if !a.is_symmetric(0.0) {
        return Err(Error::Dimension("adjacency must be symmetric".into()));
    }
    if a.data().iter().any(|v| *v < 0.0) {
        return Err(Error::Dimension("adjacency must be non-negative".into()));
    }
    let n = rows;
    let mut tilde = a.clone();
    for i in 0..n {
        tilde.set(i, i, a.get(i, i) + 1.0);
    }
    let degree: Vec<f64> = (0..n).map(|i| tilde.row(i).iter().sum()).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // sqrt(d_i d_j) keeps regular graphs exact: d_i = d_j gives d_i.
            out.set(i, j, tilde.get(i, j) / (degree[i] * degree[j]).sqrt());
        }
    }
    Ok(out)
}
