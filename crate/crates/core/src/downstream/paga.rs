//! Cluster connectivity from a kNN graph on the embedding.

use ndarray::{Array2, ArrayView2};

use super::DownstreamError;
use crate::dataio::PagaEdge;
use crate::topology::knn_graph;

/// Symmetric `clusters x clusters` connectivity in `[0, 1]` with a zero
/// diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct PagaGraph {
    pub connectivity: Array2<f64>,
}

impl PagaGraph {
    /// Upper-triangle entries with positive connectivity.
    pub fn edges(&self) -> Vec<PagaEdge> {
        let k = self.connectivity.nrows();
        let mut out = Vec::new();
        for c in 0..k {
            for d in c + 1..k {
                let v = self.connectivity[[c, d]];
                if v > 0.0 {
                    out.push(PagaEdge { c, d, connectivity: v });
                }
            }
        }
        out
    }
}

/// Observed over expected inter-cluster edge counts, clipped to 1. Edges
/// are the undirected union of the `k`-nearest-neighbour relation.
pub fn paga_connectivity(z: ArrayView2<f64>, labels: &[usize], k: usize) -> Result<PagaGraph, DownstreamError> {
    let n = z.nrows();
    if labels.len() != n {
        return Err(DownstreamError::LengthMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    let n_clusters = labels.iter().max().map_or(0, |m| m + 1);
    if n_clusters < 2 {
        return Err(DownstreamError::TooFewClusters(n_clusters));
    }
    let graph = knn_graph(z, k)?;
    let mut edges = std::collections::BTreeSet::new();
    for (i, ns) in graph.neighbors.iter().enumerate() {
        for &j in ns {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    let mut observed = Array2::<f64>::zeros((n_clusters, n_clusters));
    for &(i, j) in &edges {
        let (a, b) = (labels[i], labels[j]);
        if a != b {
            observed[[a, b]] += 1.0;
            observed[[b, a]] += 1.0;
        }
    }
    let mut sizes = vec![0.0; n_clusters];
    for &l in labels {
        sizes[l] += 1.0;
    }
    let total = edges.len() as f64;
    let all_pairs = n as f64 * (n as f64 - 1.0) / 2.0;
    let connectivity = Array2::from_shape_fn((n_clusters, n_clusters), |(c, d)| {
        if c == d {
            return 0.0;
        }
        let expected = total * sizes[c] * sizes[d] / all_pairs;
        if expected > 0.0 {
            (observed[[c, d]] / expected).min(1.0)
        } else {
            0.0
        }
    });
    Ok(PagaGraph { connectivity })
}
