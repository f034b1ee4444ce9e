//! Neighbor graphs (spatial epsilon-radius and embedding-space kNN), 1-hop
//! neighbor mixing augmentation, and anchor/partner pair sampling.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("radius must be positive and finite, got {0}")]
    InvalidRadius(f64),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("graph has {graph} nodes but features have {rows} rows")]
    ShapeMismatch { graph: usize, rows: usize },
    #[error("augmentation strength must lie in (0, 1], got {0}")]
    InvalidStrength(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphKind {
    SpatialEps,
    Knn,
}

/// Directed adjacency lists; each list is sorted by node index.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    pub n: usize,
    pub neighbors: Vec<Vec<usize>>,
    pub kind: GraphKind,
}

impl NeighborGraph {
    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn isolated_nodes(&self) -> usize {
        self.neighbors.iter().filter(|n| n.is_empty()).count()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors
            .iter()
            .enumerate()
            .all(|(i, ns)| ns.iter().all(|&j| self.neighbors[j].binary_search(&i).is_ok()))
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Connect every pair of distinct, non-coincident points at distance <= eps.
pub fn build_spatial_graph(coords: ArrayView2<f64>, eps: f64) -> Result<NeighborGraph, TopologyError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TopologyError::InvalidRadius(eps));
    }
    let n = coords.nrows();
    let eps2 = eps * eps;
    let neighbors = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| {
                    let d = sq_dist(coords.row(i), coords.row(j));
                    j != i && d > 0.0 && d <= eps2
                })
                .collect()
        })
        .collect();
    Ok(NeighborGraph {
        n,
        neighbors,
        kind: GraphKind::SpatialEps,
    })
}

/// Smallest radius at which the median spot has at least `min_neighbors`
/// spatial neighbors: the ceil(N/2)-th smallest distance to a spot's
/// `min_neighbors`-th nearest neighbor.
pub fn auto_radius(coords: ArrayView2<f64>, min_neighbors: usize) -> Result<f64, TopologyError> {
    let n = coords.nrows();
    if n < 2 {
        return Err(TopologyError::TooFewPoints(n));
    }
    let want = min_neighbors.clamp(1, n - 1);
    let mut kth: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(coords.row(i), coords.row(j)))
                .filter(|&d| d > 0.0)
                .collect();
            d.sort_by(f64::total_cmp);
            d.get(want - 1).copied().unwrap_or(f64::INFINITY).sqrt()
        })
        .collect();
    kth.sort_by(f64::total_cmp);
    let r = kth[n.div_ceil(2) - 1];
    if r.is_finite() && r > 0.0 {
        Ok(r)
    } else {
        Err(TopologyError::InvalidRadius(r))
    }
}

/// Each node's `k` nearest rows by Euclidean distance (ties to the lower
/// index). `k >= n` saturates at `n - 1`.
pub fn knn_graph(x: ArrayView2<f64>, k: usize) -> Result<NeighborGraph, TopologyError> {
    let n = x.nrows();
    if k == 0 {
        return Err(TopologyError::InvalidK);
    }
    if n < 2 {
        return Err(TopologyError::TooFewPoints(n));
    }
    let k = k.min(n - 1);
    let neighbors = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(x.row(i), x.row(j)), j))
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut ns: Vec<usize> = cand[..k].iter().map(|&(_, j)| j).collect();
            ns.sort_unstable();
            ns
        })
        .collect();
    Ok(NeighborGraph {
        n,
        neighbors,
        kind: GraphKind::Knn,
    })
}

/// An augmented row and the mixing coefficient that produced it.
#[derive(Clone, Debug)]
pub struct Augmented {
    pub row: Array1<f64>,
    pub r_u: f64,
    /// The node had no neighbor; `row` is the input unchanged.
    pub fallback: bool,
}

/// Mix the row with its neighbor: `(1 - r) * x_i + r * x_j`.
pub fn mix(x_i: ArrayView1<f64>, x_j: ArrayView1<f64>, r: f64) -> Array1<f64> {
    x_i.iter()
        .zip(x_j)
        .map(|(&a, &b)| (1.0 - r) * a + r * b)
        .collect()
}

/// Mix row `node` of `features` with a uniformly drawn 1-hop neighbor using
/// `r_u ~ U(0, p_u)`.
pub fn augment<R: Rng + ?Sized>(
    features: ArrayView2<f64>,
    node: usize,
    graph: &NeighborGraph,
    p_u: f64,
    rng: &mut R,
) -> Result<Augmented, TopologyError> {
    if !(p_u > 0.0 && p_u <= 1.0) {
        return Err(TopologyError::InvalidStrength(p_u));
    }
    if graph.n != features.nrows() {
        return Err(TopologyError::ShapeMismatch {
            graph: graph.n,
            rows: features.nrows(),
        });
    }
    let ns = &graph.neighbors[node];
    if ns.is_empty() {
        return Ok(Augmented {
            row: features.row(node).to_owned(),
            r_u: 0.0,
            fallback: true,
        });
    }
    let hop = ns[rng.random_range(0..ns.len())];
    let r_u = rng.random_range(0.0..p_u);
    Ok(Augmented {
        row: mix(features.row(node), features.row(hop), r_u),
        r_u,
        fallback: false,
    })
}

/// Anchor/partner pairs for one modality. For `h[i] == true` the partner is a
/// row of `aug_payload` (the augmented copy of the anchor); otherwise it is a
/// dataset index different from the anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub anchors: Vec<usize>,
    pub partners: Vec<usize>,
    pub h: Vec<bool>,
    /// Row `i` is the augmented copy of node `i`.
    pub aug_payload: Array2<f64>,
    pub fallbacks: usize,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// For each of the `n` anchors: one augmented partner then `n_neg` uniform
/// negatives.
pub fn sample_pairs<R: Rng + ?Sized>(
    n: usize,
    graph: &NeighborGraph,
    features: ArrayView2<f64>,
    n_neg: usize,
    p_u: f64,
    rng: &mut R,
) -> Result<PairBatch, TopologyError> {
    if n < 2 {
        return Err(TopologyError::TooFewPoints(n));
    }
    if n != features.nrows() {
        return Err(TopologyError::ShapeMismatch {
            graph: n,
            rows: features.nrows(),
        });
    }
    let cap = n * (1 + n_neg);
    let mut anchors = Vec::with_capacity(cap);
    let mut partners = Vec::with_capacity(cap);
    let mut h = Vec::with_capacity(cap);
    let mut aug_payload = Array2::zeros(features.dim());
    let mut fallbacks = 0;
    for i in 0..n {
        let aug = augment(features, i, graph, p_u, rng)?;
        fallbacks += usize::from(aug.fallback);
        aug_payload.row_mut(i).assign(&aug.row);
        anchors.push(i);
        partners.push(i);
        h.push(true);
        for _ in 0..n_neg {
            // Uniform over the n - 1 other indices.
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            anchors.push(i);
            partners.push(j);
            h.push(false);
        }
    }
    Ok(PairBatch {
        anchors,
        partners,
        h,
        aug_payload,
        fallbacks,
    })
}
