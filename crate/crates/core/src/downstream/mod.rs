//! Analyses over the fused embedding: clustering, 2-D visualization,
//! deconvolution, marker ranking and cluster connectivity, plus denoising
//! and the region statistic.

mod deconvolve;
mod gmm;
mod markers;
mod paga;
mod visualize;

pub use deconvolve::{cluster_means, deconvolve, kkt_residual, lasso_cd, soft_threshold, DeconvolutionResult, LassoFit, KKT_TOL, MAX_SWEEPS};
pub use gmm::{em_run, gmm_cluster, kmeans_pp, ClusterModel, EmRun, VARIANCE_FLOOR};
pub use markers::{gene_importance, marker_importance, top_genes};
pub use paga::{paga_connectivity, PagaGraph};
pub use visualize::{fit_visualization, VisConfig, Visualization, VIS_NU};

use ndarray::{Array1, Array2, ArrayView2};
use thiserror::Error;

use crate::network::{FusionNetwork, Inputs, NetworkError, NormalizedAdjacency};
use crate::topology::{knn_graph, TopologyError};

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("cannot fit {k} clusters to {n} spots")]
    InvalidClusterCount { k: usize, n: usize },
    #[error("mixture component {0} collapsed")]
    DegenerateComponent(usize),
    #[error("every EM restart collapsed ({0} discarded)")]
    AllRestartsDegenerate(usize),
    #[error("cluster {0} has no spots")]
    EmptyCluster(usize),
    #[error("need at least 2 clusters, got {0}")]
    TooFewClusters(usize),
    #[error("need at least 2 spots, got {0}")]
    TooFewSpots(usize),
    #[error("expected {expected} labels, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("spot {spot} has a negative expression sum")]
    NegativeSum { spot: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Replace each label by the most frequent label among the spot and its
/// `k` nearest spatial neighbours; ties keep the original label.
pub fn refine_labels(labels: &[usize], coords: ArrayView2<f64>, k: usize) -> Result<Vec<usize>, DownstreamError> {
    if labels.len() != coords.nrows() {
        return Err(DownstreamError::LengthMismatch {
            expected: coords.nrows(),
            got: labels.len(),
        });
    }
    if labels.len() < 2 {
        return Ok(labels.to_vec());
    }
    let graph = knn_graph(coords, k)?;
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &own)| {
            let mut counts = vec![0usize; n_labels];
            counts[own] += 1;
            for &j in &graph.neighbors[i] {
                counts[labels[j]] += 1;
            }
            let best = *counts.iter().max().expect("at least one label");
            let mut winners = (0..n_labels).filter(|&l| counts[l] == best);
            match (winners.next(), winners.next()) {
                (Some(w), None) => w,
                _ => own,
            }
        })
        .collect())
}

/// Decoder output of a dropout-free forward pass.
pub fn denoise(net: &FusionNetwork, inputs: Inputs, adj: &NormalizedAdjacency) -> Result<Array2<f64>, DownstreamError> {
    Ok(net.embed(inputs, adj)?.x_hat)
}

/// Per spot: the mean row sum over its cluster, raised to the power 1/4.
pub fn region_statistic(x: ArrayView2<f64>, labels: &[usize]) -> Result<Array1<f64>, DownstreamError> {
    if labels.len() != x.nrows() {
        return Err(DownstreamError::LengthMismatch {
            expected: x.nrows(),
            got: labels.len(),
        });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (i, (row, &l)) in x.rows().into_iter().zip(labels).enumerate() {
        let s = row.sum();
        if s < 0.0 {
            return Err(DownstreamError::NegativeSum { spot: i });
        }
        sums[l] += s;
        counts[l] += 1;
    }
    Ok(labels.iter().map(|&l| (sums[l] / counts[l] as f64).powf(0.25)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn refine_keeps_uniform_labels() {
        let coords = Array2::from_shape_fn((9, 2), |(i, j)| if j == 0 { (i % 3) as f64 } else { (i / 3) as f64 });
        let labels = vec![2; 9];
        assert_eq!(refine_labels(&labels, coords.view(), 6).unwrap(), labels);
    }

    #[test]
    fn refine_flips_isolated_outlier() {
        // Hexagon of six spots around a centre with a different label.
        let mut pts = vec![[0.0, 0.0]];
        for a in 0..6 {
            let t = a as f64 * std::f64::consts::PI / 3.0;
            pts.push([t.cos(), t.sin()]);
        }
        let coords = Array2::from_shape_fn((7, 2), |(i, j)| pts[i][j]);
        let labels = vec![1, 0, 0, 0, 0, 0, 0];
        assert_eq!(refine_labels(&labels, coords.view(), 6).unwrap()[0], 0);
    }

    #[test]
    fn refine_three_three_tie_keeps_original() {
        // Centre labelled 0; neighbours split 3/3 between labels 1 and 2, so
        // counts are {0: 1, 1: 3, 2: 3} and the tie keeps label 0.
        let mut pts = vec![[0.0, 0.0]];
        for a in 0..6 {
            let t = a as f64 * std::f64::consts::PI / 3.0;
            pts.push([t.cos(), t.sin()]);
        }
        let coords = Array2::from_shape_fn((7, 2), |(i, j)| pts[i][j]);
        let labels = vec![0, 1, 2, 1, 2, 1, 2];
        assert_eq!(refine_labels(&labels, coords.view(), 6).unwrap()[0], 0);
        // With the centre on one side of the split, that side wins 4-3.
        let labels = vec![1, 1, 2, 1, 2, 1, 2];
        assert_eq!(refine_labels(&labels, coords.view(), 6).unwrap()[0], 1);
    }

    #[test]
    fn refine_is_idempotent_on_blocks() {
        let coords = Array2::from_shape_fn((40, 2), |(i, j)| if j == 0 { (i % 8) as f64 * 1.01 } else { (i / 8) as f64 });
        let labels: Vec<usize> = (0..40).map(|i| usize::from(i % 8 >= 4)).collect();
        let once = refine_labels(&labels, coords.view(), 6).unwrap();
        let twice = refine_labels(&once, coords.view(), 6).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn region_statistic_examples() {
        let x = array![[16.0, 0.0]];
        assert_eq!(region_statistic(x.view(), &[0]).unwrap()[0], 2.0);
        let x = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let r = region_statistic(x.view(), &[0, 1, 0]).unwrap();
        assert!(r.iter().all(|&v| v == r[0]));
        let x = Array2::zeros((3, 2));
        assert!(region_statistic(x.view(), &[0, 0, 1]).unwrap().iter().all(|&v| v == 0.0));
        let x = array![[-1.0, 0.0]];
        assert!(matches!(
            region_statistic(x.view(), &[0]),
            Err(DownstreamError::NegativeSum { spot: 0 })
        ));
    }

    #[test]
    fn region_statistic_averages_within_cluster() {
        let x = array![[1.0], [31.0], [81.0]];
        let r = region_statistic(x.view(), &[0, 0, 1]).unwrap();
        assert_eq!(r[0], 2.0);
        assert_eq!(r[1], 2.0);
        assert_eq!(r[2], 3.0);
    }
}
