//! Gene importance by embedding displacement under column zeroing.

use ndarray::Array2;
use rayon::prelude::*;

use super::DownstreamError;
use crate::network::{FusionNetwork, GeneProbe, Inputs, NormalizedAdjacency};

/// `clusters x genes` matrix: mean over each cluster's spots of
/// `||z(x with gene g zeroed) - z(x)||`.
pub fn gene_importance(
    net: &FusionNetwork,
    inputs: Inputs,
    adj: &NormalizedAdjacency,
    labels: &[usize],
) -> Result<Array2<f64>, DownstreamError> {
    let n = inputs.tra.nrows();
    if labels.len() != n {
        return Err(DownstreamError::LengthMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let probe = GeneProbe::new(net, inputs, adj)?;
    let n_genes = inputs.tra.ncols();
    let columns: Vec<Vec<f64>> = (0..n_genes)
        .into_par_iter()
        .map(|g| {
            let moved = probe.zeroed(g);
            let mut sums = vec![0.0; k];
            for (i, &l) in labels.iter().enumerate() {
                let d: f64 = moved
                    .row(i)
                    .iter()
                    .zip(probe.baseline.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                sums[l] += d.sqrt();
            }
            sums.iter()
                .zip(&counts)
                .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(Array2::from_shape_fn((k, n_genes), |(c, g)| columns[g][c]))
}

/// Indices of the `top_n` largest entries, ties to the lower index.
pub fn top_genes(importance: ndarray::ArrayView1<f64>, top_n: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..importance.len()).collect();
    idx.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    idx.into_iter().take(top_n).map(|g| (g, importance[g])).collect()
}

/// Ranked `(gene index, importance)` for one cluster.
pub fn marker_importance(
    net: &FusionNetwork,
    inputs: Inputs,
    adj: &NormalizedAdjacency,
    labels: &[usize],
    cluster: usize,
    top_n: usize,
) -> Result<Vec<(usize, f64)>, DownstreamError> {
    if !labels.contains(&cluster) {
        return Err(DownstreamError::EmptyCluster(cluster));
    }
    let all = gene_importance(net, inputs, adj, labels)?;
    Ok(top_genes(all.row(cluster), top_n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::FusionMode;
    use crate::network::{Dense, ModelParams, ModelShape};
    use crate::topology::{GraphKind, NeighborGraph};
    use ndarray::{array, Array1};

    fn hand_net() -> FusionNetwork {
        // Only gene 0 reaches the embedding.
        let first = Dense {
            w: array![[1.0, 0.5], [0.0, 0.0]],
            b: Array1::zeros(2),
        };
        let params = ModelParams {
            gnn_tra: vec![first, Dense::identity(2)],
            gnn_mor: None,
            fusion: vec![Dense::identity(2)],
            decoder: vec![Dense::identity(2)],
        };
        let shape = ModelShape {
            n_genes: 2,
            n_mor: None,
            d_emb: 2,
            n_mlp: 1,
            fusion_mode: FusionMode::Sum,
        };
        FusionNetwork::from_params(params, shape, 1.0)
    }

    fn line_graph(n: usize) -> NormalizedAdjacency {
        let neighbors = (0..n)
            .map(|i| {
                let mut v = Vec::new();
                if i > 0 {
                    v.push(i - 1);
                }
                if i + 1 < n {
                    v.push(i + 1);
                }
                v
            })
            .collect();
        NormalizedAdjacency::from_graph(&NeighborGraph {
            n,
            neighbors,
            kind: GraphKind::SpatialEps,
        })
    }

    #[test]
    fn only_connected_gene_ranks_first() {
        let net = hand_net();
        let x = array![[1.0, 2.0], [0.5, -1.0], [2.0, 0.3], [1.5, 1.5]];
        let adj = line_graph(4);
        let labels = [0, 0, 1, 1];
        let inputs = Inputs { tra: x.view(), mor: None };
        for c in 0..2 {
            let ranked = marker_importance(&net, inputs, &adj, &labels, c, 2).unwrap();
            assert_eq!(ranked[0].0, 0);
            assert!(ranked[0].1 > 0.0);
            assert_eq!(ranked[1], (1, 0.0));
        }
    }

    #[test]
    fn zero_column_has_zero_importance_and_decoder_is_irrelevant() {
        let mut net = hand_net();
        let x = array![[0.0, 2.0], [0.0, -1.0], [0.0, 0.3]];
        let adj = line_graph(3);
        let labels = [0, 0, 0];
        let inputs = Inputs { tra: x.view(), mor: None };
        let before = gene_importance(&net, inputs, &adj, &labels).unwrap();
        assert_eq!(before[[0, 0]], 0.0);
        net.params_mut().decoder[0].w.fill(3.0);
        let after = gene_importance(&net, inputs, &adj, &labels).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn other_cluster_relabeling_is_irrelevant() {
        let net = hand_net();
        let x = array![[1.0, 2.0], [0.5, -1.0], [2.0, 0.3], [1.5, 1.5], [0.1, 0.2]];
        let adj = line_graph(5);
        let inputs = Inputs { tra: x.view(), mor: None };
        let a = gene_importance(&net, inputs, &adj, &[0, 0, 1, 2, 2]).unwrap();
        let b = gene_importance(&net, inputs, &adj, &[0, 0, 2, 1, 1]).unwrap();
        assert_eq!(a.row(0), b.row(0));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let imp = array![0.5, 1.0, 1.0, 0.2];
        assert_eq!(top_genes(imp.view(), 3), vec![(1, 1.0), (2, 1.0), (0, 0.5)]);
    }
}
