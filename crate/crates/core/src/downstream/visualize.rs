//! Parametric 2-D visualization of the fused embedding.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::DownstreamError;
use crate::network::{dense_slices, dense_slices_mut, mlp_backward, mlp_forward, Dense};
use crate::objective::{kappa_sq, pair_bce, sq_dist, Adam, DEFAULT_CLAMP_EPS};
use crate::topology::knn_graph;

/// Kernel degrees of freedom on the 2-D side.
pub const VIS_NU: f64 = 1.0;

#[derive(Clone, Copy, Debug)]
pub struct VisConfig {
    /// Kernel degrees of freedom on the embedding side.
    pub nu: f64,
    pub k: usize,
    pub n_neg: usize,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct Visualization {
    pub coords: Array2<f64>,
    pub loss_history: Vec<f64>,
    pub layers: Vec<Dense>,
}

fn d_kappa_d2(d2: f64, nu: f64) -> f64 {
    -(nu + 1.0) / (nu * nu) * (1.0 + d2 / nu).powf(-(nu + 1.0) / nu - 1.0)
}

/// Train a fresh `d -> d -> 2` MLP so that 2-D similarities match
/// embedding similarities over kNN positives and uniform negatives.
pub fn fit_visualization<R: Rng + ?Sized>(
    z: ArrayView2<f64>,
    cfg: VisConfig,
    rng: &mut R,
) -> Result<Visualization, DownstreamError> {
    let (n, d) = z.dim();
    if n < 2 {
        return Err(DownstreamError::TooFewSpots(n));
    }
    let mut layers = vec![Dense::glorot(d, d, rng), Dense::glorot(d, 2, rng)];
    let sizes: Vec<usize> = dense_slices(&layers).iter().map(|s| s.len()).collect();
    let mut adam = Adam::with_sizes(sizes, cfg.lr);
    let positives = knn_graph(z, cfg.k)?;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(n * (cfg.k + cfg.n_neg));
        for i in 0..n {
            pairs.extend(positives.neighbors[i].iter().map(|&j| (i, j)));
            for _ in 0..cfg.n_neg {
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                pairs.push((i, j));
            }
        }
        let (v, cache) = mlp_forward(z, &layers)?;
        let mut dv = Array2::zeros(v.dim());
        let mut loss = 0.0;
        for &(i, j) in &pairs {
            let t = kappa_sq(sq_dist(z.row(i), z.row(j)), cfg.nu);
            let d2 = sq_dist(v.row(i), v.row(j));
            let s = kappa_sq(d2, VIS_NU);
            loss += pair_bce(t, s, DEFAULT_CLAMP_EPS);
            if s <= DEFAULT_CLAMP_EPS || s >= 1.0 - DEFAULT_CLAMP_EPS {
                continue;
            }
            let coef = 2.0 * -(t / s - (1.0 - t) / (1.0 - s)) * d_kappa_d2(d2, VIS_NU);
            let diff = &v.row(i) - &v.row(j);
            dv.row_mut(i).scaled_add(coef, &diff);
            dv.row_mut(j).scaled_add(-coef, &diff);
        }
        if !loss.is_finite() {
            return Err(DownstreamError::NonFiniteLoss { epoch });
        }
        history.push(loss);
        let mut grads: Vec<Dense> = layers.iter().map(|l| Dense::zeros(l.w.nrows(), l.w.ncols())).collect();
        mlp_backward(&cache, &layers, dv, &mut grads);
        adam.step_slices(dense_slices_mut(&mut layers), dense_slices(&grads));
    }
    let (coords, _) = mlp_forward(z, &layers)?;
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(DownstreamError::NonFiniteLoss { epoch: cfg.epochs });
    }
    Ok(Visualization {
        coords,
        loss_history: history,
        layers,
    })
}
