//! Per-spot sparse decomposition onto cluster mean vectors.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use super::DownstreamError;

/// A fit counts as converged below this KKT residual.
pub const KKT_TOL: f64 = 1e-6;
/// Sweeps continue down to this residual so the weights themselves are
/// accurate on ill-conditioned bases.
const SOLVE_TOL: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 10_000;

#[derive(Clone, Debug)]
pub struct DeconvolutionResult {
    /// Spots x clusters.
    pub weights: Array2<f64>,
    /// Population standard deviation of each weight row.
    pub dispersion: Array1<f64>,
    /// Spots whose KKT residual stayed above tolerance.
    pub unconverged: Vec<usize>,
    pub max_kkt_residual: f64,
}

/// Lasso solution of one spot plus its final KKT residual.
#[derive(Clone, Debug)]
pub struct LassoFit {
    pub w: Array1<f64>,
    pub kkt_residual: f64,
    pub sweeps: usize,
}

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Largest violation of the optimality conditions of
/// `||y - B w||^2 + l1 ||w||_1`.
pub fn kkt_residual(basis: ArrayView2<f64>, y: ArrayView1<f64>, w: ArrayView1<f64>, l1: f64) -> f64 {
    let r = &y - &basis.dot(&w);
    let g = basis.t().dot(&r) * -2.0;
    g.iter()
        .zip(w.iter())
        .map(|(&gj, &wj)| {
            if wj > 0.0 {
                (gj + l1).abs()
            } else if wj < 0.0 {
                (gj - l1).abs()
            } else {
                (gj.abs() - l1).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Cyclic coordinate descent for `min_w ||y - B w||^2 + l1 ||w||_1`, `B`
/// holding one atom per column.
pub fn lasso_cd(basis: ArrayView2<f64>, y: ArrayView1<f64>, l1: f64) -> LassoFit {
    let k = basis.ncols();
    let norms: Vec<f64> = basis.axis_iter(Axis(1)).map(|b| b.dot(&b)).collect();
    let mut w = Array1::zeros(k);
    let mut r = y.to_owned();
    let mut sweeps = 0;
    let mut kkt = kkt_residual(basis, y, w.view(), l1);
    let mut moved = true;
    while kkt >= SOLVE_TOL && moved && sweeps < MAX_SWEEPS {
        moved = false;
        for j in 0..k {
            if norms[j] == 0.0 {
                continue;
            }
            let b = basis.column(j);
            let rho = b.dot(&r) + norms[j] * w[j];
            let new = soft_threshold(rho, l1 / 2.0) / norms[j];
            let delta = new - w[j];
            if delta != 0.0 {
                r.scaled_add(-delta, &b);
                w[j] = new;
                moved = true;
            }
        }
        sweeps += 1;
        kkt = kkt_residual(basis, y, w.view(), l1);
    }
    LassoFit {
        w,
        kkt_residual: kkt,
        sweeps,
    }
}

/// Column `c` is the mean of the rows of `z` labelled `c`.
pub fn cluster_means(z: ArrayView2<f64>, labels: &[usize]) -> Result<Array2<f64>, DownstreamError> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = Array2::zeros((z.ncols(), k));
    let mut counts = vec![0usize; k];
    for (row, &l) in z.rows().into_iter().zip(labels) {
        sums.column_mut(l).scaled_add(1.0, &row);
        counts[l] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(DownstreamError::EmptyCluster(c));
        }
        sums.column_mut(c).mapv_inplace(|v| v / n as f64);
    }
    Ok(sums)
}

fn population_std(w: ArrayView1<f64>) -> f64 {
    let n = w.len() as f64;
    let mean = w.sum() / n;
    (w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

pub fn deconvolve(z: ArrayView2<f64>, labels: &[usize], l1: f64) -> Result<DeconvolutionResult, DownstreamError> {
    if labels.len() != z.nrows() {
        return Err(DownstreamError::LengthMismatch {
            expected: z.nrows(),
            got: labels.len(),
        });
    }
    let basis = cluster_means(z, labels)?;
    let fits: Vec<LassoFit> = (0..z.nrows())
        .into_par_iter()
        .map(|i| lasso_cd(basis.view(), z.row(i), l1))
        .collect();
    let k = basis.ncols();
    let mut weights = Array2::zeros((z.nrows(), k));
    let mut unconverged = Vec::new();
    let mut max_kkt: f64 = 0.0;
    for (i, f) in fits.iter().enumerate() {
        weights.row_mut(i).assign(&f.w);
        if f.kkt_residual >= KKT_TOL {
            unconverged.push(i);
        }
        max_kkt = max_kkt.max(f.kkt_residual);
    }
    let dispersion = weights.rows().into_iter().map(population_std).collect();
    Ok(DeconvolutionResult {
        weights,
        dispersion,
        unconverged,
        max_kkt_residual: max_kkt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use ndarray::array;
    use proptest::prelude::*;

    /// Normal-equations least squares, solved by nalgebra's LU.
    fn least_squares(b: &Array2<f64>, y: &Array1<f64>) -> Vec<f64> {
        let m = DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| b[[i, j]]);
        let v = DVector::from_iterator(y.len(), y.iter().copied());
        let gram = m.transpose() * &m;
        let rhs = m.transpose() * v;
        gram.lu().solve(&rhs).unwrap().iter().copied().collect()
    }

    #[test]
    fn large_penalty_zeroes_weights() {
        let z = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        let r = deconvolve(z.view(), &[0, 1, 1], 100.0).unwrap();
        assert!(r.weights.iter().all(|&w| w == 0.0));
        assert!(r.dispersion.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn orthonormal_design_matches_soft_threshold() {
        let s = 0.5f64.sqrt();
        let b = array![[s, -s, 0.0], [s, s, 0.0], [0.0, 0.0, 1.0]];
        let y = array![1.3, -0.4, 0.05];
        let l1 = 0.3;
        let fit = lasso_cd(b.view(), y.view(), l1);
        let bty = b.t().dot(&y);
        for j in 0..3 {
            assert_abs_diff_eq!(fit.w[j], soft_threshold(bty[j], l1 / 2.0), epsilon = 1e-9);
        }
        assert!(fit.kkt_residual < KKT_TOL);
    }

    #[test]
    fn exact_cluster_mean_gives_one_hot_row() {
        let z = array![[2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 1.0], [2.0, 0.0, 0.0]];
        let r = deconvolve(z.view(), &[0, 1, 2, 0], 1e-8).unwrap();
        let w = r.weights.row(0);
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(w[1], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(w[2], 0.0, epsilon = 1e-6);
        // std of (1, 0, 0).
        assert_abs_diff_eq!(r.dispersion[0], (2.0f64 / 9.0).sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn empty_cluster_is_rejected() {
        let z = array![[1.0], [2.0]];
        assert!(matches!(
            deconvolve(z.view(), &[0, 2], 0.1),
            Err(DownstreamError::EmptyCluster(1))
        ));
    }

    proptest! {
        #[test]
        fn zero_penalty_is_least_squares(
            entries in prop::collection::vec(-1.0f64..1.0, 12),
            y in prop::collection::vec(-2.0f64..2.0, 4),
        ) {
            // Diagonally dominant 4x3 design keeps the problem well conditioned.
            let mut b = Array2::from_shape_vec((4, 3), entries).unwrap();
            for j in 0..3 {
                b[[j, j]] += 3.0;
            }
            let y = Array1::from(y);
            let fit = lasso_cd(b.view(), y.view(), 0.0);
            let ls = least_squares(&b, &y);
            for j in 0..3 {
                prop_assert!((fit.w[j] - ls[j]).abs() < 1e-6);
            }
            prop_assert!(fit.kkt_residual < KKT_TOL);
        }

        #[test]
        fn kkt_holds_at_convergence(
            entries in prop::collection::vec(-1.0f64..1.0, 15),
            y in prop::collection::vec(-2.0f64..2.0, 5),
            l1 in 0.0f64..2.0,
        ) {
            let b = Array2::from_shape_vec((5, 3), entries).unwrap();
            let y = Array1::from(y);
            let fit = lasso_cd(b.view(), y.view(), l1);
            if fit.sweeps < MAX_SWEEPS {
                prop_assert!(kkt_residual(b.view(), y.view(), fit.w.view(), l1) < KKT_TOL);
            }
        }
    }
}
