//! Expression and morphology preprocessing: gene filtering, library-size
//! log normalization, highly variable gene selection, standardization and PCA.
//!
//! All column statistics use population (1/N) moments and a fixed
//! row-sequential summation order.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::dataio::{RunConfig, SpotDataset};

/// Library size every spot is scaled to before the log transform.
pub const TARGET_SUM: f64 = 1e4;

/// Columns with a standard deviation below this are mapped to zeros.
pub const MIN_STD: f64 = 1e-12;

/// Eigenvalues below this count as numerically zero.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("no gene is detected in at least {tau} spots")]
    AllGenesFiltered { tau: usize },
    #[error("spot {row} has zero total counts")]
    ZeroLibrary { row: usize },
    #[error("negative count {value} at spot {row}, gene {col}")]
    NegativeCount { row: usize, col: usize, value: f64 },
    #[error("requested {requested} principal components, allowed 1..={max}")]
    InvalidComponents { requested: usize, max: usize },
    #[error("requested {requested} principal components but numerical rank is {rank}")]
    RankDeficient { requested: usize, rank: usize },
}

/// Model-ready inputs.
#[derive(Clone, Debug)]
pub struct PreprocessedData {
    /// Standardized log-normalized expression of the selected genes.
    pub tra: Array2<f64>,
    /// Log-normalized expression of the selected genes, before standardizing.
    pub tra_lognorm: Array2<f64>,
    /// Morphology PCA scores.
    pub mor: Option<Array2<f64>>,
    pub selected_gene_ids: Vec<String>,
    /// Indices of the selected genes in the raw expression matrix.
    pub selected_genes: Vec<usize>,
    pub gene_means: Array1<f64>,
    pub gene_stds: Array1<f64>,
    pub pca: Option<Pca>,
}

#[derive(Clone, Debug)]
pub struct Pca {
    pub scores: Array2<f64>,
    /// Feature-space basis, one orthonormal column per component.
    pub basis: Array2<f64>,
    pub mean: Array1<f64>,
    /// Every eigenvalue of the covariance, descending.
    pub eigenvalues: Array1<f64>,
}

/// Keep genes detected (nonzero) in at least `tau` spots, in column order.
pub fn filter_genes(
    tra: ArrayView2<f64>,
    tau: usize,
) -> Result<(Array2<f64>, Vec<usize>), PreprocessError> {
    let kept: Vec<usize> = tra
        .columns()
        .into_iter()
        .enumerate()
        .filter(|(_, col)| col.iter().filter(|&&v| v != 0.0).count() >= tau)
        .map(|(g, _)| g)
        .collect();
    if kept.is_empty() {
        return Err(PreprocessError::AllGenesFiltered { tau });
    }
    Ok((tra.select(Axis(1), &kept), kept))
}

/// `ln(1 + target_sum * x / rowsum)` per entry.
pub fn lognorm(tra: ArrayView2<f64>, target_sum: f64) -> Result<Array2<f64>, PreprocessError> {
    let mut out = Array2::zeros(tra.dim());
    for (i, (row, mut out_row)) in tra.rows().into_iter().zip(out.rows_mut()).enumerate() {
        let mut total = 0.0;
        for (g, &v) in row.iter().enumerate() {
            if v < 0.0 {
                return Err(PreprocessError::NegativeCount { row: i, col: g, value: v });
            }
            total += v;
        }
        if total <= 0.0 {
            return Err(PreprocessError::ZeroLibrary { row: i });
        }
        let scale = target_sum / total;
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = (scale * v).ln_1p();
        }
    }
    Ok(out)
}

fn column_moments(m: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = m.nrows() as f64;
    let mut means = Array1::zeros(m.ncols());
    let mut vars = Array1::zeros(m.ncols());
    for (j, col) in m.columns().into_iter().enumerate() {
        let mut s = 0.0;
        for &v in col {
            s += v;
        }
        let mu = s / n;
        let mut ss = 0.0;
        for &v in col {
            ss += (v - mu) * (v - mu);
        }
        means[j] = mu;
        vars[j] = ss / n;
    }
    (means, vars)
}

/// Indices (ascending) of the `n_top` columns with the largest variance;
/// ties go to the lower index.
pub fn select_hvg(m: ArrayView2<f64>, n_top: usize) -> Vec<usize> {
    let (_, vars) = column_moments(m);
    let mut order: Vec<usize> = (0..m.ncols()).collect();
    order.sort_by(|&a, &b| vars[b].total_cmp(&vars[a]).then(a.cmp(&b)));
    order.truncate(n_top);
    order.sort_unstable();
    order
}

/// Column-wise z-scores with population std; near-constant columns become 0.
pub fn standardize(m: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (means, vars) = column_moments(m);
    let stds = vars.mapv(f64::sqrt);
    let mut out = m.to_owned();
    for (j, mut col) in out.columns_mut().into_iter().enumerate() {
        if stds[j] < MIN_STD {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|v| (v - means[j]) / stds[j]);
        }
    }
    (out, means, stds)
}

/// Principal components by exact eigendecomposition of the population
/// covariance. Each basis column's largest-magnitude entry is positive.
pub fn pca(m: ArrayView2<f64>, n_components: usize) -> Result<Pca, PreprocessError> {
    let (n, p) = m.dim();
    let max = p.min(n.saturating_sub(1));
    if n_components == 0 || n_components > max {
        return Err(PreprocessError::InvalidComponents {
            requested: n_components,
            max,
        });
    }
    let (mean, _) = column_moments(m);
    let centered = &m - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / n as f64;
    let sym = DMatrix::from_fn(p, p, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(sym);

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Array1<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let rank = eigenvalues.iter().filter(|&&v| v >= RANK_TOL).count();
    if n_components > rank {
        return Err(PreprocessError::RankDeficient {
            requested: n_components,
            rank,
        });
    }

    let mut basis = Array2::zeros((p, n_components));
    for (c, &src) in order.iter().take(n_components).enumerate() {
        let v = eig.eigenvectors.column(src);
        let pivot = (0..p)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .expect("p >= 1");
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..p {
            basis[[r, c]] = sign * v[r];
        }
    }
    let scores = centered.dot(&basis);
    Ok(Pca {
        scores,
        basis,
        mean,
        eigenvalues,
    })
}

/// filter -> lognorm -> HVG -> standardize for expression; PCA for
/// morphology.
pub fn preprocess(data: &SpotDataset, cfg: &RunConfig) -> Result<PreprocessedData, PreprocessError> {
    let (filtered, kept) = filter_genes(data.tra.view(), cfg.tau)?;
    let logged = lognorm(filtered.view(), TARGET_SUM)?;
    let hvg = select_hvg(logged.view(), cfg.n_top_genes);
    let tra_lognorm = logged.select(Axis(1), &hvg);
    let (tra, gene_means, gene_stds) = standardize(tra_lognorm.view());
    let selected_genes: Vec<usize> = hvg.iter().map(|&h| kept[h]).collect();
    let selected_gene_ids = selected_genes.iter().map(|&g| data.gene_ids[g].clone()).collect();

    let pca = match &data.mor {
        Some(mor) => {
            let want = cfg.n_pcs.min(mor.ncols()).min(mor.nrows() - 1);
            Some(pca(mor.view(), want)?)
        }
        None => None,
    };
    Ok(PreprocessedData {
        tra,
        tra_lognorm,
        mor: pca.as_ref().map(|p| p.scores.clone()),
        selected_gene_ids,
        selected_genes,
        gene_means,
        gene_stds,
        pca,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn filter_drops_undetected_gene() {
        let m = array![[0.0, 1.0], [0.0, 2.0]];
        let (out, kept) = filter_genes(m.view(), 1).unwrap();
        assert_eq!(kept, vec![1]);
        assert_eq!(out, array![[1.0], [2.0]]);
    }

    #[test]
    fn filter_tau_zero_is_identity() {
        let m = array![[0.0, 1.0, 0.0], [0.0, 2.0, 0.0]];
        let (out, kept) = filter_genes(m.view(), 0).unwrap();
        assert_eq!(kept, vec![0, 1, 2]);
        assert_eq!(out, m);
    }

    #[test]
    fn filter_threshold_hand_count() {
        // Detection counts [2, 5, 7].
        let mut m = Array2::<f64>::zeros((8, 3));
        for i in 0..2 {
            m[[i, 0]] = 1.0;
        }
        for i in 0..5 {
            m[[i, 1]] = 1.0;
        }
        for i in 0..7 {
            m[[i, 2]] = 1.0;
        }
        let (_, kept) = filter_genes(m.view(), 5).unwrap();
        assert_eq!(kept, vec![1, 2]);
        assert_eq!(
            filter_genes(m.view(), 8).unwrap_err(),
            PreprocessError::AllGenesFiltered { tau: 8 }
        );
    }

    #[test]
    fn lognorm_examples() {
        assert_eq!(
            lognorm(array![[0.0, 0.0]].view(), 1e4).unwrap_err(),
            PreprocessError::ZeroLibrary { row: 0 }
        );
        let out = lognorm(array![[5.0]].view(), 10.0).unwrap();
        assert_abs_diff_eq!(out[[0, 0]], 11f64.ln(), epsilon = 1e-15);
        let out = lognorm(array![[2.0, 2.0]].view(), 4.0).unwrap();
        assert_abs_diff_eq!(out[[0, 0]], 3f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(out[[0, 1]], 3f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn lognorm_preserves_library_size() {
        let m = array![[1.0, 3.0, 0.0, 6.0], [10.0, 0.5, 0.25, 0.0]];
        let out = lognorm(m.view(), 1e4).unwrap();
        for row in out.rows() {
            let s: f64 = row.iter().map(|v| v.exp_m1()).sum();
            assert_abs_diff_eq!(s, 1e4, epsilon = 1e-8);
        }
    }

    #[test]
    fn hvg_ranking() {
        // Population variances scale sample variances uniformly, so the
        // ranking [1.0, 3.0, 2.0] is preserved.
        let a = 1f64.sqrt();
        let b = 3f64.sqrt();
        let c = 2f64.sqrt();
        let m = array![[-a, -b, -c], [a, b, c]];
        assert_eq!(select_hvg(m.view(), 2), vec![1, 2]);
        assert_eq!(select_hvg(m.view(), 10), vec![0, 1, 2]);
        let m = array![[5.0, 0.0], [5.0, 0.001]];
        assert_eq!(select_hvg(m.view(), 1), vec![1]);
    }

    #[test]
    fn standardize_examples() {
        let (out, mu, sd) = standardize(array![[1.0, 0.0], [1.0, 2.0], [1.0, 1.0]].view());
        assert_eq!(out.column(0).to_vec(), vec![0.0, 0.0, 0.0]);
        assert_eq!(mu[1], 1.0);
        assert_abs_diff_eq!(sd[1], (2.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        let (out, _, _) = standardize(array![[0.0], [2.0]].view());
        assert_eq!(out, array![[-1.0], [1.0]]);
    }

    #[test]
    fn standardize_is_idempotent() {
        let m = array![[1.0, 4.0], [2.0, -1.0], [7.0, 0.5], [3.0, 3.0]];
        let (once, _, _) = standardize(m.view());
        let (twice, _, _) = standardize(once.view());
        for (a, b) in once.iter().zip(twice.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn pca_on_diagonal_line() {
        let m = array![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [-1.0, -1.0]];
        let p = pca(m.view(), 1).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(p.basis[[0, 0]], h, epsilon = 1e-12);
        assert_abs_diff_eq!(p.basis[[1, 0]], h, epsilon = 1e-12);
        assert_abs_diff_eq!(p.eigenvalues[1], 0.0, epsilon = 1e-12);
        assert!(matches!(
            pca(m.view(), 2),
            Err(PreprocessError::RankDeficient { requested: 2, rank: 1 })
        ));
        assert!(matches!(pca(m.view(), 0), Err(PreprocessError::InvalidComponents { .. })));
    }

    /// Closed-form eigenpair of a 2x2 symmetric matrix [[a, b], [b, d]].
    fn top_eigen_2x2(a: f64, b: f64, d: f64) -> (f64, [f64; 2]) {
        let tr = a + d;
        let disc = ((a - d) * (a - d) / 4.0 + b * b).sqrt();
        let lambda = tr / 2.0 + disc;
        let v = if b.abs() > 0.0 {
            [lambda - d, b]
        } else if a >= d {
            [1.0, 0.0]
        } else {
            [0.0, 1.0]
        };
        let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
        (lambda, [v[0] / norm, v[1] / norm])
    }

    #[test]
    fn pca_matches_closed_form_eigen_oracle() {
        let m = array![[0.0, 0.0], [1.0, 2.0], [2.0, 4.0]];
        // Population covariance by hand: column means (1, 2).
        let (cxx, cxy, cyy) = (2.0 / 3.0, 4.0 / 3.0, 8.0 / 3.0);
        let (lambda, mut v) = top_eigen_2x2(cxx, cxy, cyy);
        let pivot = if v[0].abs() >= v[1].abs() { v[0] } else { v[1] };
        if pivot < 0.0 {
            v = [-v[0], -v[1]];
        }
        let p = pca(m.view(), 1).unwrap();
        assert_abs_diff_eq!(p.eigenvalues[0], lambda, epsilon = 1e-12);
        let expected = [
            -v[0] - 2.0 * v[1],
            0.0,
            v[0] + 2.0 * v[1],
        ];
        for (i, e) in expected.iter().enumerate() {
            assert_abs_diff_eq!(p.scores[[i, 0]], *e, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(p.scores[[2, 0]], 5f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn full_pca_reconstructs_and_orders_variance() {
        let m = array![
            [1.0, 2.0, 0.5],
            [0.0, -1.0, 3.0],
            [2.5, 0.3, -0.7],
            [-1.2, 1.1, 0.0],
            [0.4, 0.4, 2.2]
        ];
        let p = pca(m.view(), 3).unwrap();
        let recon = p.scores.dot(&p.basis.t()) + &p.mean.view().insert_axis(Axis(0));
        for (a, b) in recon.iter().zip(m.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
        let gram = p.basis.t().dot(&p.basis);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(gram[[i, j]], if i == j { 1.0 } else { 0.0 }, epsilon = 1e-8);
            }
        }
        assert!(p.eigenvalues.windows(2).into_iter().all(|w| w[0] >= w[1]));
        for c in p.basis.columns() {
            let pivot = c.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            assert!(pivot > 0.0);
        }
    }

    proptest! {
        #[test]
        fn hvg_is_permutation_equivariant(
            vals in prop::collection::vec(0.0f64..10.0, 24),
            perm_seed in any::<u64>(),
            n_top in 1usize..6,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let m = Array2::from_shape_vec((4, 6), vals).unwrap();
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let permuted = m.select(Axis(1), &perm);
            let (_, vars) = column_moments(m.view());
            // Exact ties make the tie-break order-dependent; skip those.
            let mut sorted = vars.to_vec();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
            let mut a: Vec<usize> = select_hvg(m.view(), n_top);
            let mut b: Vec<usize> = select_hvg(permuted.view(), n_top).into_iter().map(|j| perm[j]).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
