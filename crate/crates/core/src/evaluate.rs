//! Clustering agreement (ARI), neighbourhood rank preservation (MRRE) and
//! per-modality contributions to a linear classifier's decisions.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataio::ContributionSummary;
use crate::preprocess::standardize;

/// Soft-margin constant of the linear SVM.
const SVM_C: f64 = 1.0;
const SVM_EPOCHS: usize = 200;

#[derive(Debug, Error, PartialEq)]
pub enum EvaluateError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("neighbourhood size {k} is invalid for {m} points (need 1 <= k < m/2 and m >= k + 2)")]
    InvalidK { k: usize, m: usize },
    #[error("need at least 2 classes")]
    SingleClass,
    #[error("need at least one modality")]
    NoModalities,
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table; 0 when both partitions
/// are trivial and the index is undefined.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64, EvaluateError> {
    if a.len() != b.len() {
        return Err(EvaluateError::LengthMismatch(a.len(), b.len()));
    }
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| choose2(n)).sum();
    let sum_a: f64 = rows.values().map(|&n| choose2(n)).sum();
    let sum_b: f64 = cols.values().map(|&n| choose2(n)).sum();
    let total = choose2(a.len());
    if total == 0.0 {
        return Ok(0.0);
    }
    // (index - expected) / (max - expected), scaled by `total` so every
    // product stays integer-valued.
    let expected = sum_a * sum_b;
    let denom = 0.5 * (sum_a + sum_b) * total - expected;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((index * total - expected) / denom)
}

/// For point `i`, every other index ordered by distance, ties to the lower
/// index.
fn neighbour_order(x: ArrayView2<f64>, i: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..x.nrows())
        .filter(|&j| j != i)
        .map(|j| {
            let s: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            (s, j)
        })
        .collect();
    d.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
    d.into_iter().map(|p| p.1).collect()
}

/// `sum_i sum_{j in N_k(i) of from} |r_from - r_to| / r_from`.
fn rank_error_sum(from: ArrayView2<f64>, to: ArrayView2<f64>, k: usize) -> f64 {
    let m = from.nrows();
    (0..m)
        .into_par_iter()
        .map(|i| {
            let order_from = neighbour_order(from, i);
            let order_to = neighbour_order(to, i);
            let mut rank_to = vec![0usize; m];
            for (r, &j) in order_to.iter().enumerate() {
                rank_to[j] = r + 1;
            }
            order_from
                .iter()
                .take(k)
                .enumerate()
                .map(|(r, &j)| {
                    let r_from = (r + 1) as f64;
                    (r_from - rank_to[j] as f64).abs() / r_from
                })
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum()
}

/// Mean relative rank error of the `k` nearest input-space neighbours,
/// normalized by `M |M - 2k| / k`. With `bidirectional`, the embedding-space
/// neighbourhoods are scored too and the two directions averaged.
pub fn mrre(x_high: ArrayView2<f64>, x_low: ArrayView2<f64>, k: usize, bidirectional: bool) -> Result<f64, EvaluateError> {
    let m = x_high.nrows();
    if x_low.nrows() != m {
        return Err(EvaluateError::LengthMismatch(m, x_low.nrows()));
    }
    if k < 1 || 2 * k >= m || m < k + 2 {
        return Err(EvaluateError::InvalidK { k, m });
    }
    let norm = m as f64 * (m as f64 - 2.0 * k as f64).abs() / k as f64;
    let forward = rank_error_sum(x_high, x_low, k) / norm;
    if bidirectional {
        let backward = rank_error_sum(x_low, x_high, k) / norm;
        Ok(0.5 * (forward + backward))
    } else {
        Ok(forward)
    }
}

/// Per-spot, per-modality attributions of a one-vs-rest linear SVM.
#[derive(Clone, Debug)]
pub struct ModalityContribution {
    /// Spots x modalities.
    pub per_spot: Array2<f64>,
    pub summaries: Vec<ContributionSummary>,
    /// Training accuracy of the classifier.
    pub accuracy: f64,
}

/// One-vs-rest linear SVM: `weights` is classes x features.
#[derive(Clone, Debug)]
pub struct LinearSvm {
    pub classes: Vec<usize>,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearSvm {
    pub fn decision(&self, x: ndarray::ArrayView1<f64>) -> Array1<f64> {
        self.weights.dot(&x) + &self.bias
    }

    /// Row index into `classes` of the highest decision value.
    pub fn predict_index(&self, x: ndarray::ArrayView1<f64>) -> usize {
        let d = self.decision(x);
        let mut best = 0;
        for c in 1..d.len() {
            if d[c] > d[best] {
                best = c;
            }
        }
        best
    }
}

/// Pegasos stochastic sub-gradient training of hinge loss plus
/// `lambda/2 ||w||^2`, `lambda = 1 / (C N)`, bias as a constant feature.
pub fn train_svm(x: ArrayView2<f64>, labels: &[usize], seed: u64) -> Result<LinearSvm, EvaluateError> {
    let (n, d) = x.dim();
    if labels.len() != n {
        return Err(EvaluateError::LengthMismatch(n, labels.len()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(EvaluateError::SingleClass);
    }
    let lambda = 1.0 / (SVM_C * n as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Array2::zeros((classes.len(), d));
    let mut bias = Array1::zeros(classes.len());
    let mut order: Vec<usize> = (0..n).collect();
    for (ci, &class) in classes.iter().enumerate() {
        let mut w = Array1::<f64>::zeros(d);
        let mut b = 0.0;
        let mut t = 0usize;
        for _ in 0..SVM_EPOCHS {
            order.shuffle(&mut rng);
            for &i in &order {
                t += 1;
                let eta = 1.0 / (lambda * t as f64);
                let y = if labels[i] == class { 1.0 } else { -1.0 };
                let margin = y * (w.dot(&x.row(i)) + b);
                let shrink = 1.0 - eta * lambda;
                w *= shrink;
                b *= shrink;
                if margin < 1.0 {
                    w.scaled_add(eta * y, &x.row(i));
                    b += eta * y;
                }
            }
        }
        weights.row_mut(ci).assign(&w);
        bias[ci] = b;
    }
    Ok(LinearSvm { classes, weights, bias })
}

/// Linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(name: &str, values: impl IntoIterator<Item = f64>) -> ContributionSummary {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    ContributionSummary {
        modality: name.to_string(),
        mean: v.iter().sum::<f64>() / v.len().max(1) as f64,
        median: quantile(&v, 0.5),
        q1: quantile(&v, 0.25),
        q3: quantile(&v, 0.75),
    }
}

/// Per-feature attributions `w_j (x_j - mean_j)` of the predicted class for
/// every spot, on standardized features (so the mean is 0).
pub fn linear_attributions(svm: &LinearSvm, x: ArrayView2<f64>) -> Array2<f64> {
    let mut phi = Array2::zeros(x.dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let c = svm.predict_index(row);
        phi.row_mut(i).assign(&(&row * &svm.weights.row(c)));
    }
    phi
}

/// Train a linear SVM on the standardized column-concatenation of
/// `modalities` and merge per-feature attributions by the maximum
/// magnitude within each modality.
pub fn modality_contribution(
    modalities: &[(&str, ArrayView2<f64>)],
    labels: &[usize],
    seed: u64,
) -> Result<ModalityContribution, EvaluateError> {
    if modalities.is_empty() {
        return Err(EvaluateError::NoModalities);
    }
    let n = labels.len();
    for (_, m) in modalities {
        if m.nrows() != n {
            return Err(EvaluateError::LengthMismatch(n, m.nrows()));
        }
    }
    let views: Vec<ArrayView2<f64>> = modalities.iter().map(|(_, m)| *m).collect();
    let joined = concatenate(Axis(1), &views).expect("row counts checked");
    let (x, _, _) = standardize(joined.view());
    let svm = train_svm(x.view(), labels, seed)?;
    let phi = linear_attributions(&svm, x.view());

    let mut per_spot = Array2::zeros((n, modalities.len()));
    let mut start = 0;
    for (mi, (_, m)) in modalities.iter().enumerate() {
        let end = start + m.ncols();
        for i in 0..n {
            per_spot[[i, mi]] = phi
                .slice(ndarray::s![i, start..end])
                .iter()
                .fold(0.0f64, |acc, v| acc.max(v.abs()));
        }
        start = end;
    }
    let correct = (0..n)
        .filter(|&i| svm.classes[svm.predict_index(x.row(i))] == labels[i])
        .count();
    let summaries = modalities
        .iter()
        .enumerate()
        .map(|(mi, (name, _))| summarize(name, per_spot.column(mi).iter().copied()))
        .collect();
    Ok(ModalityContribution {
        per_spot,
        summaries,
        accuracy: correct as f64 / n as f64,
    })
}

/// Pearson correlation of each column pair, averaged over columns where
/// `reference` varies. A constant `estimate` column counts as 0.
pub fn mean_column_correlation(estimate: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<f64, EvaluateError> {
    if estimate.dim() != reference.dim() {
        return Err(EvaluateError::LengthMismatch(estimate.ncols(), reference.ncols()));
    }
    let n = estimate.nrows() as f64;
    let mut total = 0.0;
    let mut used = 0usize;
    for (a, b) in estimate.columns().into_iter().zip(reference.columns()) {
        let (ma, mb) = (a.sum() / n, b.sum() / n);
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b.iter()) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        if sbb == 0.0 {
            continue;
        }
        used += 1;
        if saa > 0.0 {
            total += sab / (saa * sbb).sqrt();
        }
    }
    Ok(if used == 0 { 0.0 } else { total / used as f64 })
}
