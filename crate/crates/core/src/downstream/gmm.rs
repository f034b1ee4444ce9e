//! Diagonal-covariance Gaussian mixtures fitted by EM.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::DownstreamError;

/// Lower bound on every component variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;
const MAX_ITER: usize = 500;
const REL_TOL: f64 = 1e-10;
/// Components with less total responsibility than this are collapsed.
const MIN_MASS: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct ClusterModel {
    pub k: usize,
    /// `k x d`.
    pub means: Array2<f64>,
    /// Diagonal variances, `k x d`.
    pub variances: Array2<f64>,
    pub weights: Array1<f64>,
    /// Labels renumbered by first appearance in spot order; components are
    /// reordered to match.
    pub labels: Vec<usize>,
    /// Log-likelihood after every EM iteration of the selected restart.
    pub loglik_history: Vec<f64>,
    pub discarded_restarts: usize,
}

impl ClusterModel {
    pub fn loglik(&self) -> f64 {
        self.loglik_history.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Result of a single EM run.
#[derive(Clone, Debug)]
pub struct EmRun {
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
    pub weights: Array1<f64>,
    pub resp: Array2<f64>,
    pub loglik_history: Vec<f64>,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: returns `k` row indices of `x`.
pub fn kmeans_pp<R: Rng + ?Sized>(x: ArrayView2<f64>, k: usize, rng: &mut R) -> Vec<usize> {
    let n = x.nrows();
    let mut centers = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(centers[0]))).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    centers
}

/// Per-spot, per-component `ln(w_c) + ln N(x | mu_c, diag(var_c))`.
fn log_joint(x: ArrayView2<f64>, means: &Array2<f64>, vars: &Array2<f64>, weights: &Array1<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let k = means.nrows();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let consts: Vec<f64> = (0..k)
        .map(|c| weights[c].ln() - 0.5 * (d as f64 * ln2pi + vars.row(c).iter().map(|v| v.ln()).sum::<f64>()))
        .collect();
    Array2::from_shape_fn((n, k), |(i, c)| {
        let mut q = 0.0;
        for j in 0..d {
            let diff = x[[i, j]] - means[[c, j]];
            q += diff * diff / vars[[c, j]];
        }
        consts[c] - 0.5 * q
    })
}

/// Normalize log-joint rows into responsibilities; returns the total
/// log-likelihood.
fn e_step(logp: &Array2<f64>) -> (Array2<f64>, f64) {
    let mut resp = logp.clone();
    let mut ll = 0.0;
    for mut row in resp.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        ll += lse;
        row.mapv_inplace(|v| (v - lse).exp());
    }
    (resp, ll)
}

/// Means, variances and mixing weights.
type Components = (Array2<f64>, Array2<f64>, Array1<f64>);

/// Weighted means and floored variances. `Err` if a component has
/// collapsed.
fn m_step(x: ArrayView2<f64>, resp: &Array2<f64>) -> Result<Components, DownstreamError> {
    let (n, d) = x.dim();
    let mass = resp.sum_axis(Axis(0));
    let k = mass.len();
    let mut means = resp.t().dot(&x);
    let mut vars = Array2::zeros((k, d));
    for c in 0..k {
        if mass[c] < MIN_MASS {
            return Err(DownstreamError::DegenerateComponent(c));
        }
        means.row_mut(c).mapv_inplace(|v| v / mass[c]);
        for j in 0..d {
            let mut s = 0.0;
            for i in 0..n {
                let diff = x[[i, j]] - means[[c, j]];
                s += resp[[i, c]] * diff * diff;
            }
            vars[[c, j]] = s / mass[c];
        }
        if d > 0 && vars.row(c).iter().all(|&v| v < VARIANCE_FLOOR) && k > 1 {
            return Err(DownstreamError::DegenerateComponent(c));
        }
    }
    vars.mapv_inplace(|v| v.max(VARIANCE_FLOOR));
    Ok((means, vars, mass / n as f64))
}

/// One EM run from a k-means++ hard assignment.
pub fn em_run<R: Rng + ?Sized>(x: ArrayView2<f64>, k: usize, rng: &mut R) -> Result<EmRun, DownstreamError> {
    let n = x.nrows();
    let centers = kmeans_pp(x, k, rng);
    let mut resp = Array2::zeros((n, k));
    for i in 0..n {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, &ci) in centers.iter().enumerate() {
            let d = sq_dist(x.row(i), x.row(ci));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        resp[[i, best]] = 1.0;
    }
    let (mut means, mut vars, mut weights) = m_step(x, &resp)?;
    let mut history = Vec::new();
    for _ in 0..MAX_ITER {
        let (r, ll) = e_step(&log_joint(x, &means, &vars, &weights));
        resp = r;
        let prev = history.last().copied();
        history.push(ll);
        if let Some(p) = prev {
            if ll - p <= REL_TOL * ll.abs().max(1.0) {
                break;
            }
        }
        (means, vars, weights) = m_step(x, &resp)?;
    }
    Ok(EmRun {
        means,
        variances: vars,
        weights,
        resp,
        loglik_history: history,
    })
}

/// Best of `restarts` EM runs by final log-likelihood; labels are the
/// argmax responsibilities.
pub fn gmm_cluster<R: Rng + ?Sized>(
    z: ArrayView2<f64>,
    k: usize,
    restarts: usize,
    rng: &mut R,
) -> Result<ClusterModel, DownstreamError> {
    let n = z.nrows();
    if k == 0 || n < k {
        return Err(DownstreamError::InvalidClusterCount { k, n });
    }
    let mut best: Option<EmRun> = None;
    let mut discarded = 0;
    for _ in 0..restarts.max(1) {
        match em_run(z, k, rng) {
            Ok(run) => {
                let ll = *run.loglik_history.last().expect("at least one iteration");
                if best.as_ref().is_none_or(|b| ll > *b.loglik_history.last().unwrap()) {
                    best = Some(run);
                }
            }
            Err(DownstreamError::DegenerateComponent(_)) => discarded += 1,
            Err(e) => return Err(e),
        }
    }
    let run = best.ok_or(DownstreamError::AllRestartsDegenerate(discarded))?;

    let raw: Vec<usize> = run
        .resp
        .rows()
        .into_iter()
        .map(|r| {
            let mut arg = 0;
            for c in 1..k {
                if r[c] > r[arg] {
                    arg = c;
                }
            }
            arg
        })
        .collect();
    // Component order: first appearance in spot order, unused ones last.
    let mut order: Vec<usize> = Vec::with_capacity(k);
    for &l in &raw {
        if !order.contains(&l) {
            order.push(l);
        }
    }
    order.extend((0..k).filter(|c| !raw.contains(c)));
    let mut rank = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    Ok(ClusterModel {
        k,
        means: run.means.select(Axis(0), &order),
        variances: run.variances.select(Axis(0), &order),
        weights: run.weights.select(Axis(0), &order),
        labels: raw.iter().map(|&l| rank[l]).collect(),
        loglik_history: run.loglik_history,
        discarded_restarts: discarded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::ari;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn two_blobs(seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut x = Array2::zeros((40, 1));
        let mut truth = Vec::new();
        for i in 0..40 {
            let c = i / 20;
            x[[i, 0]] = 100.0 * c as f64 + noise.sample(&mut rng);
            truth.push(c);
        }
        (x, truth)
    }

    #[test]
    fn single_component_is_the_data_mean() {
        let (x, _) = two_blobs(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = gmm_cluster(x.view(), 1, 3, &mut rng).unwrap();
        assert!(m.labels.iter().all(|&l| l == 0));
        assert!((m.means[[0, 0]] - x.mean().unwrap()).abs() < 1e-9);
        assert!((m.weights.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn two_blobs_recovered() {
        let (x, truth) = two_blobs(7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = gmm_cluster(x.view(), 2, 5, &mut rng).unwrap();
        assert_eq!(ari(&m.labels, &truth).unwrap(), 1.0);
    }

    #[test]
    fn loglik_never_decreases() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_simple_fn((60, 3), || rng.random_range(-3.0..3.0));
            let run = em_run(x.view(), 3, &mut rng).unwrap();
            for w in run.loglik_history.windows(2) {
                assert!(w[1] - w[0] >= -1e-9, "seed {seed}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn axis_permutation_and_sign_flip_preserve_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let x = Array2::from_shape_fn((45, 2), |(i, j)| (i / 15) as f64 * 4.0 * (j as f64 + 1.0) + noise.sample(&mut rng));
        let mut y = Array2::zeros((45, 2));
        for i in 0..45 {
            y[[i, 0]] = -x[[i, 1]] + 10.0;
            y[[i, 1]] = x[[i, 0]] - 3.0;
        }
        let a = gmm_cluster(x.view(), 3, 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = gmm_cluster(y.view(), 3, 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(ari(&a.labels, &b.labels).unwrap(), 1.0);
    }

    #[test]
    fn invalid_k_rejected() {
        let x = Array2::<f64>::zeros((3, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gmm_cluster(x.view(), 0, 1, &mut rng).is_err());
        assert!(gmm_cluster(x.view(), 4, 1, &mut rng).is_err());
    }

    #[test]
    fn variances_respect_floor() {
        let mut x = Array2::zeros((10, 2));
        for i in 5..10 {
            x[[i, 0]] = 1.0;
        }
        let m = gmm_cluster(x.view(), 1, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(m.variances.iter().all(|&v| v >= VARIANCE_FLOOR));
    }
}
