//! Synthetic spot datasets with planted spatial domains.
//!
//! Domains are rectangular blocks laid side by side on a jittered unit grid.
//! Every feature has a random baseline; feature `g` is a marker of domain
//! `g mod n_domains` and is raised there by `signal * noise_std`.
//! Observations are the profile plus Gaussian noise, clipped at zero.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::SpotDataset;

/// Jitter half-width around each grid position.
const JITTER: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_domains: usize,
    pub spots_per_domain: usize,
    /// Grid spacing between neighbouring spots.
    pub spacing: f64,
    pub genes: usize,
    /// Morphology feature count; 0 omits the modality.
    pub mor_dims: usize,
    pub signal_tra: f64,
    pub signal_mor: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_domains: 4,
            spots_per_domain: 50,
            spacing: 1.0,
            genes: 200,
            mor_dims: 64,
            signal_tra: 3.0,
            signal_mor: 2.0,
            noise_std: 1.0,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub dataset: SpotDataset,
    /// Noise-free expression profile of every spot.
    pub truth_tra: Array2<f64>,
    pub truth_mor: Option<Array2<f64>>,
}

/// Per-domain mean profiles, `n_domains x dims`.
fn profiles<R: Rng>(n_domains: usize, dims: usize, signal: f64, sigma: f64, rng: &mut R) -> Array2<f64> {
    let base: Vec<f64> = (0..dims).map(|_| rng.random_range(5.0..10.0) * sigma).collect();
    Array2::from_shape_fn((n_domains, dims), |(d, g)| {
        let marker = if g % n_domains == d { signal * sigma } else { 0.0 };
        base[g] + marker
    })
}

fn observe<R: Rng>(truth: &Array2<f64>, sigma: f64, rng: &mut R) -> Array2<f64> {
    let noise = Normal::new(0.0, sigma).expect("noise_std is finite and non-negative");
    truth.mapv(|v| (v + noise.sample(rng)).max(0.0))
}

pub fn generate(spec: &SynthSpec) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_domains * spec.spots_per_domain;
    let rows = (spec.spots_per_domain as f64).sqrt().ceil().max(1.0) as usize;
    let width = spec.spots_per_domain.div_ceil(rows);

    let mut coords = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for d in 0..spec.n_domains {
        for k in 0..spec.spots_per_domain {
            let i = d * spec.spots_per_domain + k;
            let gx = (d * width + k % width) as f64;
            let gy = (k / width) as f64;
            coords[[i, 0]] = (gx + rng.random_range(-JITTER..JITTER)) * spec.spacing;
            coords[[i, 1]] = (gy + rng.random_range(-JITTER..JITTER)) * spec.spacing;
            labels.push(d);
        }
    }

    let tra_profiles = profiles(spec.n_domains, spec.genes, spec.signal_tra, spec.noise_std, &mut rng);
    let truth_tra = tra_profiles.select(ndarray::Axis(0), &labels);
    let tra = observe(&truth_tra, spec.noise_std, &mut rng);

    let (mor, truth_mor) = if spec.mor_dims > 0 {
        let p = profiles(spec.n_domains, spec.mor_dims, spec.signal_mor, spec.noise_std, &mut rng);
        let truth = p.select(ndarray::Axis(0), &labels);
        (Some(observe(&truth, spec.noise_std, &mut rng)), Some(truth))
    } else {
        (None, None)
    };

    let ids = |prefix: &str, m: usize| (0..m).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();
    let dataset = SpotDataset {
        tra,
        mor,
        coords,
        spot_ids: ids("s", n),
        gene_ids: ids("g", spec.genes),
        mor_ids: ids("m", spec.mor_dims),
        labels: Some(labels),
    };
    SynthData {
        dataset,
        truth_tra,
        truth_mor,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{auto_radius, build_spatial_graph, NeighborGraph};

    fn connected_within(graph: &NeighborGraph, members: &[usize]) -> bool {
        let inside: std::collections::HashSet<usize> = members.iter().copied().collect();
        let mut seen = std::collections::HashSet::from([members[0]]);
        let mut stack = vec![members[0]];
        while let Some(v) = stack.pop() {
            for &u in &graph.neighbors[v] {
                if inside.contains(&u) && seen.insert(u) {
                    stack.push(u);
                }
            }
        }
        seen.len() == members.len()
    }

    #[test]
    fn zero_signal_gives_identical_profiles() {
        let s = generate(&SynthSpec {
            signal_tra: 0.0,
            signal_mor: 0.0,
            ..SynthSpec::default()
        });
        for row in s.truth_tra.rows() {
            assert_eq!(row, s.truth_tra.row(0));
        }
        let m = s.truth_mor.unwrap();
        for row in m.rows() {
            assert_eq!(row, m.row(0));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&SynthSpec::default());
        let b = generate(&SynthSpec::default());
        assert_eq!(a.dataset.tra, b.dataset.tra);
        assert_eq!(a.dataset.coords, b.dataset.coords);
        assert_eq!(a.dataset.mor, b.dataset.mor);
        let c = generate(&SynthSpec {
            seed: 43,
            ..SynthSpec::default()
        });
        assert_ne!(a.dataset.tra, c.dataset.tra);
    }

    #[test]
    fn shapes_and_labels() {
        let s = generate(&SynthSpec::default());
        let d = &s.dataset;
        assert_eq!(d.tra.dim(), (200, 200));
        assert_eq!(d.mor.as_ref().unwrap().dim(), (200, 64));
        assert_eq!(d.coords.dim(), (200, 2));
        let labels = d.labels.as_ref().unwrap();
        for k in 0..4 {
            assert_eq!(labels.iter().filter(|&&l| l == k).count(), 50);
        }
        assert!(d.tra.iter().all(|&v| v >= 0.0));
        d.validate().unwrap();
    }

    #[test]
    fn domains_are_connected_under_auto_radius() {
        let s = generate(&SynthSpec::default());
        let coords = s.dataset.coords.view();
        let g = build_spatial_graph(coords, auto_radius(coords, 4).unwrap()).unwrap();
        let labels = s.dataset.labels.unwrap();
        for d in 0..4 {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == d).collect();
            assert!(connected_within(&g, &members), "domain {d} is split");
        }
    }

    #[test]
    fn domain_means_approach_profiles_as_noise_vanishes() {
        let s = generate(&SynthSpec {
            noise_std: 1e-6,
            mor_dims: 0,
            ..SynthSpec::default()
        });
        let diff = &s.dataset.tra - &s.truth_tra;
        assert!(diff.iter().all(|v| v.abs() < 1e-4));
    }
}
