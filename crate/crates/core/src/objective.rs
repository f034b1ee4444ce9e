//! Kernel similarities, the topology fusion loss, the reconstruction loss,
//! Adam, and the full-batch training loop.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::{LossRecord, RunConfig};
use crate::network::{EmbeddingSet, FusionNetwork, Inputs, ModelParams, ModelShape, NetworkError, NormalizedAdjacency, OutputGrads};
use crate::preprocess::PreprocessedData;
use crate::topology::{knn_graph, sample_pairs, NeighborGraph, PairBatch, TopologyError};

pub const DEFAULT_CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("training needs at least 2 spots, got {0}")]
    TooFewSpots(usize),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelConfig {
    pub nu: f64,
    pub clamp_eps: f64,
}

impl KernelConfig {
    pub fn new(nu: f64) -> Self {
        Self {
            nu,
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }
}

/// `(1 + d2 / nu)^(-(nu + 1) / nu)` for a squared distance `d2`.
pub fn kappa_sq(d2: f64, nu: f64) -> f64 {
    (1.0 + d2 / nu).powf(-(nu + 1.0) / nu)
}

/// Derivative of [`kappa_sq`] with respect to `d2`.
fn kappa_sq_grad(d2: f64, nu: f64) -> f64 {
    let base = 1.0 + d2 / nu;
    -(nu + 1.0) / (nu * nu) * base.powf(-(nu + 1.0) / nu - 1.0)
}

pub fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Heavy-tailed similarity between two vectors.
pub fn kappa(a: ArrayView1<f64>, b: ArrayView1<f64>, nu: f64) -> f64 {
    kappa_sq(sq_dist(a, b), nu)
}

/// Target similarity: `kappa` boosted by `e^alpha` for augmented pairs,
/// capped at 1.
pub fn topo_prior(y_i: ArrayView1<f64>, y_j: ArrayView1<f64>, augmented: bool, alpha: f64, nu: f64) -> f64 {
    let k = kappa(y_i, y_j, nu);
    if augmented {
        (alpha.exp() * k).min(1.0)
    } else {
        k
    }
}

/// One binary cross-entropy term `-(t ln s + (1 - t) ln(1 - s))` with `s`
/// clamped to `[eps, 1 - eps]`.
pub fn pair_bce(t: f64, s: f64, eps: f64) -> f64 {
    let s = s.clamp(eps, 1.0 - eps);
    -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
}

/// `-(t ln t + (1 - t) ln(1 - t))`, with `0 ln 0 = 0`.
pub fn binary_entropy(t: f64) -> f64 {
    let xlx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    -(xlx(t) + xlx(1.0 - t))
}

/// Value of the topology loss and its gradient w.r.t. the fused embeddings
/// of both views. The prior is treated as a constant, so the modality
/// embeddings receive no gradient from this term.
#[derive(Clone, Debug)]
pub struct TopoLoss {
    pub value: f64,
    pub grad_z: Array2<f64>,
    pub grad_z_aug: Array2<f64>,
}

/// Embeddings of the original view and of the view where one modality's
/// input was replaced by its augmented copy.
#[derive(Clone, Copy, Debug)]
pub struct Views<'a> {
    pub y: ArrayView2<'a, f64>,
    pub y_aug: ArrayView2<'a, f64>,
    pub z: ArrayView2<'a, f64>,
    pub z_aug: ArrayView2<'a, f64>,
}

pub fn topo_loss(batch: &PairBatch, views: Views, cfg: KernelConfig, alpha: f64) -> TopoLoss {
    let mut grad_z = Array2::zeros(views.z.dim());
    let mut grad_z_aug = Array2::zeros(views.z_aug.dim());
    let mut value = 0.0;
    for ((&a, &b), &aug) in batch.anchors.iter().zip(&batch.partners).zip(&batch.h) {
        let (y_b, z_b) = if aug {
            (views.y_aug.row(b), views.z_aug.row(b))
        } else {
            (views.y.row(b), views.z.row(b))
        };
        let t = topo_prior(views.y.row(a), y_b, aug, alpha, cfg.nu);
        let z_a = views.z.row(a);
        let d2 = sq_dist(z_a, z_b);
        let s = kappa_sq(d2, cfg.nu);
        value += pair_bce(t, s, cfg.clamp_eps);
        if s <= cfg.clamp_eps || s >= 1.0 - cfg.clamp_eps {
            continue;
        }
        // dL/dd2 = dL/ds * ds/dd2; dd2/dz_a = 2 (z_a - z_b).
        let dl_ds = -(t / s - (1.0 - t) / (1.0 - s));
        let coef = 2.0 * dl_ds * kappa_sq_grad(d2, cfg.nu);
        let diff = &z_a - &z_b;
        grad_z.row_mut(a).scaled_add(coef, &diff);
        if aug {
            grad_z_aug.row_mut(b).scaled_add(-coef, &diff);
        } else {
            grad_z.row_mut(b).scaled_add(-coef, &diff);
        }
    }
    TopoLoss {
        value,
        grad_z,
        grad_z_aug,
    }
}

/// Mean over spots of the squared row error, and its gradient w.r.t. `x_hat`.
pub fn recon_loss(x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> Result<(f64, Array2<f64>), ObjectiveError> {
    if x.dim() != x_hat.dim() {
        return Err(ObjectiveError::ShapeMismatch(x.dim(), x_hat.dim()));
    }
    let n = x.nrows().max(1) as f64;
    let diff = &x_hat - &x;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((value, diff * (2.0 / n)))
}

/// Adam with bias correction over a fixed list of flat tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Moments sized for tensors of the given lengths.
    pub fn with_sizes(sizes: impl IntoIterator<Item = usize>, lr: f64) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self::with_sizes(params.tensors().iter().map(|(_, _, t)| t.len()), lr)
    }

    /// One update of `params` given `grads`, both in moment order.
    pub fn step_slices(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    pub fn step(&mut self, net: &mut FusionNetwork) {
        let grads = net.grads.clone();
        let grads = grads.tensors().into_iter().map(|(_, _, g)| g).collect();
        self.step_slices(net.params_mut().tensors_mut(), grads);
    }
}

/// Everything needed to resume or inspect a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub network: FusionNetwork,
    pub optimizer: Adam,
    pub epoch: usize,
    pub history: Vec<LossRecord>,
    pub rng: ChaCha8Rng,
    /// Augmentations that fell back to the unmodified row.
    pub augmentation_fallbacks: usize,
}

/// Per-modality kNN graphs in the current embedding spaces.
struct Topologies {
    tra: NeighborGraph,
    mor: Option<NeighborGraph>,
}

impl Topologies {
    fn build(tra: ArrayView2<f64>, mor: Option<ArrayView2<f64>>, cfg: &RunConfig) -> Result<Self, TopologyError> {
        Ok(Self {
            tra: knn_graph(tra, cfg.k_tr)?,
            mor: mor.map(|m| knn_graph(m, cfg.k_mo)).transpose()?,
        })
    }
}

pub fn model_shape(data: &PreprocessedData, cfg: &RunConfig) -> ModelShape {
    ModelShape {
        n_genes: data.tra.ncols(),
        n_mor: data.mor.as_ref().map(|m| m.ncols()),
        d_emb: cfg.d_emb,
        n_mlp: cfg.n_mlp,
        fusion_mode: cfg.fusion_mode,
    }
}

pub fn inputs(data: &PreprocessedData) -> Inputs<'_> {
    Inputs {
        tra: data.tra.view(),
        mor: data.mor.as_ref().map(|m| m.view()),
    }
}

/// A freshly initialized model and optimizer; the generator is seeded from
/// `cfg.seed` and continues into training.
pub fn init_state(data: &PreprocessedData, cfg: &RunConfig) -> TrainState {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let network = FusionNetwork::new(model_shape(data, cfg), cfg.theta, &mut rng);
    let optimizer = Adam::new(network.params(), cfg.lr);
    TrainState {
        network,
        optimizer,
        epoch: 0,
        history: Vec::new(),
        rng,
        augmentation_fallbacks: 0,
    }
}

/// One epoch: original view plus one augmented view per modality, loss
/// terms, backward passes and an Adam step.
fn train_epoch(
    state: &mut TrainState,
    data: &PreprocessedData,
    adj: &NormalizedAdjacency,
    topo: &Topologies,
    cfg: &RunConfig,
) -> Result<LossRecord, ObjectiveError> {
    let n = data.tra.nrows();
    let kernel = KernelConfig::new(cfg.nu);
    let base = inputs(data);
    let net = &mut state.network;
    let rng = &mut state.rng;
    net.zero_grad();

    let (emb, cache) = net.forward(base, adj, Some((cfg.dropout, &mut *rng)))?;

    let pairs_tra = sample_pairs(n, &topo.tra, base.tra, cfg.n_neg, cfg.r_u_tr, rng)?;
    state.augmentation_fallbacks += pairs_tra.fallbacks;
    let aug_inputs = Inputs {
        tra: pairs_tra.aug_payload.view(),
        mor: base.mor,
    };
    let (emb_tra, cache_tra) = net.forward(aug_inputs, adj, Some((cfg.dropout, &mut *rng)))?;
    let loss_tra = topo_loss(
        &pairs_tra,
        Views {
            y: emb.y_tra.view(),
            y_aug: emb_tra.y_tra.view(),
            z: emb.z.view(),
            z_aug: emb_tra.z.view(),
        },
        kernel,
        cfg.alpha,
    );

    let mut mor_pass = None;
    if let (Some(mor), Some(graph), Some(y_mor)) = (base.mor, &topo.mor, &emb.y_mor) {
        let pairs = sample_pairs(n, graph, mor, cfg.n_neg, cfg.r_u_mo, rng)?;
        state.augmentation_fallbacks += pairs.fallbacks;
        let aug_inputs = Inputs {
            tra: base.tra,
            mor: Some(pairs.aug_payload.view()),
        };
        let (emb_mor, cache_mor) = net.forward(aug_inputs, adj, Some((cfg.dropout, &mut *rng)))?;
        let loss = topo_loss(
            &pairs,
            Views {
                y: y_mor.view(),
                y_aug: emb_mor.y_mor.as_ref().expect("morphology branch present").view(),
                z: emb.z.view(),
                z_aug: emb_mor.z.view(),
            },
            kernel,
            cfg.alpha,
        );
        mor_pass = Some((loss, cache_mor));
    }

    let (l_recon, d_recon) = recon_loss(data.tra.view(), emb.x_hat.view())?;
    let l_topo_mor = mor_pass.as_ref().map_or(0.0, |(l, _)| l.value);
    let total = loss_tra.value + l_topo_mor + cfg.lambda_ * l_recon;
    if !total.is_finite() {
        return Err(ObjectiveError::NonFiniteLoss { epoch: state.epoch });
    }

    let mut dz = loss_tra.grad_z;
    if let Some((l, _)) = &mor_pass {
        dz += &l.grad_z;
    }
    net.backward(
        &cache,
        adj,
        &OutputGrads {
            z: Some(dz),
            x_hat: Some(d_recon * cfg.lambda_),
            ..Default::default()
        },
    )?;
    net.backward(
        &cache_tra,
        adj,
        &OutputGrads {
            z: Some(loss_tra.grad_z_aug),
            ..Default::default()
        },
    )?;
    if let Some((l, c)) = mor_pass {
        net.backward(
            &c,
            adj,
            &OutputGrads {
                z: Some(l.grad_z_aug),
                ..Default::default()
            },
        )?;
    }
    state.optimizer.step(net);
    if !net.params().all_finite() {
        return Err(ObjectiveError::NonFiniteLoss { epoch: state.epoch });
    }
    Ok(LossRecord {
        epoch: state.epoch,
        l_topo_tra: loss_tra.value,
        l_topo_mor,
        l_recon,
        total,
    })
}

/// Train for `cfg.epochs` epochs over the spatial graph `spatial`. Returns
/// the final state and the embeddings of a dropout-free forward pass.
pub fn train(
    data: &PreprocessedData,
    spatial: &NeighborGraph,
    cfg: &RunConfig,
) -> Result<(TrainState, EmbeddingSet), ObjectiveError> {
    let mut state = init_state(data, cfg);
    let embeddings = train_from(&mut state, data, spatial, cfg)?;
    Ok((state, embeddings))
}

/// Continue training `state` until `cfg.epochs` epochs have run.
pub fn train_from(
    state: &mut TrainState,
    data: &PreprocessedData,
    spatial: &NeighborGraph,
    cfg: &RunConfig,
) -> Result<EmbeddingSet, ObjectiveError> {
    let n = data.tra.nrows();
    if n < 2 {
        return Err(ObjectiveError::TooFewSpots(n));
    }
    let adj = NormalizedAdjacency::from_graph(spatial);
    let mut topo = Topologies::build(data.tra.view(), data.mor.as_ref().map(|m| m.view()), cfg)?;
    while state.epoch < cfg.epochs {
        if state.epoch > 0 && state.epoch.is_multiple_of(cfg.knn_refresh) {
            let current = state.network.embed(inputs(data), &adj)?;
            topo = Topologies::build(current.y_tra.view(), current.y_mor.as_ref().map(|m| m.view()), cfg)?;
        }
        let record = train_epoch(state, data, &adj, &topo, cfg)?;
        state.history.push(record);
        state.epoch += 1;
    }
    Ok(state.network.embed(inputs(data), &adj)?)
}
