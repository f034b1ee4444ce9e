//! The fusion network: one graph convolution encoder per modality over the
//! spatial graph, a fusion MLP producing the shared embedding `z`, and a
//! linear decoder reconstructing the selected genes from `z`.
//!
//! Forward passes return caches; [`FusionNetwork::backward`] consumes a cache
//! and accumulates reverse-mode gradients into the network's gradient
//! buffers.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::FusionMode;
use crate::topology::NeighborGraph;

pub const CHECKPOINT_FORMAT: &str = "topofuse-ckpt-v1";

/// Graph convolution layers per modality encoder.
pub const GCN_DEPTH: usize = 2;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("cache is from parameter version {cache}, network is at {current}")]
    StaleCache { cache: u64, current: u64 },
    #[error("modality mismatch: {0}")]
    ModalityMismatch(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

fn check_shape(what: &'static str, got: (usize, usize), expected: (usize, usize)) -> Result<(), NetworkError> {
    if got == expected {
        Ok(())
    } else {
        Err(NetworkError::ShapeMismatch { what, expected, got })
    }
}

/// A fully connected layer `x W + b`, `W` being `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..limit));
        Self {
            w,
            b: Array1::zeros(fan_out),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            w: Array2::eye(dim),
            b: Array1::zeros(dim),
        }
    }

    fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.fan_in(), self.fan_out())
    }
}

/// `D^-1/2 (A + I) D^-1/2` in row-compressed form, with `D` the row degree
/// of `A + I`.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    rows: Vec<Vec<(usize, f64)>>,
}

impl NormalizedAdjacency {
    pub fn from_graph(graph: &NeighborGraph) -> Self {
        let deg: Vec<f64> = graph.neighbors.iter().map(|ns| 1.0 + ns.len() as f64).collect();
        let rows = graph
            .neighbors
            .iter()
            .enumerate()
            .map(|(i, ns)| {
                let mut row: Vec<(usize, f64)> = ns
                    .iter()
                    .chain(std::iter::once(&i))
                    .map(|&j| (j, 1.0 / (deg[i] * deg[j]).sqrt()))
                    .collect();
                row.sort_by_key(|&(j, _)| j);
                row
            })
            .collect();
        Self { rows }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.dim());
        for (i, row) in self.rows.iter().enumerate() {
            let mut o = out.row_mut(i);
            for &(j, a) in row {
                o.scaled_add(a, &x.row(j));
            }
        }
        out
    }

    pub fn apply_transpose(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.dim());
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, a) in row {
                out.row_mut(j).scaled_add(a, &x.row(i));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.n();
        let mut m = Array2::zeros((n, n));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, a) in row {
                m[[i, j]] = a;
            }
        }
        m
    }
}

fn relu_inplace(m: &mut Array2<f64>) {
    m.mapv_inplace(|v| v.max(0.0));
}

fn relu_mask(dout: &mut Array2<f64>, pre: &Array2<f64>) {
    ndarray::Zip::from(dout).and(pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
}

fn accumulate_dense(grad: &mut Dense, input: ArrayView2<f64>, dpre: &Array2<f64>) {
    grad.w += &input.t().dot(dpre);
    grad.b += &dpre.sum_axis(Axis(0));
}

/// Per-layer inputs and pre-activations of an MLP pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Dense layers with ReLU between them and a linear last layer.
pub fn mlp_forward(x: ArrayView2<f64>, layers: &[Dense]) -> Result<(Array2<f64>, MlpCache), NetworkError> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut h = x.to_owned();
    for (l, layer) in layers.iter().enumerate() {
        check_shape("dense input", (h.nrows(), h.ncols()), (h.nrows(), layer.fan_in()))?;
        let p = layer.apply(h.view());
        let mut next = p.clone();
        if l + 1 < layers.len() {
            relu_inplace(&mut next);
        }
        inputs.push(h);
        pre.push(p);
        h = next;
    }
    Ok((h, MlpCache { inputs, pre }))
}

/// Accumulate layer gradients into `grads`; returns the gradient w.r.t. the
/// MLP input.
pub fn mlp_backward(cache: &MlpCache, layers: &[Dense], dout: Array2<f64>, grads: &mut [Dense]) -> Array2<f64> {
    let mut d = dout;
    for l in (0..layers.len()).rev() {
        if l + 1 < layers.len() {
            relu_mask(&mut d, &cache.pre[l]);
        }
        accumulate_dense(&mut grads[l], cache.inputs[l].view(), &d);
        d = d.dot(&layers[l].w.t());
    }
    d
}

/// Flat `w`, `b` views of each layer, in order.
pub fn dense_slices(layers: &[Dense]) -> Vec<&[f64]> {
    layers
        .iter()
        .flat_map(|l| [l.w.as_slice().expect("standard layout"), l.b.as_slice().expect("standard layout")])
        .collect()
}

pub fn dense_slices_mut(layers: &mut [Dense]) -> Vec<&mut [f64]> {
    layers
        .iter_mut()
        .flat_map(|Dense { w, b }| {
            [
                w.as_slice_mut().expect("standard layout"),
                b.as_slice_mut().expect("standard layout"),
            ]
        })
        .collect()
}

/// Propagated inputs `Â H` and pre-activations of a GCN pass.
#[derive(Clone, Debug)]
pub struct GcnCache {
    propagated: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Graph convolution stack: each layer computes `Â H W + b`, ReLU between
/// layers, linear output.
pub fn gcn_forward(
    x: ArrayView2<f64>,
    adj: &NormalizedAdjacency,
    layers: &[Dense],
) -> Result<(Array2<f64>, GcnCache), NetworkError> {
    if x.nrows() != adj.n() {
        return Err(NetworkError::ShapeMismatch {
            what: "graph nodes vs feature rows",
            expected: (adj.n(), x.ncols()),
            got: x.dim(),
        });
    }
    let mut propagated = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut h = x.to_owned();
    for (l, layer) in layers.iter().enumerate() {
        check_shape("gcn layer input", h.dim(), (h.nrows(), layer.fan_in()))?;
        let ah = adj.apply(h.view());
        let p = layer.apply(ah.view());
        let mut next = p.clone();
        if l + 1 < layers.len() {
            relu_inplace(&mut next);
        }
        propagated.push(ah);
        pre.push(p);
        h = next;
    }
    Ok((h, GcnCache { propagated, pre }))
}

/// Accumulate GCN layer gradients; input gradients are not needed by any
/// caller and are not formed.
pub fn gcn_backward(
    cache: &GcnCache,
    adj: &NormalizedAdjacency,
    layers: &[Dense],
    dout: Array2<f64>,
    grads: &mut [Dense],
) {
    let mut d = dout;
    for l in (0..layers.len()).rev() {
        if l + 1 < layers.len() {
            relu_mask(&mut d, &cache.pre[l]);
        }
        accumulate_dense(&mut grads[l], cache.propagated[l].view(), &d);
        if l > 0 {
            let dah = d.dot(&layers[l].w.t());
            d = adj.apply_transpose(dah.view());
        }
    }
}

#[derive(Clone, Debug)]
pub struct FuseCache {
    mlp: MlpCache,
    has_mor: bool,
}

/// Combine the modality embeddings and run the fusion MLP.
pub fn fuse_forward(
    y_tra: ArrayView2<f64>,
    y_mor: Option<ArrayView2<f64>>,
    theta: f64,
    mode: FusionMode,
    fusion: &[Dense],
) -> Result<(Array2<f64>, FuseCache), NetworkError> {
    let y = match y_mor {
        None => y_tra.to_owned(),
        Some(m) => {
            check_shape("morphology embedding", m.dim(), y_tra.dim())?;
            match mode {
                FusionMode::Sum => &y_tra * theta + &m * (1.0 - theta),
                FusionMode::Concat => ndarray::concatenate(Axis(1), &[m, y_tra]).expect("rows match"),
            }
        }
    };
    let (z, mlp) = mlp_forward(y.view(), fusion)?;
    Ok((
        z,
        FuseCache {
            mlp,
            has_mor: y_mor.is_some(),
        },
    ))
}

/// Returns the gradients w.r.t. `y_tra` and `y_mor`.
pub fn fuse_backward(
    cache: &FuseCache,
    fusion: &[Dense],
    theta: f64,
    mode: FusionMode,
    dz: Array2<f64>,
    grads: &mut [Dense],
) -> (Array2<f64>, Option<Array2<f64>>) {
    let dy = mlp_backward(&cache.mlp, fusion, dz, grads);
    if !cache.has_mor {
        return (dy, None);
    }
    match mode {
        FusionMode::Sum => (&dy * theta, Some(&dy * (1.0 - theta))),
        FusionMode::Concat => {
            let d = dy.ncols() / 2;
            (
                dy.slice(ndarray::s![.., d..]).to_owned(),
                Some(dy.slice(ndarray::s![.., ..d]).to_owned()),
            )
        }
    }
}

/// Linear decoder from `z` to the selected genes.
pub fn decode_forward(z: ArrayView2<f64>, decoder: &[Dense]) -> Result<(Array2<f64>, MlpCache), NetworkError> {
    mlp_forward(z, decoder)
}

/// Layer sizes of a [`FusionNetwork`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_genes: usize,
    pub n_mor: Option<usize>,
    pub d_emb: usize,
    pub n_mlp: usize,
    pub fusion_mode: FusionMode,
}

/// Trainable weights. Also used, zero-initialized, as gradient buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub gnn_tra: Vec<Dense>,
    pub gnn_mor: Option<Vec<Dense>>,
    pub fusion: Vec<Dense>,
    pub decoder: Vec<Dense>,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(shape: &ModelShape, rng: &mut R) -> Self {
        let d = shape.d_emb;
        let gcn = |input: usize, rng: &mut R| {
            let mut layers = vec![Dense::glorot(input, d, rng)];
            for _ in 1..GCN_DEPTH {
                layers.push(Dense::glorot(d, d, rng));
            }
            layers
        };
        let gnn_tra = gcn(shape.n_genes, rng);
        let gnn_mor = shape.n_mor.map(|m| gcn(m, rng));
        let fusion_in = match (shape.fusion_mode, shape.n_mor) {
            (FusionMode::Concat, Some(_)) => 2 * d,
            _ => d,
        };
        let fusion = (0..shape.n_mlp)
            .map(|l| Dense::glorot(if l == 0 { fusion_in } else { d }, d, rng))
            .collect();
        let decoder = vec![Dense::glorot(d, shape.n_genes, rng)];
        Self {
            gnn_tra,
            gnn_mor,
            fusion,
            decoder,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |ls: &Vec<Dense>| ls.iter().map(Dense::zeros_like).collect::<Vec<_>>();
        Self {
            gnn_tra: z(&self.gnn_tra),
            gnn_mor: self.gnn_mor.as_ref().map(z),
            fusion: z(&self.fusion),
            decoder: z(&self.decoder),
        }
    }

    fn groups(&self) -> Vec<(&'static str, &Vec<Dense>)> {
        let mut g = vec![("gnn_tra", &self.gnn_tra)];
        if let Some(m) = &self.gnn_mor {
            g.push(("gnn_mor", m));
        }
        g.push(("fusion", &self.fusion));
        g.push(("decoder", &self.decoder));
        g
    }

    /// Named tensors in a fixed order: `<group>.<layer>.w|b`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (name, layers) in self.groups() {
            for (l, layer) in layers.iter().enumerate() {
                let w = layer.w.as_slice().expect("standard layout");
                let b = layer.b.as_slice().expect("standard layout");
                out.push((format!("{name}.{l}.w"), layer.w.shape().to_vec(), w));
                out.push((format!("{name}.{l}.b"), layer.b.shape().to_vec(), b));
            }
        }
        out
    }

    /// Mutable flat views in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let Self {
            gnn_tra,
            gnn_mor,
            fusion,
            decoder,
        } = self;
        std::iter::once(gnn_tra)
            .chain(gnn_mor.as_mut())
            .chain([fusion, decoder])
            .flat_map(|layers| dense_slices_mut(layers))
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Per-modality embeddings, the fused embedding and the reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub y_tra: Array2<f64>,
    pub y_mor: Option<Array2<f64>>,
    pub z: Array2<f64>,
    pub x_hat: Array2<f64>,
}

/// Model inputs for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Inputs<'a> {
    pub tra: ArrayView2<'a, f64>,
    pub mor: Option<ArrayView2<'a, f64>>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    tra: GcnCache,
    mor: Option<GcnCache>,
    fuse: FuseCache,
    decoder: MlpCache,
}

/// Upstream gradients of the loss w.r.t. the network outputs.
#[derive(Clone, Debug, Default)]
pub struct OutputGrads {
    pub z: Option<Array2<f64>>,
    pub x_hat: Option<Array2<f64>>,
    pub y_tra: Option<Array2<f64>>,
    pub y_mor: Option<Array2<f64>>,
}

#[derive(Clone, Debug)]
pub struct FusionNetwork {
    params: ModelParams,
    pub grads: ModelParams,
    pub shape: ModelShape,
    pub theta: f64,
    version: u64,
}

fn dropout<R: Rng + ?Sized>(x: ArrayView2<f64>, p: f64, rng: &mut R) -> Array2<f64> {
    if p <= 0.0 {
        return x.to_owned();
    }
    let keep = 1.0 / (1.0 - p);
    x.mapv(|v| if rng.random::<f64>() < p { 0.0 } else { v * keep })
}

impl FusionNetwork {
    pub fn new<R: Rng + ?Sized>(shape: ModelShape, theta: f64, rng: &mut R) -> Self {
        Self::from_params(ModelParams::init(&shape, rng), shape, theta)
    }

    pub fn from_params(params: ModelParams, shape: ModelShape, theta: f64) -> Self {
        let grads = params.zeros_like();
        Self {
            params,
            grads,
            shape,
            theta,
            version: 0,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut ModelParams {
        self.version += 1;
        &mut self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grad(&mut self) {
        self.grads = self.params.zeros_like();
    }

    fn check_inputs(&self, inputs: &Inputs) -> Result<(), NetworkError> {
        check_shape(
            "expression input",
            inputs.tra.dim(),
            (inputs.tra.nrows(), self.shape.n_genes),
        )?;
        match (inputs.mor, self.shape.n_mor) {
            (Some(m), Some(p)) => check_shape("morphology input", m.dim(), (inputs.tra.nrows(), p)),
            (None, None) => Ok(()),
            (Some(_), None) => Err(NetworkError::ModalityMismatch("model was built without morphology")),
            (None, Some(_)) => Err(NetworkError::ModalityMismatch("morphology matrix missing")),
        }
    }

    /// Forward pass. With `train = Some((p, rng))`, inverted dropout with
    /// probability `p` is applied to the encoder inputs.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        inputs: Inputs,
        adj: &NormalizedAdjacency,
        train: Option<(f64, &mut R)>,
    ) -> Result<(EmbeddingSet, ForwardCache), NetworkError> {
        self.check_inputs(&inputs)?;
        let (tra_in, mor_in) = match train {
            Some((p, rng)) => {
                let t = dropout(inputs.tra, p, rng);
                let m = inputs.mor.map(|m| dropout(m, p, rng));
                (t, m)
            }
            None => (inputs.tra.to_owned(), inputs.mor.map(|m| m.to_owned())),
        };
        let (y_tra, tra) = gcn_forward(tra_in.view(), adj, &self.params.gnn_tra)?;
        let (y_mor, mor) = match (&mor_in, &self.params.gnn_mor) {
            (Some(x), Some(layers)) => {
                let (y, c) = gcn_forward(x.view(), adj, layers)?;
                (Some(y), Some(c))
            }
            _ => (None, None),
        };
        let (z, fuse) = fuse_forward(
            y_tra.view(),
            y_mor.as_ref().map(|m| m.view()),
            self.theta,
            self.shape.fusion_mode,
            &self.params.fusion,
        )?;
        let (x_hat, decoder) = decode_forward(z.view(), &self.params.decoder)?;
        Ok((
            EmbeddingSet { y_tra, y_mor, z, x_hat },
            ForwardCache {
                version: self.version,
                tra,
                mor,
                fuse,
                decoder,
            },
        ))
    }

    /// Dropout-free forward pass.
    pub fn embed(&self, inputs: Inputs, adj: &NormalizedAdjacency) -> Result<EmbeddingSet, NetworkError> {
        self.forward::<rand_chacha::ChaCha8Rng>(inputs, adj, None).map(|(e, _)| e)
    }

    /// Accumulate parameter gradients for the pass that produced `cache`.
    pub fn backward(
        &mut self,
        cache: &ForwardCache,
        adj: &NormalizedAdjacency,
        up: &OutputGrads,
    ) -> Result<(), NetworkError> {
        if cache.version != self.version {
            return Err(NetworkError::StaleCache {
                cache: cache.version,
                current: self.version,
            });
        }
        let n = cache.tra.pre[0].nrows();
        let d = self.shape.d_emb;
        let mut dz = up.z.clone().unwrap_or_else(|| Array2::zeros((n, d)));
        if let Some(dx) = &up.x_hat {
            dz += &mlp_backward(&cache.decoder, &self.params.decoder, dx.clone(), &mut self.grads.decoder);
        }
        let (mut dy_tra, mut dy_mor) = fuse_backward(
            &cache.fuse,
            &self.params.fusion,
            self.theta,
            self.shape.fusion_mode,
            dz,
            &mut self.grads.fusion,
        );
        if let Some(g) = &up.y_tra {
            dy_tra += g;
        }
        if let (Some(acc), Some(g)) = (dy_mor.as_mut(), &up.y_mor) {
            *acc += g;
        }
        gcn_backward(&cache.tra, adj, &self.params.gnn_tra, dy_tra, &mut self.grads.gnn_tra);
        if let (Some(c), Some(layers), Some(grads), Some(dy)) = (
            &cache.mor,
            &self.params.gnn_mor,
            self.grads.gnn_mor.as_mut(),
            dy_mor,
        ) {
            gcn_backward(c, adj, layers, dy, grads);
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), NetworkError> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            shape: self.shape,
            theta: self.theta,
            tensors: self
                .params
                .tensors()
                .into_iter()
                .map(|(name, shape, data)| NamedTensor {
                    name,
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| NetworkError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, NetworkError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NetworkError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(NetworkError::Checkpoint(format!(
                "unsupported format `{}`",
                ckpt.format
            )));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut params = ModelParams::init(&ckpt.shape, &mut rng);
        let expected: Vec<(String, Vec<usize>)> =
            params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != ckpt.tensors.len() {
            return Err(NetworkError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                ckpt.tensors.len()
            )));
        }
        for ((slot, (name, shape)), t) in params.tensors_mut().into_iter().zip(&expected).zip(&ckpt.tensors) {
            if &t.name != name || &t.shape != shape || t.data.len() != slot.len() {
                return Err(NetworkError::Checkpoint(format!(
                    "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                    t.name, t.shape
                )));
            }
            slot.copy_from_slice(&t.data);
        }
        Ok(Self::from_params(params, ckpt.shape, ckpt.theta))
    }
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    shape: ModelShape,
    theta: f64,
    tensors: Vec<NamedTensor>,
}

/// Embeddings with one expression column zeroed, computed from a cached
/// first-layer pre-activation (the perturbation is a rank-one update).
pub struct GeneProbe<'a> {
    net: &'a FusionNetwork,
    adj: &'a NormalizedAdjacency,
    propagated: Array2<f64>,
    pre: Array2<f64>,
    y_mor: Option<Array2<f64>>,
    pub baseline: Array2<f64>,
}

impl<'a> GeneProbe<'a> {
    pub fn new(net: &'a FusionNetwork, inputs: Inputs, adj: &'a NormalizedAdjacency) -> Result<Self, NetworkError> {
        let base = net.embed(inputs, adj)?;
        let first = &net.params.gnn_tra[0];
        let propagated = adj.apply(inputs.tra);
        let pre = first.apply(propagated.view());
        Ok(Self {
            net,
            adj,
            propagated,
            pre,
            y_mor: base.y_mor,
            baseline: base.z,
        })
    }

    /// Fused embedding with column `gene` of the expression input set to 0.
    pub fn zeroed(&self, gene: usize) -> Array2<f64> {
        let params = &self.net.params;
        let mut pre = self.pre.clone();
        let col = self.propagated.column(gene);
        let w_row = params.gnn_tra[0].w.row(gene);
        for (mut r, &a) in pre.rows_mut().into_iter().zip(col) {
            if a != 0.0 {
                r.scaled_add(-a, &w_row);
            }
        }
        // ReLU sits between layers, so it is applied before each later layer.
        let mut h = pre;
        for layer in params.gnn_tra.iter().skip(1) {
            relu_inplace(&mut h);
            let ah = self.adj.apply(h.view());
            h = layer.apply(ah.view());
        }
        let (z, _) = fuse_forward(
            h.view(),
            self.y_mor.as_ref().map(|m| m.view()),
            self.net.theta,
            self.net.shape.fusion_mode,
            &params.fusion,
        )
        .expect("shapes validated at construction");
        z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_spatial_graph, GraphKind};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path3() -> NeighborGraph {
        NeighborGraph {
            n: 3,
            neighbors: vec![vec![1], vec![0, 2], vec![1]],
            kind: GraphKind::SpatialEps,
        }
    }

    fn edgeless(n: usize) -> NeighborGraph {
        NeighborGraph {
            n,
            neighbors: vec![vec![]; n],
            kind: GraphKind::SpatialEps,
        }
    }

    #[test]
    fn edgeless_identity_gcn_is_identity() {
        let adj = NormalizedAdjacency::from_graph(&edgeless(3));
        let x = array![[1.0, 2.0], [3.0, -4.0], [0.5, 0.0]];
        let (y, _) = gcn_forward(x.view(), &adj, &[Dense::identity(2)]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn connected_twins_get_identical_rows() {
        let g = NeighborGraph {
            n: 2,
            neighbors: vec![vec![1], vec![0]],
            kind: GraphKind::SpatialEps,
        };
        let adj = NormalizedAdjacency::from_graph(&g);
        let x = array![[1.0, 2.0], [1.0, 2.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layers = vec![Dense::glorot(2, 3, &mut rng), Dense::glorot(3, 3, &mut rng)];
        let (y, _) = gcn_forward(x.view(), &adj, &layers).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn path_graph_matches_hand_built_adjacency() {
        // Degrees with self loops: [2, 3, 2].
        let s6 = 1.0 / 6f64.sqrt();
        let a_hat = array![[0.5, s6, 0.0], [s6, 1.0 / 3.0, s6], [0.0, s6, 0.5]];
        let adj = NormalizedAdjacency::from_graph(&path3());
        let dense = adj.to_dense();
        for (a, b) in dense.iter().zip(a_hat.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        let x = array![[1.0], [0.0], [0.0]];
        let (y, _) = gcn_forward(x.view(), &adj, &[Dense::identity(1)]).unwrap();
        let expect = a_hat.dot(&x);
        for (a, b) in y.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        // sqrt of the self-loop degrees is an eigenvector with eigenvalue 1.
        let root_deg = array![2f64.sqrt(), 3f64.sqrt(), 2f64.sqrt()];
        for (a, b) in dense.dot(&root_deg).iter().zip(root_deg.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(dense[[i, j]], dense[[j, i]], epsilon = 0.0);
            }
        }
    }

    #[test]
    fn fusion_examples() {
        let y_tra = array![[1.0, 2.0], [3.0, 4.0]];
        let y_mor = array![[-1.0, 0.5], [2.0, -2.0]];
        let id = vec![Dense::identity(2)];
        let (z, _) = fuse_forward(y_tra.view(), Some(y_mor.view()), 0.5, FusionMode::Sum, &id).unwrap();
        assert_eq!(z, (&y_tra + &y_mor) / 2.0);

        let (z1, _) = fuse_forward(y_tra.view(), Some(y_mor.view()), 1.0, FusionMode::Sum, &id).unwrap();
        let (z2, _) = fuse_forward(y_tra.view(), Some((&y_mor * 7.0).view()), 1.0, FusionMode::Sum, &id).unwrap();
        assert_eq!(z1, z2);

        // theta = 0.9 elementwise oracle through a hand-set layer.
        let layer = Dense {
            w: array![[1.0, -1.0], [0.5, 2.0]],
            b: array![0.1, -0.2],
        };
        let (z, _) = fuse_forward(y_tra.view(), Some(y_mor.view()), 0.9, FusionMode::Sum, &[layer]).unwrap();
        let y00 = 0.9 * 1.0 + 0.1 * -1.0;
        let y01 = 0.9 * 2.0 + 0.1 * 0.5;
        let y10 = 0.9 * 3.0 + 0.1 * 2.0;
        let y11 = 0.9 * 4.0 + 0.1 * -2.0;
        let expect = array![
            [y00 * 1.0 + y01 * 0.5 + 0.1, -y00 + y01 * 2.0 - 0.2],
            [y10 * 1.0 + y11 * 0.5 + 0.1, -y10 + y11 * 2.0 - 0.2]
        ];
        for (a, b) in z.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let bad = array![[1.0, 2.0, 3.0]];
        assert!(fuse_forward(y_tra.view(), Some(bad.view()), 0.5, FusionMode::Sum, &id).is_err());
    }

    #[test]
    fn decoder_examples() {
        let z = array![[1.0, 2.0]];
        let (x, _) = decode_forward(z.view(), &[Dense::zeros(2, 3)]).unwrap();
        assert_eq!(x, Array2::<f64>::zeros((1, 3)));
        let (x, _) = decode_forward(z.view(), &[Dense::identity(2)]).unwrap();
        assert_eq!(x, z);
        let layer = Dense {
            w: array![[1.0, 0.0, -1.0], [2.0, 3.0, 0.5]],
            b: Array1::zeros(3),
        };
        let (x, _) = decode_forward(z.view(), &[layer]).unwrap();
        assert_eq!(x, array![[5.0, 6.0, 0.0]]);
        assert!(decode_forward(z.view(), &[Dense::zeros(3, 3)]).is_err());
    }

    fn toy_network(mode: FusionMode, with_mor: bool) -> (FusionNetwork, Array2<f64>, Option<Array2<f64>>, NormalizedAdjacency) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coords = Array2::from_shape_fn((6, 2), |(i, j)| if j == 0 { (i % 3) as f64 } else { (i / 3) as f64 });
        let adj = NormalizedAdjacency::from_graph(&build_spatial_graph(coords.view(), 1.0).unwrap());
        let tra = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
        let mor = with_mor.then(|| Array2::from_shape_simple_fn((6, 3), || rng.random_range(-1.0..1.0)));
        let shape = ModelShape {
            n_genes: 4,
            n_mor: with_mor.then_some(3),
            d_emb: 5,
            n_mlp: 2,
            fusion_mode: mode,
        };
        (FusionNetwork::new(shape, 0.7, &mut rng), tra, mor, adj)
    }

    #[test]
    fn zero_upstream_gives_zero_grads_and_scaling_is_linear() {
        let (mut net, tra, mor, adj) = toy_network(FusionMode::Sum, true);
        let inputs = Inputs {
            tra: tra.view(),
            mor: mor.as_ref().map(|m| m.view()),
        };
        let (emb, cache) = net.forward::<ChaCha8Rng>(inputs, &adj, None).unwrap();
        net.zero_grad();
        net.backward(&cache, &adj, &OutputGrads::default()).unwrap();
        assert!(net.grads.tensors().iter().all(|(_, _, t)| t.iter().all(|&v| v == 0.0)));

        let up = OutputGrads {
            z: Some(emb.z.mapv(|v| v.sin())),
            x_hat: Some(emb.x_hat.mapv(|v| v.cos())),
            ..Default::default()
        };
        net.zero_grad();
        net.backward(&cache, &adj, &up).unwrap();
        let single = net.grads.clone();
        let doubled = OutputGrads {
            z: up.z.as_ref().map(|g| g * 2.0),
            x_hat: up.x_hat.as_ref().map(|g| g * 2.0),
            ..Default::default()
        };
        net.zero_grad();
        net.backward(&cache, &adj, &doubled).unwrap();
        for ((_, _, a), (_, _, b)) in single.tensors().iter().zip(net.grads.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(2.0 * x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (mut net, tra, mor, adj) = toy_network(FusionMode::Sum, true);
        let inputs = Inputs {
            tra: tra.view(),
            mor: mor.as_ref().map(|m| m.view()),
        };
        let (_, cache) = net.forward::<ChaCha8Rng>(inputs, &adj, None).unwrap();
        net.params_mut().decoder[0].b[0] += 1.0;
        assert!(matches!(
            net.backward(&cache, &adj, &OutputGrads::default()),
            Err(NetworkError::StaleCache { .. })
        ));
    }

    /// Scalar test loss: a fixed random projection of every output.
    fn probe_loss(emb: &EmbeddingSet, weights: &[Array2<f64>; 4]) -> f64 {
        let mut s = (&emb.z * &weights[0]).sum() + (&emb.x_hat * &weights[1]).sum();
        s += (&emb.y_tra * &weights[2]).sum();
        if let Some(m) = &emb.y_mor {
            s += (m * &weights[3]).sum();
        }
        s
    }

    fn finite_difference_check(mode: FusionMode, with_mor: bool) {
        let (mut net, tra, mor, adj) = toy_network(mode, with_mor);
        let inputs = Inputs {
            tra: tra.view(),
            mor: mor.as_ref().map(|m| m.view()),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights = [
            Array2::from_shape_simple_fn((6, 5), || rng.random_range(-1.0..1.0)),
            Array2::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0)),
            Array2::from_shape_simple_fn((6, 5), || rng.random_range(-1.0..1.0)),
            Array2::from_shape_simple_fn((6, 5), || rng.random_range(-1.0..1.0)),
        ];
        let (emb, cache) = net.forward::<ChaCha8Rng>(inputs, &adj, None).unwrap();
        net.zero_grad();
        let up = OutputGrads {
            z: Some(weights[0].clone()),
            x_hat: Some(weights[1].clone()),
            y_tra: Some(weights[2].clone()),
            y_mor: emb.y_mor.as_ref().map(|_| weights[3].clone()),
        };
        net.backward(&cache, &adj, &up).unwrap();
        let analytic: Vec<Vec<f64>> = net.grads.tensors().iter().map(|(_, _, t)| t.to_vec()).collect();
        let h = 1e-5;
        for (ti, grad) in analytic.iter().enumerate() {
            for k in 0..grad.len() {
                let orig = net.params_mut().tensors_mut()[ti][k];
                net.params_mut().tensors_mut()[ti][k] = orig + h;
                let up_l = probe_loss(&net.embed(inputs, &adj).unwrap(), &weights);
                net.params_mut().tensors_mut()[ti][k] = orig - h;
                let dn_l = probe_loss(&net.embed(inputs, &adj).unwrap(), &weights);
                net.params_mut().tensors_mut()[ti][k] = orig;
                let fd = (up_l - dn_l) / (2.0 * h);
                let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
                assert!(rel < 1e-4, "tensor {ti} entry {k}: fd {fd} vs analytic {}", grad[k]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(FusionMode::Sum, true);
        finite_difference_check(FusionMode::Concat, true);
        finite_difference_check(FusionMode::Sum, false);
    }

    #[test]
    fn forward_is_deterministic_and_dropout_only_in_training() {
        let (net, tra, mor, adj) = toy_network(FusionMode::Sum, true);
        let inputs = Inputs {
            tra: tra.view(),
            mor: mor.as_ref().map(|m| m.view()),
        };
        assert_eq!(net.embed(inputs, &adj).unwrap(), net.embed(inputs, &adj).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (train, _) = net.forward(inputs, &adj, Some((0.5, &mut rng))).unwrap();
        assert_ne!(train.z, net.embed(inputs, &adj).unwrap().z);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (net, tra, mor, adj) = toy_network(FusionMode::Concat, true);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.json");
        net.save_checkpoint(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains(CHECKPOINT_FORMAT));
        let back = FusionNetwork::load_checkpoint(&p).unwrap();
        assert_eq!(back.params(), net.params());
        let inputs = Inputs {
            tra: tra.view(),
            mor: mor.as_ref().map(|m| m.view()),
        };
        assert_eq!(back.embed(inputs, &adj).unwrap(), net.embed(inputs, &adj).unwrap());
    }

    #[test]
    fn gene_probe_matches_explicit_zeroing() {
        let (net, tra, mor, adj) = toy_network(FusionMode::Sum, true);
        let inputs = Inputs {
            tra: tra.view(),
            mor: mor.as_ref().map(|m| m.view()),
        };
        let probe = GeneProbe::new(&net, inputs, &adj).unwrap();
        for g in 0..4 {
            let mut x = tra.clone();
            x.column_mut(g).fill(0.0);
            let explicit = net
                .embed(
                    Inputs {
                        tra: x.view(),
                        mor: inputs.mor,
                    },
                    &adj,
                )
                .unwrap()
                .z;
            for (a, b) in probe.zeroed(g).iter().zip(explicit.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }
}
