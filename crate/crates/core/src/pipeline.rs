//! End-to-end analysis: preprocess, train, cluster, visualize, deconvolve,
//! rank markers, build cluster connectivity and evaluate.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::{
    AnalysisReport, ConfigError, DataError, Epsilon, LossRecord, MarkerRow, ModalityReport, RunConfig, SpotDataset,
};
use crate::downstream::{
    deconvolve, denoise, fit_visualization, gene_importance, gmm_cluster, paga_connectivity, refine_labels,
    region_statistic, top_genes, DownstreamError, VisConfig,
};
use crate::evaluate::{ari, modality_contribution, mrre, EvaluateError};
use crate::network::{EmbeddingSet, FusionNetwork, NetworkError, NormalizedAdjacency};
use crate::objective::{inputs, model_shape, train, ObjectiveError};
use crate::preprocess::{preprocess, PreprocessError, PreprocessedData};
use crate::topology::{auto_radius, build_spatial_graph, NeighborGraph, TopologyError};

/// Spatial neighbours the median spot should have under the automatic radius.
pub const AUTO_RADIUS_NEIGHBORS: usize = 4;

/// Independent generator streams for the seeded stages.
const STREAM_CLUSTER: u64 = 1;
const STREAM_VISUALIZE: u64 = 2;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Downstream(#[from] DownstreamError),
    #[error(transparent)]
    Evaluate(#[from] EvaluateError),
    #[error("n_clusters is not set and the dataset has no labels to infer it from")]
    UnknownClusterCount,
    #[error("{0}")]
    Usage(String),
}

impl PipelineError {
    /// Whether the failure stems from the caller's inputs rather than a
    /// defect or numerical breakdown.
    pub fn is_user_error(&self) -> bool {
        match self {
            Self::Data(DataError::Io { .. }) => false,
            Self::Data(_)
            | Self::Config(_)
            | Self::Preprocess(_)
            | Self::Topology(_)
            | Self::UnknownClusterCount
            | Self::Usage(_) => true,
            Self::Network(NetworkError::Checkpoint(_) | NetworkError::ModalityMismatch(_) | NetworkError::ShapeMismatch { .. }) => true,
            Self::Downstream(DownstreamError::InvalidClusterCount { .. } | DownstreamError::NegativeSum { .. }) => true,
            _ => false,
        }
    }
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn spatial_radius(coords: ArrayView2<f64>, cfg: &RunConfig) -> Result<f64, TopologyError> {
    match cfg.epsilon_radius {
        Epsilon::Auto => auto_radius(coords, AUTO_RADIUS_NEIGHBORS),
        Epsilon::Radius(r) => Ok(r),
    }
}

pub fn spatial_graph(coords: ArrayView2<f64>, cfg: &RunConfig) -> Result<NeighborGraph, TopologyError> {
    build_spatial_graph(coords, spatial_radius(coords, cfg)?)
}

/// `cfg.n_clusters`, or the number of distinct ground-truth labels.
pub fn cluster_count(cfg: &RunConfig, labels: Option<&[usize]>) -> Result<usize, PipelineError> {
    if let Some(k) = cfg.n_clusters {
        return Ok(k);
    }
    let labels = labels.ok_or(PipelineError::UnknownClusterCount)?;
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    Ok(distinct.len())
}

/// A trained model with everything needed for downstream analyses.
pub struct TrainedRun {
    pub data: PreprocessedData,
    pub spatial: NeighborGraph,
    pub adjacency: NormalizedAdjacency,
    pub network: FusionNetwork,
    /// Empty when the model was restored from a checkpoint.
    pub history: Vec<LossRecord>,
    pub augmentation_fallbacks: usize,
    pub embeddings: EmbeddingSet,
}

fn prepare(dataset: &SpotDataset, cfg: &RunConfig) -> Result<(PreprocessedData, NeighborGraph), PipelineError> {
    dataset.validate()?;
    cfg.validate()?;
    let data = preprocess(dataset, cfg)?;
    let spatial = spatial_graph(dataset.coords.view(), cfg)?;
    Ok((data, spatial))
}

pub fn fit(dataset: &SpotDataset, cfg: &RunConfig) -> Result<TrainedRun, PipelineError> {
    let (data, spatial) = prepare(dataset, cfg)?;
    let (state, embeddings) = train(&data, &spatial, cfg)?;
    Ok(TrainedRun {
        adjacency: NormalizedAdjacency::from_graph(&spatial),
        data,
        spatial,
        network: state.network,
        history: state.history,
        augmentation_fallbacks: state.augmentation_fallbacks,
        embeddings,
    })
}

/// Rebuild a run around a saved network. The checkpoint must match the
/// shape implied by `dataset` and `cfg`.
pub fn restore(dataset: &SpotDataset, cfg: &RunConfig, network: FusionNetwork) -> Result<TrainedRun, PipelineError> {
    let (data, spatial) = prepare(dataset, cfg)?;
    let expected = model_shape(&data, cfg);
    if network.shape != expected {
        return Err(PipelineError::Usage(format!(
            "checkpoint shape {:?} does not match data and config {:?}",
            network.shape, expected
        )));
    }
    let adjacency = NormalizedAdjacency::from_graph(&spatial);
    let embeddings = network.embed(inputs(&data), &adjacency)?;
    Ok(TrainedRun {
        data,
        spatial,
        adjacency,
        network,
        history: Vec::new(),
        augmentation_fallbacks: 0,
        embeddings,
    })
}

/// Mixture-model labels on `z`, optionally smoothed over spatial
/// neighbours. Returns the labels and any warnings.
pub fn cluster(
    z: ArrayView2<f64>,
    coords: ArrayView2<f64>,
    k: usize,
    cfg: &RunConfig,
) -> Result<(Vec<usize>, Vec<String>), PipelineError> {
    let mut rng = stream_rng(cfg.seed, STREAM_CLUSTER);
    let model = gmm_cluster(z, k, cfg.gmm_restarts, &mut rng)?;
    let mut warnings = Vec::new();
    if model.discarded_restarts > 0 {
        warnings.push(format!(
            "{} of {} clustering restarts collapsed and were discarded",
            model.discarded_restarts, cfg.gmm_restarts
        ));
    }
    let labels = if cfg.refine {
        refine_labels(&model.labels, coords, cfg.refine_k)?
    } else {
        model.labels
    };
    Ok((labels, warnings))
}

pub fn visualize(z: ArrayView2<f64>, cfg: &RunConfig) -> Result<Array2<f64>, PipelineError> {
    let vis_cfg = VisConfig {
        nu: cfg.nu,
        k: cfg.k_tr,
        n_neg: cfg.n_neg,
        epochs: cfg.vis_epochs,
        lr: cfg.vis_lr,
    };
    let mut rng = stream_rng(cfg.seed, STREAM_VISUALIZE);
    Ok(fit_visualization(z, vis_cfg, &mut rng)?.coords)
}

/// Modality contributions on `(name, features)` pairs, or `None` with a
/// warning when the labels have a single class.
fn contributions(
    source: &str,
    modalities: &[(&str, ArrayView2<f64>)],
    labels: &[usize],
    seed: u64,
    warnings: &mut Vec<String>,
) -> Result<Option<ModalityReport>, PipelineError> {
    match modality_contribution(modalities, labels, seed) {
        Ok(c) => Ok(Some(ModalityReport {
            source: source.to_string(),
            accuracy: c.accuracy,
            summaries: c.summaries,
            per_spot: c.per_spot,
        })),
        Err(EvaluateError::SingleClass) => {
            warnings.push(format!("modality contributions on {source} skipped: single class"));
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

/// Metrics and modality contributions for a trained run and its labels.
pub fn evaluate_run(
    run: &TrainedRun,
    labels: &[usize],
    truth: Option<&[usize]>,
    cfg: &RunConfig,
    warnings: &mut Vec<String>,
) -> Result<(BTreeMap<String, f64>, Vec<ModalityReport>), PipelineError> {
    let mut metrics = BTreeMap::new();
    let z = run.embeddings.z.view();
    if let Some(t) = truth {
        metrics.insert("ari".to_string(), ari(labels, t)?);
    }
    match mrre(run.data.tra.view(), z, cfg.mrre_k, false) {
        Ok(v) => {
            metrics.insert("mrre".to_string(), v);
        }
        Err(EvaluateError::InvalidK { k, m }) => {
            warnings.push(format!("mrre skipped: k = {k} is too large for {m} spots"));
        }
        Err(e) => return Err(e.into()),
    }
    metrics.insert("n_clusters".to_string(), labels.iter().max().map_or(0, |m| m + 1) as f64);
    if let Some(last) = run.history.last() {
        metrics.insert("final_loss".to_string(), last.total);
    }

    let target = truth.unwrap_or(labels);
    let mut reports = Vec::new();
    let mut input = vec![("tra", run.data.tra.view())];
    if let Some(m) = &run.data.mor {
        input.push(("mor", m.view()));
    }
    reports.extend(contributions("input", &input, target, cfg.seed, warnings)?);
    let mut embedded = vec![("tra", run.embeddings.y_tra.view())];
    if let Some(m) = &run.embeddings.y_mor {
        embedded.push(("mor", m.view()));
    }
    reports.extend(contributions("embedding", &embedded, target, cfg.seed, warnings)?);
    Ok((metrics, reports))
}

/// Ranked marker rows for every cluster.
pub fn markers(run: &TrainedRun, labels: &[usize], top_n: usize) -> Result<Vec<MarkerRow>, PipelineError> {
    let importance = gene_importance(&run.network, inputs(&run.data), &run.adjacency, labels)?;
    let mut rows = Vec::new();
    for (c, row) in importance.rows().into_iter().enumerate() {
        if !labels.contains(&c) {
            continue;
        }
        for (rank, (g, imp)) in top_genes(row, top_n).into_iter().enumerate() {
            rows.push(MarkerRow {
                cluster: c,
                rank: rank + 1,
                gene_id: run.data.selected_gene_ids[g].clone(),
                importance: imp,
            });
        }
    }
    Ok(rows)
}

/// Decoder output mapped back to the log-normalized scale.
pub fn denoised_expression(run: &TrainedRun) -> Result<Array2<f64>, PipelineError> {
    let mut x_hat = denoise(&run.network, inputs(&run.data), &run.adjacency)?;
    for (g, mut col) in x_hat.columns_mut().into_iter().enumerate() {
        let (mean, std) = (run.data.gene_means[g], run.data.gene_stds[g]);
        col.mapv_inplace(|v| v * std + mean);
    }
    Ok(x_hat)
}

/// Every analysis on one dataset, in pipeline order.
pub fn run_report(dataset: &SpotDataset, cfg: &RunConfig, plots: bool) -> Result<AnalysisReport, PipelineError> {
    cluster_count(cfg, dataset.labels.as_deref())?;
    let run = fit(dataset, cfg)?;
    report_from_run(dataset, &run, cfg, plots)
}

/// The downstream half of [`run_report`] on an existing run.
pub fn report_from_run(
    dataset: &SpotDataset,
    run: &TrainedRun,
    cfg: &RunConfig,
    plots: bool,
) -> Result<AnalysisReport, PipelineError> {
    let truth = dataset.labels.as_deref();
    let k = cluster_count(cfg, truth)?;
    let mut warnings = Vec::new();
    if run.augmentation_fallbacks > 0 {
        warnings.push(format!(
            "{} augmentations had no neighbour and used the unmodified spot",
            run.augmentation_fallbacks
        ));
    }
    let isolated = run.spatial.isolated_nodes();
    if isolated > 0 {
        warnings.push(format!("{isolated} spots have no spatial neighbour"));
    }
    let z = run.embeddings.z.view();
    let coords = dataset.coords.view();

    let (labels, w) = cluster(z, coords, k, cfg)?;
    warnings.extend(w);
    let visualization = visualize(z, cfg)?;
    let deconv = deconvolve(z, &labels, cfg.deconv_l1)?;
    if !deconv.unconverged.is_empty() {
        warnings.push(format!(
            "deconvolution did not reach tolerance for {} spots (max residual {:e})",
            deconv.unconverged.len(),
            deconv.max_kkt_residual
        ));
    }
    let markers = markers(run, &labels, cfg.marker_top_n)?;
    let paga_edges = match paga_connectivity(z, &labels, cfg.paga_k) {
        Ok(g) => g.edges(),
        Err(DownstreamError::TooFewClusters(n)) => {
            warnings.push(format!("trajectory graph skipped: {n} cluster"));
            Vec::new()
        }
        Err(e) => return Err(e.into()),
    };
    let (metrics, contributions) = evaluate_run(run, &labels, truth, cfg, &mut warnings)?;
    let region = region_statistic(run.data.tra_lognorm.view(), &labels)?;
    let denoised = denoised_expression(run)?;

    Ok(AnalysisReport {
        spot_ids: dataset.spot_ids.clone(),
        embedding: run.embeddings.z.clone(),
        labels,
        coords: Some(dataset.coords.clone()),
        visualization: Some(visualization),
        metrics,
        loss_history: run.history.clone(),
        contributions,
        paga_edges,
        markers,
        deconvolution_unconverged: deconv.unconverged.len(),
        deconvolution: Some((deconv.weights, deconv.dispersion)),
        denoised: Some((denoised, run.data.selected_gene_ids.clone())),
        region_statistic: Some(region),
        warnings,
        plots,
    })
}
