//! Command-line interface. Every subcommand writes a `manifest.json` next to
//! its outputs; passing that manifest back as `--config` repeats the run.

use std::collections::HashMap;
use std::ffi::OsString;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::dataio::{
    load_config, read_labels, write_labels, write_matrix, write_report, plot_scatter, AnalysisReport, ConfigError,
    DataError, RunConfig, SpotDataset,
};
use crate::downstream::{deconvolve, paga_connectivity};
use crate::network::{FusionNetwork, NetworkError};
use crate::pipeline::{self, PipelineError, TrainedRun};
use crate::synth::{generate, SynthSpec};

pub const MANIFEST_FORMAT: &str = "topofuse-manifest-v1";
const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Parser, Debug)]
#[command(name = "topofuse", version, about = "Topology-preserving multi-modal embedding of spatial spot data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with planted spatial domains.
    Synth(SynthArgs),
    /// Normalize, select genes and reduce the morphology features.
    Preprocess(RunArgs),
    /// Train the fusion network and write the embeddings and a checkpoint.
    Train(RunArgs),
    /// Assign spatial domains with a Gaussian mixture on the embedding.
    Cluster(RunArgs),
    /// Fit the 2-D visualization.
    Visualize(RunArgs),
    /// Express each spot as a sparse mix of cluster centroids.
    Deconvolve(RunArgs),
    /// Rank genes by how much zeroing them moves each cluster's embedding.
    Markers(RunArgs),
    /// Cluster connectivity on the embedding's kNN graph.
    Trajectory(RunArgs),
    /// ARI, MRRE and modality contributions.
    Evaluate(RunArgs),
    /// Run every stage and write the full report.
    Report(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Dataset directory with tra.csv, coords.csv and optionally mor.csv, labels.csv.
    #[arg(long)]
    data: PathBuf,
    /// JSON config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible output.
    #[arg(long)]
    threads: Option<usize>,
    /// Override a config key, e.g. `--set epochs=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Earlier run directory: reuse its checkpoint.json and labels.csv.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Also write SVG plots (report only).
    #[arg(long)]
    plots: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    domains: usize,
    #[arg(long, default_value_t = 50)]
    spots_per_domain: usize,
    #[arg(long, default_value_t = 200)]
    genes: usize,
    /// Morphology feature count; 0 omits mor.csv.
    #[arg(long, default_value_t = 64)]
    mor_dims: usize,
    #[arg(long, default_value_t = 3.0)]
    signal_tra: f64,
    #[arg(long, default_value_t = 2.0)]
    signal_mor: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long)]
    threads: Option<usize>,
}

/// A failure caused by how the tool was invoked.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

/// Parse `argv`, run the subcommand and return the process exit code:
/// 0 on success, 1 for user errors, 2 for internal failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match catch_unwind(AssertUnwindSafe(|| dispatch(cli.command))) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
        Err(_) => {
            eprintln!("error: internal failure (panic)");
            2
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return if p.is_user_error() { 1 } else { 2 };
        }
        if let Some(d) = cause.downcast_ref::<DataError>() {
            return if matches!(d, DataError::Io { .. }) { 2 } else { 1 };
        }
        if cause.is::<ConfigError>() || cause.is::<UsageError>() {
            return 1;
        }
        if let Some(NetworkError::Checkpoint(_)) = cause.downcast_ref::<NetworkError>() {
            return 1;
        }
    }
    2
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!(UsageError("--threads must be at least 1".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => staged(a, "preprocess", stage_preprocess),
        Command::Train(a) => staged(a, "train", stage_train),
        Command::Cluster(a) => staged(a, "cluster", stage_cluster),
        Command::Visualize(a) => staged(a, "visualize", stage_visualize),
        Command::Deconvolve(a) => staged(a, "deconvolve", stage_deconvolve),
        Command::Markers(a) => staged(a, "markers", stage_markers),
        Command::Trajectory(a) => staged(a, "trajectory", stage_trajectory),
        Command::Evaluate(a) => staged(a, "evaluate", stage_evaluate),
        Command::Report(a) => staged(a, "report", stage_report),
    }
}

/// Config from `--config` (plain config or manifest), then `--set`
/// overrides, then `--seed`.
fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        None => RunConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| UsageError(format!("config {} is not JSON: {e}", path.display())))?;
            if v.get("format").and_then(Value::as_str) == Some(MANIFEST_FORMAT) {
                let inner = v.get("config").ok_or_else(|| UsageError("manifest has no config".into()))?;
                RunConfig::from_json_str(&inner.to_string())?
            } else {
                load_config(path)?
            }
        }
    };
    for o in &args.overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| UsageError(format!("override `{o}` is not KEY=VALUE")))?;
        cfg = cfg.with_override(key.trim(), value.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Stage<'a> {
    args: &'a RunArgs,
    cfg: &'a RunConfig,
    dataset: &'a SpotDataset,
    written: Vec<PathBuf>,
    extra: serde_json::Map<String, Value>,
}

impl Stage<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.args.out.join(name)
    }

    /// The trained model from `--run`, or a fresh training run.
    fn trained(&self) -> Result<TrainedRun> {
        match &self.args.run {
            Some(dir) => {
                let net = FusionNetwork::load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
                Ok(pipeline::restore(self.dataset, self.cfg, net)?)
            }
            None => Ok(pipeline::fit(self.dataset, self.cfg)?),
        }
    }

    /// Labels from `--run` when it has them, else a fresh clustering.
    fn labels(&mut self, run: &TrainedRun) -> Result<Vec<usize>> {
        if let Some(dir) = &self.args.run {
            let path = dir.join("labels.csv");
            if path.exists() {
                return align_labels(&path, &self.dataset.spot_ids);
            }
        }
        let k = pipeline::cluster_count(self.cfg, self.dataset.labels.as_deref())?;
        let (labels, warnings) = pipeline::cluster(run.embeddings.z.view(), self.dataset.coords.view(), k, self.cfg)?;
        if !warnings.is_empty() {
            self.extra.insert("warnings".into(), json!(warnings));
        }
        Ok(labels)
    }

    fn write_json(&mut self, name: &str, value: &Value) -> Result<()> {
        let p = self.out(name);
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?;
        self.written.push(p);
        Ok(())
    }

    fn write_matrix(&mut self, name: &str, cols: &[String], m: ndarray::ArrayView2<f64>) -> Result<()> {
        let p = self.out(name);
        write_matrix(&p, "spot_id", &self.dataset.spot_ids, cols, m)?;
        self.written.push(p);
        Ok(())
    }

    fn write_labels(&mut self, labels: &[usize]) -> Result<()> {
        let p = self.out("labels.csv");
        write_labels(&p, &self.dataset.spot_ids, labels)?;
        self.written.push(p);
        Ok(())
    }
}

fn align_labels(path: &Path, spot_ids: &[String]) -> Result<Vec<usize>> {
    let (ids, labels) = read_labels(path)?;
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    spot_ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&i| labels[i])
                .ok_or_else(|| anyhow!(UsageError(format!("{} has no label for spot {id}", path.display()))))
        })
        .collect()
}

fn columns(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn staged(args: RunArgs, name: &str, body: fn(&mut Stage) -> Result<()>) -> Result<()> {
    set_threads(args.threads)?;
    let cfg = resolve_config(&args)?;
    let dataset = SpotDataset::read_dir(&args.data)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut stage = Stage {
        args: &args,
        cfg: &cfg,
        dataset: &dataset,
        written: Vec::new(),
        extra: serde_json::Map::new(),
    };
    body(&mut stage)?;
    let mut manifest = json!({
        "format": MANIFEST_FORMAT,
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": name,
        "seed": cfg.seed,
        "threads": args.threads,
        "data": args.data.display().to_string(),
        "run": args.run.as_ref().map(|p| p.display().to_string()),
        "config": serde_json::to_value(&cfg)?,
        "outputs": output_names(&stage.written),
    });
    if !stage.extra.is_empty() {
        manifest["notes"] = Value::Object(stage.extra.clone());
    }
    write_manifest(&args.out, &manifest)
}

fn output_names(paths: &[PathBuf]) -> Vec<String> {
    paths
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect()
}

fn write_manifest(out: &Path, manifest: &Value) -> Result<()> {
    let p = out.join("manifest.json");
    std::fs::write(&p, serde_json::to_string_pretty(manifest)? + "\n").with_context(|| format!("writing {}", p.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    set_threads(a.threads)?;
    let spec = SynthSpec {
        n_domains: a.domains,
        spots_per_domain: a.spots_per_domain,
        genes: a.genes,
        mor_dims: a.mor_dims,
        signal_tra: a.signal_tra,
        signal_mor: a.signal_mor,
        noise_std: a.noise,
        seed: a.seed,
        ..SynthSpec::default()
    };
    if spec.n_domains == 0 || spec.spots_per_domain == 0 || spec.genes == 0 {
        bail!(UsageError("--domains, --spots-per-domain and --genes must be positive".into()));
    }
    if !(spec.noise_std >= 0.0 && spec.signal_tra.is_finite() && spec.signal_mor.is_finite()) {
        bail!(UsageError("--noise must be non-negative and signals finite".into()));
    }
    let data = generate(&spec);
    let ds = &data.dataset;
    ds.write_dir(&a.out)?;
    let mut outputs = vec!["tra.csv", "coords.csv"];
    if ds.mor.is_some() {
        outputs.push("mor.csv");
    }
    outputs.push("labels.csv");
    write_matrix(&a.out.join("truth_tra.csv"), "spot_id", &ds.spot_ids, &ds.gene_ids, data.truth_tra.view())?;
    outputs.push("truth_tra.csv");
    if let Some(t) = &data.truth_mor {
        write_matrix(&a.out.join("truth_mor.csv"), "spot_id", &ds.spot_ids, &ds.mor_ids, t.view())?;
        outputs.push("truth_mor.csv");
    }
    let manifest = json!({
        "format": MANIFEST_FORMAT,
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": "synth",
        "seed": spec.seed,
        "threads": a.threads,
        "synth": serde_json::to_value(&spec)?,
        "outputs": outputs,
    });
    write_manifest(&a.out, &manifest)
}

fn stage_preprocess(s: &mut Stage) -> Result<()> {
    s.dataset.validate()?;
    let data = crate::preprocess::preprocess(s.dataset, s.cfg).map_err(PipelineError::from)?;
    s.write_matrix("tra_preprocessed.csv", &data.selected_gene_ids, data.tra.view())?;
    if let Some(m) = &data.mor {
        s.write_matrix("mor_pcs.csv", &columns("pc", m.ncols()), m.view())?;
    }
    Ok(())
}

fn stage_train(s: &mut Stage) -> Result<()> {
    let run = pipeline::fit(s.dataset, s.cfg)?;
    let p = s.out(CHECKPOINT_FILE);
    run.network.save_checkpoint(&p)?;
    s.written.push(p);
    let e = &run.embeddings;
    s.write_matrix("embedding.csv", &columns("z", e.z.ncols()), e.z.view())?;
    s.write_matrix("embedding_tra.csv", &columns("y", e.y_tra.ncols()), e.y_tra.view())?;
    if let Some(y) = &e.y_mor {
        s.write_matrix("embedding_mor.csv", &columns("y", y.ncols()), y.view())?;
    }
    s.write_json(
        "loss_history.json",
        &json!({ "loss_history": run.history, "augmentation_fallbacks": run.augmentation_fallbacks }),
    )
}

fn stage_cluster(s: &mut Stage) -> Result<()> {
    let run = s.trained()?;
    let k = pipeline::cluster_count(s.cfg, s.dataset.labels.as_deref())?;
    let (labels, warnings) = pipeline::cluster(run.embeddings.z.view(), s.dataset.coords.view(), k, s.cfg)?;
    if !warnings.is_empty() {
        s.extra.insert("warnings".into(), json!(warnings));
    }
    s.write_labels(&labels)
}

fn stage_visualize(s: &mut Stage) -> Result<()> {
    let run = s.trained()?;
    let vis = pipeline::visualize(run.embeddings.z.view(), s.cfg)?;
    s.write_matrix("visualization.csv", &["v0".into(), "v1".into()], vis.view())?;
    let colours = match &s.args.run {
        Some(dir) if dir.join("labels.csv").exists() => align_labels(&dir.join("labels.csv"), &s.dataset.spot_ids)?,
        _ => s.dataset.labels.clone().unwrap_or_else(|| vec![0; vis.nrows()]),
    };
    let p = s.out("visualization.svg");
    plot_scatter(vis.view(), &colours, &p)?;
    s.written.push(p);
    Ok(())
}

fn stage_deconvolve(s: &mut Stage) -> Result<()> {
    let run = s.trained()?;
    let labels = s.labels(&run)?;
    let result = deconvolve(run.embeddings.z.view(), &labels, s.cfg.deconv_l1).map_err(PipelineError::from)?;
    let k = result.weights.ncols();
    let mut m = ndarray::Array2::zeros((result.weights.nrows(), k + 1));
    m.slice_mut(ndarray::s![.., ..k]).assign(&result.weights);
    m.column_mut(k).assign(&result.dispersion);
    let mut cols = columns("w", k);
    cols.push("weight_dispersion".into());
    s.write_matrix("deconvolution.csv", &cols, m.view())?;
    if !result.unconverged.is_empty() {
        s.extra.insert("unconverged_spots".into(), json!(result.unconverged));
    }
    Ok(())
}

fn stage_markers(s: &mut Stage) -> Result<()> {
    let run = s.trained()?;
    let labels = s.labels(&run)?;
    let rows = pipeline::markers(&run, &labels, s.cfg.marker_top_n)?;
    let p = s.out("markers.csv");
    let mut w = csv::Writer::from_path(&p).with_context(|| format!("writing {}", p.display()))?;
    w.write_record(["cluster", "rank", "gene_id", "importance"])?;
    for r in &rows {
        w.write_record([r.cluster.to_string(), r.rank.to_string(), r.gene_id.clone(), format!("{:?}", r.importance)])?;
    }
    w.flush()?;
    s.written.push(p);
    Ok(())
}

fn stage_trajectory(s: &mut Stage) -> Result<()> {
    let run = s.trained()?;
    let labels = s.labels(&run)?;
    let graph = paga_connectivity(run.embeddings.z.view(), &labels, s.cfg.paga_k).map_err(PipelineError::from)?;
    s.write_json("trajectory.json", &json!({ "paga_edges": graph.edges() }))
}

fn stage_evaluate(s: &mut Stage) -> Result<()> {
    let run = s.trained()?;
    let labels = s.labels(&run)?;
    let mut warnings = Vec::new();
    let (metrics, contributions) =
        pipeline::evaluate_run(&run, &labels, s.dataset.labels.as_deref(), s.cfg, &mut warnings)?;
    for c in &contributions {
        let names: Vec<String> = c.summaries.iter().map(|m| m.modality.clone()).collect();
        s.write_matrix(&format!("contributions_{}.csv", c.source), &names, c.per_spot.view())?;
    }
    s.write_json(
        "metrics.json",
        &json!({ "metrics": metrics, "modality_contributions": contributions, "warnings": warnings }),
    )
}

fn stage_report(s: &mut Stage) -> Result<()> {
    pipeline::cluster_count(s.cfg, s.dataset.labels.as_deref())?;
    let run = s.trained()?;
    let report: AnalysisReport = pipeline::report_from_run(s.dataset, &run, s.cfg, s.args.plots)?;
    s.written.extend(write_report(&report, &s.args.out)?);
    let p = s.out(CHECKPOINT_FILE);
    run.network.save_checkpoint(&p)?;
    s.written.push(p);
    Ok(())
}
