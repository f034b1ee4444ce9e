//! The analysis report and its on-disk layout.
//!
//! | file                      | contents                                           |
//! |---------------------------|----------------------------------------------------|
//! | `embedding.csv`           | spot id + `z0..z{d-1}`                             |
//! | `labels.csv`              | spot id + cluster label                            |
//! | `report.json`             | metrics, losses, contributions, PAGA, markers      |
//! | `markers.csv`             | cluster, rank, gene_id, importance                 |
//! | `contributions_<src>.csv` | per-spot modality contributions                    |
//! | `deconvolution.csv`       | per-spot sparse weights + weight dispersion        |
//! | `visualization.csv`       | 2-D coordinates                                    |
//! | `denoised.csv`            | reconstructed expression of the selected genes     |
//! | `region_statistic.csv`    | per-spot region statistic                          |
//! | `*.svg`                   | spatial domain map and 2-D visualization           |

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{plot_scatter, write_labels, write_matrix, DataError};

/// One epoch of the training loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub l_topo_tra: f64,
    pub l_topo_mor: f64,
    pub l_recon: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PagaEdge {
    pub c: usize,
    pub d: usize,
    pub connectivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerRow {
    pub cluster: usize,
    pub rank: usize,
    pub gene_id: String,
    pub importance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionSummary {
    pub modality: String,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Modality contributions for one feature source (`input` or `embedding`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityReport {
    pub source: String,
    pub accuracy: f64,
    pub summaries: Vec<ContributionSummary>,
    /// Spots x modalities, same column order as `summaries`.
    #[serde(skip)]
    pub per_spot: Array2<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct AnalysisReport {
    pub spot_ids: Vec<String>,
    pub embedding: Array2<f64>,
    pub labels: Vec<usize>,
    pub coords: Option<Array2<f64>>,
    pub visualization: Option<Array2<f64>>,
    pub metrics: BTreeMap<String, f64>,
    pub loss_history: Vec<LossRecord>,
    pub contributions: Vec<ModalityReport>,
    pub paga_edges: Vec<PagaEdge>,
    pub markers: Vec<MarkerRow>,
    pub deconvolution: Option<(Array2<f64>, Array1<f64>)>,
    pub deconvolution_unconverged: usize,
    pub denoised: Option<(Array2<f64>, Vec<String>)>,
    pub region_statistic: Option<Array1<f64>>,
    pub warnings: Vec<String>,
    pub plots: bool,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    n_spots: usize,
    d_emb: usize,
    n_clusters: usize,
    metrics: &'a BTreeMap<String, f64>,
    loss_history: &'a [LossRecord],
    modality_contributions: &'a [ModalityReport],
    paga_edges: &'a [PagaEdge],
    markers: &'a [MarkerRow],
    #[serde(skip_serializing_if = "Option::is_none")]
    deconvolution: Option<DeconvSummary>,
    warnings: &'a [String],
}

#[derive(Serialize)]
struct DeconvSummary {
    mean_weight_dispersion: f64,
    unconverged_spots: usize,
}

fn columns(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

impl AnalysisReport {
    fn n_clusters(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// The JSON document written to `report.json`.
    pub fn to_json(&self) -> serde_json::Value {
        let doc = ReportJson {
            n_spots: self.spot_ids.len(),
            d_emb: self.embedding.ncols(),
            n_clusters: self.n_clusters(),
            metrics: &self.metrics,
            loss_history: &self.loss_history,
            modality_contributions: &self.contributions,
            paga_edges: &self.paga_edges,
            markers: &self.markers,
            deconvolution: self.deconvolution.as_ref().map(|(_, disp)| DeconvSummary {
                mean_weight_dispersion: disp.mean().unwrap_or(0.0),
                unconverged_spots: self.deconvolution_unconverged,
            }),
            warnings: &self.warnings,
        };
        serde_json::to_value(doc).expect("report serializes")
    }
}

/// Write every populated part of `report` under `out_dir`, returning the
/// paths written.
pub fn write_report(report: &AnalysisReport, out_dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| DataError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::new();
    let ids = &report.spot_ids;

    let p = out_dir.join("embedding.csv");
    write_matrix(&p, "spot_id", ids, &columns("z", report.embedding.ncols()), report.embedding.view())?;
    written.push(p);

    let p = out_dir.join("labels.csv");
    write_labels(&p, ids, &report.labels)?;
    written.push(p);

    let p = out_dir.join("report.json");
    {
        let mut w = BufWriter::new(File::create(&p).map_err(io(&p))?);
        serde_json::to_writer_pretty(&mut w, &report.to_json())
            .map_err(|e| DataError::Io {
                path: p.display().to_string(),
                source: e.into(),
            })?;
        writeln!(w).map_err(io(&p))?;
        w.flush().map_err(io(&p))?;
    }
    written.push(p);

    if !report.markers.is_empty() {
        let p = out_dir.join("markers.csv");
        let mut w = BufWriter::new(File::create(&p).map_err(io(&p))?);
        writeln!(w, "cluster,rank,gene_id,importance").map_err(io(&p))?;
        for m in &report.markers {
            writeln!(w, "{},{},{},{:?}", m.cluster, m.rank, m.gene_id, m.importance).map_err(io(&p))?;
        }
        w.flush().map_err(io(&p))?;
        written.push(p);
    }

    for c in &report.contributions {
        let p = out_dir.join(format!("contributions_{}.csv", c.source));
        let names: Vec<String> = c.summaries.iter().map(|s| s.modality.clone()).collect();
        write_matrix(&p, "spot_id", ids, &names, c.per_spot.view())?;
        written.push(p);
    }

    if let Some((weights, dispersion)) = &report.deconvolution {
        let p = out_dir.join("deconvolution.csv");
        let mut cols = columns("w", weights.ncols());
        cols.push("weight_dispersion".into());
        let mut m = Array2::zeros((weights.nrows(), weights.ncols() + 1));
        m.slice_mut(ndarray::s![.., ..weights.ncols()]).assign(weights);
        m.column_mut(weights.ncols()).assign(dispersion);
        write_matrix(&p, "spot_id", ids, &cols, m.view())?;
        written.push(p);
    }

    if let Some(vis) = &report.visualization {
        let p = out_dir.join("visualization.csv");
        write_matrix(&p, "spot_id", ids, &["v0".into(), "v1".into()], vis.view())?;
        written.push(p);
    }

    if let Some((x_hat, genes)) = &report.denoised {
        let p = out_dir.join("denoised.csv");
        write_matrix(&p, "spot_id", ids, genes, x_hat.view())?;
        written.push(p);
    }

    if let Some(stat) = &report.region_statistic {
        let p = out_dir.join("region_statistic.csv");
        let m = stat.view().insert_axis(ndarray::Axis(1));
        write_matrix(&p, "spot_id", ids, &["region_statistic".into()], m)?;
        written.push(p);
    }

    if report.plots {
        if let Some(coords) = &report.coords {
            let p = out_dir.join("spatial_domains.svg");
            plot_scatter(coords.view(), &report.labels, &p)?;
            written.push(p);
        }
        if let Some(vis) = &report.visualization {
            let p = out_dir.join("visualization.svg");
            plot_scatter(vis.view(), &report.labels, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::read_matrix;
    use ndarray::array;

    fn small_report() -> AnalysisReport {
        let mut metrics = BTreeMap::new();
        metrics.insert("ari".to_string(), 0.75);
        AnalysisReport {
            spot_ids: vec!["s0".into(), "s1".into(), "s2".into()],
            embedding: array![[0.1, -2.5], [1.0 / 3.0, 1e-17], [7.0, 0.0]],
            labels: vec![0, 0, 1],
            coords: Some(array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
            metrics,
            paga_edges: vec![PagaEdge { c: 0, d: 1, connectivity: 0.5 }],
            plots: true,
            ..Default::default()
        }
    }

    #[test]
    fn embedding_csv_has_expected_shape_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let report = small_report();
        let files = write_report(&report, dir.path()).unwrap();
        assert!(files.iter().any(|p| p.ends_with("spatial_domains.svg")));
        let m = read_matrix(&dir.path().join("embedding.csv")).unwrap();
        assert_eq!(m.values.dim(), (3, 2));
        assert_eq!(m.col_ids.len() + 1, 3);
        for (a, b) in m.values.iter().zip(report.embedding.iter()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn report_json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let report = small_report();
        write_report(&report, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, report.to_json());
        assert_eq!(parsed["metrics"]["ari"], 0.75);
    }

    #[test]
    fn unwritable_directory_is_an_io_failure() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let err = write_report(&small_report(), &blocker.join("out")).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }
}
