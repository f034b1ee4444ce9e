//! Reading spot data and configuration, writing embeddings, reports and plots.

mod config;
mod matrix;
mod report;
mod svg;

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, Axis};
use thiserror::Error;

pub use config::{load_config, ConfigError, Epsilon, FusionMode, RunConfig, CONFIG_KEYS};
pub use matrix::{read_labels, read_matrix, write_labels, write_matrix, LabelledMatrix};
pub use report::{
    write_report, AnalysisReport, ContributionSummary, LossRecord, MarkerRow, ModalityReport,
    PagaEdge,
};
pub use svg::plot_scatter;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("{path}: spot `{id}` is missing (ids must cover every expression row)")]
    RowCountMismatch { path: String, id: String },
    #[error("{path}: non-numeric cell {value:?} at row `{row}`, column `{column}`")]
    NonNumericCell {
        path: String,
        row: String,
        column: String,
        value: String,
    },
    #[error("{path}: non-finite value at row `{row}`, column `{column}`")]
    NonFinite {
        path: String,
        row: String,
        column: String,
    },
    #[error("{path}: duplicate spot id `{id}`")]
    DuplicateSpotId { path: String, id: String },
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
    #[error("dataset needs at least 2 spots, found {0}")]
    TooFewSpots(usize),
    #[error("coordinates must have exactly 2 columns, found {0}")]
    CoordinateWidth(usize),
    #[error("{0}")]
    Precondition(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Per-spot measurements of every modality, aligned by row.
#[derive(Clone, Debug, PartialEq)]
pub struct SpotDataset {
    /// Expression, spots x genes.
    pub tra: Array2<f64>,
    /// Morphology features, spots x features.
    pub mor: Option<Array2<f64>>,
    /// Spatial positions, spots x 2.
    pub coords: Array2<f64>,
    pub spot_ids: Vec<String>,
    pub gene_ids: Vec<String>,
    pub mor_ids: Vec<String>,
    pub labels: Option<Vec<usize>>,
}

impl SpotDataset {
    pub fn n_spots(&self) -> usize {
        self.tra.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.tra.ncols()
    }

    /// Check the structural invariants shared by loaded and generated data.
    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.tra.nrows();
        if n < 2 {
            return Err(DataError::TooFewSpots(n));
        }
        if self.tra.ncols() == 0 {
            return Err(DataError::Precondition("expression matrix has no genes".into()));
        }
        if self.coords.ncols() != 2 {
            return Err(DataError::CoordinateWidth(self.coords.ncols()));
        }
        let rows_ok = self.coords.nrows() == n
            && self.spot_ids.len() == n
            && self.gene_ids.len() == self.tra.ncols()
            && self.mor.as_ref().is_none_or(|m| m.nrows() == n)
            && self.labels.as_ref().is_none_or(|l| l.len() == n);
        if !rows_ok {
            return Err(DataError::Precondition("modalities disagree on the number of spots".into()));
        }
        let finite = self.tra.iter().all(|v| v.is_finite())
            && self.coords.iter().all(|v| v.is_finite())
            && self.mor.as_ref().is_none_or(|m| m.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(DataError::Precondition("dataset contains NaN or infinite values".into()));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &self.spot_ids {
            if !seen.insert(id) {
                return Err(DataError::DuplicateSpotId {
                    path: "<dataset>".into(),
                    id: id.clone(),
                });
            }
        }
        Ok(())
    }

    /// Write the dataset as `tra.csv`, `coords.csv`, and optionally
    /// `mor.csv` and `labels.csv` under `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        write_matrix(&dir.join("tra.csv"), "spot_id", &self.spot_ids, &self.gene_ids, self.tra.view())?;
        write_matrix(
            &dir.join("coords.csv"),
            "spot_id",
            &self.spot_ids,
            &["x".to_string(), "y".to_string()],
            self.coords.view(),
        )?;
        if let Some(mor) = &self.mor {
            write_matrix(&dir.join("mor.csv"), "spot_id", &self.spot_ids, &self.mor_ids, mor.view())?;
        }
        if let Some(labels) = &self.labels {
            write_labels(&dir.join("labels.csv"), &self.spot_ids, labels)?;
        }
        Ok(())
    }

    /// Load the layout written by [`SpotDataset::write_dir`]; `mor.csv` and
    /// `labels.csv` are picked up when present.
    pub fn read_dir(dir: &Path) -> Result<Self, DataError> {
        let opt = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        load_dataset(
            &dir.join("tra.csv"),
            &dir.join("coords.csv"),
            opt("mor.csv").as_deref(),
            opt("labels.csv").as_deref(),
        )
    }
}

/// Reorder `m` to follow `ids`, failing if any id is absent.
fn align(m: &LabelledMatrix, ids: &[String], path: &Path) -> Result<Array2<f64>, DataError> {
    let index = m.row_index();
    let rows = ids
        .iter()
        .map(|id| {
            index.get(id.as_str()).copied().ok_or_else(|| DataError::RowCountMismatch {
                path: path.display().to_string(),
                id: id.clone(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(m.values.select(Axis(0), &rows))
}

/// Load a dataset from CSV files. Rows follow the order of `tra_path`; the
/// other files may list extra spots (ignored) but not fewer.
pub fn load_dataset(
    tra_path: &Path,
    coords_path: &Path,
    mor_path: Option<&Path>,
    labels_path: Option<&Path>,
) -> Result<SpotDataset, DataError> {
    let tra = read_matrix(tra_path)?;
    let coords_m = read_matrix(coords_path)?;
    if coords_m.values.ncols() != 2 {
        return Err(DataError::CoordinateWidth(coords_m.values.ncols()));
    }
    let spot_ids = tra.row_ids.clone();
    let coords = align(&coords_m, &spot_ids, coords_path)?;
    let (mor, mor_ids) = match mor_path {
        Some(p) => {
            let m = read_matrix(p)?;
            (Some(align(&m, &spot_ids, p)?), m.col_ids)
        }
        None => (None, Vec::new()),
    };
    let labels = match labels_path {
        Some(p) => {
            let (ids, labels) = read_labels(p)?;
            let index: std::collections::HashMap<&str, usize> =
                ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            let aligned = spot_ids
                .iter()
                .map(|id| {
                    index.get(id.as_str()).map(|&i| labels[i]).ok_or_else(|| {
                        DataError::RowCountMismatch {
                            path: p.display().to_string(),
                            id: id.clone(),
                        }
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Some(aligned)
        }
        None => None,
    };
    let ds = SpotDataset {
        tra: tra.values,
        mor,
        coords,
        spot_ids,
        gene_ids: tra.col_ids,
        mor_ids,
        labels,
    };
    ds.validate()?;
    Ok(ds)
}
