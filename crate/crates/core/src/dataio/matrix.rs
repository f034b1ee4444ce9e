//! Dense labelled matrices stored as CSV: a header row, then one row per
//! record whose first cell is the row id.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use super::DataError;

/// A matrix with named rows and columns, as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledMatrix {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub values: Array2<f64>,
}

impl LabelledMatrix {
    pub fn row_index(&self) -> HashMap<&str, usize> {
        self.row_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }
}

fn open(path: &Path) -> Result<csv::Reader<File>, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.display().to_string()));
    }
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Csv {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

/// Read a numeric CSV. Row ids must be unique and every other cell must
/// parse as a finite `f64`.
pub fn read_matrix(path: &Path) -> Result<LabelledMatrix, DataError> {
    let file = path.display().to_string();
    let mut rdr = open(path)?;
    let headers = rdr.headers().map_err(|e| DataError::Csv {
        path: file.clone(),
        message: e.to_string(),
    })?;
    if headers.len() < 2 {
        return Err(DataError::Csv {
            path: file,
            message: "expected an id column and at least one value column".into(),
        });
    }
    let col_ids: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let ncol = col_ids.len();
    let mut row_ids = Vec::new();
    let mut seen = HashMap::new();
    let mut data = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv {
            path: file.clone(),
            message: e.to_string(),
        })?;
        let id = record.get(0).unwrap_or_default().to_string();
        if record.len() != ncol + 1 {
            return Err(DataError::Csv {
                path: file.clone(),
                message: format!(
                    "row {} (`{id}`) has {} cells, expected {}",
                    line + 1,
                    record.len(),
                    ncol + 1
                ),
            });
        }
        if seen.insert(id.clone(), line).is_some() {
            return Err(DataError::DuplicateSpotId { path: file, id });
        }
        for (c, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell.parse().map_err(|_| DataError::NonNumericCell {
                path: file.clone(),
                row: id.clone(),
                column: col_ids[c].clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite {
                    path: file.clone(),
                    row: id.clone(),
                    column: col_ids[c].clone(),
                });
            }
            data.push(v);
        }
        row_ids.push(id);
    }
    let values = Array2::from_shape_vec((row_ids.len(), ncol), data).expect("row lengths checked");
    Ok(LabelledMatrix {
        row_ids,
        col_ids,
        values,
    })
}

/// Write a matrix as CSV. Floats use the shortest representation that
/// parses back to the same bits.
pub fn write_matrix(
    path: &Path,
    id_header: &str,
    row_ids: &[String],
    col_ids: &[String],
    values: ArrayView2<f64>,
) -> Result<(), DataError> {
    assert_eq!(row_ids.len(), values.nrows());
    assert_eq!(col_ids.len(), values.ncols());
    let io = |e: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write!(w, "{id_header}").map_err(io)?;
    for c in col_ids {
        write!(w, ",{c}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for (id, row) in row_ids.iter().zip(values.rows()) {
        write!(w, "{id}").map_err(io)?;
        for v in row {
            write!(w, ",{v:?}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Read a two-column `id,label` CSV of nonnegative integer labels.
pub fn read_labels(path: &Path) -> Result<(Vec<String>, Vec<usize>), DataError> {
    let file = path.display().to_string();
    let mut rdr = open(path)?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut seen = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| DataError::Csv {
            path: file.clone(),
            message: e.to_string(),
        })?;
        let id = record.get(0).unwrap_or_default().to_string();
        let cell = record.get(1).unwrap_or_default();
        let label: usize = cell.parse().map_err(|_| DataError::NonNumericCell {
            path: file.clone(),
            row: id.clone(),
            column: "label".into(),
            value: cell.to_string(),
        })?;
        if seen.insert(id.clone(), ()).is_some() {
            return Err(DataError::DuplicateSpotId { path: file, id });
        }
        ids.push(id);
        labels.push(label);
    }
    Ok((ids, labels))
}

pub fn write_labels(path: &Path, ids: &[String], labels: &[usize]) -> Result<(), DataError> {
    let io = |e: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "spot_id,label").map_err(io)?;
    for (id, l) in ids.iter().zip(labels) {
        writeln!(w, "{id},{l}").map_err(io)?;
    }
    w.flush().map_err(io)
}
