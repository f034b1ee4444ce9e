use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;

use super::DataError;

const PALETTE: [&str; 20] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5", "#c49c94",
    "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5",
];

fn label_color(label: usize) -> String {
    if let Some(c) = PALETTE.get(label) {
        return (*c).to_string();
    }
    // Golden-angle hues past the fixed palette; lightness cycles to keep
    // neighbouring indices apart.
    let hue = (label as f64 * 137.507_764) % 360.0;
    let light = 35 + (label % 4) * 10;
    format!("hsl({hue:.3},65%,{light}%)")
}

/// Render a labelled scatter plot as SVG: one `<circle>` per point, colored
/// by label index.
pub fn plot_scatter(
    points: ArrayView2<f64>,
    labels: &[usize],
    path: &Path,
) -> Result<PathBuf, DataError> {
    let n = points.nrows();
    if n == 0 || points.ncols() != 2 {
        return Err(DataError::Precondition(format!(
            "scatter plot needs an N x 2 matrix with N >= 1, got {:?}",
            points.dim()
        )));
    }
    if labels.len() != n {
        return Err(DataError::Precondition(format!(
            "scatter plot has {n} points but {} labels",
            labels.len()
        )));
    }

    const SIZE: f64 = 600.0;
    const MARGIN: f64 = 20.0;
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points.rows() {
        xmin = xmin.min(p[0]);
        xmax = xmax.max(p[0]);
        ymin = ymin.min(p[1]);
        ymax = ymax.max(p[1]);
    }
    let span = (xmax - xmin).max(ymax - ymin).max(f64::MIN_POSITIVE);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let radius = (SIZE / (n as f64).sqrt() / 4.0).clamp(1.5, 8.0);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (p, &label) in points.rows().into_iter().zip(labels) {
        let cx = MARGIN + (p[0] - xmin) * scale;
        // SVG y grows downward.
        let cy = SIZE - MARGIN - (p[1] - ymin) * scale;
        let _ = writeln!(
            svg,
            r#"<circle cx="{cx:.3}" cy="{cy:.3}" r="{radius:.2}" fill="{}"><title>{label}</title></circle>"#,
            label_color(label)
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path.to_path_buf())
}
