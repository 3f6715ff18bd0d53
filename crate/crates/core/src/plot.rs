//! Curve plots from the metric CSVs.
//!
//! The first column is the x axis (`l_c_m` is drawn in millimeters). Every
//! other column not prefixed `std_` is a series; a matching `std_` column
//! becomes its error bars. Legend labels drop the metric prefix, so
//! `mean_entropy_bits_with_diffuser` reads "with diffuser".

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};

const METRIC_PREFIXES: [&str; 5] = [
    "mean_entropy_bits",
    "mean_speckle_size_m",
    "visibility",
    "accuracy",
    "mean_accuracy",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub column: String,
    pub label: String,
    pub y: Vec<f64>,
    pub err: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvCurves {
    pub x_column: String,
    pub x: Vec<f64>,
    pub series: Vec<Series>,
}

pub fn series_label(column: &str) -> String {
    for p in METRIC_PREFIXES {
        if let Some(rest) = column.strip_prefix(p).and_then(|r| r.strip_prefix('_')) {
            return rest.replace('_', " ");
        }
    }
    column.replace('_', " ")
}

/// Parses a metric CSV. Errors name the offending 1-based line.
pub fn parse_csv(text: &str) -> Result<CsvCurves> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::data("CSV line 1: missing header"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols.iter().any(|c| c.is_empty()) {
        return Err(Error::data("CSV line 1: need an x column and at least one series"));
    }
    let mut data: Vec<Vec<f64>> = vec![Vec::new(); cols.len()];
    for (i, line) in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != cols.len() {
            return Err(Error::data(format!(
                "CSV line {}: {} fields, header has {}",
                i + 1,
                cells.len(),
                cols.len()
            )));
        }
        for (j, c) in cells.iter().enumerate() {
            let v: f64 = c
                .parse()
                .map_err(|_| Error::data(format!("CSV line {}: {c:?} is not a number", i + 1)))?;
            data[j].push(v);
        }
    }
    if data[0].is_empty() {
        return Err(Error::data("CSV has no data rows"));
    }
    let mut series = Vec::new();
    for (j, &c) in cols.iter().enumerate().skip(1) {
        if c.starts_with("std_") {
            continue;
        }
        let std_name = c
            .strip_prefix("mean_")
            .map(|rest| format!("std_{rest}"))
            .unwrap_or_else(|| format!("std_{c}"));
        let err = cols.iter().position(|&k| k == std_name).map(|k| data[k].clone());
        series.push(Series {
            column: c.to_string(),
            label: series_label(c),
            y: data[j].clone(),
            err,
        });
    }
    if series.is_empty() {
        return Err(Error::data("CSV line 1: no series columns"));
    }
    Ok(CsvCurves {
        x_column: cols[0].to_string(),
        x: data.swap_remove(0),
        series,
    })
}

fn axis_label(column: &str) -> (&'static str, f64) {
    match column {
        "l_c_m" => ("coherence length l_c (mm)", 1e3),
        "depth_m" => ("detector depth (m)", 1.0),
        _ => ("x", 1.0),
    }
}

fn y_label(series: &[Series]) -> &'static str {
    let c = &series[0].column;
    if c.starts_with("mean_entropy_bits") {
        "mean 2D entropy (bits)"
    } else if c.starts_with("mean_speckle_size_m") {
        "mean speckle size (m)"
    } else if c.starts_with("visibility") {
        "fringe visibility"
    } else if c.contains("accuracy") {
        "test accuracy"
    } else {
        "value"
    }
}

/// Renders `curves` as an SVG line plot at `out`.
pub fn render_svg(curves: &CsvCurves, title: &str, out: &Path) -> Result<()> {
    let (x_label, x_scale) = axis_label(&curves.x_column);
    let xs: Vec<f64> = curves.x.iter().map(|x| x * x_scale).collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &curves.series {
        for (i, &y) in s.y.iter().enumerate() {
            let e = s.err.as_ref().map_or(0.0, |e| e[i]);
            lo = lo.min(y - e);
            hi = hi.max(y + e);
        }
    }
    let pad = ((hi - lo) * 0.08).max(hi.abs() * 1e-3).max(1e-12);
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let xpad = ((x1 - x0) * 0.04).max(1e-9);

    let err = |e: String| Error::data(format!("plot {}: {e}", out.display()));
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let root = SVGBackend::new(out, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(48)
        .y_label_area_size(72)
        .build_cartesian_2d((x0 - xpad)..(x1 + xpad), (lo - pad)..(hi + pad))
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label(&curves.series))
        .draw()
        .map_err(|e| err(e.to_string()))?;

    let palette = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];
    for (k, s) in curves.series.iter().enumerate() {
        let color = palette[k % palette.len()];
        let pts: Vec<(f64, f64)> = xs.iter().copied().zip(s.y.iter().copied()).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 4, color.filled())))
            .map_err(|e| err(e.to_string()))?;
        if let Some(e) = &s.err {
            chart
                .draw_series(
                    pts.iter()
                        .zip(e)
                        .map(|(&(x, y), &e)| PathElement::new(vec![(x, y - e), (x, y + e)], color)),
                )
                .map_err(|e| err(e.to_string()))?;
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))?;
    Ok(())
}

/// Plots each CSV to `<out_dir>/<stem>.svg` and returns the written paths.
pub fn cmd_plot(csvs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if csvs.is_empty() {
        return Err(Error::config("no CSV files to plot"));
    }
    let mut written = Vec::with_capacity(csvs.len());
    for path in csvs {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let curves = parse_csv(&text).map_err(|e| match e {
            Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
        let out = out_dir.join(format!("{stem}.svg"));
        render_svg(&curves, stem, &out)?;
        written.push(out);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_drop_metric_prefix() {
        assert_eq!(series_label("mean_entropy_bits_with_diffuser"), "with diffuser");
        assert_eq!(series_label("mean_entropy_bits_without_diffuser"), "without diffuser");
        assert_eq!(series_label("visibility"), "visibility");
    }

    #[test]
    fn comparison_csv_has_two_series_with_errors() {
        let c = parse_csv(
            "l_c_m,mean_entropy_bits_without_diffuser,std_entropy_bits_without_diffuser,\
             mean_entropy_bits_with_diffuser,std_entropy_bits_with_diffuser\n\
             1e-4,5,0.1,3,0.2\n8e-3,7,0.1,4,0.2\n",
        )
        .unwrap();
        assert_eq!(c.series.len(), 2);
        assert_eq!(c.series[1].label, "with diffuser");
        assert_eq!(c.series[1].err, Some(vec![0.2, 0.2]));
        assert_eq!(c.x, vec![1e-4, 8e-3]);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let e = parse_csv("l_c_m,visibility\n1e-4,0.1\n2e-4,abc\n").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        let e = parse_csv("l_c_m,visibility\n1e-4\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(parse_csv("l_c_m,visibility\n").is_err());
        assert!(parse_csv("").is_err());
    }

    #[test]
    fn renders_nonempty_svg_with_legend() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("entropy_comparison.csv");
        fs::write(
            &csv,
            "l_c_m,mean_entropy_bits_without_diffuser,mean_entropy_bits_with_diffuser\n1e-4,5,3\n8e-3,7,4\n",
        )
        .unwrap();
        let out = cmd_plot(&[csv], dir.path()).unwrap();
        let svg = fs::read_to_string(&out[0]).unwrap();
        assert!(svg.contains("with diffuser") && svg.contains("without diffuser"));
        assert!(cmd_plot(&[], dir.path()).is_err());
    }
}
