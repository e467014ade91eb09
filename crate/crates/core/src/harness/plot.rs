//! Learning-curve SVGs from metrics CSVs.
//!
//! Every metric column gets its own file; each input CSV becomes one
//! labeled polyline, so several runs overlay on shared axes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::metrics::{read_metrics, MetricsTable};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// One labeled series of `(x, y)` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Label of a metrics file: its stem, or the parent directory's name when
/// the stem is the generic `metrics`.
pub fn series_label(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    if stem == "metrics" {
        if let Some(dir) = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
            return dir.to_string();
        }
    }
    stem.to_string()
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders one chart. Non-finite points are dropped.
pub fn render_svg(title: &str, x_label: &str, series: &[Series]) -> String {
    let finite = |p: &&(f64, f64)| p.0.is_finite() && p.1.is_finite();
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().filter(finite).map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().filter(finite).map(|p| p.1)));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, escape(title));
    let _ = writeln!(s, r#"<g class="axes" stroke="black" fill="none">"#);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}"/>"#, TOP + ph, LEFT + pw, TOP + ph);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}"/>"#, TOP + ph);
    s.push_str("</g>\n");
    for (v, x) in [(x0, LEFT), (x1, LEFT + pw)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, TOP + ph + 16.0, fmt_tick(v));
    }
    for (v, y) in [(y0, TOP + ph), (y1, TOP)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, fmt_tick(v));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 12.0, escape(x_label));

    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(finite)
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline class="series" data-label="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                escape(&ser.label),
                pts.join(" ")
            );
        }
    }
    if !series.is_empty() {
        s.push_str("<g class=\"legend\">\n");
        for (i, ser) in series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let y = TOP + 10.0 + 18.0 * i as f64;
            let x = LEFT + pw + 12.0;
            let _ = writeln!(s, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="3"/>"#, x + 18.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x + 24.0, y + 4.0, escape(&ser.label));
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        let t = format!("{v:.3}");
        t.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Writes `<metric>.svg` into `out_dir` for every metric column of the
/// inputs (all of which must share the first file's header) and returns
/// the written paths.
pub fn emit_plots(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(Error::contract("no metrics files to plot"));
    }
    let tables: Vec<(String, MetricsTable)> = inputs
        .iter()
        .map(|p| read_metrics(p).map(|t| (series_label(p), t)))
        .collect::<Result<_>>()?;
    let header = tables[0].1.header.clone();
    if let Some((label, _)) = tables.iter().find(|(_, t)| t.header != header) {
        return Err(Error::Csv {
            line: 1,
            msg: format!("header of `{label}` differs from the first input"),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (col, metric) in header.iter().enumerate().skip(1) {
        let series: Vec<Series> = tables
            .iter()
            .map(|(label, t)| Series {
                label: label.clone(),
                points: t.rows.iter().map(|r| (r[0], r[col])).collect(),
            })
            .collect();
        let path = out_dir.join(format!("{metric}.svg"));
        std::fs::write(&path, render_svg(metric, &header[0], &series)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
