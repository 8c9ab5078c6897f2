//! Minimal SVG line charts for run directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const LEGEND: f64 = 160.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart; with `log_y` nonpositive values are dropped.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> String {
    let tf = |y: f64| if log_y { y.log10() } else { y };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
                .map(|&(x, y)| (x, tf(y)))
                .collect()
        })
        .collect();
    let all = pts.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pw = WIDTH - 2.0 * MARGIN - LEGEND;
    let ph = HEIGHT - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="25" text-anchor="middle" font-size="15">{}</text>"#, MARGIN + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let ylab = if log_y { format!("{:.3e}", 10f64.powf(yv)) } else { format!("{yv:.3e}") };
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.4}</text>"#, sx(xv), MARGIN + ph + 18.0, xv);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{ylab}</text>"#, MARGIN - 4.0, sy(yv) + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        MARGIN + pw / 2.0,
        HEIGHT - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}{}</text>"#,
        MARGIN + ph / 2.0,
        MARGIN + ph / 2.0,
        escape(y_label),
        if log_y { " (log)" } else { "" }
    );
    for (i, (ser, p)) in series.iter().zip(&pts).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !p.is_empty() {
            let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
                path.join(" ")
            );
        }
        let ly = MARGIN + 14.0 * i as f64;
        let lx = WIDTH - LEGEND - MARGIN + 75.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 22.0, ly + 4.0, escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

/// Parses a numeric CSV with a header row. Empty cells become NaN.
pub fn read_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| invalid("empty CSV"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|c| if c.is_empty() { Ok(f64::NAN) } else { c.parse::<f64>() })
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| invalid(format!("CSV line {}: {e}", i + 2)))?;
        if row.len() != header.len() {
            return Err(invalid(format!("CSV line {}: {} cells, header has {}", i + 2, row.len(), header.len())));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn column(header: &[String], rows: &[Vec<f64>], name: &str) -> Option<Vec<f64>> {
    let j = header.iter().position(|h| h == name)?;
    Some(rows.iter().map(|r| r[j]).collect())
}

/// Writes `loss.svg` (smoothed loss of every run) and one
/// `features_<run>.svg` per run into `<dir>/plots`. Returns the files.
pub fn plot_run_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let runs = dir.join("runs");
    let mut files: Vec<PathBuf> = fs::read_dir(&runs)
        .map_err(|e| invalid(format!("{}: {e}", runs.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && !p.file_stem().is_some_and(|s| s.to_string_lossy().ends_with("_m0"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(invalid(format!("no run CSVs in {}", runs.display())));
    }
    let out = dir.join("plots");
    fs::create_dir_all(&out)?;
    let mut written = Vec::new();
    let mut loss = Vec::new();
    for f in &files {
        let name = f.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let (header, rows) = read_csv(&fs::read_to_string(f)?)?;
        let step = column(&header, &rows, "step").ok_or_else(|| invalid(format!("{}: no step column", f.display())))?;
        if let Some(ema) = column(&header, &rows, "loss_ema") {
            loss.push(Series {
                name: name.clone(),
                points: step.iter().copied().zip(ema).collect(),
            });
        }
        let feats: Vec<Series> = header
            .iter()
            .filter(|h| h.starts_with("h_norm_"))
            .map(|h| Series {
                name: h.clone(),
                points: step.iter().copied().zip(column(&header, &rows, h).unwrap()).collect(),
            })
            .collect();
        let path = out.join(format!("features_{name}.svg"));
        fs::write(&path, line_chart_svg(&format!("feature norms: {name}"), "step", "||h_i||", &feats, true))?;
        written.push(path);
    }
    let path = out.join("loss.svg");
    fs::write(&path, line_chart_svg("smoothed training loss", "step", "loss_ema", &loss, true))?;
    written.push(path);
    Ok(written)
}
