use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nco_core::train::resolve;

use crate::PlotArgs;

struct Series {
    run: String,
    /// `(epoch, step, samples, val_cost)`
    points: Vec<(usize, u64, u64, f64)>,
}

/// Rollouts per gradient step from the config echoed next to the metrics,
/// or `None` when there is none.
fn samples_per_step(metrics: &Path) -> Result<Option<u64>> {
    let path = metrics.with_file_name("config.toml");
    let Ok(text) = std::fs::read_to_string(&path) else {
        return Ok(None);
    };
    let cfg = resolve(&[(path.display().to_string(), text)], &[])?;
    Ok(Some((cfg.batch_size() * cfg.baseline_kind()?.group_size()) as u64))
}

fn read_series(path: &Path) -> Result<Series> {
    let per_step = samples_per_step(path)?;
    let mut r = csv::Reader::from_path(path).with_context(|| path.display().to_string())?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).with_context(|| format!("{}: no {name} column", path.display()))
    };
    let (e, s, v) = (col("epoch")?, col("step")?, col("val_cost")?);
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let step: u64 = rec[s].parse()?;
        points.push((rec[e].parse()?, step, step * per_step.unwrap_or(1), rec[v].parse()?));
    }
    let run = path
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    Ok(Series { run, points })
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn svg(series: &[Series]) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 440.0, 70.0, 160.0, 20.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(_, _, x, y) in pts {
        x0 = x0.min(x as f64);
        x1 = x1.max(x as f64);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| top + (y1 - y) / (y1 - y0) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (bx, by) = (h - bottom, w - right);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{bx}" x2="{by}" y2="{bx}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bx}" stroke="black"/>"#);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ =
            writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, px(fx), bx + 18.0, short(fx));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{fy:.3}</text>"#, left - 6.0, py(fy) + 4.0);
    }
    let _ =
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">samples</text>"#, (left + by) / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">validation cost</text>"#,
        (top + bx) / 2.0,
        (top + bx) / 2.0
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let line: Vec<String> =
            ser.points.iter().map(|&(_, _, x, y)| format!("{:.1},{:.1}", px(x as f64), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, line.join(" "));
        let ly = top + 16.0 * i as f64 + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            by + 10.0,
            by + 30.0
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, by + 36.0, ly + 4.0, escape(&ser.run));
    }
    s.push_str("</svg>\n");
    s
}

fn short(x: f64) -> String {
    match x.abs() {
        a if a >= 1e6 => format!("{:.1}M", x / 1e6),
        a if a >= 1e3 => format!("{:.0}k", x / 1e3),
        _ => format!("{x:.0}"),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn plot(a: PlotArgs) -> Result<()> {
    let series = a.metrics.iter().map(|p| read_series(p)).collect::<Result<Vec<_>>>()?;
    if series.iter().all(|s| s.points.is_empty()) {
        bail!("no metrics rows to plot");
    }
    let csv_path = a.out.with_extension("csv");
    let svg_path = a.out.with_extension("svg");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| csv_path.display().to_string())?;
    w.write_record(["run", "epoch", "step", "samples", "val_cost"])?;
    for s in &series {
        for &(e, st, x, y) in &s.points {
            w.write_record([s.run.clone(), e.to_string(), st.to_string(), x.to_string(), format!("{y}")])?;
        }
    }
    w.flush()?;
    std::fs::write(&svg_path, svg(&series)).with_context(|| svg_path.display().to_string())?;
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}
