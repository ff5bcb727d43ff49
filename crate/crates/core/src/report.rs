//! Deterministic report files: CSV tables, JSON summaries and small log-log
//! SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::adversarial::RatioCurve;
use crate::error::{MoeError, Result};
use crate::harness::{SlopeFit, SweepReport};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const LOGLOG_SVG: &str = "loglog.svg";
pub const RATIO_CSV: &str = "ratio.csv";
pub const RATIO_SVG: &str = "ratio.svg";

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| MoeError::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MoeError::io(dir, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| MoeError::input(format!("cannot serialize: {e}")))
}

pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = String::from("n,rep,loss,seed,diverged\n");
    for r in &report.records {
        let value = r.value(report.metric).map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", r.n, r.rep, value, r.seed, r.diverged);
    }
    out
}

pub fn sweep_summary(report: &SweepReport) -> serde_json::Value {
    let mut config = serde_json::to_value(&report.config).expect("config serializes");
    config["metric"] = json!(report.metric);
    json!({
        "config": config,
        "metric": report.metric,
        "per_n": report.per_n,
        "slope": report.slope.map(|s| s.slope),
        "intercept": report.slope.map(|s| s.intercept),
        "r_squared": report.slope.map(|s| s.r_squared),
        "slope_flag": report.slope_flag,
        "replication_slopes": report.replication_slopes,
        "divergence": {
            "diverged": report.diverged,
            "total": report.records.len(),
            "per_n": report.per_n.iter().map(|s| s.diverged).collect::<Vec<_>>(),
        },
    })
}

/// Writes `sweep.csv`, `summary.json` and `loglog.svg` into `dir`.
pub fn emit_report(report: &SweepReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.records.iter().all(|r| r.value(report.metric).is_none()) {
        return Err(MoeError::input("report has no completed replications; nothing written"));
    }
    ensure_dir(dir)?;
    let csv = dir.join(SWEEP_CSV);
    write_file(&csv, &sweep_csv(report))?;
    let summary = dir.join(SUMMARY_JSON);
    write_file(&summary, &to_json(&sweep_summary(report))?)?;
    let svg = dir.join(LOGLOG_SVG);
    let label = match report.metric {
        crate::harness::Metric::Voronoi => report.config.loss.to_string(),
        crate::harness::Metric::L2 => "L2 distance".to_string(),
    };
    let points: Vec<PlotPoint> = report
        .per_n
        .iter()
        .filter(|s| s.count > 0)
        .map(|s| PlotPoint {
            x: s.n as f64,
            y: s.mean,
            err: 2.0 * s.std,
        })
        .collect();
    write_file(&svg, &loglog_svg(&points, report.slope, &format!("{} vs n", label)))?;
    Ok(vec![csv, summary, svg])
}

pub fn ratio_csv(curve: &RatioCurve) -> String {
    let mut out = String::from("n,D3r,L2,ratio\n");
    for i in 0..curve.n_grid.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            curve.n_grid[i], curve.losses[i], curve.distances[i], curve.ratios[i]
        );
    }
    out
}

pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    /// Half-height of the error bar; 0 for none.
    pub err: f64,
}

const W: f64 = 640.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn decade_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let (a, b) = (lo.log10().floor() as i32, hi.log10().ceil() as i32);
    (a..=b).map(|e| 10f64.powi(e)).filter(|t| *t >= lo * 0.999 && *t <= hi * 1.001).collect()
}

/// Log-log scatter with vertical error bars and an optional fitted line
/// y = exp(intercept) · x^slope.
pub fn loglog_svg(points: &[PlotPoint], fit: Option<SlopeFit>, title: &str) -> String {
    let mut xs_lo = f64::INFINITY;
    let mut xs_hi = 0.0f64;
    let mut ys_lo = f64::INFINITY;
    let mut ys_hi = 0.0f64;
    for p in points {
        xs_lo = xs_lo.min(p.x);
        xs_hi = xs_hi.max(p.x);
        let lower = if p.y - p.err > 0.0 { p.y - p.err } else { p.y };
        ys_lo = ys_lo.min(lower);
        ys_hi = ys_hi.max(p.y + p.err);
    }
    if !(xs_lo.is_finite() && ys_lo.is_finite() && ys_lo > 0.0) {
        xs_lo = 1.0;
        xs_hi = 10.0;
        ys_lo = 1.0;
        ys_hi = 10.0;
    }
    if xs_hi <= xs_lo {
        xs_hi = xs_lo * 10.0;
    }
    if ys_hi <= ys_lo {
        ys_hi = ys_lo * 10.0;
    }
    // pad by 5% of the log range
    let (lx0, lx1) = (xs_lo.log10(), xs_hi.log10());
    let (ly0, ly1) = (ys_lo.log10(), ys_hi.log10());
    let (px, py) = (0.05 * (lx1 - lx0), 0.05 * (ly1 - ly0));
    let (lx0, lx1, ly0, ly1) = (lx0 - px, lx1 + px, ly0 - py, ly1 + py);
    let sx = |x: f64| LEFT + (x.log10() - lx0) / (lx1 - lx0) * (W - LEFT - RIGHT);
    let sy = |y: f64| H - BOTTOM - (y.log10() - ly0) / (ly1 - ly0) * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
    for t in decade_ticks(10f64.powf(lx0), 10f64.powf(lx1)) {
        let x = sx(t);
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/>"##, H - BOTTOM, H - BOTTOM + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">1e{}</text>"#, H - BOTTOM + 18.0, t.log10().round() as i32);
    }
    for t in decade_ticks(10f64.powf(ly0), 10f64.powf(ly1)) {
        let y = sy(t);
        let _ = writeln!(s, r##"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="#444"/>"##, LEFT - 5.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{}</text>"#, LEFT - 8.0, y + 4.0, t.log10().round() as i32);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">n</text>"#, W / 2.0, H - 12.0);
    for p in points {
        let (x, y) = (sx(p.x), sy(p.y));
        if p.err > 0.0 {
            let top = sy(p.y + p.err);
            let bottom = if p.y - p.err > 0.0 { sy(p.y - p.err) } else { H - BOTTOM };
            let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{top:.2}" x2="{x:.2}" y2="{bottom:.2}" stroke="#1f77b4"/>"##);
        }
        let _ = writeln!(s, r##"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="#1f77b4"/>"##);
    }
    if let (Some(f), Some(first), Some(last)) = (fit, points.first(), points.last()) {
        let line = |x: f64| (f.intercept + f.slope * x.ln()).exp();
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#ff7f0e" stroke-dasharray="8 3 2 3"/>"##,
            sx(first.x),
            sy(line(first.x)),
            sx(last.x),
            sy(line(last.x))
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="end" fill="#ff7f0e">slope {:.3}</text>"##,
            W - RIGHT - 8.0,
            TOP + 18.0,
            f.slope
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
