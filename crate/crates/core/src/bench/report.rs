//! CSV and SVG output of sweep rows.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Field, SweepRow};
use crate::engines::StrategyId;
use crate::error::Result;

pub const CSV_HEADER: &str = "strategy,L_total,n,d,peak_bytes,time_ms,max_rel_err,status";

pub fn write_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let peak = r.peak_bytes.map(|v| v.to_string()).unwrap_or_default();
        let time = r.time_ms.map(|v| format!("{v:.3}")).unwrap_or_default();
        let err = r.max_rel_err.map(|v| format!("{v:.3e}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{peak},{time},{err},{}", r.strategy, r.l_total, r.n, r.d, r.status);
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

/// Line chart of `y` against `L_total`, one polyline per strategy.
pub fn svg_chart(rows: &[SweepRow], y: Field) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (80.0, 150.0, 30.0, 50.0);
    let pts: Vec<(StrategyId, f64, f64)> =
        rows.iter().filter_map(|r| Some((r.strategy, r.l_total as f64, y.get(r)?))).collect();
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let (y0, y1) = pts.iter().fold((0.0f64, f64::NEG_INFINITY), |(a, b), p| (a.min(p.2), b.max(p.2)));
    let pw = w - left - right;
    let ph = h - top - bottom;
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">L_total</text>"#, left + pw / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">{}</text>"#, top + ph / 2.0, top + ph / 2.0, y.name());
    if pts.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let xspan = if x1 > x0 { x1 - x0 } else { 1.0 };
    let yspan = if y1 > y0 { y1 - y0 } else { 1.0 };
    let sx = |v: f64| left + (v - x0) / xspan * pw;
    let sy = |v: f64| top + ph - (v - y0) / yspan * ph;
    for (v, anchor, yy) in [(x0, "start", top + ph + 18.0), (x1, "end", top + ph + 18.0)] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{yy}" text-anchor="{anchor}">{v}</text>"#, sx(v));
    }
    for v in [y0, y1] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.4}</text>"#, left - 5.0, sy(v) + 4.0);
    }
    let mut legend = 0;
    for (i, id) in StrategyId::ALL.iter().enumerate() {
        let mut line: Vec<(f64, f64)> = pts.iter().filter(|p| p.0 == *id).map(|p| (p.1, p.2)).collect();
        if line.is_empty() {
            continue;
        }
        line.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = line.iter().map(|&(a, b)| format!("{:.1},{:.1}", sx(a), sy(b))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, coords.join(" "));
        let ly = top + 15.0 + 18.0 * legend as f64;
        let lx = left + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{id}</text>"#,
            lx + 20.0,
            lx + 25.0,
            ly + 4.0
        );
        legend += 1;
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `sweep.csv` and, if requested, `peak_bytes.svg` and `time_ms.svg` into
/// `outdir`. Returns the written paths.
pub fn emit_report(rows: &[SweepRow], outdir: &Path, svg: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(outdir)?;
    let mut written = Vec::new();
    let csv = outdir.join("sweep.csv");
    std::fs::write(&csv, write_csv(rows))?;
    written.push(csv);
    if svg {
        for f in [Field::PeakBytes, Field::TimeMs] {
            let p = outdir.join(format!("{}.svg", f.name()));
            std::fs::write(&p, svg_chart(rows, f))?;
            written.push(p);
        }
    }
    Ok(written)
}
