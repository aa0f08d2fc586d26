//! Static SVG line charts of RMSE and ACC against lead time.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::evaluation::MetricsTable;

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 280.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Per-lead mean over variables, sorted by lead.
fn series(table: &MetricsTable) -> Vec<(f64, f64, f64)> {
    let mut by_lead: BTreeMap<u64, (f64, f64, f64, usize)> = BTreeMap::new();
    for r in &table.rows {
        let e = by_lead
            .entry(r.lead_hours.to_bits())
            .or_insert((r.lead_hours, 0.0, 0.0, 0));
        e.1 += r.rmse;
        e.2 += r.acc;
        e.3 += 1;
    }
    let mut out: Vec<(f64, f64, f64)> = by_lead
        .values()
        .map(|&(l, r, a, n)| (l, r / n as f64, a / n as f64))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Two panels (RMSE, ACC) with one polyline per labelled table in each.
pub fn emit_plot(tables: &[(String, MetricsTable)]) -> Result<String> {
    if tables.is_empty() {
        return Err(Error::invalid("plot needs at least one metrics table"));
    }
    let all: Vec<(&str, Vec<(f64, f64, f64)>)> = tables.iter().map(|(l, t)| (l.as_str(), series(t))).collect();
    let leads: Vec<f64> = all[0].1.iter().map(|p| p.0).collect();
    if leads.is_empty() {
        return Err(Error::invalid(format!("metrics for `{}` have no rows", all[0].0)));
    }
    for (label, s) in &all[1..] {
        if s.iter().map(|p| p.0).ne(leads.iter().copied()) {
            return Err(Error::invalid(format!(
                "lead axis of `{label}` differs from `{}`",
                all[0].0
            )));
        }
    }
    let width = 2.0 * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2.0 * MARGIN + 24.0 * all.len() as f64;
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    let (x_lo, x_hi) = nice_range(leads[0], leads[leads.len() - 1]);
    for (panel, name) in ["RMSE", "ACC"].iter().enumerate() {
        let ox = MARGIN + panel as f64 * (PANEL_W + MARGIN);
        let oy = MARGIN;
        let values = all
            .iter()
            .flat_map(|(_, s)| s.iter().map(|p| if panel == 0 { p.1 } else { p.2 }));
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let (y_lo, y_hi) = nice_range(lo, hi);
        let px = |x: f64| ox + (x - x_lo) / (x_hi - x_lo) * PANEL_W;
        let py = |y: f64| oy + PANEL_H - (y - y_lo) / (y_hi - y_lo) * PANEL_H;
        writeln!(svg, r#"<g class="panel" id="{}">"#, name.to_lowercase()).unwrap();
        writeln!(
            svg,
            r#"<rect x="{ox}" y="{oy}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{name}</text>"#,
            ox + PANEL_W / 2.0,
            oy - 12.0
        )
        .unwrap();
        for t in 0..=4 {
            let yv = y_lo + (y_hi - y_lo) * t as f64 / 4.0;
            let y = py(yv);
            writeln!(svg, r#"<line x1="{}" y1="{y:.2}" x2="{ox}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{yv:.3}</text>"#, ox - 4.0, ox - 6.0, y + 4.0).unwrap();
        }
        for &l in &leads {
            let x = px(l);
            writeln!(svg, r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{l}</text>"#, oy + PANEL_H, oy + PANEL_H + 4.0, oy + PANEL_H + 18.0).unwrap();
        }
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">lead time (h)</text>"#,
            ox + PANEL_W / 2.0,
            oy + PANEL_H + 36.0
        )
        .unwrap();
        for (k, (label, s)) in all.iter().enumerate() {
            let pts: Vec<String> = s
                .iter()
                .map(|p| format!("{:.2},{:.2}", px(p.0), py(if panel == 0 { p.1 } else { p.2 })))
                .collect();
            writeln!(
                svg,
                r#"<polyline data-label="{}" fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
                escape(label),
                COLORS[k % COLORS.len()],
                pts.join(" ")
            )
            .unwrap();
        }
        writeln!(svg, "</g>").unwrap();
    }
    writeln!(svg, r#"<g class="legend">"#).unwrap();
    for (k, (label, _)) in all.iter().enumerate() {
        let y = MARGIN + PANEL_H + 56.0 + 24.0 * k as f64;
        writeln!(svg, r#"<line x1="{MARGIN}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#, MARGIN + 24.0, COLORS[k % COLORS.len()], MARGIN + 30.0, y + 4.0, escape(label)).unwrap();
    }
    writeln!(svg, "</g>\n</svg>").unwrap();
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
