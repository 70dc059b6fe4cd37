//! Minimal SVG renderings of analysis matrices and histograms. Every cell
//! and bar carries its exact value in a `<title>` element.

use std::fmt::Write as _;

const CELL: f64 = 36.0;
const MARGIN: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grey-scale heatmap, darker for larger values.
pub fn heatmap(matrix: &[Vec<f64>], title: &str) -> String {
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, |r| r.len());
    let (lo, hi) = matrix
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let w = MARGIN * 2.0 + CELL * cols as f64;
    let h = MARGIN * 2.0 + CELL * rows as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="10">"#
    );
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="20">{}</text>"#, escape(title));
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - (v - lo) / span)).round().clamp(0.0, 255.0) as u8;
            let x = MARGIN + CELL * j as f64;
            let y = MARGIN + CELL * i as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},{shade})"><title>({i},{j}) {v}</title></rect>"#
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bars over `edges.len() - 1` bins.
pub fn histogram(edges: &[f64], counts: &[usize], title: &str) -> String {
    let bars = counts.len();
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar_w = 8.0;
    let plot_h = 200.0;
    let w = MARGIN * 2.0 + bar_w * bars as f64;
    let h = MARGIN * 2.0 + plot_h;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="10">"#
    );
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="20">{}</text>"#, escape(title));
    for (b, &c) in counts.iter().enumerate() {
        let bh = plot_h * c as f64 / max;
        let x = MARGIN + bar_w * b as f64;
        let y = MARGIN + plot_h - bh;
        let (lo, hi) = (edges[b], edges[b + 1]);
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{y}" width="{bar_w}" height="{bh}" fill="steelblue"><title>[{lo}, {hi}) {c}</title></rect>"#
        );
    }
    s.push_str("</svg>\n");
    s
}
