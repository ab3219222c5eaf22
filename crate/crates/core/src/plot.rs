//! Minimal SVG output: ROC curves and attention traces as polylines.

use std::fmt::Write;

use crate::metrics::{AttentionTrace, Roc};

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Maps unit-square coordinates into the plot area.
fn to_px(x: f64, y: f64) -> (f64, f64) {
    (MARGIN + x * (W - 2.0 * MARGIN), H - MARGIN - y * (H - 2.0 * MARGIN))
}

fn polyline(points: impl Iterator<Item = (f64, f64)>, color: &str, extra: &str) -> String {
    let pts: Vec<String> = points
        .map(|(x, y)| {
            let (px, py) = to_px(x, y);
            format!("{px:.2},{py:.2}")
        })
        .collect();
    format!(r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" {extra}points="{}"/>"#, pts.join(" "))
}

fn frame(out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let (x0, y0) = to_px(0.0, 0.0);
    let (x1, y1) = to_px(1.0, 1.0);
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(out, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#, H / 2.0, H / 2.0, escape(ylabel));
    for t in [0.0, 0.5, 1.0] {
        let (px, py) = to_px(t, t);
        let _ = writeln!(out, r#"<text x="{px}" y="{}" text-anchor="middle">{t}</text>"#, y0 + 16.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{t}</text>"#, x0 - 6.0, py + 4.0);
    }
}

/// ROC polyline with the chance diagonal and the equal-error point marked.
pub fn roc_svg(roc: &Roc, eer: f64, title: &str) -> String {
    let mut out = String::new();
    frame(&mut out, title, "false positive rate", "true positive rate");
    let _ = writeln!(out, "{}", polyline([(0.0, 0.0), (1.0, 1.0)].into_iter(), "#999999", r#"stroke-dasharray="4 3" "#));
    let _ = writeln!(out, "{}", polyline(roc.points.iter().copied(), COLORS[0], r#"id="roc" "#));
    let (ex, ey) = to_px(eer, 1.0 - eer);
    let _ = writeln!(out, r#"<circle id="eer" cx="{ex:.2}" cy="{ey:.2}" r="4" fill="{}"/>"#, COLORS[1]);
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}">EER {:.1}% (AUC {:.3})</text>"#, ex + 8.0, ey + 14.0, 100.0 * eer, roc.auc);
    out.push_str("</svg>\n");
    out
}

/// One solid curve of attention weight per source, each overlaid with a
/// dashed curve of that source's segment energy scaled to the same peak.
pub fn attention_svg(trace: &AttentionTrace, title: &str) -> String {
    let mut out = String::new();
    frame(&mut out, title, "segment", "attention weight (solid), scaled energy (dashed)");
    let s = trace.curves.first().map_or(0, Vec::len);
    let peak = trace.curves.iter().flatten().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let x = |i: usize| if s > 1 { i as f64 / (s - 1) as f64 } else { 0.5 };
    for (c, (curve, energy)) in trace.curves.iter().zip(&trace.energies).enumerate() {
        let color = COLORS[c % COLORS.len()];
        let _ = writeln!(out, "{}", polyline(curve.iter().enumerate().map(|(i, v)| (x(i), v / peak)), color, &format!(r#"id="attention-{c}" "#)));
        let emax = energy.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let _ = writeln!(out, "{}", polyline(energy.iter().enumerate().map(|(i, v)| (x(i), v / emax)), color, &format!(r#"id="energy-{c}" stroke-dasharray="5 3" opacity="0.6" "#)));
        let _ = writeln!(out, r#"<text x="{}" y="{}" fill="{color}">source {c}</text>"#, W - MARGIN - 60.0, MARGIN + 14.0 * (c as f64 + 1.0));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roc_svg_has_curve_and_eer_marker() {
        let roc = Roc { points: vec![(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)], auc: 0.875 };
        let svg = roc_svg(&roc, 0.25, "a < b & c");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains(r#"id="roc""#) && svg.contains(r#"id="eer""#));
        assert!(svg.contains("a &lt; b &amp; c"));
        assert!(svg.contains("EER 25.0%"));
    }

    #[test]
    fn attention_svg_draws_two_curves_per_source() {
        let trace = AttentionTrace { example: 0, curves: vec![vec![0.2, 0.8], vec![0.5, 0.5]], energies: vec![vec![1.0, 3.0], vec![0.0, 0.0]], row_sum_error: 0.0 };
        let svg = attention_svg(&trace, "t");
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(!svg.contains("NaN"));
    }
}
