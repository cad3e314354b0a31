//! Minimal SVG renderings of PR curves and histograms.

use std::fmt::Write as _;

use super::ap::PrCurve;
use super::stats::Histogram;

const W: f64 = 480.0;
const H: f64 = 360.0;
const M: f64 = 48.0;

fn frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {M} V{} H{}" fill="none" stroke="black"/>"#,
        H - M,
        W - M
    );
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#,
        H / 2.0,
        H / 2.0
    );
    s
}

fn px(x: f64, y: f64) -> (f64, f64) {
    (M + x * (W - 2.0 * M), H - M - y * (H - 2.0 * M))
}

/// One polyline per named curve.
pub fn pr_curves_svg(curves: &[(&str, &PrCurve)]) -> String {
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut s = frame("Precision-Recall", "recall", "precision");
    for (i, (name, c)) in curves.iter().enumerate() {
        let color = colors[i % colors.len()];
        let mut d = String::new();
        for (k, (r, p)) in c.envelope().iter().enumerate() {
            let (x, y) = px(*r, *p);
            let _ = write!(d, "{}{x:.1} {y:.1} ", if k == 0 { "M" } else { "L" });
        }
        let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="2"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{name} (AP {:.3})</text>"#,
            W - M - 150.0,
            M + 16.0 * (i as f64 + 1.0),
            c.ap
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn histogram_svg(h: &Histogram, title: &str) -> String {
    let mut s = frame(title, "width / height", "faces");
    let max = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let n = h.counts.len() as f64;
    for (i, &c) in h.counts.iter().enumerate() {
        let (x0, y) = px(i as f64 / n, c as f64 / max);
        let (x1, y0) = px((i as f64 + 1.0) / n, 0.0);
        let _ = writeln!(
            s,
            r##"<rect x="{x0:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="#1f77b4" stroke="white"/>"##,
            x1 - x0,
            y0 - y
        );
    }
    for (i, e) in h.edges.iter().enumerate().step_by(4) {
        let (x, y) = px(i as f64 / n, 0.0);
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{e}</text>"#,
            y + 14.0
        );
    }
    s.push_str("</svg>\n");
    s
}
