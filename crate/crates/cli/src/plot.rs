//! Minimal SVG line charts for training curves.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let finite = || series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(svg, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#);
    for (v, y) in [(y0, b), (y1, t)] {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.3}</text>"#, l - 4.0, y + 4.0);
    }
    for (v, x) in [(x0, l), (x1, r)] {
        let _ = writeln!(svg, r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{v}</text>"#, b + 16.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#, W / 2.0, H - 10.0, escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(svg, r#"<polyline points="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#, pts.join(" "));
        }
        let ly = t + 14.0 * i as f64;
        let _ = writeln!(svg, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, r - 90.0, r - 70.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#, r - 66.0, ly + 4.0, escape(&s.label));
    }
    svg.push_str("</svg>\n");
    svg
}
