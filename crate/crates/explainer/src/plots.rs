//! Minimal SVG charts for the report.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - MARGIN,
        W - MARGIN / 2.0,
        H - MARGIN
    );
    let _ = writeln!(s, r#"<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{}" stroke="black"/>"#, H - MARGIN);
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn y_of(v: f64, max: f64) -> f64 {
    let span = H - 2.0 * MARGIN;
    H - MARGIN - if max > 0.0 { v / max * span } else { 0.0 }
}

/// Bar chart with one labelled bar per entry.
pub fn bar_chart(title: &str, bars: &[(&str, f64)]) -> String {
    let mut s = header(title);
    let max = bars.iter().map(|b| b.1).fold(0.0, f64::max) * 1.1;
    let slot = (W - 1.5 * MARGIN) / bars.len().max(1) as f64;
    let colors = ["#888888", "#2e8b57", "#4169e1", "#cd853f"];
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = MARGIN + slot * i as f64 + slot * 0.2;
        let y = y_of(*v, max);
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            slot * 0.6,
            H - MARGIN - y,
            colors[i % colors.len()]
        );
        let cx = x + slot * 0.3;
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{v:.4}</text>"#, y - 4.0);
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, H - MARGIN + 16.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

/// Line chart of `values` against their index, on a `[0, y_max]` axis.
pub fn line_chart(title: &str, x_label: &str, values: &[f64], y_max: f64) -> String {
    let mut s = header(title);
    let n = values.len();
    let span = W - 1.5 * MARGIN;
    let x_of = |i: usize| MARGIN + if n > 1 { span * i as f64 / (n - 1) as f64 } else { span / 2.0 };
    let points: Vec<String> = values.iter().enumerate().map(|(i, v)| format!("{:.2},{:.2}", x_of(i), y_of(*v, y_max))).collect();
    if !points.is_empty() {
        let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#2e8b57" stroke-width="2"/>"##, points.join(" "));
    }
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let v = tick * y_max;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"#, MARGIN - 4.0, y_of(v, y_max) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bar_chart_has_one_rect_per_bar() {
        let svg = bar_chart("t", &[("a", 1.0), ("b", 0.5)]);
        assert_eq!(svg.matches("<rect").count(), 3);
    }

    #[test]
    fn charts_are_deterministic() {
        assert_eq!(line_chart("p", "epoch", &[0.5, 0.6], 1.0), line_chart("p", "epoch", &[0.5, 0.6], 1.0));
    }
}
