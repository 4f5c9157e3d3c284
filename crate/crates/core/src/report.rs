//! Static SVG and CSV figures.
//!
//! Output is plain text assembled with fixed-precision formatting, so the
//! same inputs always produce the same bytes.

use std::fmt::Write as _;

use crate::evaluate::CurvePoint;

/// Viridis anchor colours, interpolated linearly.
const VIRIDIS: [(u8, u8, u8); 5] = [
    (0x44, 0x01, 0x54),
    (0x3b, 0x52, 0x8b),
    (0x21, 0x91, 0x8c),
    (0x5e, 0xc9, 0x62),
    (0xfd, 0xe7, 0x25),
];
const NON_FINITE_FILL: &str = "#bbbbbb";

/// Colour for `t` in `[0, 1]` (clamped).
pub fn colormap(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    let lerp = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * f).round() as u8;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    format!("#{:02x}{:02x}{:02x}", lerp(a.0, b.0), lerp(a.1, b.1), lerp(a.2, b.2))
}

pub fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn finite_range(values: &[f64]) -> Option<(f64, f64)> {
    values
        .iter()
        .filter(|v| v.is_finite())
        .fold(None, |acc, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
}

/// Heatmap of an `nx × ny` field (row-major, x down, y across), with a
/// linear colour scale and an annotated colourbar. Non-finite cells are grey.
pub fn heatmap_svg(values: &[f64], nx: usize, ny: usize, title: &str) -> String {
    assert_eq!(values.len(), nx * ny, "heatmap values must be nx * ny");
    let cell = (480 / nx.max(ny)).clamp(2, 24);
    let (left, top) = (20, 40);
    let map_w = ny * cell;
    let map_h = nx * cell;
    let bar_x = left + map_w + 20;
    let (bar_w, bar_h) = (16, map_h.max(80));
    let width = bar_x + bar_w + 90;
    let height = top + map_h.max(bar_h) + 30;
    let range = finite_range(values);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        svg,
        r#"<defs><linearGradient id="cbar" x1="0" y1="1" x2="0" y2="0">"#
    );
    for (i, _) in VIRIDIS.iter().enumerate() {
        let t = i as f64 / (VIRIDIS.len() - 1) as f64;
        let _ = writeln!(
            svg,
            r#"<stop offset="{t:.2}" stop-color="{}"/>"#,
            colormap(t)
        );
    }
    let _ = writeln!(svg, "</linearGradient></defs>");
    let _ = writeln!(
        svg,
        r#"<text x="{left}" y="24" font-family="sans-serif" font-size="14">{}</text>"#,
        escape_xml(title)
    );
    let _ = writeln!(svg, r#"<g shape-rendering="crispEdges">"#);
    for x in 0..nx {
        for y in 0..ny {
            let v = values[x * ny + y];
            let fill = match (range, v.is_finite()) {
                (Some((lo, hi)), true) => {
                    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                    colormap(t)
                }
                _ => NON_FINITE_FILL.to_string(),
            };
            let _ = writeln!(
                svg,
                r#"<rect class="cell" x="{}" y="{}" width="{cell}" height="{cell}" fill="{fill}"/>"#,
                left + y * cell,
                top + x * cell
            );
        }
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r#"<rect class="colorbar" x="{bar_x}" y="{top}" width="{bar_w}" height="{bar_h}" fill="url(#cbar)" stroke="black" stroke-width="0.5"/>"#
    );
    let (lo_label, hi_label) = match range {
        Some((lo, hi)) => (format!("min {lo:.4}"), format!("max {hi:.4}")),
        None => ("min n/a".to_string(), "max n/a".to_string()),
    };
    let text_x = bar_x + bar_w + 6;
    let _ = writeln!(
        svg,
        r#"<text class="max" x="{text_x}" y="{}" font-family="sans-serif" font-size="11">{hi_label}</text>"#,
        top + 10
    );
    let _ = writeln!(
        svg,
        r#"<text class="min" x="{text_x}" y="{}" font-family="sans-serif" font-size="11">{lo_label}</text>"#,
        top + bar_h
    );
    let n_bad = values.iter().filter(|v| !v.is_finite()).count();
    if n_bad > 0 {
        let _ = writeln!(
            svg,
            r#"<text class="nonfinite" x="{left}" y="{}" font-family="sans-serif" font-size="11">{n_bad} infinite cells shown in grey</text>"#,
            height - 8
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// `x,y,width` rows for a heatmap.
pub fn heatmap_csv(values: &[f64], nx: usize, ny: usize) -> String {
    let mut out = String::from("x,y,width\n");
    for x in 0..nx {
        for y in 0..ny {
            let _ = writeln!(out, "{x},{y},{}", values[x * ny + y]);
        }
    }
    out
}

/// Empirical vs nominal coverage with the diagonal as reference.
pub fn coverage_curve_svg(points: &[CurvePoint], title: &str) -> String {
    let (left, top, size) = (60.0, 40.0, 400.0);
    let px = |v: f64| left + v * size;
    let py = |v: f64| top + (1.0 - v) * size;
    let mut svg = String::new();
    let (w, h) = (left + size + 30.0, top + size + 60.0);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{left}" y="24" font-family="sans-serif" font-size="14">{}</text>"#,
        escape_xml(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect class="frame" x="{left}" y="{top}" width="{size}" height="{size}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{v:.1}</text>"#,
            px(v),
            top + size + 16.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.1}</text>"#,
            left - 6.0,
            py(v) + 3.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">nominal coverage 1-alpha</text>"#,
        px(0.5),
        top + size + 40.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.1})">empirical coverage</text>"#,
        py(0.5),
        py(0.5)
    );
    let _ = writeln!(
        svg,
        r#"<line class="diagonal" x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="grey" stroke-dasharray="4 4"/>"#,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    let coords: Vec<String> = points
        .iter()
        .map(|p| format!("{:.3},{:.3}", px(p.nominal), py(p.empirical)))
        .collect();
    let _ = writeln!(
        svg,
        r##"<polyline class="coverage" points="{}" fill="none" stroke="#21918c" stroke-width="2"/>"##,
        coords.join(" ")
    );
    for p in points {
        let _ = writeln!(
            svg,
            r##"<circle cx="{:.3}" cy="{:.3}" r="3" fill="#440154"/>"##,
            px(p.nominal),
            py(p.empirical)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn coverage_curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("nominal,empirical\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p.nominal, p.empirical);
    }
    out
}
