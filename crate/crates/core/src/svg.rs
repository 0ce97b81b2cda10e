//! Minimal SVG line charts written by hand.

use std::fmt::Write;

use crate::kel::KeyframeAnalysis;

const WIDTH: f64 = 720.0;
const PANEL_HEIGHT: f64 = 220.0;
const MARGIN: f64 = 40.0;

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
    pub color: &'static str,
    pub dashed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
    /// Horizontal reference lines `(label, y)`.
    pub levels: Vec<(String, f64)>,
    /// Marked points `(x, y)`.
    pub markers: Vec<(usize, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn y_range(p: &Panel) -> (f64, f64) {
    let values = p
        .series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .chain(p.levels.iter().map(|l| l.1))
        .filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn render_panel(out: &mut String, p: &Panel, top: f64) {
    let len = p.series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let (lo, hi) = y_range(p);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = PANEL_HEIGHT - 2.0 * MARGIN;
    let x_of = |i: usize| MARGIN + plot_w * i as f64 / (len.max(2) - 1) as f64;
    let y_of = |v: f64| top + MARGIN + plot_h * (1.0 - (v - lo) / (hi - lo));

    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{:.2}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#999"/>"##,
        top + MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{:.2}" font-size="13">{}</text>"#,
        top + MARGIN - 8.0,
        escape(&p.title)
    );
    let _ = writeln!(
        out,
        r#"<text x="4" y="{:.2}" font-size="10">{hi:.3}</text><text x="4" y="{:.2}" font-size="10">{lo:.3}</text>"#,
        top + MARGIN + 4.0,
        top + PANEL_HEIGHT - MARGIN
    );
    for (label, y) in &p.levels {
        let yy = y_of(*y);
        let _ = writeln!(
            out,
            r##"<line x1="{MARGIN}" x2="{:.2}" y1="{yy:.2}" y2="{yy:.2}" stroke="#c33" stroke-dasharray="2,3"/><text x="{:.2}" y="{:.2}" font-size="10" fill="#c33">{}</text>"##,
            WIDTH - MARGIN,
            WIDTH - MARGIN - 90.0,
            yy - 3.0,
            escape(label)
        );
    }
    for (k, s) in p.series.iter().enumerate() {
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.2},{:.2}", x_of(i), y_of(*v)))
            .collect();
        let dash = if s.dashed { r#" stroke-dasharray="4,3""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5"{dash} points="{}"/>"#,
            s.color,
            points.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" fill="{}">{}</text>"#,
            MARGIN + 130.0 * k as f64 + 160.0,
            top + MARGIN - 8.0,
            s.color,
            escape(&s.label)
        );
    }
    for &(i, v) in &p.markers {
        let _ = writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="#d62"/>"##,
            x_of(i),
            y_of(v)
        );
    }
}

/// Panels stacked vertically in one SVG document.
pub fn render(panels: &[Panel]) -> String {
    let height = PANEL_HEIGHT * panels.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, p) in panels.iter().enumerate() {
        render_panel(&mut out, p, PANEL_HEIGHT * k as f64);
    }
    out.push_str("</svg>\n");
    out
}

/// Raw and smoothed variation, the threshold, and keyframe markers.
pub fn keyframe_panel(title: &str, a: &KeyframeAnalysis) -> Panel {
    Panel {
        title: title.to_string(),
        series: vec![
            Series {
                label: "raw".into(),
                values: a.raw.clone(),
                color: "#9ab",
                dashed: false,
            },
            Series {
                label: "smoothed".into(),
                values: a.smoothed.clone(),
                color: "#157",
                dashed: false,
            },
        ],
        levels: vec![("threshold".into(), a.threshold)],
        markers: a.keyframes.indices().into_iter().map(|i| (i, a.smoothed[i])).collect(),
    }
}

pub fn keyframe_plot(head: &KeyframeAnalysis, expression: &KeyframeAnalysis) -> String {
    render(&[
        keyframe_panel("head-pose variation", head),
        keyframe_panel("expression variation", expression),
    ])
}

/// One panel per named curve, e.g. training losses.
pub fn curve_plot(curves: &[(&str, &[f64])]) -> String {
    let panels: Vec<Panel> = curves
        .iter()
        .map(|(name, v)| Panel {
            title: name.to_string(),
            series: vec![Series {
                label: name.to_string(),
                values: v.to_vec(),
                color: "#157",
                dashed: false,
            }],
            ..Panel::default()
        })
        .collect();
    render(&panels)
}
