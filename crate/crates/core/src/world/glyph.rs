use std::fmt::Write;

use super::{SynthImage, WorldSpec};

const CANVAS: f64 = 120.0;

fn attr<'a>(spec: &'a WorldSpec, image: &SynthImage, name: &str) -> Option<&'a str> {
    let a = spec.attribute_index(name)?;
    Some(spec.schema()[a].values[image.values[a]].as_str())
}

fn polygon(points: &[(f64, f64)]) -> String {
    points
        .iter()
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn regular(cx: f64, cy: f64, r: f64, n: usize, phase: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|k| {
            let t = phase + std::f64::consts::TAU * k as f64 / n as f64;
            (cx + r * t.cos(), cy + r * t.sin())
        })
        .collect()
}

fn star(cx: f64, cy: f64, r: f64) -> Vec<(f64, f64)> {
    (0..10)
        .map(|k| {
            let rr = if k % 2 == 0 { r } else { r * 0.45 };
            let t = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * k as f64 / 5.0;
            (cx + rr * t.cos(), cy + rr * t.sin())
        })
        .collect()
}

/// Deterministic SVG showing `count` copies of the shape on the background.
///
/// Shape elements carry `class="glyph"` so they can be told apart from the
/// background rectangle and stripe pattern.
pub fn render_glyph(spec: &WorldSpec, image: &SynthImage) -> String {
    let shape = attr(spec, image, "shape").unwrap_or("circle");
    let color = attr(spec, image, "color").unwrap_or("black");
    let size = attr(spec, image, "size").unwrap_or("medium");
    let fill = attr(spec, image, "fill").unwrap_or("solid");
    let count: usize = attr(spec, image, "count")
        .and_then(|c| c.parse().ok())
        .unwrap_or(1)
        .clamp(1, 4);
    let background = attr(spec, image, "background").unwrap_or("white");

    let r = match size {
        "small" => 10.0,
        "large" => 24.0,
        _ => 17.0,
    };
    let centers: &[(f64, f64)] = match count {
        1 => &[(60.0, 60.0)],
        2 => &[(32.0, 60.0), (88.0, 60.0)],
        3 => &[(32.0, 34.0), (88.0, 34.0), (60.0, 88.0)],
        _ => &[(32.0, 32.0), (88.0, 32.0), (32.0, 88.0), (88.0, 88.0)],
    };
    let paint = match fill {
        "hollow" => format!(r#"fill="none" stroke="{color}" stroke-width="3""#),
        "striped" => format!(r#"fill="url(#stripes-{})" stroke="{color}" stroke-width="2""#, image.id),
        _ => format!(r#"fill="{color}""#),
    };

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS}" height="{CANVAS}" viewBox="0 0 {CANVAS} {CANVAS}">"#
    );
    if fill == "striped" {
        let _ = write!(
            svg,
            r#"<defs><pattern id="stripes-{}" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)"><line x1="0" y1="0" x2="0" y2="6" stroke="{color}" stroke-width="3"/></pattern></defs>"#,
            image.id
        );
    }
    let _ = write!(
        svg,
        r#"<rect x="0" y="0" width="{CANVAS}" height="{CANVAS}" fill="{background}"/>"#
    );
    for &(cx, cy) in centers.iter().take(count) {
        let el = match shape {
            "circle" => format!(r#"<circle class="glyph" cx="{cx}" cy="{cy}" r="{r}" {paint}/>"#),
            "square" => format!(
                r#"<rect class="glyph" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" {paint}/>"#,
                cx - r * 0.85,
                cy - r * 0.85,
                r * 1.7,
                r * 1.7
            ),
            "triangle" => format!(
                r#"<polygon class="glyph" points="{}" {paint}/>"#,
                polygon(&regular(cx, cy, r, 3, -std::f64::consts::FRAC_PI_2))
            ),
            "star" => format!(r#"<polygon class="glyph" points="{}" {paint}/>"#, polygon(&star(cx, cy, r))),
            "hexagon" => format!(
                r#"<polygon class="glyph" points="{}" {paint}/>"#,
                polygon(&regular(cx, cy, r, 6, 0.0))
            ),
            _ => format!(
                r#"<polygon class="glyph" points="{}" {paint}/>"#,
                polygon(&regular(cx, cy, r, 4, -std::f64::consts::FRAC_PI_2))
            ),
        };
        svg.push_str(&el);
    }
    svg.push_str("</svg>");
    svg
}
