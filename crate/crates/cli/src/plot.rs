//! SVG rendering of predicted vs ground-truth particle trajectories: one
//! polyline with solid circle markers per ground-truth particle,
//! semi-transparent squares for predictions, consistent per-particle
//! colors, a legend, and a viewBox fitted to the data.

use std::fmt::Write as _;
use std::path::Path;

use trajflow::error::Result;

const PALETTE: [&str; 8] = [
    "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];
const CANVAS: f64 = 640.0;
const MARGIN: f64 = 40.0;

/// World -> canvas mapping. The y axis flips so that larger world y is
/// higher on the image.
#[derive(Debug, Clone, Copy)]
pub struct Transform {
    min_x: f64,
    min_y: f64,
    scale: f64,
    height: f64,
}

impl Transform {
    pub fn fit(points: impl Iterator<Item = (f64, f64)>) -> Transform {
        let mut min_x = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut min_y = f64::INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for (x, y) in points {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
        if !min_x.is_finite() {
            (min_x, max_x, min_y, max_y) = (0.0, 1.0, 0.0, 1.0);
        }
        let span = (max_x - min_x).max(max_y - min_y).max(1e-9);
        let scale = (CANVAS - 2.0 * MARGIN) / span;
        Transform {
            min_x,
            min_y,
            scale,
            height: CANVAS,
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            MARGIN + (x - self.min_x) * self.scale,
            self.height - MARGIN - (y - self.min_y) * self.scale,
        )
    }
}

/// Render trajectories to an SVG file. Both slices hold one (x, y) path per
/// particle; lengths may differ (predictions usually cover the forecast
/// horizon only).
pub fn plot_svg(
    ground_truth: &[Vec<(f64, f64)>],
    prediction: &[Vec<(f64, f64)>],
    path: &Path,
) -> Result<()> {
    let svg = render_svg(ground_truth, prediction);
    std::fs::write(path, svg)?;
    Ok(())
}

pub fn render_svg(ground_truth: &[Vec<(f64, f64)>], prediction: &[Vec<(f64, f64)>]) -> String {
    let all = ground_truth
        .iter()
        .chain(prediction.iter())
        .flat_map(|p| p.iter().copied());
    let tf = Transform::fit(all);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {CANVAS} {CANVAS}" width="{CANVAS}" height="{CANVAS}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{CANVAS}" height="{CANVAS}" fill="white"/>"#
    );

    for (i, track) in ground_truth.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<g id="truth-{i}">"#);
        let pts: Vec<String> = track
            .iter()
            .map(|&(x, y)| {
                let (cx, cy) = tf.apply(x, y);
                format!("{cx:.2},{cy:.2}")
            })
            .collect();
        if pts.len() > 1 {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                pts.join(" ")
            );
        }
        for &(x, y) in track {
            let (cx, cy) = tf.apply(x, y);
            let _ = writeln!(
                s,
                r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3.5" fill="{color}"/>"#
            );
        }
        let _ = writeln!(s, "</g>");
    }

    for (i, track) in prediction.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<g id="pred-{i}">"#);
        for &(x, y) in track {
            let (cx, cy) = tf.apply(x, y);
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="7" height="7" fill="{color}" fill-opacity="0.45"/>"#,
                cx - 3.5,
                cy - 3.5
            );
        }
        let _ = writeln!(s, "</g>");
    }

    // legend
    let _ = writeln!(
        s,
        r#"<g id="legend" font-family="sans-serif" font-size="13">"#
    );
    for (i, _) in ground_truth.iter().enumerate() {
        let y = 20.0 + 18.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<circle cx="16" cy="{y:.0}" r="4" fill="{color}"/>"#);
        let _ = writeln!(
            s,
            r##"<text x="26" y="{:.0}" fill="#333">particle {i} (solid: truth, square: prediction)</text>"##,
            y + 4.0
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, "</svg>");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimal XML well-formedness check: every opened tag closes in order.
    fn well_formed(xml: &str) -> bool {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = xml;
        while let Some(start) = rest.find('<') {
            let Some(end_rel) = rest[start..].find('>') else {
                return false;
            };
            let tag = &rest[start + 1..start + end_rel];
            rest = &rest[start + end_rel + 1..];
            if tag.starts_with('?') || tag.starts_with('!') {
                continue;
            }
            if let Some(name) = tag.strip_prefix('/') {
                match stack.pop() {
                    Some(open) if open == name.trim() => {}
                    _ => return false,
                }
            } else if !tag.ends_with('/') {
                let name: String = tag.chars().take_while(|c| !c.is_whitespace()).collect();
                stack.push(name);
            }
        }
        stack.is_empty()
    }

    fn spiral(n: usize, phase: f64) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.3 + phase;
                (
                    t.cos() * (1.0 + 0.1 * i as f64),
                    t.sin() * (1.0 + 0.1 * i as f64),
                )
            })
            .collect()
    }

    #[test]
    fn output_is_well_formed_with_one_group_per_particle() {
        let truth = vec![spiral(10, 0.0), spiral(10, 1.0), spiral(10, 2.0)];
        let pred = vec![spiral(5, 0.1), spiral(5, 1.1), spiral(5, 2.1)];
        let svg = render_svg(&truth, &pred);
        assert!(well_formed(&svg), "not well-formed:\n{svg}");
        for i in 0..3 {
            assert!(svg.contains(&format!(r#"<g id="truth-{i}">"#)));
            assert!(svg.contains(&format!(r#"<g id="pred-{i}">"#)));
        }
        assert!(svg.contains("legend"));
    }

    #[test]
    fn identical_inputs_center_squares_on_circles() {
        let track = vec![spiral(6, 0.4)];
        let svg = render_svg(&track, &track);
        // every circle center must appear as the center of some square
        let circles: Vec<(f64, f64)> = svg
            .lines()
            .filter(|l| l.starts_with("<circle") && l.contains(r#"r="3.5""#))
            .filter_map(|l| {
                let cx = l.split("cx=\"").nth(1)?.split('"').next()?.parse().ok()?;
                let cy = l.split("cy=\"").nth(1)?.split('"').next()?.parse().ok()?;
                Some((cx, cy))
            })
            .collect();
        let squares: Vec<(f64, f64)> = svg
            .lines()
            .filter(|l| l.starts_with("<rect") && l.contains("fill-opacity"))
            .filter_map(|l| {
                let x: f64 = l.split("x=\"").nth(1)?.split('"').next()?.parse().ok()?;
                let y: f64 = l.split("y=\"").nth(1)?.split('"').next()?.parse().ok()?;
                Some((x + 3.5, y + 3.5))
            })
            .collect();
        assert_eq!(circles.len(), 6);
        for sq in &squares {
            assert!(
                circles
                    .iter()
                    .any(|c| (c.0 - sq.0).abs() < 1e-9 && (c.1 - sq.1).abs() < 1e-9),
                "square {sq:?} has no matching circle"
            );
        }
    }

    /// Oracle: the arena corners (-5,-5) and (5,5) map to opposite viewBox
    /// corners (inside the margin), with y flipped.
    #[test]
    fn transform_maps_arena_corners() {
        let tf = Transform::fit([(-5.0, -5.0), (5.0, 5.0)].into_iter());
        let (x0, y0) = tf.apply(-5.0, -5.0);
        let (x1, y1) = tf.apply(5.0, 5.0);
        assert!((x0 - MARGIN).abs() < 1e-9);
        assert!(
            (y0 - (CANVAS - MARGIN)).abs() < 1e-9,
            "low world y sits at the bottom"
        );
        assert!((x1 - (CANVAS - MARGIN)).abs() < 1e-9);
        assert!((y1 - MARGIN).abs() < 1e-9, "high world y sits at the top");
    }
}
