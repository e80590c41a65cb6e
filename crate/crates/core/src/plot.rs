//! SVG rendering of a scene with its expert, references and predicted modes.

use std::fmt::Write as _;

use crate::scene::{PolylineKind, SafetyField, Scene};
use crate::trajectory::{Trajectory, TrajectorySet, Waypoint};

/// Mode colours, cycled by mode index.
pub const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Iso-line of the field at `level` as a list of segments (marching squares
/// over cell centres, linear interpolation along cell edges). Saddle cells
/// are resolved with the cell-average value.
pub fn contour_segments(field: &SafetyField, level: f64) -> Vec<(Waypoint, Waypoint)> {
    let (rows, cols) = (field.num_rows(), field.num_cols());
    let mut out = Vec::new();
    if rows < 2 || cols < 2 {
        return out;
    }
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            // Corners counter-clockwise from bottom-left.
            let corners = [(r, c), (r, c + 1), (r + 1, c + 1), (r + 1, c)];
            let v = corners.map(|(rr, cc)| field.value(rr, cc));
            let p = corners.map(|(rr, cc)| field.cell_center(rr, cc));
            let inside = v.map(|x| x < level);
            let case = inside.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << i));
            if case == 0 || case == 15 {
                continue;
            }
            let edge = |i: usize| {
                let j = (i + 1) % 4;
                let t = if v[j] == v[i] { 0.5 } else { (level - v[i]) / (v[j] - v[i]) };
                p[i] + (p[j] - p[i]) * t.clamp(0.0, 1.0)
            };
            // Edges whose endpoints straddle the level, in order.
            let crossing: Vec<usize> = (0..4).filter(|&i| inside[i] != inside[(i + 1) % 4]).collect();
            match crossing.as_slice() {
                [a, b] => out.push((edge(*a), edge(*b))),
                [e0, e1, e2, e3] => {
                    let centre_inside = v.iter().sum::<f64>() / 4.0 < level;
                    // Pair edges so the centre's side stays connected.
                    if centre_inside == inside[0] {
                        out.push((edge(*e0), edge(*e1)));
                        out.push((edge(*e2), edge(*e3)));
                    } else {
                        out.push((edge(*e3), edge(*e0)));
                        out.push((edge(*e1), edge(*e2)));
                    }
                }
                _ => {}
            }
        }
    }
    out
}

fn fmt(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

fn path_d(points: &[Waypoint]) -> String {
    let mut d = String::new();
    for (i, p) in points.iter().enumerate() {
        let _ = write!(d, "{}{},{}", if i == 0 { "M" } else { " L" }, fmt(p.x), fmt(p.y));
    }
    d
}

fn traj_points(t: &Trajectory) -> Vec<Waypoint> {
    let mut pts = vec![Waypoint::ZERO];
    pts.extend_from_slice(t.points());
    pts
}

/// SVG document for `scene`, the iso-line at `d_thresh`, and optional
/// predicted modes. Output bytes depend only on the inputs.
pub fn render_svg(scene: &Scene, modes: Option<&TrajectorySet>, d_thresh: f64) -> String {
    let f = &scene.safety;
    let half = f.cell_size / 2.0;
    let min = f.origin - Waypoint::new(half, half);
    let w = f.num_cols() as f64 * f.cell_size;
    let h = f.num_rows() as f64 * f.cell_size;
    let px = 12.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="{} {} {} {}">"#,
        fmt(w * px),
        fmt(h * px),
        fmt(min.x),
        fmt(-(min.y + h)),
        fmt(w),
        fmt(h)
    );
    let _ = writeln!(s, "<title>{}</title>", xml_escape(&scene.id));
    let _ = writeln!(s, r##"<rect x="{}" y="{}" width="{}" height="{}" fill="#fafafa"/>"##, fmt(min.x), fmt(-(min.y + h)), fmt(w), fmt(h));
    s.push_str("<g transform=\"scale(1,-1)\" fill=\"none\" stroke-linecap=\"round\" stroke-linejoin=\"round\">\n");

    s.push_str("<g id=\"map\">\n");
    for line in &scene.polylines {
        let style = match line.kind {
            PolylineKind::Centerline => r##"stroke="#bbbbbb" stroke-width="0.15" stroke-dasharray="1 1""##,
            PolylineKind::Boundary => r##"stroke="#555555" stroke-width="0.25""##,
        };
        let _ = writeln!(s, r#"<path d="{}" {style}/>"#, path_d(&line.points));
    }
    s.push_str("</g>\n<g id=\"safety-contour\">\n");
    let segs = contour_segments(f, d_thresh);
    if !segs.is_empty() {
        let mut d = String::new();
        for (a, b) in &segs {
            let _ = write!(d, "M{},{} L{},{} ", fmt(a.x), fmt(a.y), fmt(b.x), fmt(b.y));
        }
        let _ = writeln!(s, r##"<path d="{}" stroke="#d62728" stroke-width="0.12" stroke-opacity="0.7"/>"##, d.trim_end());
    }
    s.push_str("</g>\n<g id=\"agents\">\n");
    for a in &scene.agents {
        let _ = writeln!(
            s,
            r##"<circle cx="{}" cy="{}" r="{}" fill="#999999" fill-opacity="0.6" stroke="#333333" stroke-width="0.1"/>"##,
            fmt(a.position.x),
            fmt(a.position.y),
            fmt(a.radius)
        );
    }
    let _ = writeln!(s, r##"<rect x="-2.25" y="-0.9" width="4.5" height="1.8" fill="#333333"/>"##);
    s.push_str("</g>\n<g id=\"references\">\n");
    for r in &scene.refs {
        let _ = writeln!(s, r##"<path d="{}" stroke="#777777" stroke-width="0.15" stroke-dasharray="0.6 0.4"/>"##, path_d(&traj_points(r)));
    }
    s.push_str("</g>\n<g id=\"gt\">\n");
    let _ = writeln!(s, r##"<path d="{}" stroke="#000000" stroke-width="0.35"/>"##, path_d(&traj_points(&scene.gt)));
    s.push_str("</g>\n<g id=\"modes\">\n");
    if let Some(set) = modes {
        for (m, t) in set.modes().iter().enumerate() {
            let colour = PALETTE[m % PALETTE.len()];
            let _ = writeln!(s, r#"<path d="{}" stroke="{colour}" stroke-width="0.25" data-mode="{m}"/>"#, path_d(&traj_points(t)));
            for p in t.points() {
                let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="0.25" fill="{colour}"/>"#, fmt(p.x), fmt(p.y));
            }
        }
    }
    s.push_str("</g>\n</g>\n</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
