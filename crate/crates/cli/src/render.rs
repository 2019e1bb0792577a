//! Static SVG figure of one scenario: drivable lanes, agent histories, the
//! ground truth and every pipeline's predicted means.

use std::fmt::Write as _;

use rrb_core::scene::ScenarioState;
use rrb_core::trajectory::MultiModalPrediction;
use rrb_core::Vec2;

/// Margin around the drawn trajectories, meters.
const MARGIN: f64 = 12.0;
/// Output pixels per meter.
const SCALE: f64 = 10.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

fn points(ps: impl IntoIterator<Item = Vec2>) -> String {
    let mut s = String::new();
    for (k, p) in ps.into_iter().enumerate() {
        if k > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{:.3},{:.3}", p.x, p.y);
    }
    s
}

/// Renders the scenario in world coordinates. The y axis is flipped by a
/// group transform, so every `points` attribute holds world coordinates.
pub fn render_svg(state: &ScenarioState, predictions: &[(String, MultiModalPrediction)]) -> String {
    let mut drawn: Vec<Vec2> = state.ego.positions();
    drawn.extend(state.ground_truth_positions().unwrap_or_default());
    for (_, p) in predictions {
        for m in &p.modes {
            drawn.extend(m.means.iter().copied());
        }
    }
    let (mut lo, mut hi) = (drawn[0], drawn[0]);
    for p in &drawn {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    lo = lo - Vec2::new(MARGIN, MARGIN);
    hi = hi + Vec2::new(MARGIN, MARGIN);
    let (w, h) = (hi.x - lo.x, hi.y - lo.y);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="{:.3} {:.3} {:.3} {:.3}">"#,
        w * SCALE,
        h * SCALE,
        lo.x,
        -hi.y,
        w,
        h
    );
    let _ = writeln!(svg, r##"<rect x="{:.3}" y="{:.3}" width="{w:.3}" height="{h:.3}" fill="#ffffff"/>"##, lo.x, -hi.y);
    svg.push_str("<g transform=\"scale(1,-1)\" fill=\"none\" stroke-linejoin=\"round\">\n");

    svg.push_str("<g id=\"drivable\" stroke=\"#d9d9d9\" stroke-linecap=\"butt\">\n");
    for c in &state.map.centerlines {
        if c.widths.iter().all(|w| *w == c.widths[0]) {
            let _ = writeln!(
                svg,
                r#"<polyline data-lane="{}" stroke-width="{:.3}" points="{}"/>"#,
                c.id,
                c.widths[0],
                points(c.polyline.iter().copied())
            );
            continue;
        }
        for (k, seg) in c.polyline.windows(2).enumerate() {
            let _ = writeln!(
                svg,
                r#"<polyline data-lane="{}" stroke-width="{:.3}" points="{}"/>"#,
                c.id,
                c.widths[k],
                points(seg.iter().copied())
            );
        }
    }
    svg.push_str("</g>\n<g id=\"centerlines\" stroke=\"#a0a0a0\" stroke-width=\"0.1\" stroke-dasharray=\"1 1\">\n");
    for c in &state.map.centerlines {
        let _ = writeln!(svg, r#"<polyline points="{}"/>"#, points(c.polyline.iter().copied()));
    }
    svg.push_str("</g>\n<g id=\"others\" stroke=\"#7f7f7f\" stroke-width=\"0.3\">\n");
    for o in &state.others {
        let _ = writeln!(svg, r#"<polyline points="{}"/>"#, points(o.positions()));
    }
    let _ = writeln!(
        svg,
        "</g>\n<polyline id=\"history\" stroke=\"#000000\" stroke-width=\"0.5\" points=\"{}\"/>",
        points(state.ego.positions())
    );
    if let Some(gt) = state.ground_truth_positions() {
        let mut path = vec![state.ego.last()];
        path.extend(gt);
        let _ = writeln!(
            svg,
            r##"<polyline id="ground-truth" stroke="#000000" stroke-width="0.4" stroke-dasharray="0.8 0.5" points="{}"/>"##,
            points(path)
        );
    }
    for (k, (name, pred)) in predictions.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(svg, r#"<g data-pipeline="{name}" stroke="{color}" stroke-width="0.35">"#);
        for (m, mode) in pred.modes.iter().enumerate() {
            let mut path = vec![state.ego.last()];
            path.extend(mode.means.iter().copied());
            let _ = writeln!(svg, r#"<polyline data-mode="{m}" points="{}"/>"#, points(path));
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</g>\n");

    // legend in screen coordinates
    let font = (h * 0.025).clamp(1.0, 3.0);
    let _ = writeln!(svg, r#"<g id="legend" font-family="sans-serif" font-size="{font:.2}">"#);
    let mut entries = vec![("history".to_string(), "#000000"), ("ground truth".to_string(), "#000000")];
    for (k, (name, _)) in predictions.iter().enumerate() {
        entries.push((name.clone(), PALETTE[k % PALETTE.len()]));
    }
    for (k, (label, color)) in entries.iter().enumerate() {
        let y = -hi.y + font * 1.5 * (k as f64 + 1.0);
        let _ = writeln!(svg, r#"<text x="{:.3}" y="{y:.3}" fill="{color}">{label}</text>"#, lo.x + font);
    }
    svg.push_str("</g>\n</svg>\n");
    svg
}
