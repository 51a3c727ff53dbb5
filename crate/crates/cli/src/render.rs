//! Static SVG view of a vector map with optional trajectories.

use gsmap::mapping::{sigmoid, VectorMap};
use gsmap::Pose2;
use std::fmt::Write;

const PX_PER_M: f64 = 20.0;
const PAD_M: f64 = 2.0;
const TRAJECTORY_COLORS: [&str; 4] = ["#2ca02c", "#ff7f0e", "#9467bd", "#17becf"];

/// Color ramp from red (unstable) to blue (stable) over the batch probability.
fn stability_color(p: f64) -> String {
    let t = p.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        lerp(214.0, 31.0),
        lerp(39.0, 119.0),
        lerp(40.0, 180.0)
    )
}

fn bounds(map: &VectorMap, trajectories: &[Vec<Pose2>]) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut add = |x: f64, y: f64| {
        lo = [lo[0].min(x), lo[1].min(y)];
        hi = [hi[0].max(x), hi[1].max(y)];
    };
    for b in &map.batches {
        add(b.ex1, b.ey1);
        add(b.ex2, b.ey2);
    }
    for p in trajectories.iter().flatten() {
        add(p.x, p.y);
    }
    if lo[0] > hi[0] {
        return ([-PAD_M, -PAD_M], [PAD_M, PAD_M]);
    }
    (
        [lo[0] - PAD_M, lo[1] - PAD_M],
        [hi[0] + PAD_M, hi[1] + PAD_M],
    )
}

fn tick_step(span: f64) -> f64 {
    [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0]
        .into_iter()
        .find(|s| span / s <= 12.0)
        .unwrap_or(200.0)
}

/// Renders batches colored by stability and trajectories as polylines.
/// Output bytes depend only on the inputs.
pub fn render_svg(map: &VectorMap, trajectories: &[Vec<Pose2>]) -> String {
    let (lo, hi) = bounds(map, trajectories);
    let (w, h) = ((hi[0] - lo[0]) * PX_PER_M, (hi[1] - lo[1]) * PX_PER_M);
    let sx = |x: f64| (x - lo[0]) * PX_PER_M;
    let sy = |y: f64| (hi[1] - y) * PX_PER_M;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.3} {h:.3}">"#
    )
    .unwrap();
    writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##).unwrap();

    writeln!(s, r##"<g id="axes" stroke="#888888" stroke-width="1" font-size="10" font-family="sans-serif" fill="#444444">"##).unwrap();
    writeln!(s, r#"<line x1="0" y1="{h:.3}" x2="{w:.3}" y2="{h:.3}"/>"#).unwrap();
    writeln!(s, r#"<line x1="0" y1="0" x2="0" y2="{h:.3}"/>"#).unwrap();
    let step = tick_step((hi[0] - lo[0]).max(hi[1] - lo[1]));
    let mut x = (lo[0] / step).ceil() * step;
    while x <= hi[0] {
        writeln!(s, r#"<line x1="{0:.3}" y1="{h:.3}" x2="{0:.3}" y2="{1:.3}"/><text x="{0:.3}" y="{2:.3}" stroke="none">{x}</text>"#, sx(x), h - 5.0, h - 8.0).unwrap();
        x += step;
    }
    let mut y = (lo[1] / step).ceil() * step;
    while y <= hi[1] {
        writeln!(s, r#"<line x1="0" y1="{0:.3}" x2="5" y2="{0:.3}"/><text x="8" y="{0:.3}" stroke="none">{y}</text>"#, sy(y)).unwrap();
        y += step;
    }
    writeln!(s, "</g>").unwrap();

    writeln!(
        s,
        r#"<g id="batches" stroke-width="2" stroke-linecap="round">"#
    )
    .unwrap();
    for b in &map.batches {
        writeln!(
            s,
            r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="{}"/>"#,
            sx(b.ex1),
            sy(b.ey1),
            sx(b.ex2),
            sy(b.ey2),
            stability_color(sigmoid(b.logodds))
        )
        .unwrap();
    }
    writeln!(s, "</g>").unwrap();

    for (k, traj) in trajectories.iter().enumerate() {
        let pts: Vec<String> = traj
            .iter()
            .map(|p| format!("{:.3},{:.3}", sx(p.x), sy(p.y)))
            .collect();
        writeln!(
            s,
            r#"<polyline id="trajectory-{k}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            TRAJECTORY_COLORS[k % TRAJECTORY_COLORS.len()],
            pts.join(" ")
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(stability_color(0.0), "#d62728");
        assert_eq!(stability_color(1.0), "#1f77b4");
    }

    #[test]
    fn empty_map_has_axes_only() {
        let svg = render_svg(&VectorMap::default(), &[]);
        assert!(svg.contains(r#"id="axes""#));
        assert!(!svg.contains("stroke=\"#d6") && !svg.contains("polyline"));
    }
}
