//! SVG route plots.
//!
//! Every node position at every time slice gets a marker in the node's
//! color, fading in with time. Arrows follow the route, each drawn between
//! the positions at the times the two endpoints are visited.

use std::fmt::Write as _;

use crate::instances::{DynamicInstance, ProblemKind, Solution};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 700.0;
const MARGIN: f64 = 40.0;
const TOP: f64 = 90.0;
const SIDE: f64 = WIDTH - 2.0 * MARGIN;

fn px(p: [f64; 2]) -> (f64, f64) {
    (MARGIN + p[0] * SIDE, TOP + (1.0 - p[1]) * SIDE)
}

/// Evenly spaced hues at fixed saturation and lightness.
pub fn node_color(i: usize, n: usize) -> String {
    let h = i as f64 / n.max(1) as f64 * 6.0;
    let (s, l) = (0.65, 0.5);
    let c = (1.0 - (2.0 * l - 1.0_f64).abs()) * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    let to = |v: f64| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    format!("#{:02x}{:02x}{:02x}", to(r), to(g), to(b))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders `order` on `inst`. The solution is re-evaluated on the instance,
/// so the title and banner always reflect the route actually drawn.
pub fn render_svg(inst: &DynamicInstance, order: &[usize]) -> String {
    let sol = Solution::evaluate(inst, order.to_vec(), None);
    let (horizon, n) = (inst.horizon(), inst.n());
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#
    )
    .unwrap();
    s.push_str(
        "<defs><marker id=\"arrow\" viewBox=\"0 0 10 10\" refX=\"9\" refY=\"5\" markerWidth=\"6\" markerHeight=\"6\" orient=\"auto-start-reverse\"><path d=\"M 0 0 L 10 5 L 0 10 z\" fill=\"black\"/></marker></defs>\n",
    );
    writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    let kind = match inst.kind {
        ProblemKind::Tsp => "TSP",
        ProblemKind::Vrp => "VRP",
    };
    writeln!(
        s,
        r#"<text x="{MARGIN}" y="30" font-size="20">{kind} n={n} T={horizon} cost={:.4}</text>"#,
        sol.cost
    )
    .unwrap();
    if !sol.feasible {
        let text: Vec<String> = sol.violations.iter().map(|v| v.to_string()).collect();
        writeln!(
            s,
            r##"<rect class="violation" x="{MARGIN}" y="42" width="{SIDE}" height="30" fill="#c62828"/><text x="{}" y="62" font-size="14" fill="white">INFEASIBLE: {}</text>"##,
            MARGIN + 8.0,
            escape(&text.join("; "))
        )
        .unwrap();
    }
    writeln!(
        s,
        r##"<rect x="{MARGIN}" y="{TOP}" width="{SIDE}" height="{SIDE}" fill="none" stroke="#999999"/>"##
    )
    .unwrap();
    s.push_str("<g id=\"markers\">\n");
    for i in 0..n {
        let color = node_color(i, n);
        for t in 0..horizon {
            let (x, y) = px(inst.coord(i, t));
            let opacity = 0.25 + 0.75 * (t + 1) as f64 / horizon as f64;
            if inst.is_static(i) {
                writeln!(
                    s,
                    r#"<rect class="marker" data-node="{i}" data-t="{t}" x="{:.2}" y="{:.2}" width="10" height="10" fill="{color}" fill-opacity="{opacity:.3}"/>"#,
                    x - 5.0,
                    y - 5.0
                )
                .unwrap();
            } else {
                writeln!(
                    s,
                    r#"<circle class="marker" data-node="{i}" data-t="{t}" cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}" fill-opacity="{opacity:.3}"/>"#
                )
                .unwrap();
            }
        }
        let (x, y) = px(inst.coord(i, 0));
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="11" fill="{color}">{i}</text>"#, x + 6.0, y - 6.0).unwrap();
    }
    s.push_str("</g>\n<g id=\"route\">\n");
    let mut legs: Vec<(usize, usize, usize)> =
        order.windows(2).enumerate().map(|(t, w)| (w[0], w[1], t)).collect();
    if inst.kind == ProblemKind::Tsp && order.len() > 1 {
        legs.push((order[order.len() - 1], order[0], order.len() - 1));
    }
    for (a, b, t) in legs {
        if a >= n || b >= n {
            continue;
        }
        let (x1, y1) = px(inst.coord(a, t));
        let (x2, y2) = px(inst.coord(b, t + 1));
        writeln!(
            s,
            r#"<line class="leg" data-t="{t}" x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="black" stroke-width="1.5" marker-end="url(#arrow)"/>"#
        )
        .unwrap();
    }
    s.push_str("</g>\n</svg>\n");
    s
}
