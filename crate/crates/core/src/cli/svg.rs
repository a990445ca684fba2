//! Deterministic SVG rendering of route maps and training curves.

use crate::decode::Solution;
use crate::geometry::{leg_polyline, GeometryError, Point};
use crate::instance::Instance;
use crate::train::TrainLog;
use std::fmt::Write;

pub const VIEW: f64 = 600.0;
pub const MARGIN: f64 = 30.0;
/// Points per arc when tracing a detour around a zone.
pub const ARC_STEPS: usize = 64;

pub const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79",
    "#637939", "#8c6d31",
];

/// Pixels per unit of the plane.
pub fn scale() -> f64 {
    VIEW - 2.0 * MARGIN
}

/// Unit square to viewport, y pointing up.
pub fn to_view(p: Point) -> (f64, f64) {
    (MARGIN + scale() * p.x, MARGIN + scale() * (1.0 - p.y))
}

fn header(out: &mut String) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{VIEW}" height="{VIEW}" viewBox="0 0 {VIEW} {VIEW}">"#
    );
    let _ = writeln!(
        out,
        r#"<rect x="0" y="0" width="{VIEW}" height="{VIEW}" fill="white"/>"#
    );
}

/// Route map: zones as red circles, one `<g class="tour">` per UAV whose
/// polyline follows the detour (straight entry, minor arc, straight exit),
/// customers labelled by index and the depot as a black square.
pub fn render_solution(inst: &Instance, sol: &Solution) -> Result<String, GeometryError> {
    let mut out = String::new();
    header(&mut out);
    let (x0, y0) = to_view(Point::new(0.0, 1.0));
    let _ = writeln!(
        out,
        r##"<rect x="{x0:.3}" y="{y0:.3}" width="{s:.3}" height="{s:.3}" fill="none" stroke="#cccccc"/>"##,
        s = scale()
    );
    for z in &inst.zones {
        let (cx, cy) = to_view(z.center);
        let _ = writeln!(
            out,
            r#"<circle class="zone" cx="{cx:.3}" cy="{cy:.3}" r="{:.3}" fill="red" fill-opacity="0.15" stroke="red" stroke-width="2"/>"#,
            z.radius * scale()
        );
    }
    for (u, tour) in sol.tours.iter().enumerate() {
        let color = PALETTE[u % PALETTE.len()];
        let mut pts: Vec<Point> = Vec::new();
        for w in tour.windows(2) {
            let leg = leg_polyline(inst.node(w[0]), inst.node(w[1]), &inst.zones, ARC_STEPS)?;
            let skip = usize::from(!pts.is_empty());
            pts.extend_from_slice(&leg[skip..]);
        }
        let coords: Vec<String> = pts
            .iter()
            .map(|&p| {
                let (x, y) = to_view(p);
                format!("{x:.3},{y:.3}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<g class="tour" data-uav="{}" stroke="{color}" fill="none" stroke-width="2"><polyline points="{}"/></g>"#,
            u + 1,
            coords.join(" ")
        );
    }
    for i in 1..inst.n_nodes() {
        let (x, y) = to_view(inst.node(i));
        let _ = writeln!(
            out,
            r#"<circle class="customer" cx="{x:.3}" cy="{y:.3}" r="4" fill="black"/><text x="{:.3}" y="{:.3}" font-size="10" font-family="sans-serif">{i}</text>"#,
            x + 5.0,
            y - 5.0
        );
    }
    let (dx, dy) = to_view(inst.depot);
    let _ = writeln!(
        out,
        r#"<rect class="depot" x="{:.3}" y="{:.3}" width="12" height="12" fill="black"/>"#,
        dx - 6.0,
        dy - 6.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="20" font-size="12" font-family="sans-serif">length {:.4}, {} UAVs</text>"#,
        sol.length,
        sol.n_uavs()
    );
    out.push_str("</svg>\n");
    Ok(out)
}

/// Step versus mean length, one polyline per labelled log.
pub fn render_convergence(logs: &[(String, TrainLog)]) -> String {
    let mut out = String::new();
    header(&mut out);
    let rows = logs.iter().flat_map(|(_, l)| l.rows.iter());
    let (mut xmax, mut ymin, mut ymax) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for r in rows {
        xmax = xmax.max(r.step as f64);
        ymin = ymin.min(r.mean_length);
        ymax = ymax.max(r.mean_length);
    }
    if !ymin.is_finite() {
        (ymin, ymax) = (0.0, 1.0);
    }
    if ymax - ymin < 1e-9 {
        ymax = ymin + 1.0;
    }
    let pad = 0.05 * (ymax - ymin);
    let (ymin, ymax) = (ymin - pad, ymax + pad);
    let (left, right, top, bottom) = (60.0, VIEW - 20.0, 20.0, VIEW - 40.0);
    let px = |s: f64| left + (right - left) * s / xmax;
    let py = |v: f64| bottom - (bottom - top) * (v - ymin) / (ymax - ymin);
    let _ = writeln!(
        out,
        r#"<polyline class="axes" points="{left},{top} {left},{bottom} {right},{bottom}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let v = ymin + (ymax - ymin) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="5" y="{:.3}" font-size="10" font-family="sans-serif">{v:.3}</text>"#,
            py(v) + 3.0
        );
        let s = xmax * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.3}" y="{:.3}" font-size="10" font-family="sans-serif">{s:.0}</text>"#,
            px(s) - 10.0,
            bottom + 15.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.3}" y="{:.3}" font-size="11" font-family="sans-serif">step</text>"#,
        (left + right) / 2.0,
        VIEW - 8.0
    );
    for (k, (label, log)) in logs.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = log
            .rows
            .iter()
            .map(|r| format!("{:.3},{:.3}", px(r.step as f64), py(r.mean_length)))
            .collect();
        let _ = writeln!(
            out,
            r#"<g class="curve" stroke="{color}" fill="none" stroke-width="1.5"><polyline points="{}"/></g>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.3}" y="{:.3}" font-size="11" font-family="sans-serif" fill="{color}">{label}</text>"#,
            right - 120.0,
            top + 15.0 * (k + 1) as f64
        );
    }
    out.push_str("</svg>\n");
    out
}
