//! Planar geometry for the no-fly-zone detour metric.
//!
//! A leg from `a` to `b` that cuts through a circular zone is flown as a
//! straight line up to the entry point, along the minor arc of the circle to
//! the exit point, and straight again to `b`. Its length is therefore the
//! straight-line length plus, for every crossed zone, the difference between
//! the minor arc and the chord it replaces.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Absolute tolerance used for tangency and on-circle decisions.
pub const GEOM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("endpoint ({x}, {y}) lies strictly inside the no-fly zone centered at ({cx}, {cy})")]
    EndpointInsideZone { x: f64, y: f64, cx: f64, cy: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }
}

/// Circular region the vehicle must fly around.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoFlyZone {
    pub center: Point,
    pub radius: f64,
}

impl NoFlyZone {
    pub const fn new(center: Point, radius: f64) -> Self {
        Self { center, radius }
    }

    /// True when `p` is strictly inside the circle (points on the boundary are allowed).
    pub fn contains_strictly(&self, p: Point) -> bool {
        euclidean(p, self.center) < self.radius - GEOM_EPS
    }

    /// Disjoint closed discs: centers further apart than the radii sum.
    pub fn is_disjoint_from(&self, other: &NoFlyZone) -> bool {
        euclidean(self.center, other.center) > self.radius + other.radius
    }
}

/// Where a segment passes through a zone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChordCrossing {
    pub entry: Point,
    pub exit: Point,
    pub chord_len: f64,
    /// Central angle subtended by the chord, in degrees, normalized to (0, 180].
    pub central_angle_deg: f64,
}

impl ChordCrossing {
    /// Length of the minor arc between entry and exit.
    pub fn arc_len(&self, radius: f64) -> f64 {
        // min(θ, 360 − θ) is θ itself because θ ≤ 180.
        let theta = self.central_angle_deg.min(360.0 - self.central_angle_deg);
        PI * radius * theta / 180.0
    }

    /// Extra distance flown by following the arc instead of the chord.
    pub fn increment(&self, radius: f64) -> f64 {
        self.arc_len(radius) - self.chord_len
    }
}

/// Which leg metric to use when measuring routes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Detour,
    Straight,
}

impl Metric {
    pub fn leg(self, a: Point, b: Point, zones: &[NoFlyZone]) -> Result<f64, GeometryError> {
        match self {
            Metric::Detour => detour_length(a, b, zones),
            Metric::Straight => Ok(euclidean(a, b)),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "detour" => Ok(Metric::Detour),
            "straight" => Ok(Metric::Straight),
            other => Err(format!("unknown metric '{other}' (expected detour or straight)")),
        }
    }
}

pub fn euclidean(a: Point, b: Point) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

fn check_endpoint(p: Point, z: &NoFlyZone) -> Result<(), GeometryError> {
    if z.contains_strictly(p) {
        return Err(GeometryError::EndpointInsideZone {
            x: p.x,
            y: p.y,
            cx: z.center.x,
            cy: z.center.y,
        });
    }
    Ok(())
}

/// Intersection of segment `a`–`b` with the circle of `z`, ordered from `a` to `b`.
///
/// Returns `None` when the segment stays outside the circle or only touches it.
pub fn segment_circle_crossing(a: Point, b: Point, z: &NoFlyZone) -> Result<Option<ChordCrossing>, GeometryError> {
    check_endpoint(a, z)?;
    check_endpoint(b, z)?;

    let dx = b.x - a.x;
    let dy = b.y - a.y;
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return Ok(None);
    }
    let t_star = ((z.center.x - a.x) * dx + (z.center.y - a.y) * dy) / len2;
    let tc = t_star.clamp(0.0, 1.0);
    let closest = Point::new(a.x + tc * dx, a.y + tc * dy);
    let approach = euclidean(closest, z.center);
    if approach >= z.radius - GEOM_EPS {
        return Ok(None);
    }

    // Both endpoints are outside, so the closest point is interior to the
    // segment and both circle intersections lie on it.
    let foot = Point::new(a.x + t_star * dx, a.y + t_star * dy);
    let d = euclidean(foot, z.center);
    let half = (z.radius * z.radius - d * d).max(0.0).sqrt();
    let len = len2.sqrt();
    let dt = half / len;
    let t_in = (t_star - dt).max(0.0);
    let t_out = (t_star + dt).min(1.0);
    let entry = Point::new(a.x + t_in * dx, a.y + t_in * dy);
    let exit = Point::new(a.x + t_out * dx, a.y + t_out * dy);
    let chord_len = 2.0 * half;
    let ratio = (half / z.radius).min(1.0);
    let central_angle_deg = (2.0 * ratio.asin()).to_degrees();

    Ok(Some(ChordCrossing {
        entry,
        exit,
        chord_len,
        central_angle_deg,
    }))
}

/// Length of one leg under the detour metric.
pub fn detour_length(a: Point, b: Point, zones: &[NoFlyZone]) -> Result<f64, GeometryError> {
    let mut total = euclidean(a, b);
    for z in zones {
        if let Some(c) = segment_circle_crossing(a, b, z)? {
            total += c.increment(z.radius);
        }
    }
    Ok(total)
}

/// Sum of leg lengths over consecutive points.
pub fn route_length_with(points: &[Point], zones: &[NoFlyZone], metric: Metric) -> Result<f64, GeometryError> {
    points
        .windows(2)
        .try_fold(0.0, |acc, w| Ok(acc + metric.leg(w[0], w[1], zones)?))
}

pub fn route_length(points: &[Point], zones: &[NoFlyZone]) -> Result<f64, GeometryError> {
    route_length_with(points, zones, Metric::Detour)
}

/// Points along the flown path of one leg: straight segments plus the sampled
/// minor arc of every crossed zone. `arc_steps` is the number of chords used
/// per arc.
pub fn leg_polyline(a: Point, b: Point, zones: &[NoFlyZone], arc_steps: usize) -> Result<Vec<Point>, GeometryError> {
    let mut crossings = Vec::new();
    for z in zones {
        if let Some(c) = segment_circle_crossing(a, b, z)? {
            crossings.push((c, *z));
        }
    }
    crossings.sort_by(|p, q| {
        euclidean(a, p.0.entry)
            .partial_cmp(&euclidean(a, q.0.entry))
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut pts = vec![a];
    for (c, z) in crossings {
        pts.extend(minor_arc_points(&c, &z, a, b, arc_steps.max(1)));
    }
    pts.push(b);
    Ok(pts)
}

/// Sampled minor arc from `c.entry` to `c.exit`, both endpoints included.
pub fn minor_arc_points(c: &ChordCrossing, z: &NoFlyZone, a: Point, b: Point, steps: usize) -> Vec<Point> {
    let ang = |p: Point| (p.y - z.center.y).atan2(p.x - z.center.x);
    let start = ang(c.entry);
    let sweep = c.central_angle_deg.to_radians();
    // The minor arc bulges away from the center; pick the rotation direction
    // whose midpoint lies on the far side of the chord from the center. For a
    // diameter both sides are equally long, take the counter-clockwise one.
    let mid_pos = start + sweep / 2.0;
    let side = |p: Point| (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    let probe = Point::new(
        z.center.x + z.radius * mid_pos.cos(),
        z.center.y + z.radius * mid_pos.sin(),
    );
    let center_side = side(z.center);
    let dir = if center_side.abs() < GEOM_EPS || side(probe) * center_side <= 0.0 {
        1.0
    } else {
        -1.0
    };
    (0..=steps)
        .map(|k| {
            let phi = start + dir * sweep * k as f64 / steps as f64;
            if k == 0 {
                c.entry
            } else if k == steps {
                c.exit
            } else {
                Point::new(z.center.x + z.radius * phi.cos(), z.center.y + z.radius * phi.sin())
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    fn zone() -> NoFlyZone {
        NoFlyZone::new(p(0.3, 0.3), 0.1)
    }

    #[test]
    fn euclidean_cases() {
        assert_eq!(euclidean(p(0.0, 0.0), p(0.0, 0.0)), 0.0);
        assert_eq!(euclidean(p(0.0, 0.0), p(3.0, 4.0)), 5.0);
        assert_abs_diff_eq!(euclidean(p(0.1, 0.3), p(0.5, 0.3)), 0.4, epsilon = 1e-15);
    }

    #[test]
    fn far_circle_has_no_crossing() {
        let z = NoFlyZone::new(p(0.5, 10.0), 0.1);
        assert!(segment_circle_crossing(p(0.0, 0.0), p(1.0, 0.0), &z).unwrap().is_none());
        assert_eq!(detour_length(p(0.0, 0.0), p(1.0, 0.0), &[z]).unwrap(), 1.0);
    }

    #[test]
    fn diameter_chord() {
        let c = segment_circle_crossing(p(0.1, 0.3), p(0.5, 0.3), &zone())
            .unwrap()
            .unwrap();
        assert_abs_diff_eq!(c.entry.x, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(c.entry.y, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(c.exit.x, 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(c.chord_len, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(c.central_angle_deg, 180.0, epsilon = 1e-9);
        let l = detour_length(p(0.1, 0.3), p(0.5, 0.3), &[zone()]).unwrap();
        assert_abs_diff_eq!(l, 0.4 - 0.2 + PI * 0.1, epsilon = 1e-12);
    }

    #[test]
    fn off_center_chord_matches_dense_sampling() {
        let (a, b) = (p(0.2, 0.25), p(0.4, 0.25));
        let z = zone();
        // Oracle: march along the segment and measure the part inside the circle.
        let steps = 2_000_000;
        let mut inside = 0usize;
        for k in 0..steps {
            let t = (k as f64 + 0.5) / steps as f64;
            let q = p(a.x + t * (b.x - a.x), a.y);
            if euclidean(q, z.center) < z.radius {
                inside += 1;
            }
        }
        let sampled_chord = 0.2 * inside as f64 / steps as f64;
        let half = (0.1f64 * 0.1 - 0.05 * 0.05).sqrt();
        assert_abs_diff_eq!(sampled_chord, 2.0 * half, epsilon = 1e-6);

        let c = segment_circle_crossing(a, b, &z).unwrap().unwrap();
        assert_abs_diff_eq!(c.chord_len, 0.173205, epsilon = 1e-6);
        assert_abs_diff_eq!(c.central_angle_deg, 120.0, epsilon = 1e-9);
        let l = detour_length(a, b, &[z]).unwrap();
        assert_abs_diff_eq!(l, 0.2 - 2.0 * half + 0.1 * 2.0 * PI / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.2362344, epsilon = 1e-6);
    }

    #[test]
    fn endpoint_inside_is_an_error() {
        let err = segment_circle_crossing(p(0.3, 0.31), p(0.9, 0.9), &zone()).unwrap_err();
        assert!(matches!(err, GeometryError::EndpointInsideZone { .. }));
        assert!(detour_length(p(0.9, 0.9), p(0.3, 0.31), &[zone()]).is_err());
    }

    #[test]
    fn endpoint_on_circle_is_allowed() {
        let l = detour_length(p(0.2, 0.3), p(0.4, 0.3), &[zone()]).unwrap();
        assert_abs_diff_eq!(l, PI * 0.1, epsilon = 1e-12);
    }

    #[test]
    fn tangent_counts_as_no_crossing() {
        let a = p(0.0, 0.4);
        let b = p(1.0, 0.4);
        assert!(segment_circle_crossing(a, b, &zone()).unwrap().is_none());
        assert_eq!(detour_length(a, b, &[zone()]).unwrap(), 1.0);
    }

    #[test]
    fn tangent_limit_shrinks_increment() {
        for (eps, bound) in [(1e-3, 1e-2), (1e-6, 1e-4)] {
            let y = 0.3 + 0.1 * (1.0 - eps);
            let a = p(0.0, y);
            let b = p(1.0, y);
            let inc = detour_length(a, b, &[zone()]).unwrap() - 1.0;
            assert!(inc >= 0.0 && inc < bound, "eps {eps}: increment {inc}");
        }
    }

    #[test]
    fn two_zones_on_one_leg_sum() {
        let z1 = NoFlyZone::new(p(0.3, 0.5), 0.1);
        let z2 = NoFlyZone::new(p(0.7, 0.5), 0.1);
        let l = detour_length(p(0.0, 0.5), p(1.0, 0.5), &[z1, z2]).unwrap();
        assert_abs_diff_eq!(l, 1.0 + 2.0 * (PI * 0.1 - 0.2), epsilon = 1e-12);
    }

    #[test]
    fn route_lengths() {
        let pts = [p(0.0, 0.0), p(1.0, 0.0), p(1.0, 1.0)];
        assert_eq!(route_length(&pts, &[]).unwrap(), 2.0);
        let tri = [p(0.0, 0.0), p(3.0, 0.0), p(0.0, 4.0), p(0.0, 0.0)];
        assert_eq!(route_length(&tri, &[]).unwrap(), 12.0);
    }

    #[test]
    fn polyline_follows_arc() {
        let pts = leg_polyline(p(0.2, 0.25), p(0.4, 0.25), &[zone()], 64).unwrap();
        let len: f64 = pts.windows(2).map(|w| euclidean(w[0], w[1])).sum();
        let l = detour_length(p(0.2, 0.25), p(0.4, 0.25), &[zone()]).unwrap();
        assert!((len - l).abs() / l < 1e-3);
        // Arc bulges away from the center (downwards here).
        assert!(pts.iter().all(|q| q.y <= 0.25 + 1e-12));
    }

    proptest::proptest! {
        #[test]
        fn detour_is_symmetric_and_bounded(
            ax in 0.0f64..1.0, ay in 0.0f64..1.0, bx in 0.0f64..1.0, by in 0.0f64..1.0,
        ) {
            let z = zone();
            let (a, b) = (p(ax, ay), p(bx, by));
            proptest::prop_assume!(!z.contains_strictly(a) && !z.contains_strictly(b));
            let ab = detour_length(a, b, &[z]).unwrap();
            let ba = detour_length(b, a, &[z]).unwrap();
            proptest::prop_assert!((ab - ba).abs() < 1e-12);
            let e = euclidean(a, b);
            proptest::prop_assert!(ab >= e);
            // The increment never exceeds the diameter case.
            proptest::prop_assert!(ab - e <= (PI - 2.0) * z.radius + 1e-12);
        }
    }
}
