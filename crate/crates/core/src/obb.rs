//! Oriented bounding boxes and separating-axis overlap tests.

use crate::scene::{AgentGeometry, AgentState};

pub type Point = [f64; 2];

/// Corners of the agent footprint, counter-clockwise from front-left.
pub fn obb_corners(state: &AgentState, geom: &AgentGeometry) -> [Point; 4] {
    let (s, c) = state.psi.sin_cos();
    let hl = 0.5 * geom.length;
    let hw = 0.5 * geom.width;
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    local.map(|[lx, ly]| [state.x + c * lx - s * ly, state.y + s * lx + c * ly])
}

fn project(corners: &[Point; 4], axis: Point) -> (f64, f64) {
    corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p[0] * axis[0] + p[1] * axis[1];
        (lo.min(d), hi.max(d))
    })
}

fn edge_normals(corners: &[Point; 4]) -> [Point; 2] {
    // Rectangle: two distinct edge directions suffice.
    let n = |a: Point, b: Point| {
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = dx.hypot(dy);
        [-dy / len, dx / len]
    };
    [n(corners[0], corners[1]), n(corners[1], corners[2])]
}

/// Signed SAT margin: the largest gap over the four edge normals when the
/// boxes are separated (positive), otherwise minus the smallest overlap.
pub fn obb_margin(a: &[Point; 4], b: &[Point; 4]) -> f64 {
    let mut best_gap = f64::NEG_INFINITY;
    let mut min_overlap = f64::INFINITY;
    for axis in edge_normals(a).into_iter().chain(edge_normals(b)) {
        let (amin, amax) = project(a, axis);
        let (bmin, bmax) = project(b, axis);
        let gap = (bmin - amax).max(amin - bmax);
        best_gap = best_gap.max(gap);
        min_overlap = min_overlap.min(-gap);
    }
    if best_gap > 0.0 {
        best_gap
    } else {
        -min_overlap
    }
}

/// True iff the two footprints overlap. Touching edges count as overlap.
pub fn obb_intersects(
    a_state: &AgentState,
    a_geom: &AgentGeometry,
    b_state: &AgentState,
    b_geom: &AgentGeometry,
) -> bool {
    let reach = 0.5 * (a_geom.length.hypot(a_geom.width) + b_geom.length.hypot(b_geom.width));
    if (a_state.x - b_state.x).hypot(a_state.y - b_state.y) > reach {
        return false;
    }
    let a = obb_corners(a_state, a_geom);
    let b = obb_corners(b_state, b_geom);
    obb_margin(&a, &b) <= 0.0
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn on_segment(p: Point, q: Point, r: Point) -> bool {
    r[0] >= p[0].min(q[0]) && r[0] <= p[0].max(q[0]) && r[1] >= p[1].min(q[1]) && r[1] <= p[1].max(q[1])
}

/// Closed-segment intersection test, collinear overlaps included.
pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}
