//! Rule-based traffic on procedural maps.
//!
//! Drivers follow lane centerlines with pure pursuit and control speed with
//! the Intelligent Driver Model. Red lights, roundabout yielding and path
//! ends act as stationary virtual leaders. Scenes that still end up with an
//! infraction are discarded and regenerated from the next sub-seed.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AgentLog, Dataset, SceneLog};
use crate::error::{Error, Result};
use crate::kinematics;
use crate::scene::{
    wrap_angle, Action, AgentGeometry, AgentState, LightCycle, LightPhase, MapMesh, TrafficLight, ACCEL_MAX, STEER_MAX,
};
use crate::simulation::detect_infractions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapFamily {
    Straight,
    Curve,
    Intersection,
    Roundabout,
}

impl MapFamily {
    pub const ALL: [MapFamily; 4] = [MapFamily::Straight, MapFamily::Curve, MapFamily::Intersection, MapFamily::Roundabout];

    pub fn name(&self) -> &'static str {
        match self {
            MapFamily::Straight => "straight",
            MapFamily::Curve => "curve",
            MapFamily::Intersection => "intersection",
            MapFamily::Roundabout => "roundabout",
        }
    }
}

/// Intelligent Driver Model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarFollowing {
    /// Desired speeds are drawn from a right-skewed law clipped to this range.
    pub desired_speed: [f64; 2],
    pub headway: f64,
    pub max_accel: f64,
    pub comfortable_decel: f64,
    pub min_gap: f64,
}

impl Default for CarFollowing {
    fn default() -> Self {
        Self { desired_speed: [2.0, 30.0], headway: 1.2, max_accel: 2.5, comfortable_decel: 3.0, min_gap: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub families: Vec<MapFamily>,
    pub scenes: usize,
    pub agents_per_scene: [usize; 2],
    pub car_following: CarFollowing,
    /// Pure-pursuit lookahead at standstill, meters.
    pub lookahead: f64,
    /// Seconds.
    pub episode_length: f64,
    pub dt: f64,
    /// Expected desired-speed changes per agent per second.
    pub speed_change_rate: f64,
    /// Expected lane-change attempts per agent per second on multi-lane roads.
    pub lane_change_rate: f64,
    /// Seconds over which a lane change blends into the new lane.
    pub lane_change_duration: f64,
    pub seed: u64,
    pub max_attempts: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            families: MapFamily::ALL.to_vec(),
            scenes: 40,
            agents_per_scene: [3, 8],
            car_following: CarFollowing::default(),
            lookahead: 6.0,
            episode_length: 20.0,
            dt: 0.1,
            speed_change_rate: 0.2,
            lane_change_rate: 0.2,
            lane_change_duration: 2.5,
            seed: 0,
            max_attempts: 40,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let cf = &self.car_following;
        let [lo, hi] = cf.desired_speed;
        if !(0.0 <= lo && lo <= hi && hi <= 40.0) {
            return Err(Error::Config(format!("desired speed range [{lo}, {hi}] must lie within [0, 40]")));
        }
        let positive = [cf.headway, cf.max_accel, cf.comfortable_decel, cf.min_gap, self.lookahead, self.episode_length, self.dt];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("car-following, lookahead, episode length and dt must be positive".into()));
        }
        if self.families.is_empty() {
            return Err(Error::Config("at least one map family is required".into()));
        }
        let [amin, amax] = self.agents_per_scene;
        if amin == 0 || amin > amax {
            return Err(Error::Config(format!("agents per scene [{amin}, {amax}] is not a valid range")));
        }
        if self.speed_change_rate < 0.0 || self.lane_change_rate < 0.0 || self.max_attempts == 0 {
            return Err(Error::Config("change rates must be non-negative and attempts positive".into()));
        }
        if !(self.lane_change_duration > 0.0) {
            return Err(Error::Config("lane change duration must be positive".into()));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.episode_length / self.dt).round() as usize
    }
}

const DS: f64 = 0.5;

/// A lane centerline resampled every `DS` meters.
#[derive(Debug, Clone)]
struct Path {
    pts: Vec<[f64; 2]>,
    heading: Vec<f64>,
    kappa: Vec<f64>,
    /// Traffic light index and the arc length where the path meets its stop line.
    light: Option<(usize, f64)>,
    /// Roundabout entry: merge arc length and ring angle of the merge point.
    merge: Option<(f64, f64)>,
}

impl Path {
    fn new(control: &[[f64; 2]]) -> Self {
        let mut pts = vec![control[0]];
        let mut carry = 0.0;
        for w in control.windows(2) {
            let (a, b) = (w[0], w[1]);
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            if len == 0.0 {
                continue;
            }
            let mut d = DS - carry;
            while d <= len {
                let f = d / len;
                pts.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
                d += DS;
            }
            carry = len - (d - DS);
        }
        let n = pts.len();
        let heading: Vec<f64> = (0..n)
            .map(|i| {
                let (a, b) = if i + 1 < n { (pts[i], pts[i + 1]) } else { (pts[i - 1], pts[i]) };
                (b[1] - a[1]).atan2(b[0] - a[0])
            })
            .collect();
        let kappa = (0..n)
            .map(|i| {
                let (i0, i1) = (i.saturating_sub(2), (i + 2).min(n - 1));
                if i1 == i0 {
                    0.0
                } else {
                    wrap_angle(heading[i1] - heading[i0]).abs() / ((i1 - i0) as f64 * DS)
                }
            })
            .collect();
        Self { pts, heading, kappa, light: None, merge: None }
    }

    fn len(&self) -> f64 {
        (self.pts.len() - 1) as f64 * DS
    }

    fn point(&self, s: f64) -> [f64; 2] {
        let s = s.clamp(0.0, self.len());
        let i = ((s / DS) as usize).min(self.pts.len() - 2);
        let f = s / DS - i as f64;
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    }

    fn heading_at(&self, s: f64) -> f64 {
        let i = ((s.clamp(0.0, self.len()) / DS) as usize).min(self.pts.len() - 1);
        self.heading[i]
    }

    /// Nearest arc length within `[lo, hi]` and the distance to it.
    fn project(&self, p: [f64; 2], lo: f64, hi: f64) -> (f64, f64) {
        let i0 = (lo.max(0.0) / DS) as usize;
        let i1 = ((hi.min(self.len()) / DS).ceil() as usize).min(self.pts.len() - 1);
        let mut best = (lo.max(0.0), f64::INFINITY);
        for i in i0..i1.max(i0 + 1).min(self.pts.len() - 1) {
            let (a, b) = (self.pts[i], self.pts[i + 1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let f = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            let q = [a[0] + f * dx, a[1] + f * dy];
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            if d < best.1 {
                best = ((i as f64 + f) * DS, d);
            }
        }
        best
    }

    fn max_curvature(&self, s: f64, ahead: f64) -> f64 {
        let i0 = (s.max(0.0) / DS) as usize;
        let i1 = (((s + ahead) / DS) as usize).min(self.pts.len() - 1);
        self.kappa[i0.min(i1)..=i1].iter().cloned().fold(0.0, f64::max)
    }

    /// First arc length where the path crosses segment `ab`.
    fn crossing(&self, a: [f64; 2], b: [f64; 2]) -> Option<f64> {
        for i in 0..self.pts.len() - 1 {
            let (p, q) = (self.pts[i], self.pts[i + 1]);
            let r = [q[0] - p[0], q[1] - p[1]];
            let sv = [b[0] - a[0], b[1] - a[1]];
            let den = r[0] * sv[1] - r[1] * sv[0];
            if den.abs() < 1e-12 {
                continue;
            }
            let ap = [a[0] - p[0], a[1] - p[1]];
            let t = (ap[0] * sv[1] - ap[1] * sv[0]) / den;
            let u = (ap[0] * r[1] - ap[1] * r[0]) / den;
            if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
                return Some((i as f64 + t) * DS);
            }
        }
        None
    }
}

fn push_tri(tris: &mut Vec<[f64; 6]>, a: [f64; 2], b: [f64; 2], c: [f64; 2]) {
    let area = 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]));
    if area.abs() > 1e-6 {
        tris.push([a[0], a[1], b[0], b[1], c[0], c[1]]);
    }
}

fn push_quad(tris: &mut Vec<[f64; 6]>, a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) {
    push_tri(tris, a, b, c);
    push_tri(tris, a, c, d);
}

/// Triangulated band of half-width `w` around a polyline, one quad per
/// control segment.
fn strip(tris: &mut Vec<[f64; 6]>, center: &[[f64; 2]], w: f64) {
    let n = center.len();
    let normal = |i: usize| {
        let (a, b) = if i + 1 < n { (center[i], center[i + 1]) } else { (center[i - 1], center[i]) };
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let l = dx.hypot(dy);
        [-dy / l, dx / l]
    };
    for i in 0..n - 1 {
        let (n0, n1) = (normal(i), normal(i + 1));
        let (c0, c1) = (center[i], center[i + 1]);
        push_quad(
            tris,
            [c0[0] + w * n0[0], c0[1] + w * n0[1]],
            [c0[0] - w * n0[0], c0[1] - w * n0[1]],
            [c1[0] - w * n1[0], c1[1] - w * n1[1]],
            [c1[0] + w * n1[0], c1[1] + w * n1[1]],
        );
    }
}

fn offset(line: &[[f64; 2]], d: f64) -> Vec<[f64; 2]> {
    let n = line.len();
    (0..n)
        .map(|i| {
            let (a, b) = if i + 1 < n { (line[i], line[i + 1]) } else { (line[i - 1], line[i]) };
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let l = dx.hypot(dy);
            // Right-hand normal of the travel direction.
            [line[i][0] + d * dy / l, line[i][1] - d * dx / l]
        })
        .collect()
}

fn arc(center: [f64; 2], r: f64, from: f64, to: f64, step: f64) -> Vec<[f64; 2]> {
    let n = (((to - from).abs() / step).ceil() as usize).max(1);
    (0..=n)
        .map(|k| {
            let a = from + (to - from) * k as f64 / n as f64;
            [center[0] + r * a.cos(), center[1] + r * a.sin()]
        })
        .collect()
}

fn reversed(v: &[[f64; 2]]) -> Vec<[f64; 2]> {
    v.iter().rev().cloned().collect()
}

struct Layout {
    map: MapMesh,
    paths: Vec<Path>,
    /// Scripted drivers never exceed this speed on the map.
    speed_cap: f64,
    ring: Option<f64>,
    /// Same-direction neighbor lanes of each path.
    neighbors: Vec<Vec<usize>>,
}

fn straight_layout() -> Layout {
    let mut tris = Vec::new();
    let xs: Vec<f64> = (0..=42).map(|k| -210.0 + 10.0 * k as f64).collect();
    let center: Vec<[f64; 2]> = xs.iter().map(|&x| [x, 0.0]).collect();
    strip(&mut tris, &center, 7.5);
    let lane = |y: f64, east: bool| {
        let pts = if east { vec![[-205.0, y], [205.0, y]] } else { vec![[205.0, y], [-205.0, y]] };
        Path::new(&pts)
    };
    Layout {
        map: MapMesh { triangles: tris, ..Default::default() },
        paths: vec![lane(-1.75, true), lane(-5.25, true), lane(1.75, false), lane(5.25, false)],
        speed_cap: 40.0,
        ring: None,
        neighbors: vec![vec![1], vec![0], vec![3], vec![2]],
    }
}

fn curve_layout(rng: &mut ChaCha8Rng) -> Layout {
    let r = rng.gen_range(35.0..80.0);
    let sweep = rng.gen_range(100f64..160.0).to_radians();
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    // Lead-in along +x ending at the origin, arc turning by `sign * sweep`.
    let mut center = vec![[-120.0, 0.0], [-60.0, 0.0]];
    let c = [0.0, sign * r];
    let start = -sign * FRAC_PI_2;
    for p in arc(c, r, start, start + sign * sweep, 0.05).into_iter().skip(0) {
        center.push(p);
    }
    center.insert(2, [0.0, 0.0]);
    center.dedup();
    let end = *center.last().unwrap();
    let dir = sign * sweep;
    for k in 1..=12 {
        let d = 10.0 * k as f64;
        center.push([end[0] + d * dir.cos(), end[1] + d * dir.sin()]);
    }
    let mut tris = Vec::new();
    strip(&mut tris, &center, 7.5);
    let back = reversed(&center);
    let paths = [(&center, 1.75), (&center, 5.25), (&back, 1.75), (&back, 5.25)]
        .into_iter()
        .map(|(line, d)| Path::new(&offset(line, d)))
        .collect();
    Layout {
        map: MapMesh { triangles: tris, ..Default::default() },
        paths,
        speed_cap: 40.0,
        ring: None,
        neighbors: vec![vec![1], vec![0], vec![3], vec![2]],
    }
}

const ARM: f64 = 125.0;

fn intersection_layout() -> Layout {
    let w = 5.0;
    let mut tris = Vec::new();
    push_quad(&mut tris, [-w, -ARM], [w, -ARM], [w, ARM], [-w, ARM]);
    push_quad(&mut tris, [-ARM, -w], [-w, -w], [-w, w], [-ARM, w]);
    push_quad(&mut tris, [w, -w], [ARM, -w], [ARM, w], [w, w]);
    for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        push_tri(&mut tris, [sx * w, sy * w], [sx * (w + 8.0), sy * w], [sx * w, sy * (w + 8.0)]);
    }
    let cycle = |offset: f64| LightCycle { green: 12.0, yellow: 3.0, red: 19.0, offset };
    let mut lights = Vec::new();
    let mut paths = Vec::new();
    // Approach directions as unit vectors of travel: north, south, east, west.
    let dirs: [[f64; 2]; 4] = [[0.0, 1.0], [0.0, -1.0], [1.0, 0.0], [-1.0, 0.0]];
    for (k, d) in dirs.iter().enumerate() {
        let right = [d[1], -d[0]];
        let lane = |t: f64| [right[0] * 2.5 + d[0] * t, right[1] * 2.5 + d[1] * t];
        let stop_a = [d[0] * -6.0, d[1] * -6.0];
        let stop_b = [stop_a[0] + right[0] * w, stop_a[1] + right[1] * w];
        let offset = if k < 2 { 0.0 } else { 17.0 };
        lights.push(TrafficLight {
            position: [stop_b[0] + right[0], stop_b[1] + right[1]],
            stop_line: [stop_a, stop_b],
            cycle: cycle(offset),
        });
        let straight = vec![lane(-ARM + 2.0), lane(ARM - 2.0)];
        // Right turn: quarter circle of radius 8 tangent to both lanes.
        let c = [lane(-10.5)[0] + right[0] * 8.0, lane(-10.5)[1] + right[1] * 8.0];
        let a0 = (lane(-10.5)[1] - c[1]).atan2(lane(-10.5)[0] - c[0]);
        let mut turn = vec![lane(-ARM + 2.0)];
        turn.extend(arc(c, 8.0, a0, a0 - FRAC_PI_2, 0.05));
        let exit_dir = right;
        let last = *turn.last().unwrap();
        turn.push([last[0] + exit_dir[0] * (ARM - 14.0), last[1] + exit_dir[1] * (ARM - 14.0)]);
        for control in [straight, turn] {
            let mut p = Path::new(&control);
            p.light = p.crossing(stop_a, stop_b).map(|s| (k, s));
            paths.push(p);
        }
    }
    Layout {
        map: MapMesh { triangles: tris, traffic_lights: lights, stop_signs: vec![] },
        neighbors: vec![vec![]; paths.len()],
        paths,
        speed_cap: 14.0,
        ring: None,
    }
}

const RING: f64 = 14.0;

fn roundabout_layout() -> Layout {
    let mut tris = Vec::new();
    let ring: Vec<[f64; 2]> = arc([0.0, 0.0], RING, 0.0, 2.0 * PI, 0.05);
    strip(&mut tris, &ring, 5.5);
    let mut paths = Vec::new();
    for k in 0..4 {
        let phi = k as f64 * FRAC_PI_2 - FRAC_PI_2;
        let (c, s) = (phi.cos(), phi.sin());
        push_quad(
            &mut tris,
            [c * 12.0 - s * 5.0, s * 12.0 + c * 5.0],
            [c * 12.0 + s * 5.0, s * 12.0 - c * 5.0],
            [c * 110.0 + s * 5.0, s * 110.0 - c * 5.0],
            [c * 110.0 - s * 5.0, s * 110.0 + c * 5.0],
        );
        // Inbound lane: travel direction -(c, s), right normal (-s, c).
        let inbound = |r: f64| [c * r - s * 2.5, s * r + c * 2.5];
        for exit in 1..=3 {
            let phe = phi + exit as f64 * FRAC_PI_2;
            let (ce, se) = (phe.cos(), phe.sin());
            let outbound = |r: f64| [ce * r + se * 2.5, se * r - ce * 2.5];
            let theta_in = phi + 25f64.to_radians();
            let theta_out = phe - 25f64.to_radians();
            let mut control = vec![inbound(108.0), inbound(22.0)];
            control.extend(arc([0.0, 0.0], RING, theta_in, theta_out, 0.05));
            control.push(outbound(22.0));
            control.push(outbound(108.0));
            let mut p = Path::new(&control);
            let merge_pt = [RING * theta_in.cos(), RING * theta_in.sin()];
            let (s_merge, _) = p.project(merge_pt, 0.0, p.len());
            p.merge = Some((s_merge, theta_in));
            paths.push(p);
        }
    }
    Layout {
        map: MapMesh { triangles: tris, ..Default::default() },
        neighbors: vec![vec![]; paths.len()],
        paths,
        speed_cap: 14.0,
        ring: Some(RING),
    }
}

#[derive(Debug, Clone)]
struct Driver {
    path: usize,
    s: f64,
    desired: f64,
    geom: AgentGeometry,
    state: AgentState,
    active: bool,
    /// Signed lateral offset from the path, shrinking to zero after a lane change.
    offset: f64,
    offset_rate: f64,
}

fn draw_desired(rng: &mut ChaCha8Rng, cf: &CarFollowing, cap: f64) -> f64 {
    let n: f64 = rng.sample(rand_distr::StandardNormal);
    let v = (9f64.ln() + 0.45 * n).exp();
    let hi = cf.desired_speed[1].min(cap);
    v.clamp(cf.desired_speed[0].min(hi), hi)
}

fn idm(cfg: &CarFollowing, v: f64, desired: f64, leader: Option<(f64, f64)>) -> f64 {
    let ratio = if desired > 0.05 { v / desired } else { 10.0 };
    let free = (cfg.max_accel * (1.0 - ratio.powi(4))).max(-cfg.comfortable_decel);
    let inter = match leader {
        Some((gap, lv)) => {
            let star = cfg.min_gap
                + (v * cfg.headway + v * (v - lv) / (2.0 * (cfg.max_accel * cfg.comfortable_decel).sqrt())).max(0.0);
            -cfg.max_accel * (star / gap.max(0.1)).powi(2)
        }
        None => 0.0,
    };
    (free + inter).clamp(-ACCEL_MAX, cfg.max_accel)
}

/// Closest leader on driver `i`'s path: `(bumper gap, leader speed)`.
fn leader_of(i: usize, drivers: &[Driver], paths: &[Path], horizon: f64) -> Option<(f64, f64)> {
    let me = &drivers[i];
    let path = &paths[me.path];
    let mut best: Option<(f64, f64)> = None;
    for (j, other) in drivers.iter().enumerate() {
        if j == i || !other.active {
            continue;
        }
        let (d0, d1) = (other.state.x - me.state.x, other.state.y - me.state.y);
        if d0.hypot(d1) > horizon + 10.0 {
            continue;
        }
        let (s, lat) = path.project(other.state.position(), me.s, me.s + horizon);
        if lat > 2.6 || s <= me.s {
            continue;
        }
        let dh = wrap_angle(other.state.psi - path.heading_at(s)).abs();
        if dh > PI / 3.0 {
            continue;
        }
        let gap = s - me.s - 0.5 * (me.geom.length + other.geom.length);
        if best.map_or(true, |(g, _)| gap < g) {
            best = Some((gap, other.state.v));
        }
    }
    best
}

fn left_normal(psi: f64) -> [f64; 2] {
    [-psi.sin(), psi.cos()]
}

/// Arc length on `target` where driver `i` would merge, if the gap there is
/// acceptable.
fn lane_change_slot(i: usize, target: usize, drivers: &[Driver], paths: &[Path]) -> Option<f64> {
    let me = &drivers[i];
    let tp = &paths[target];
    let (s_new, _) = tp.project(me.state.position(), 0.0, tp.len());
    if s_new + 60.0 > tp.len() {
        return None;
    }
    let v = me.state.v;
    for (j, o) in drivers.iter().enumerate() {
        if j == i || !o.active {
            continue;
        }
        let (sj, lat) = tp.project(o.state.position(), s_new - 60.0, s_new + 60.0);
        let aligned = wrap_angle(o.state.psi - tp.heading_at(sj)).abs() < PI / 3.0;
        if !(aligned && (lat < 3.0 || o.path == target)) {
            continue;
        }
        let behind = 8.0 + v + 3.0 * (o.state.v - v).max(0.0);
        let ahead = 10.0 + 0.8 * v + 3.0 * (v - o.state.v).max(0.0);
        if sj > s_new - behind && sj < s_new + ahead {
            return None;
        }
    }
    Some(s_new)
}

struct SceneSpec<'a> {
    layout: &'a Layout,
    drivers: Vec<Driver>,
    steps: usize,
    dt: f64,
    lookahead: f64,
    speed_change_rate: f64,
    lane_change_rate: f64,
    lane_change_duration: f64,
    cf: CarFollowing,
}

fn simulate(spec: SceneSpec<'_>, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Option<AgentState>>>> {
    let SceneSpec { layout, mut drivers, steps, dt, lookahead, speed_change_rate, lane_change_rate, lane_change_duration, cf } =
        spec;
    let paths = &layout.paths;
    let mut log: Vec<Vec<Option<AgentState>>> = drivers.iter().map(|d| vec![Some(d.state)]).collect();
    for step in 0..steps {
        let time = step as f64 * dt;
        let phases = layout.map.light_phases(time);
        let mut next = Vec::with_capacity(drivers.len());
        for i in 0..drivers.len() {
            let d = &drivers[i];
            if !d.active {
                next.push(None);
                continue;
            }
            let path = &paths[d.path];
            let v = d.state.v;
            let horizon = 25.0 + 3.0 * v;
            let mut leader = leader_of(i, &drivers, paths, horizon);
            let mut obstacle = |s_obs: f64| {
                let gap = s_obs - d.s - 0.5 * d.geom.length;
                if leader.map_or(true, |(g, _)| gap < g) {
                    leader = Some((gap, 0.0));
                }
            };
            if let Some((light, s_stop)) = path.light {
                if d.s < s_stop {
                    let gap = s_stop - d.s - 0.5 * d.geom.length;
                    match phases[light] {
                        LightPhase::Red => obstacle(s_stop),
                        LightPhase::Yellow if gap >= v * v / (2.0 * 3.5) => obstacle(s_stop),
                        _ => {}
                    }
                }
            }
            if let (Some((s_merge, theta_in)), Some(ring)) = (path.merge, layout.ring) {
                let s_yield = s_merge - 9.0;
                if d.s < s_yield - 0.5 {
                    let busy = drivers.iter().enumerate().any(|(j, o)| {
                        if j == i || !o.active {
                            return false;
                        }
                        let r = o.state.x.hypot(o.state.y);
                        let behind = wrap_angle(theta_in - o.state.y.atan2(o.state.x));
                        (r - ring).abs() < 5.5 && (-0.15..1.3).contains(&behind)
                    });
                    if busy {
                        obstacle(s_yield);
                    }
                }
            }
            let curvature = path.max_curvature(d.s, 15.0 + 3.0 * v);
            let cap = if curvature > 1e-4 { (2.5 / curvature).sqrt() } else { f64::INFINITY };
            let accel = idm(&cf, v, d.desired.min(cap), leader);
            let ld = lookahead + 0.25 * v;
            let n = left_normal(path.heading_at(d.s + ld));
            let on_path = path.point(d.s + ld);
            let target = [on_path[0] + d.offset * n[0], on_path[1] + d.offset * n[1]];
            let alpha = wrap_angle((target[1] - d.state.y).atan2(target[0] - d.state.x) - d.state.psi);
            let kappa = 2.0 * alpha.sin() / ld;
            let slip = (kappa * 0.5 * d.geom.length).clamp(-0.999, 0.999).asin();
            let steer = (2.0 * slip.tan()).atan().clamp(-STEER_MAX, STEER_MAX);
            let s1 = kinematics::step(&d.state, &Action::new(accel, steer), dt, &d.geom)?;
            next.push(Some(s1));
        }
        for (i, s1) in next.into_iter().enumerate() {
            let d = &mut drivers[i];
            if let Some(s1) = s1 {
                let path = &paths[d.path];
                let (s, _) = path.project(s1.position(), d.s - 1.0, d.s + s1.v * dt + 5.0);
                d.s = s;
                d.state = s1;
                if d.s > path.len() - 8.0 {
                    d.active = false;
                }
                if rng.gen_bool((speed_change_rate * dt).min(1.0)) {
                    d.desired = draw_desired(rng, &cf, layout.speed_cap);
                }
                d.offset = if d.offset > 0.0 { (d.offset - d.offset_rate * dt).max(0.0) } else { (d.offset + d.offset_rate * dt).min(0.0) };
            }
            log[i].push(d.active.then_some(d.state));
        }
        for i in 0..drivers.len() {
            let d = &drivers[i];
            let options = &layout.neighbors[d.path];
            if !d.active || d.offset != 0.0 || options.is_empty() {
                continue;
            }
            if !rng.gen_bool((lane_change_rate * dt).min(1.0)) {
                continue;
            }
            let target = options[rng.gen_range(0..options.len())];
            if let Some(s_new) = lane_change_slot(i, target, &drivers, paths) {
                let tp = &paths[target];
                let base = tp.point(s_new);
                let n = left_normal(tp.heading_at(s_new));
                let d = &mut drivers[i];
                d.offset = (d.state.x - base[0]) * n[0] + (d.state.y - base[1]) * n[1];
                d.offset_rate = d.offset.abs() / lane_change_duration;
                d.path = target;
                d.s = s_new;
            }
        }
    }
    Ok(log)
}

fn place_drivers(layout: &Layout, n: usize, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Driver> {
    let mut drivers: Vec<Driver> = Vec::new();
    let mut tries = 0;
    while drivers.len() < n && tries < 400 {
        tries += 1;
        let path_idx = rng.gen_range(0..layout.paths.len());
        let path = &layout.paths[path_idx];
        let s = rng.gen_range(0.0..path.len() * 0.55);
        let p = path.point(s);
        if layout.ring.is_none() && layout.map.traffic_lights.len() > 0 && p[0].abs() < 14.0 && p[1].abs() < 14.0 {
            continue;
        }
        if let Some((s_merge, _)) = path.merge {
            // Start either well before the entry or already past it.
            if (s_merge - 30.0..s_merge + 25.0).contains(&s) {
                continue;
            }
        }
        let desired = draw_desired(rng, &cfg.car_following, layout.speed_cap);
        let curvature = path.max_curvature(s, 40.0);
        let cap = if curvature > 1e-4 { (2.5 / curvature).sqrt() } else { f64::INFINITY };
        let v = (desired * rng.gen_range(0.4..1.15)).min(cap);
        let geom = AgentGeometry { length: rng.gen_range(4.0..5.0), width: rng.gen_range(1.7..2.0) };
        let state = AgentState::new(p[0], p[1], path.heading_at(s), v);
        let spacing = cfg.car_following.min_gap + v * cfg.car_following.headway + 6.0;
        let clear = drivers.iter().all(|o| {
            let dist = (o.state.x - state.x).hypot(o.state.y - state.y);
            dist > spacing.max(o.state.v * cfg.car_following.headway + 8.0)
        });
        if clear {
            drivers.push(Driver { path: path_idx, s, desired, geom, state, active: true, offset: 0.0, offset_rate: 0.0 });
        }
    }
    drivers
}

fn scene_seed(master: u64, scene: usize, attempt: usize) -> u64 {
    master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((scene as u64) << 20)
        .wrapping_add(attempt as u64)
}

fn infraction_free(scene: &SceneLog, map: &MapMesh) -> bool {
    let seg = scene.to_segment();
    for t in 0..seg.len() {
        let prev = (t > 0).then(|| (seg.states[t - 1].as_slice(), seg.present[t - 1].as_slice()));
        let phases = map.light_phases(seg.time_at(t.saturating_sub(1)));
        if !detect_infractions(&seg.states[t], &seg.present[t], &seg.geometries, map, &phases, prev, t).is_empty() {
            return false;
        }
    }
    true
}

fn build_layout(family: MapFamily, rng: &mut ChaCha8Rng) -> Layout {
    match family {
        MapFamily::Straight => straight_layout(),
        MapFamily::Curve => curve_layout(rng),
        MapFamily::Intersection => intersection_layout(),
        MapFamily::Roundabout => roundabout_layout(),
    }
}

/// Generates `config.scenes` infraction-free scenes, each on its own map.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let mut data = Dataset::default();
    for k in 0..config.scenes {
        let family = config.families[k % config.families.len()];
        let mut done = false;
        for attempt in 0..config.max_attempts {
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(config.seed, k, attempt));
            let layout = build_layout(family, &mut rng);
            let [lo, hi] = config.agents_per_scene;
            let n = rng.gen_range(lo..=hi);
            let drivers = place_drivers(&layout, n, config, &mut rng);
            if drivers.len() < lo {
                continue;
            }
            let geoms: Vec<AgentGeometry> = drivers.iter().map(|d| d.geom).collect();
            let spec = SceneSpec {
                layout: &layout,
                drivers,
                steps: config.steps(),
                dt: config.dt,
                lookahead: config.lookahead,
                speed_change_rate: config.speed_change_rate,
                lane_change_rate: config.lane_change_rate,
                lane_change_duration: config.lane_change_duration,
                cf: config.car_following,
            };
            let log = simulate(spec, &mut rng)?;
            let location = format!("{}-{k:05}", family.name());
            let scene = SceneLog {
                location: location.clone(),
                dt: config.dt,
                start_time: 0.0,
                agents: log
                    .into_iter()
                    .zip(&geoms)
                    .enumerate()
                    .map(|(i, (states, g))| AgentLog {
                        id: format!("agent-{i}"),
                        length: g.length,
                        width: g.width,
                        states: states.into_iter().map(|s| s.map(|s| s.to_array())).collect(),
                    })
                    .collect(),
            };
            if infraction_free(&scene, &layout.map) {
                data.maps.insert(location, layout.map);
                data.scenes.push(scene);
                done = true;
                break;
            }
            log::debug!("scene {k} attempt {attempt} rejected");
        }
        if !done {
            return Err(Error::Generation(format!(
                "scene {k} ({}) still had infractions after {} attempts; reduce agents per scene",
                family.name(),
                config.max_attempts
            )));
        }
    }
    Ok(data)
}
