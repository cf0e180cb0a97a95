//! Scene-level value types shared by every other module: agent poses,
//! footprints, actions, trajectory segments and the drivable-area mesh.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum absolute acceleration, m/s².
pub const ACCEL_MAX: f64 = 5.0;
/// Maximum absolute front-wheel angle, rad.
pub const STEER_MAX: f64 = 0.8;

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    // rem_euclid maps −π to π already; guard against rounding to exactly −π.
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Pose and speed of an agent's geometric center at one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, psi: f64, v: f64) -> Self {
        Self {
            x,
            y,
            psi: wrap_angle(psi),
            v,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.psi.is_finite() && self.v.is_finite()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::NumericDomain(format!("non-finite state {self:?}")));
        }
        if self.v < 0.0 {
            return Err(Error::Validation(format!("negative speed {}", self.v)));
        }
        Ok(())
    }

    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        (self.x - p[0]).hypot(self.y - p[1])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.psi, self.v]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            psi: a[2],
            v: a[3],
        }
    }
}

/// Footprint of an agent as a rectangle centered on its state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentGeometry {
    pub length: f64,
    pub width: f64,
}

impl AgentGeometry {
    pub fn new(length: f64, width: f64) -> Result<Self> {
        let g = Self { length, width };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.width > 0.0) {
            return Err(Error::Validation(format!(
                "agent geometry must be positive, got {}x{}",
                self.length, self.width
            )));
        }
        Ok(())
    }
}

impl Default for AgentGeometry {
    fn default() -> Self {
        Self {
            length: 4.5,
            width: 1.9,
        }
    }
}

/// Longitudinal acceleration and front-wheel steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub accel: f64,
    pub steer: f64,
}

impl Action {
    pub fn new(accel: f64, steer: f64) -> Self {
        Self { accel, steer }
    }

    pub fn clamped(&self) -> Self {
        Self {
            accel: self.accel.clamp(-ACCEL_MAX, ACCEL_MAX),
            steer: self.steer.clamp(-STEER_MAX, STEER_MAX),
        }
    }

    pub fn in_bounds(&self) -> bool {
        self.accel.abs() <= ACCEL_MAX && self.steer.abs() <= STEER_MAX
    }
}

/// T timesteps × N agents of states with a presence mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySegment {
    pub location: String,
    pub dt: f64,
    /// Scene time of the first row, seconds. Drives traffic-light phases.
    pub start_time: f64,
    pub states: Vec<Vec<AgentState>>,
    pub present: Vec<Vec<bool>>,
    pub geometries: Vec<AgentGeometry>,
    pub agent_ids: Vec<String>,
}

impl TrajectorySegment {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn num_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.states.len();
        let n = self.agent_ids.len();
        if t < 2 {
            return Err(Error::Shape(format!("segment needs at least 2 steps, got {t}")));
        }
        if n == 0 {
            return Err(Error::Shape("segment has no agents".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Validation(format!("dt must be positive, got {}", self.dt)));
        }
        if self.present.len() != t || self.geometries.len() != n {
            return Err(Error::Shape("presence mask or geometry count mismatch".into()));
        }
        for (row, mask) in self.states.iter().zip(&self.present) {
            if row.len() != n || mask.len() != n {
                return Err(Error::Shape("ragged state rows".into()));
            }
            for (s, &p) in row.iter().zip(mask) {
                if p && !s.is_finite() {
                    return Err(Error::NumericDomain(format!("non-finite present state {s:?}")));
                }
            }
        }
        for g in &self.geometries {
            g.validate()?;
        }
        Ok(())
    }

    /// Agents present at every timestep; the only valid ego choices.
    pub fn ego_candidates(&self) -> Vec<usize> {
        (0..self.num_agents())
            .filter(|&i| self.present.iter().all(|row| row[i]))
            .collect()
    }

    /// States of one agent over the whole segment.
    pub fn track(&self, agent: usize) -> Vec<AgentState> {
        self.states.iter().map(|row| row[agent]).collect()
    }

    pub fn time_at(&self, t: usize) -> f64 {
        self.start_time + t as f64 * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightPhase {
    Green,
    Yellow,
    Red,
}

/// Fixed-cycle signal timing: green, then yellow, then red, repeating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightCycle {
    pub green: f64,
    pub yellow: f64,
    pub red: f64,
    #[serde(default)]
    pub offset: f64,
}

impl LightCycle {
    pub fn period(&self) -> f64 {
        self.green + self.yellow + self.red
    }

    pub fn phase_at(&self, time: f64) -> LightPhase {
        let tau = (time + self.offset).rem_euclid(self.period());
        if tau < self.green {
            LightPhase::Green
        } else if tau < self.green + self.yellow {
            LightPhase::Yellow
        } else {
            LightPhase::Red
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    pub position: [f64; 2],
    pub stop_line: [[f64; 2]; 2],
    pub cycle: LightCycle,
}

/// Drivable area as a triangle soup plus traffic controls.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MapMesh {
    /// Each entry is `[x1, y1, x2, y2, x3, y3]` in meters.
    pub triangles: Vec<[f64; 6]>,
    #[serde(default)]
    pub traffic_lights: Vec<TrafficLight>,
    #[serde(default)]
    pub stop_signs: Vec<[f64; 2]>,
}

fn tri_area(t: &[f64; 6]) -> f64 {
    0.5 * ((t[2] - t[0]) * (t[5] - t[1]) - (t[4] - t[0]) * (t[3] - t[1]))
}

impl MapMesh {
    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|c| !c.is_finite()) || tri_area(t).abs() <= 1e-9 {
                return Err(Error::Validation(format!("triangle {i} is degenerate")));
            }
        }
        for (i, l) in self.traffic_lights.iter().enumerate() {
            let c = &l.cycle;
            if !(c.green > 0.0 && c.yellow > 0.0 && c.red > 0.0) {
                return Err(Error::Validation(format!(
                    "traffic light {i} has a non-positive phase duration"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: MapMesh = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn light_phases(&self, time: f64) -> Vec<LightPhase> {
        self.traffic_lights
            .iter()
            .map(|l| l.cycle.phase_at(time))
            .collect()
    }

    /// Point-in-drivable-area test; boundary points count as inside.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.triangles.iter().any(|t| point_in_triangle(p, t))
    }

    /// Axis-aligned bounds of all triangles as `(min, max)`.
    pub fn bounds(&self) -> Option<([f64; 2], [f64; 2])> {
        let mut it = self.triangles.iter().flat_map(|t| {
            [[t[0], t[1]], [t[2], t[3]], [t[4], t[5]]]
        });
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), p| {
            (
                [lo[0].min(p[0]), lo[1].min(p[1])],
                [hi[0].max(p[0]), hi[1].max(p[1])],
            )
        }))
    }
}

pub(crate) fn point_in_triangle(p: [f64; 2], t: &[f64; 6]) -> bool {
    let (minx, maxx) = (t[0].min(t[2]).min(t[4]), t[0].max(t[2]).max(t[4]));
    let (miny, maxy) = (t[1].min(t[3]).min(t[5]), t[1].max(t[3]).max(t[5]));
    if p[0] < minx || p[0] > maxx || p[1] < miny || p[1] > maxy {
        return false;
    }
    let d1 = (p[0] - t[2]) * (t[1] - t[3]) - (t[0] - t[2]) * (p[1] - t[3]);
    let d2 = (p[0] - t[4]) * (t[3] - t[5]) - (t[2] - t[4]) * (p[1] - t[5]);
    let d3 = (p[0] - t[0]) * (t[5] - t[1]) - (t[4] - t[0]) * (p[1] - t[1]);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}
