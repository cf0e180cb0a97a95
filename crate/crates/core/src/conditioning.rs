//! Waypoint and target-speed conditions: reach tests, the per-agent cursor
//! scheduler, and the samplers that pick training conditions from a
//! ground-truth track.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::AgentState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TargetSpeed(pub f64);

impl TargetSpeed {
    pub fn new(value: f64) -> Result<Self> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::Validation(format!("target speed must be a finite value >= 0, got {value}")));
        }
        Ok(Self(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReachParams {
    /// Waypoint radius R, meters.
    pub radius: f64,
    /// Target speed tolerance ε_v, m/s.
    pub speed_tol: f64,
}

impl Default for ReachParams {
    fn default() -> Self {
        Self {
            radius: 2.0,
            speed_tol: 1.0,
        }
    }
}

pub fn waypoint_reached(state: &AgentState, w: &Waypoint, radius: f64) -> bool {
    (state.x - w.x).hypot(state.y - w.y) <= radius
}

pub fn target_speed_reached(state: &AgentState, ts: &TargetSpeed, eps: f64) -> bool {
    (state.v - ts.0).abs() <= eps
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Waypoint,
    TargetSpeed,
}

/// One cursor advance: condition `index` of `kind` was reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReachEvent {
    pub kind: ConditionKind,
    pub index: usize,
}

/// Ordered waypoint and target-speed lists with independent cursors.
///
/// Cursors are zero-based and range over `0..=len`; a cursor equal to the
/// list length means that kind is exhausted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentConditions {
    pub waypoints: Vec<Waypoint>,
    pub target_speeds: Vec<TargetSpeed>,
    #[serde(default)]
    pub waypoint_cursor: usize,
    #[serde(default)]
    pub speed_cursor: usize,
}

impl AgentConditions {
    pub fn new(waypoints: Vec<Waypoint>, target_speeds: Vec<TargetSpeed>) -> Self {
        Self {
            waypoints,
            target_speeds,
            waypoint_cursor: 0,
            speed_cursor: 0,
        }
    }

    pub fn unconditioned() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty() && self.target_speeds.is_empty()
    }

    pub fn active_waypoint(&self) -> Option<Waypoint> {
        self.waypoints.get(self.waypoint_cursor).copied()
    }

    pub fn active_target_speed(&self) -> Option<TargetSpeed> {
        self.target_speeds.get(self.speed_cursor).copied()
    }

    pub fn active(&self) -> (Option<Waypoint>, Option<TargetSpeed>) {
        (self.active_waypoint(), self.active_target_speed())
    }

    /// Advances each kind at most once if its active condition is reached
    /// by `state`.
    pub fn advance(&mut self, state: &AgentState, params: &ReachParams) -> Vec<ReachEvent> {
        let mut events = Vec::new();
        if let Some(w) = self.active_waypoint() {
            if waypoint_reached(state, &w, params.radius) {
                events.push(ReachEvent {
                    kind: ConditionKind::Waypoint,
                    index: self.waypoint_cursor,
                });
                self.waypoint_cursor += 1;
            }
        }
        if let Some(ts) = self.active_target_speed() {
            if target_speed_reached(state, &ts, params.speed_tol) {
                events.push(ReachEvent {
                    kind: ConditionKind::TargetSpeed,
                    index: self.speed_cursor,
                });
                self.speed_cursor += 1;
            }
        }
        events
    }

    /// Non-mutating form of [`AgentConditions::advance`].
    pub fn advanced(&self, state: &AgentState, params: &ReachParams) -> (Self, Vec<ReachEvent>) {
        let mut next = self.clone();
        let events = next.advance(state, params);
        (next, events)
    }

    /// Drops the kinds that are not exposed, keeping list order.
    pub fn filtered(&self, waypoints: bool, speeds: bool) -> Self {
        Self {
            waypoints: if waypoints { self.waypoints.clone() } else { vec![] },
            target_speeds: if speeds { self.target_speeds.clone() } else { vec![] },
            waypoint_cursor: if waypoints { self.waypoint_cursor } else { 0 },
            speed_cursor: if speeds { self.speed_cursor } else { 0 },
        }
    }
}

/// A condition drawn from a track together with its source timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampled<T> {
    pub step: usize,
    pub value: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub dt_min: usize,
    pub dt_max: usize,
    pub max_conditions: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            d_min: 5.0,
            d_max: 25.0,
            dt_min: 10,
            dt_max: 40,
            max_conditions: 10,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_min <= self.d_max) {
            return Err(Error::Config(format!("need 0 < d_min <= d_max, got {} / {}", self.d_min, self.d_max)));
        }
        if !(self.dt_min >= 1 && self.dt_min <= self.dt_max) {
            return Err(Error::Config(format!("need 1 <= dt_min <= dt_max, got {} / {}", self.dt_min, self.dt_max)));
        }
        if self.max_conditions == 0 {
            return Err(Error::Config("max_conditions must be at least 1".into()));
        }
        Ok(())
    }
}

/// Spatial waypoint sampler.
///
/// Each round draws a radius `d_r ~ U(d_min, d_max)` and takes the latest
/// track index whose position lies within `d_r` of the current anchor. The
/// anchor then moves to that index, or one step further if it did not
/// move, so stationary tracks terminate.
pub fn sample_waypoints_spatial<R: Rng + ?Sized>(
    track: &[AgentState],
    d_min: f64,
    d_max: f64,
    max_conditions: usize,
    rng: &mut R,
) -> Vec<Sampled<Waypoint>> {
    sample_waypoints_with_radii(track, max_conditions, || rng.gen_range(d_min..=d_max))
        .into_iter()
        .map(|(s, _)| s)
        .collect()
}

/// Same as [`sample_waypoints_spatial`] but also reports each drawn radius.
pub fn sample_waypoints_with_radii(
    track: &[AgentState],
    max_conditions: usize,
    mut draw: impl FnMut() -> f64,
) -> Vec<(Sampled<Waypoint>, f64)> {
    let mut out = Vec::new();
    if track.is_empty() || max_conditions == 0 {
        return out;
    }
    let last = track.len() - 1;
    let mut anchor = 0;
    loop {
        let d_r = draw();
        let origin = track[anchor].position();
        let t_c = (anchor..=last)
            .filter(|&t| track[t].distance_to(origin) <= d_r)
            .max()
            .unwrap_or(anchor);
        out.push((
            Sampled {
                step: t_c,
                value: Waypoint::new(track[t_c].x, track[t_c].y),
            },
            d_r,
        ));
        anchor = t_c.max(anchor + 1);
        if out.len() >= max_conditions || anchor >= last {
            break;
        }
    }
    out
}

/// Temporal target-speed sampler: jumps ahead `Δt_r ~ U{dt_min..dt_max}`
/// steps (clamped to the end of the track) and records the speed there.
pub fn sample_target_speeds_temporal<R: Rng + ?Sized>(
    track: &[AgentState],
    dt_min: usize,
    dt_max: usize,
    max_conditions: usize,
    rng: &mut R,
) -> Vec<Sampled<TargetSpeed>> {
    let mut out = Vec::new();
    if track.is_empty() || max_conditions == 0 {
        return out;
    }
    let last = track.len() - 1;
    let mut anchor = 0;
    loop {
        let jump = rng.gen_range(dt_min..=dt_max);
        let t_c = (anchor + jump).min(last);
        out.push(Sampled {
            step: t_c,
            value: TargetSpeed(track[t_c].v.max(0.0)),
        });
        anchor = t_c;
        if out.len() >= max_conditions || anchor >= last {
            break;
        }
    }
    out
}

/// Both kinds sampled from one track.
pub fn sample_conditions<R: Rng + ?Sized>(
    track: &[AgentState],
    cfg: &SamplerConfig,
    waypoints: bool,
    speeds: bool,
    rng: &mut R,
) -> AgentConditions {
    let w = if waypoints {
        sample_waypoints_spatial(track, cfg.d_min, cfg.d_max, cfg.max_conditions, rng)
    } else {
        vec![]
    };
    let s = if speeds {
        sample_target_speeds_temporal(track, cfg.dt_min, cfg.dt_max, cfg.max_conditions, rng)
    } else {
        vec![]
    };
    AgentConditions::new(w.into_iter().map(|x| x.value).collect(), s.into_iter().map(|x| x.value).collect())
}

/// Baseline: one waypoint at the final position and one target speed equal
/// to the final speed.
pub fn last_timestep_condition(track: &[AgentState]) -> AgentConditions {
    match track.last() {
        Some(s) => AgentConditions::new(vec![Waypoint::new(s.x, s.y)], vec![TargetSpeed(s.v.max(0.0))]),
        None => AgentConditions::unconditioned(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    #[serde(default)]
    pub waypoints: Vec<[f64; 2]>,
    #[serde(default)]
    pub target_speeds: Vec<f64>,
}

/// Per-agent conditions file keyed by agent id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionsFile {
    pub agents: BTreeMap<String, ConditionSpec>,
}

impl ConditionsFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let f: ConditionsFile = serde_json::from_str(text)?;
        for (id, spec) in &f.agents {
            for v in &spec.target_speeds {
                TargetSpeed::new(*v).map_err(|e| Error::Validation(format!("agent {id}: {e}")))?;
            }
            if spec.waypoints.iter().flatten().any(|c| !c.is_finite()) {
                return Err(Error::Validation(format!("agent {id}: non-finite waypoint")));
            }
        }
        Ok(f)
    }

    pub fn conditions_for(&self, id: &str) -> AgentConditions {
        self.agents
            .get(id)
            .map(|spec| {
                AgentConditions::new(
                    spec.waypoints.iter().map(|p| Waypoint::new(p[0], p[1])).collect(),
                    spec.target_speeds.iter().map(|&v| TargetSpeed(v)).collect(),
                )
            })
            .unwrap_or_default()
    }
}
