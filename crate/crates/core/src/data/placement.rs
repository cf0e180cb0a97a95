//! Random initial joint states on an arbitrary drivable mesh.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obb::{obb_corners, obb_margin};
use crate::scene::{AgentGeometry, AgentState, MapMesh, TrajectorySegment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementConfig {
    pub geometry: AgentGeometry,
    /// Minimum SAT gap between any two footprints, meters.
    pub clearance: f64,
    /// Candidate headings tried per position.
    pub headings: usize,
    /// Free distance is probed up to this range, meters.
    pub probe_range: f64,
    pub speed_range: [f64; 2],
    pub attempts_per_agent: usize,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            geometry: AgentGeometry::default(),
            clearance: 1.5,
            headings: 24,
            probe_range: 40.0,
            speed_range: [3.0, 8.0],
            attempts_per_agent: 400,
        }
    }
}

fn tri_area(t: &[f64; 6]) -> f64 {
    0.5 * ((t[2] - t[0]) * (t[5] - t[1]) - (t[4] - t[0]) * (t[3] - t[1])).abs()
}

fn free_distance(map: &MapMesh, p: [f64; 2], psi: f64, range: f64) -> f64 {
    let (s, c) = psi.sin_cos();
    let step = 0.5;
    let mut d = 0.0;
    while d < range {
        let next = d + step;
        if !map.contains([p[0] + c * next, p[1] + s * next]) {
            return d;
        }
        d = next;
    }
    range
}

/// Places `n` agents with ids `agent-{i}` on `map`.
///
/// Positions are drawn uniformly over the mesh area. Each agent faces the
/// candidate heading with the longest straight run of drivable surface, and
/// footprints must lie on the mesh and keep `clearance` from each other.
/// The result is a one-row segment starting at time 0.
pub fn place_agents(map: &MapMesh, n: usize, seed: u64, cfg: &PlacementConfig) -> Result<TrajectorySegment> {
    cfg.geometry.validate()?;
    if cfg.headings == 0 || !(cfg.speed_range[0] >= 0.0 && cfg.speed_range[0] <= cfg.speed_range[1]) {
        return Err(Error::Config("placement needs headings > 0 and an ordered non-negative speed range".into()));
    }
    let mut segment = TrajectorySegment {
        location: String::new(),
        dt: super::DEFAULT_DT,
        start_time: 0.0,
        states: vec![Vec::with_capacity(n)],
        present: vec![vec![true; n]],
        geometries: vec![cfg.geometry; n],
        agent_ids: (0..n).map(|i| format!("agent-{i}")).collect(),
    };
    if n == 0 {
        return Ok(segment);
    }
    let areas: Vec<f64> = map.triangles.iter().map(tri_area).collect();
    let total: f64 = areas.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Generation("map has no drivable area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut placed: Vec<[[f64; 2]; 4]> = Vec::with_capacity(n);
    let budget = cfg.attempts_per_agent * n;
    let mut attempts = 0;
    while placed.len() < n {
        if attempts == budget {
            return Err(Error::Generation(format!(
                "placed {} of {n} agents after {budget} attempts",
                placed.len()
            )));
        }
        attempts += 1;
        let mut pick = rng.gen::<f64>() * total;
        let tri = areas
            .iter()
            .position(|&a| {
                pick -= a;
                pick < 0.0
            })
            .unwrap_or(areas.len() - 1);
        let t = &map.triangles[tri];
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let s1 = r1.sqrt();
        let (a, b, c) = (1.0 - s1, s1 * (1.0 - r2), s1 * r2);
        let p = [a * t[0] + b * t[2] + c * t[4], a * t[1] + b * t[3] + c * t[5]];
        let offset = rng.gen::<f64>();
        let (psi, free) = (0..cfg.headings)
            .map(|k| {
                let psi = crate::scene::wrap_angle((k as f64 + offset) * std::f64::consts::TAU / cfg.headings as f64);
                (psi, free_distance(map, p, psi, cfg.probe_range))
            })
            .fold((0.0, f64::NEG_INFINITY), |best, cand| if cand.1 > best.1 { cand } else { best });
        let v = rng.gen_range(cfg.speed_range[0]..=cfg.speed_range[1]).min(free / 3.0);
        let state = AgentState::new(p[0], p[1], psi, v);
        let corners = obb_corners(&state, &cfg.geometry);
        if !corners.iter().all(|q| map.contains(*q)) {
            continue;
        }
        if placed.iter().any(|other| obb_margin(&corners, other) < cfg.clearance) {
            continue;
        }
        placed.push(corners);
        segment.states[0].push(state);
    }
    Ok(segment)
}
