//! Closed-loop multi-agent rollouts and infraction detection.

use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{AgentConditions, ConditionKind, ReachParams};
use crate::error::{Error, Result};
use crate::kinematics;
use crate::obb::{obb_intersects, segments_intersect};
use crate::policy::{LatentSource, Policy};
use crate::raster::{render, SceneView};
use crate::scene::{Action, AgentGeometry, AgentState, LightPhase, MapMesh, TrajectorySegment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfractionKind {
    Collision,
    Offroad,
    RedLight,
}

/// One infraction. `agents` is sorted; collisions name both agents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfractionEvent {
    pub kind: InfractionKind,
    pub agents: Vec<usize>,
    pub step: usize,
}

/// Collisions, offroad centers and red-light crossings in one joint state.
/// Red-light crossings need the previous joint state; `phases` are the light
/// phases at the start of the step.
pub fn detect_infractions(
    states: &[AgentState],
    present: &[bool],
    geoms: &[AgentGeometry],
    map: &MapMesh,
    phases: &[LightPhase],
    previous: Option<(&[AgentState], &[bool])>,
    step: usize,
) -> Vec<InfractionEvent> {
    let mut events = Vec::new();
    let n = states.len();
    for i in 0..n {
        if !present[i] {
            continue;
        }
        for j in i + 1..n {
            if present[j] && obb_intersects(&states[i], &geoms[i], &states[j], &geoms[j]) {
                events.push(InfractionEvent { kind: InfractionKind::Collision, agents: vec![i, j], step });
            }
        }
    }
    for i in 0..n {
        if present[i] && !map.contains(states[i].position()) {
            events.push(InfractionEvent { kind: InfractionKind::Offroad, agents: vec![i], step });
        }
    }
    if let Some((prev, prev_present)) = previous {
        for i in 0..n {
            if !(present[i] && prev_present[i]) {
                continue;
            }
            let crossed = map.traffic_lights.iter().zip(phases).any(|(light, phase)| {
                *phase == LightPhase::Red
                    && segments_intersect(prev[i].position(), states[i].position(), light.stop_line[0], light.stop_line[1])
            });
            if crossed {
                events.push(InfractionEvent { kind: InfractionKind::RedLight, agents: vec![i], step });
            }
        }
    }
    events
}

/// Who drives which agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "agents")]
pub enum RolloutMode {
    /// Every agent follows the ground truth.
    Replay,
    /// The listed agents run the policy; everyone else replays.
    ClassmatesForcing(Vec<usize>),
    /// Every agent runs the policy.
    Autonomous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub mode: RolloutMode,
    pub horizon: usize,
    pub dt: f64,
    pub stop_on_ego_infraction: bool,
    pub seed: u64,
    pub reach: ReachParams,
}

impl RolloutConfig {
    pub fn new(mode: RolloutMode, horizon: usize, seed: u64) -> Self {
        Self { mode, horizon, dt: 0.1, stop_on_ego_infraction: false, seed, reach: ReachParams::default() }
    }
}

/// A reached condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionEvent {
    pub agent: usize,
    pub kind: ConditionKind,
    pub index: usize,
    pub step: usize,
}

/// Conditions active for one agent at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveCondition {
    pub waypoint: Option<[f64; 2]>,
    pub target_speed: Option<f64>,
}

impl ActiveCondition {
    fn of(c: &AgentConditions) -> Self {
        Self {
            waypoint: c.active_waypoint().map(|w| w.position()),
            target_speed: c.active_target_speed().map(|s| s.value()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    /// Row `t` is the joint state after `t` steps.
    pub segment: TrajectorySegment,
    /// Policy-driven agents.
    pub ego_agents: Vec<usize>,
    /// Row `t` holds the conditions in force when stepping from `t`.
    pub active: Vec<Vec<ActiveCondition>>,
    /// Actions emitted at each step; `None` for replayed agents.
    pub actions: Vec<Vec<Option<Action>>>,
    pub condition_events: Vec<ConditionEvent>,
    pub infractions: Vec<InfractionEvent>,
    /// Conditions assigned at the start.
    pub initial_conditions: Vec<AgentConditions>,
    pub terminated_early: bool,
}

impl RolloutRecord {
    pub fn steps(&self) -> usize {
        self.segment.len() - 1
    }

    pub fn ego_track(&self, agent: usize) -> Vec<AgentState> {
        self.segment.track(agent)
    }

    /// One JSON object per row of the rollout.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            t: usize,
            time: f64,
            states: Vec<Option<[f64; 4]>>,
            active: Option<&'a [ActiveCondition]>,
            reached: Vec<&'a ConditionEvent>,
            events: Vec<&'a InfractionEvent>,
        }
        let io = |e| Error::io("rollout stream", e);
        for t in 0..self.segment.len() {
            let line = Line {
                t,
                time: self.segment.time_at(t),
                states: self.segment.states[t]
                    .iter()
                    .zip(&self.segment.present[t])
                    .map(|(s, p)| p.then(|| s.to_array()))
                    .collect(),
                active: self.active.get(t).map(Vec::as_slice),
                reached: self.condition_events.iter().filter(|e| e.step == t).collect(),
                events: self.infractions.iter().filter(|e| e.step == t).collect(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n").map_err(io)?;
        }
        Ok(())
    }
}

/// Stable 64-bit FNV-1a, used to derive per-agent random streams.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// The random stream that drives one agent's latents.
pub fn agent_rng(seed: u64, agent_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stable_hash(agent_id.as_bytes()))
}

#[derive(Debug, Clone)]
enum Driver {
    Replay,
    Policy { h: Vec<f64>, rng: ChaCha8Rng },
}

/// Outcome of one synchronous step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub t: usize,
    pub actions: Vec<Option<Action>>,
    pub reached: Vec<ConditionEvent>,
    pub infractions: Vec<InfractionEvent>,
}

/// Mutable joint state of a running rollout.
#[derive(Debug, Clone)]
pub struct Simulator {
    map: Arc<MapMesh>,
    ids: Vec<String>,
    geoms: Vec<AgentGeometry>,
    states: Vec<AgentState>,
    present: Vec<bool>,
    drivers: Vec<Driver>,
    conditions: Vec<AgentConditions>,
    ground_truth: Option<TrajectorySegment>,
    reach: ReachParams,
    dt: f64,
    start_time: f64,
    t: usize,
}

impl Simulator {
    /// `policy_agents` run the policy; the rest replay `ground_truth`, which
    /// must then be given. Row 0 of the ground truth is the initial state.
    pub fn new(
        map: Arc<MapMesh>,
        initial: &TrajectorySegment,
        policy_agents: &[usize],
        policy: Option<&Policy>,
        conditions: Vec<AgentConditions>,
        dt: f64,
        seed: u64,
        reach: ReachParams,
    ) -> Result<Self> {
        let n = initial.num_agents();
        if conditions.len() != n {
            return Err(Error::Shape(format!("{} condition lists for {n} agents", conditions.len())));
        }
        if !(dt > 0.0) {
            return Err(Error::Validation(format!("dt must be positive, got {dt}")));
        }
        let mut drivers = vec![Driver::Replay; n];
        for &i in policy_agents {
            if i >= n {
                return Err(Error::NotFound(format!("agent index {i}")));
            }
            let p = policy.ok_or_else(|| Error::Config("policy-driven agents need a policy".into()))?;
            if !initial.present[0][i] {
                return Err(Error::Config(format!("policy agent {} is absent at the start", initial.agent_ids[i])));
            }
            drivers[i] = Driver::Policy { h: p.initial_state(), rng: agent_rng(seed, &initial.agent_ids[i]) };
        }
        let replayed = drivers.iter().any(|d| matches!(d, Driver::Replay));
        Ok(Self {
            map,
            ids: initial.agent_ids.clone(),
            geoms: initial.geometries.clone(),
            states: initial.states[0].clone(),
            present: initial.present[0].clone(),
            drivers,
            conditions,
            ground_truth: replayed.then(|| initial.clone()),
            reach,
            dt,
            start_time: initial.start_time,
            t: 0,
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn time(&self) -> f64 {
        self.start_time + self.t as f64 * self.dt
    }

    pub fn states(&self) -> &[AgentState] {
        &self.states
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn geometries(&self) -> &[AgentGeometry] {
        &self.geoms
    }

    pub fn agent_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn map(&self) -> &MapMesh {
        &self.map
    }

    pub fn conditions(&self) -> &[AgentConditions] {
        &self.conditions
    }

    pub fn is_policy_driven(&self, agent: usize) -> bool {
        matches!(self.drivers[agent], Driver::Policy { .. })
    }

    pub fn policy_agents(&self) -> Vec<usize> {
        (0..self.drivers.len()).filter(|&i| self.is_policy_driven(i)).collect()
    }

    pub fn set_conditions(&mut self, agent: usize, conditions: AgentConditions) -> Result<()> {
        let slot = self
            .conditions
            .get_mut(agent)
            .ok_or_else(|| Error::NotFound(format!("agent index {agent}")))?;
        *slot = conditions;
        Ok(())
    }

    pub fn conditions_mut(&mut self, agent: usize) -> Result<&mut AgentConditions> {
        self.conditions.get_mut(agent).ok_or_else(|| Error::NotFound(format!("agent index {agent}")))
    }

    /// Steps still covered by the ground truth of replayed agents.
    pub fn replay_budget(&self) -> Option<usize> {
        self.ground_truth.as_ref().map(|g| g.len() - 1 - self.t)
    }

    /// The action agent `i` would take from the current joint state, given
    /// its recurrent state and latent draw. Pure.
    pub fn policy_action(&self, policy: &Policy, agent: usize, h: &[f64], eps: Vec<f64>) -> Result<(Action, Vec<f64>)> {
        let phases = self.map.light_phases(self.time());
        let view = SceneView {
            states: &self.states,
            present: &self.present,
            geometries: &self.geoms,
            map: &self.map,
            light_phases: &phases,
        };
        let cond = &self.conditions[agent];
        let raster = render(
            &policy.arch().raster_config(),
            &view,
            agent,
            cond.active_waypoint().map(|w| w.position()),
            self.reach.radius,
        );
        let out = policy.step_values(
            &raster,
            self.states[agent].v,
            h,
            cond.active_target_speed().map(|s| s.value()),
            &LatentSource::Prior { eps },
        )?;
        Ok((out.action, out.h_next))
    }

    /// Advances every agent synchronously by one step.
    pub fn step(&mut self, policy: Option<&Policy>) -> Result<StepOutcome> {
        let n = self.states.len();
        if let Some(g) = &self.ground_truth {
            if self.t + 1 >= g.len() {
                return Err(Error::Config(format!(
                    "ground truth for replayed agents ends at step {}",
                    g.len() - 1
                )));
            }
        }
        let phases = self.map.light_phases(self.time());
        let mut actions = vec![None; n];
        let mut next = self.states.clone();
        let mut next_present = self.present.clone();
        let mut new_h: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut eps_all: Vec<Option<Vec<f64>>> = vec![None; n];
        for i in 0..n {
            if let Driver::Policy { rng, .. } = &mut self.drivers[i] {
                let p = policy.ok_or_else(|| Error::Config("policy-driven agents need a policy".into()))?;
                eps_all[i] = Some(p.draw_eps(rng));
            }
        }
        for i in 0..n {
            match &self.drivers[i] {
                Driver::Policy { h, .. } => {
                    let p = policy.expect("checked above");
                    let eps = eps_all[i].take().expect("drawn above");
                    let (a, h_next) = self.policy_action(p, i, h, eps)?;
                    next[i] = kinematics::step(&self.states[i], &a, self.dt, &self.geoms[i])?;
                    actions[i] = Some(a.clamped());
                    new_h[i] = Some(h_next);
                }
                Driver::Replay => {
                    let g = self.ground_truth.as_ref().expect("replayed agents keep ground truth");
                    next[i] = g.states[self.t + 1][i];
                    next_present[i] = g.present[self.t + 1][i];
                }
            }
        }
        for (i, h) in new_h.into_iter().enumerate() {
            if let (Some(h), Driver::Policy { h: slot, .. }) = (h, &mut self.drivers[i]) {
                *slot = h;
            }
        }
        let prev = std::mem::replace(&mut self.states, next);
        let prev_present = std::mem::replace(&mut self.present, next_present);
        self.t += 1;
        let mut reached = Vec::new();
        for i in 0..n {
            if !self.present[i] {
                continue;
            }
            for e in self.conditions[i].advance(&self.states[i], &self.reach) {
                reached.push(ConditionEvent { agent: i, kind: e.kind, index: e.index, step: self.t });
            }
        }
        let infractions = detect_infractions(
            &self.states,
            &self.present,
            &self.geoms,
            &self.map,
            &phases,
            Some((&prev, &prev_present)),
            self.t,
        );
        Ok(StepOutcome { t: self.t, actions, reached, infractions })
    }
}

/// Runs a complete rollout. `scene` supplies the initial joint state (row 0)
/// and, for replayed agents, the ground truth.
pub fn rollout(
    map: Arc<MapMesh>,
    scene: &TrajectorySegment,
    policy: Option<&Policy>,
    conditions: Vec<AgentConditions>,
    config: &RolloutConfig,
) -> Result<RolloutRecord> {
    if config.horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let n = scene.num_agents();
    let ego_agents: Vec<usize> = match &config.mode {
        RolloutMode::Replay => vec![],
        RolloutMode::ClassmatesForcing(set) => set.clone(),
        RolloutMode::Autonomous => (0..n).collect(),
    };
    let needs_gt = ego_agents.len() < n;
    if needs_gt && scene.len() < config.horizon + 1 {
        return Err(Error::Config(format!(
            "replayed agents need {} ground-truth steps, segment has {}",
            config.horizon + 1,
            scene.len()
        )));
    }
    let mut sim = Simulator::new(map, scene, &ego_agents, policy, conditions.clone(), config.dt, config.seed, config.reach)?;
    let mut states = vec![sim.states().to_vec()];
    let mut present = vec![sim.present().to_vec()];
    let mut active = Vec::new();
    let mut actions = Vec::new();
    let mut condition_events = Vec::new();
    let mut infractions = Vec::new();
    let mut terminated_early = false;
    for _ in 0..config.horizon {
        active.push(sim.conditions().iter().map(ActiveCondition::of).collect());
        let out = sim.step(policy)?;
        states.push(sim.states().to_vec());
        present.push(sim.present().to_vec());
        actions.push(out.actions);
        condition_events.extend(out.reached);
        let ego_hit = out
            .infractions
            .iter()
            .any(|e| e.agents.iter().any(|a| ego_agents.contains(a)));
        infractions.extend(out.infractions);
        if config.stop_on_ego_infraction && ego_hit {
            terminated_early = sim.t() < config.horizon;
            break;
        }
    }
    active.push(sim.conditions().iter().map(ActiveCondition::of).collect());
    Ok(RolloutRecord {
        segment: TrajectorySegment {
            location: scene.location.clone(),
            dt: config.dt,
            start_time: scene.start_time,
            states,
            present,
            geometries: scene.geometries.clone(),
            agent_ids: scene.agent_ids.clone(),
        },
        ego_agents,
        active,
        actions,
        condition_events,
        infractions,
        initial_conditions: conditions,
        terminated_early,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;
    use std::f64::consts::FRAC_PI_2;

    use rand::SeedableRng;

    use super::*;
    use crate::conditioning::{TargetSpeed, Waypoint};
    use crate::policy::Architecture;
    use crate::scene::{LightCycle, TrafficLight};

    fn rect_map(x0: f64, y0: f64, x1: f64, y1: f64) -> MapMesh {
        MapMesh {
            triangles: vec![[x0, y0, x1, y0, x1, y1], [x0, y0, x1, y1, x0, y1]],
            ..Default::default()
        }
    }

    fn geom() -> AgentGeometry {
        AgentGeometry { length: 4.5, width: 1.9 }
    }

    fn straight_segment(starts: &[AgentState], steps: usize) -> TrajectorySegment {
        let n = starts.len();
        let mut states = vec![starts.to_vec()];
        for _ in 0..steps {
            let last = states.last().unwrap();
            states.push(
                last.iter()
                    .map(|s| kinematics::step(s, &Action::new(0.2, 0.01), 0.1, &geom()).unwrap())
                    .collect(),
            );
        }
        TrajectorySegment {
            location: "test".into(),
            dt: 0.1,
            start_time: 0.0,
            present: vec![vec![true; n]; steps + 1],
            states,
            geometries: vec![geom(); n],
            agent_ids: (0..n).map(|i| format!("car-{i}")).collect(),
        }
    }

    fn three_cars() -> TrajectorySegment {
        straight_segment(
            &[
                AgentState::new(0.0, -2.0, 0.0, 8.0),
                AgentState::new(-20.0, 2.0, 0.1, 6.0),
                AgentState::new(15.0, 1.0, -0.05, 10.0),
            ],
            30,
        )
    }

    fn policy(seed: u64) -> Policy {
        Policy::new(Architecture::small(16), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn empty(n: usize) -> Vec<AgentConditions> {
        vec![AgentConditions::unconditioned(); n]
    }

    #[test]
    fn replay_reproduces_ground_truth() {
        let seg = three_cars();
        let map = Arc::new(rect_map(-100.0, -20.0, 100.0, 20.0));
        let rec = rollout(map, &seg, None, empty(3), &RolloutConfig::new(RolloutMode::Replay, 30, 0)).unwrap();
        for (a, b) in rec.segment.states.iter().flatten().zip(seg.states.iter().flatten()) {
            for (x, y) in a.to_array().iter().zip(b.to_array()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        assert!(rec.infractions.is_empty());
        assert!(rec.actions.iter().flatten().all(Option::is_none));
    }

    #[test]
    fn same_seed_same_record() {
        let seg = three_cars();
        let map = Arc::new(rect_map(-100.0, -20.0, 100.0, 20.0));
        let p = policy(1);
        let mut conds = empty(3);
        conds[0] = AgentConditions::new(vec![Waypoint::new(20.0, -2.0)], vec![TargetSpeed::new(5.0).unwrap()]);
        let cfg = RolloutConfig::new(RolloutMode::Autonomous, 25, 9);
        let a = rollout(map.clone(), &seg, Some(&p), conds.clone(), &cfg).unwrap();
        let b = rollout(map.clone(), &seg, Some(&p), conds.clone(), &cfg).unwrap();
        assert_eq!(a, b);
        let c = rollout(map, &seg, Some(&p), conds, &RolloutConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.segment.states, c.segment.states);
    }

    #[test]
    fn offroad_at_hand_computed_step() {
        // Zero network: the policy drives straight at constant speed, 1 m per
        // step toward an edge 5.5 m away, so the center leaves at step 6.
        let mut p = policy(2);
        let names: Vec<(String, usize)> = p.params().iter().map(|(_, n, t)| (n.to_string(), t.numel())).collect();
        for (name, n) in names {
            p.params_mut().set(&name, &vec![0.0; n]).unwrap();
        }
        let seg = straight_segment(&[AgentState::new(0.0, 0.0, FRAC_PI_2, 10.0)], 0);
        let map = Arc::new(rect_map(-50.0, -50.0, 50.0, 5.5));
        let mut cfg = RolloutConfig::new(RolloutMode::Autonomous, 20, 0);
        cfg.stop_on_ego_infraction = true;
        let rec = rollout(map, &seg, Some(&p), empty(1), &cfg).unwrap();
        assert_eq!(rec.infractions, vec![InfractionEvent { kind: InfractionKind::Offroad, agents: vec![0], step: 6 }]);
        assert!(rec.terminated_early);
        assert_eq!(rec.steps(), 6);
    }

    #[test]
    fn infraction_examples() {
        let map = rect_map(-200.0, -200.0, 200.0, 200.0);
        let g = [geom(), geom()];
        let far = [AgentState::new(0.0, 0.0, 0.0, 5.0), AgentState::new(100.0, 0.0, 0.0, 5.0)];
        assert!(detect_infractions(&far, &[true, true], &g, &map, &[], Some((&far, &[true, true])), 1).is_empty());

        let close = [AgentState::new(0.0, 0.0, 0.0, 5.0), AgentState::new(3.0, 0.5, 0.3, 5.0)];
        let ev = detect_infractions(&close, &[true, true], &g, &map, &[], None, 4);
        assert_eq!(ev, vec![InfractionEvent { kind: InfractionKind::Collision, agents: vec![0, 1], step: 4 }]);
        assert!(detect_infractions(&close, &[true, false], &g, &map, &[], None, 4).is_empty());

        let mut lit = map.clone();
        lit.traffic_lights.push(TrafficLight {
            position: [11.0, -3.0],
            stop_line: [[10.0, -5.0], [10.0, 5.0]],
            cycle: LightCycle { green: 10.0, yellow: 2.0, red: 10.0, offset: 0.0 },
        });
        let before = [AgentState::new(9.5, 0.0, 0.0, 10.0)];
        let after = [AgentState::new(10.5, 0.0, 0.0, 10.0)];
        let one = [geom()];
        let red = detect_infractions(&after, &[true], &one, &lit, &[LightPhase::Red], Some((&before, &[true])), 7);
        assert_eq!(red, vec![InfractionEvent { kind: InfractionKind::RedLight, agents: vec![0], step: 7 }]);
        for phase in [LightPhase::Green, LightPhase::Yellow] {
            assert!(detect_infractions(&after, &[true], &one, &lit, &[phase], Some((&before, &[true])), 7).is_empty());
        }
        // Stopping exactly short of the line is not a crossing.
        let short = [AgentState::new(9.9, 0.0, 0.0, 1.0)];
        assert!(detect_infractions(&short, &[true], &one, &lit, &[LightPhase::Red], Some((&before, &[true])), 7).is_empty());
    }

    #[test]
    fn permuting_agents_permutes_trajectories() {
        let seg = three_cars();
        let map = Arc::new(rect_map(-100.0, -20.0, 100.0, 20.0));
        let p = policy(3);
        let mut conds = empty(3);
        conds[1] = AgentConditions::new(vec![Waypoint::new(0.0, 2.0)], vec![]);
        let cfg = RolloutConfig::new(RolloutMode::Autonomous, 15, 4);
        let base = rollout(map.clone(), &seg, Some(&p), conds.clone(), &cfg).unwrap();

        let perm = [2usize, 0, 1];
        let mut shuffled = seg.clone();
        for t in 0..seg.len() {
            shuffled.states[t] = perm.iter().map(|&i| seg.states[t][i]).collect();
        }
        shuffled.agent_ids = perm.iter().map(|&i| seg.agent_ids[i].clone()).collect();
        let pconds: Vec<AgentConditions> = perm.iter().map(|&i| conds[i].clone()).collect();
        let other = rollout(map, &shuffled, Some(&p), pconds, &cfg).unwrap();
        for t in 0..=15 {
            for (k, &i) in perm.iter().enumerate() {
                assert_eq!(other.segment.states[t][k], base.segment.states[t][i]);
            }
        }
    }

    #[test]
    fn each_action_recomputes_from_logged_state() {
        let seg = three_cars();
        let map = Arc::new(rect_map(-100.0, -20.0, 100.0, 20.0));
        let p = policy(5);
        let mut conds = empty(3);
        conds[2] = AgentConditions::new(vec![], vec![TargetSpeed::new(3.0).unwrap()]);
        let mut sim = Simulator::new(map, &seg, &[0, 2], Some(&p), conds, 0.1, 8, ReachParams::default()).unwrap();
        let mut shadow: Vec<(ChaCha8Rng, Vec<f64>)> =
            [0, 2].iter().map(|&i| (agent_rng(8, &seg.agent_ids[i]), p.initial_state())).collect();
        for _ in 0..10 {
            let mut expected = Vec::new();
            for (k, &i) in [0usize, 2].iter().enumerate() {
                let eps = p.draw_eps(&mut shadow[k].0);
                let (a, h) = sim.policy_action(&p, i, &shadow[k].1, eps).unwrap();
                shadow[k].1 = h;
                expected.push(a.clamped());
            }
            let out = sim.step(Some(&p)).unwrap();
            assert_eq!(out.actions[0], Some(expected[0]));
            assert_eq!(out.actions[2], Some(expected[1]));
            assert_eq!(out.actions[1], None);
        }
    }

    #[test]
    fn events_are_unique_per_pair_and_step() {
        let seg = straight_segment(
            &[
                AgentState::new(0.0, 0.0, 0.0, 5.0),
                AgentState::new(2.0, 0.5, 0.0, 5.0),
                AgentState::new(1.0, -0.5, 0.0, 5.0),
            ],
            10,
        );
        let map = Arc::new(rect_map(-100.0, -20.0, 100.0, 20.0));
        let rec = rollout(map, &seg, None, empty(3), &RolloutConfig::new(RolloutMode::Replay, 10, 0)).unwrap();
        let keys: Vec<_> = rec.infractions.iter().map(|e| (e.kind, e.agents.clone(), e.step)).collect();
        let unique: HashSet<_> = keys.iter().cloned().collect();
        assert_eq!(keys.len(), unique.len());
        assert_eq!(keys.len(), 3 * 10);
        assert!(rec.infractions.iter().all(|e| e.step >= 1 && e.step <= 10));
    }

    #[test]
    fn replayed_agents_need_enough_ground_truth() {
        let seg = three_cars();
        let map = Arc::new(rect_map(-100.0, -20.0, 100.0, 20.0));
        let p = policy(6);
        let cfg = RolloutConfig::new(RolloutMode::ClassmatesForcing(vec![0]), 31, 0);
        assert!(matches!(rollout(map.clone(), &seg, Some(&p), empty(3), &cfg), Err(Error::Config(_))));
        let cfg = RolloutConfig::new(RolloutMode::Autonomous, 31, 0);
        assert!(rollout(map.clone(), &seg, Some(&p), empty(3), &cfg).is_ok());
        let cfg = RolloutConfig::new(RolloutMode::Replay, 0, 0);
        assert!(rollout(map, &seg, None, empty(3), &cfg).is_err());
    }

    #[test]
    fn classmates_forcing_replays_the_others() {
        let seg = three_cars();
        let map = Arc::new(rect_map(-100.0, -20.0, 100.0, 20.0));
        let p = policy(7);
        let cfg = RolloutConfig::new(RolloutMode::ClassmatesForcing(vec![1]), 30, 0);
        let rec = rollout(map, &seg, Some(&p), empty(3), &cfg).unwrap();
        for t in 0..=30 {
            assert_eq!(rec.segment.states[t][0], seg.states[t][0]);
            assert_eq!(rec.segment.states[t][2], seg.states[t][2]);
        }
        assert_ne!(rec.segment.states[30][1], seg.states[30][1]);
    }

    #[test]
    fn reach_events_are_logged_once() {
        let seg = three_cars();
        let map = Arc::new(rect_map(-100.0, -20.0, 100.0, 20.0));
        let mut conds = empty(3);
        let at5 = seg.states[5][0];
        let at20 = seg.states[20][0];
        conds[0] = AgentConditions::new(vec![Waypoint::new(at5.x, at5.y), Waypoint::new(at20.x, at20.y)], vec![]);
        let rec = rollout(map, &seg, None, conds, &RolloutConfig::new(RolloutMode::Replay, 30, 0)).unwrap();
        let reached: Vec<(usize, usize)> = rec.condition_events.iter().map(|e| (e.index, e.step)).collect();
        assert_eq!(reached.len(), 2);
        assert_eq!(reached[0].0, 0);
        assert_eq!(reached[1].0, 1);
        assert!(reached[0].1 <= 5 && reached[1].1 <= 20 && reached[0].1 < reached[1].1);
    }

    #[test]
    fn jsonl_has_one_line_per_row() {
        let seg = three_cars();
        let map = Arc::new(rect_map(-100.0, -20.0, 100.0, 20.0));
        let rec = rollout(map, &seg, None, empty(3), &RolloutConfig::new(RolloutMode::Replay, 12, 0)).unwrap();
        let mut buf = Vec::new();
        rec.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 13);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["t"], 0);
        assert_eq!(first["states"].as_array().unwrap().len(), 3);
    }
}
