//! Held-out evaluation: K prior-mode rollouts per window with every agent
//! but the ego replayed from the log.
//!
//! Reach is always scored against both condition kinds built from the ego's
//! logged track, including the kinds withheld from the policy, so
//! unconditioned rows still report reach rates.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{AgentConditions, ReachParams, SamplerConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{displacement_metrics, reach_and_infraction_rates, Episode, GroupResult};
use crate::policy::Policy;
use crate::scene::{MapMesh, TrajectorySegment};
use crate::simulation::{rollout, RolloutConfig, RolloutMode, RolloutRecord};
use crate::training::ConditionStrategy;

/// Which condition kinds the policy is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConditionMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "w")]
    Waypoints,
    #[serde(rename = "ts")]
    TargetSpeeds,
    #[serde(rename = "w+ts")]
    Both,
}

impl ConditionMode {
    pub const ALL: [ConditionMode; 4] =
        [ConditionMode::None, ConditionMode::Waypoints, ConditionMode::TargetSpeeds, ConditionMode::Both];

    pub fn waypoints(&self) -> bool {
        matches!(self, ConditionMode::Waypoints | ConditionMode::Both)
    }

    pub fn speeds(&self) -> bool {
        matches!(self, ConditionMode::TargetSpeeds | ConditionMode::Both)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConditionMode::None => "none",
            ConditionMode::Waypoints => "w",
            ConditionMode::TargetSpeeds => "ts",
            ConditionMode::Both => "w+ts",
        }
    }
}

impl fmt::Display for ConditionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConditionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition mode {s:?}; expected none, w, ts or w+ts")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub samples: usize,
    pub horizon: usize,
    pub stride: usize,
    pub conditions: ConditionMode,
    pub strategy: ConditionStrategy,
    pub sampler: SamplerConfig,
    pub reach: ReachParams,
    /// Evenly spaced subset of windows; all windows when absent.
    pub max_segments: Option<usize>,
    pub seed: u64,
    pub model: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 6,
            horizon: 40,
            stride: 10,
            conditions: ConditionMode::Both,
            strategy: ConditionStrategy::Sampled,
            sampler: SamplerConfig::default(),
            reach: ReachParams::default(),
            max_segments: None,
            seed: 0,
            model: "model".into(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::Config("samples, horizon and stride must be positive".into()));
        }
        if self.strategy == ConditionStrategy::None {
            return Err(Error::Config("evaluation needs a sampled or last-timestep strategy".into()));
        }
        Ok(())
    }
}

/// One held-out window and the agent evaluated on it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalWindow {
    pub segment: TrajectorySegment,
    pub ego: usize,
}

/// Windows of `horizon + 1` states with an always-present agent, thinned to
/// at most `max` evenly spaced ones. The ego cycles through candidates.
pub fn eval_windows(data: &Dataset, horizon: usize, stride: usize, max: Option<usize>) -> Result<Vec<EvalWindow>> {
    let all: Vec<TrajectorySegment> = data
        .segments(horizon + 1, stride)
        .into_iter()
        .filter(|s| !s.ego_candidates().is_empty())
        .collect();
    if all.is_empty() {
        return Err(Error::Config(format!(
            "no log covers a {horizon}-step horizon for the replayed agents; logs must hold at least {} states",
            horizon + 1
        )));
    }
    let keep = max.unwrap_or(all.len()).min(all.len());
    let picked: Vec<TrajectorySegment> = (0..keep).map(|i| all[i * all.len() / keep].clone()).collect();
    Ok(picked
        .into_iter()
        .enumerate()
        .map(|(i, segment)| {
            let c = segment.ego_candidates();
            let ego = c[i % c.len()];
            EvalWindow { segment, ego }
        })
        .collect())
}

fn window_seed(seed: u64, window: usize, sample: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ ((window as u64) << 16) ^ sample as u64
}

/// Conditions scored for one window: both kinds, from the ego's logged
/// track over the evaluation horizon.
pub fn scored_conditions(window: &EvalWindow, cfg: &EvalConfig) -> AgentConditions {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stable_id(window));
    let track = window.segment.track(window.ego);
    cfg.strategy.conditions(&track, &cfg.sampler, true, true, &mut rng)
}

fn stable_id(w: &EvalWindow) -> u64 {
    crate::simulation::stable_hash(format!("{}@{}#{}", w.segment.location, w.segment.start_time, w.ego).as_bytes())
}

/// Result of one window: the K rollouts and the conditions they were
/// scored against.
#[derive(Debug, Clone)]
pub struct WindowResult {
    pub records: Vec<RolloutRecord>,
    pub scored: AgentConditions,
}

pub fn run_window(
    policy: &Policy,
    map: Arc<MapMesh>,
    window: &EvalWindow,
    index: usize,
    cfg: &EvalConfig,
) -> Result<WindowResult> {
    let scored = scored_conditions(window, cfg);
    let given = scored.filtered(cfg.conditions.waypoints(), cfg.conditions.speeds());
    let n = window.segment.num_agents();
    let mut conds = vec![AgentConditions::unconditioned(); n];
    conds[window.ego] = given;
    let records = (0..cfg.samples)
        .map(|k| {
            let mut rc = RolloutConfig::new(RolloutMode::ClassmatesForcing(vec![window.ego]), cfg.horizon, window_seed(cfg.seed, index, k));
            rc.dt = window.segment.dt;
            rc.reach = cfg.reach;
            rollout(map.clone(), &window.segment, Some(policy), conds.clone(), &rc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WindowResult { records, scored })
}

/// Runs the protocol over `windows` and aggregates one report group.
pub fn evaluate_windows(policy: &Policy, data: &Dataset, windows: &[EvalWindow], cfg: &EvalConfig) -> Result<GroupResult> {
    cfg.validate()?;
    let maps: BTreeMap<String, Arc<MapMesh>> = data.maps.iter().map(|(k, v)| (k.clone(), Arc::new(v.clone()))).collect();
    let mut displacement = Vec::with_capacity(windows.len());
    let mut results = Vec::with_capacity(windows.len());
    let mut speeds = Vec::new();
    for (i, w) in windows.iter().enumerate() {
        if w.segment.len() < cfg.horizon + 1 {
            return Err(Error::Config(format!(
                "window {}@{} has {} states, horizon {} needs {}",
                w.segment.location,
                w.segment.start_time,
                w.segment.len(),
                cfg.horizon,
                cfg.horizon + 1
            )));
        }
        let map = maps
            .get(&w.segment.location)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("map for location {}", w.segment.location)))?;
        let res = run_window(policy, map, w, i, cfg)?;
        let gt: Vec<[f64; 2]> = (1..=cfg.horizon).map(|t| w.segment.states[t][w.ego].position()).collect();
        let samples: Vec<Vec<[f64; 2]>> = res
            .records
            .iter()
            .map(|r| (1..=cfg.horizon).map(|t| r.segment.states[t][w.ego].position()).collect())
            .collect();
        displacement.push(displacement_metrics(&samples, &gt)?);
        for r in &res.records {
            speeds.extend((1..r.segment.len()).map(|t| r.segment.states[t][w.ego].v));
        }
        results.push(res);
    }
    let episodes: Vec<Episode<'_>> = results
        .iter()
        .zip(windows)
        .flat_map(|(res, w)| res.records.iter().map(move |r| Episode { record: r, ego: w.ego, conditions: &res.scored }))
        .collect();
    let rates = reach_and_infraction_rates(&episodes, &cfg.reach);
    Ok(GroupResult { model: cfg.model.clone(), conditions: cfg.conditions.name().to_string(), displacement, rates, speeds })
}

/// Selects windows from `data` and evaluates them.
pub fn evaluate(policy: &Policy, data: &Dataset, cfg: &EvalConfig) -> Result<GroupResult> {
    cfg.validate()?;
    let windows = eval_windows(data, cfg.horizon, cfg.stride, cfg.max_segments)?;
    evaluate_windows(policy, data, &windows, cfg)
}
