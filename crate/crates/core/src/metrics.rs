//! Displacement, diversity, reach and infraction metrics, and the report
//! that groups them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conditioning::{AgentConditions, ConditionKind, ReachParams};
use crate::error::{Error, Result};
use crate::simulation::{InfractionKind, RolloutRecord};

/// Deviation above which a sample counts as a miss, meters. Exactly this
/// distance is not a miss.
pub const MISS_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementMetrics {
    pub ade: f64,
    pub fde: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    /// One flag per sample.
    pub misses: Vec<bool>,
    pub mfd: f64,
}

impl DisplacementMetrics {
    pub fn miss_rate(&self) -> f64 {
        self.misses.iter().filter(|m| **m).count() as f64 / self.misses.len() as f64
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Metrics of `samples` predicted positions against the ground-truth track.
pub fn displacement_metrics(samples: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> Result<DisplacementMetrics> {
    if samples.is_empty() || gt.is_empty() {
        return Err(Error::Shape("need at least one sample and one timestep".into()));
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != gt.len()) {
        return Err(Error::Shape(format!("sample has {} steps, ground truth {}", bad.len(), gt.len())));
    }
    let mut ades = Vec::with_capacity(samples.len());
    let mut fdes = Vec::with_capacity(samples.len());
    let mut misses = Vec::with_capacity(samples.len());
    for s in samples {
        let errs: Vec<f64> = s.iter().zip(gt).map(|(p, q)| dist(*p, *q)).collect();
        ades.push(errs.iter().sum::<f64>() / errs.len() as f64);
        fdes.push(*errs.last().expect("non-empty"));
        misses.push(errs.iter().any(|e| *e > MISS_THRESHOLD));
    }
    let k = samples.len() as f64;
    let finals: Vec<[f64; 2]> = samples.iter().map(|s| *s.last().expect("non-empty")).collect();
    let mut mfd: f64 = 0.0;
    for i in 0..finals.len() {
        for j in i + 1..finals.len() {
            mfd = mfd.max(dist(finals[i], finals[j]));
        }
    }
    Ok(DisplacementMetrics {
        ade: ades.iter().sum::<f64>() / k,
        fde: fdes.iter().sum::<f64>() / k,
        min_ade: ades.iter().cloned().fold(f64::INFINITY, f64::min),
        min_fde: fdes.iter().cloned().fold(f64::INFINITY, f64::min),
        misses,
        mfd,
    })
}

/// One evaluated agent in one rollout, scored against `conditions`, which
/// may differ from what the policy was given.
#[derive(Debug, Clone, Copy)]
pub struct Episode<'a> {
    pub record: &'a RolloutRecord,
    pub ego: usize,
    pub conditions: &'a AgentConditions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMetrics {
    pub episodes: usize,
    /// Absent when no episode carried a waypoint.
    pub waypoint_reach_rate: Option<f64>,
    /// Absent when no episode carried a target speed.
    pub target_speed_reach_rate: Option<f64>,
    pub collision_rate: f64,
    pub offroad_rate: f64,
    pub red_light_rate: f64,
    pub avg_waypoints_reached: f64,
    /// Steps actually simulated.
    pub avg_episode_length: f64,
    pub waypoint_episodes: usize,
    pub target_speed_episodes: usize,
    pub waypoints_assigned: usize,
    pub waypoints_reached: usize,
    pub target_speeds_assigned: usize,
    pub target_speeds_reached: usize,
}

/// Per-episode tallies behind [`RateMetrics`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EpisodeTally {
    pub first_waypoint: Option<bool>,
    pub first_target_speed: Option<bool>,
    pub waypoints_reached: usize,
    pub target_speeds_reached: usize,
    pub collision: bool,
    pub offroad: bool,
    pub red_light: bool,
    pub length: usize,
}

/// Replays the condition scheduler over the ego's simulated states.
pub fn tally_episode(ep: &Episode<'_>, reach: &ReachParams) -> EpisodeTally {
    let mut conds = ep.conditions.clone();
    conds.waypoint_cursor = 0;
    conds.speed_cursor = 0;
    let seg = &ep.record.segment;
    let mut wp = 0;
    let mut ts = 0;
    for t in 1..seg.len() {
        if !seg.present[t][ep.ego] {
            continue;
        }
        for e in conds.advance(&seg.states[t][ep.ego], reach) {
            match e.kind {
                ConditionKind::Waypoint => wp += 1,
                ConditionKind::TargetSpeed => ts += 1,
            }
        }
    }
    let involved = |kind: InfractionKind| {
        ep.record.infractions.iter().any(|e| e.kind == kind && e.agents.contains(&ep.ego))
    };
    EpisodeTally {
        first_waypoint: (!ep.conditions.waypoints.is_empty()).then_some(wp > 0),
        first_target_speed: (!ep.conditions.target_speeds.is_empty()).then_some(ts > 0),
        waypoints_reached: wp,
        target_speeds_reached: ts,
        collision: involved(InfractionKind::Collision),
        offroad: involved(InfractionKind::Offroad),
        red_light: involved(InfractionKind::RedLight),
        length: ep.record.steps(),
    }
}

fn fraction(hits: usize, of: usize) -> Option<f64> {
    (of > 0).then(|| hits as f64 / of as f64)
}

pub fn reach_and_infraction_rates(episodes: &[Episode<'_>], reach: &ReachParams) -> RateMetrics {
    let tallies: Vec<EpisodeTally> = episodes.iter().map(|e| tally_episode(e, reach)).collect();
    rates_from_tallies(&tallies, episodes.iter().map(|e| e.conditions))
}

fn rates_from_tallies<'a>(tallies: &[EpisodeTally], conds: impl Iterator<Item = &'a AgentConditions>) -> RateMetrics {
    let n = tallies.len();
    let count = |f: &dyn Fn(&EpisodeTally) -> bool| tallies.iter().filter(|t| f(t)).count();
    let wp_eps = count(&|t| t.first_waypoint.is_some());
    let ts_eps = count(&|t| t.first_target_speed.is_some());
    let (mut wa, mut ta) = (0, 0);
    for c in conds {
        wa += c.waypoints.len();
        ta += c.target_speeds.len();
    }
    let mean = |f: &dyn Fn(&EpisodeTally) -> f64| {
        if n == 0 {
            0.0
        } else {
            tallies.iter().map(f).sum::<f64>() / n as f64
        }
    };
    RateMetrics {
        episodes: n,
        waypoint_reach_rate: fraction(count(&|t| t.first_waypoint == Some(true)), wp_eps),
        target_speed_reach_rate: fraction(count(&|t| t.first_target_speed == Some(true)), ts_eps),
        collision_rate: fraction(count(&|t| t.collision), n).unwrap_or(0.0),
        offroad_rate: fraction(count(&|t| t.offroad), n).unwrap_or(0.0),
        red_light_rate: fraction(count(&|t| t.red_light), n).unwrap_or(0.0),
        avg_waypoints_reached: mean(&|t| t.waypoints_reached as f64),
        avg_episode_length: mean(&|t| t.length as f64),
        waypoint_episodes: wp_eps,
        target_speed_episodes: ts_eps,
        waypoints_assigned: wa,
        waypoints_reached: tallies.iter().map(|t| t.waypoints_reached).sum(),
        target_speeds_assigned: ta,
        target_speeds_reached: tallies.iter().map(|t| t.target_speeds_reached).sum(),
    }
}

/// Counts of speeds in 1 m/s bins starting at 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SpeedHistogram {
    pub bin_width: u32,
    pub counts: Vec<usize>,
}

impl SpeedHistogram {
    pub fn from_speeds(speeds: impl IntoIterator<Item = f64>) -> Self {
        let mut counts: Vec<usize> = Vec::new();
        for v in speeds {
            let bin = v.max(0.0).floor() as usize;
            if counts.len() <= bin {
                counts.resize(bin + 1, 0);
            }
            counts[bin] += 1;
        }
        Self { bin_width: 1, counts }
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|c| **c > 0).count()
    }
}

/// Everything measured for one (model, condition mode) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub model: String,
    pub conditions: String,
    pub displacement: Vec<DisplacementMetrics>,
    pub rates: RateMetrics,
    pub speeds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub conditions: String,
    pub segments: usize,
    pub ade: f64,
    pub min_ade: f64,
    pub fde: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub mfd: f64,
    pub collision_rate: f64,
    pub waypoint_reach_rate: Option<f64>,
    pub target_speed_reach_rate: Option<f64>,
    pub offroad_rate: f64,
    pub red_light_rate: f64,
    pub avg_waypoints_reached: f64,
    pub avg_episode_length: f64,
    pub rates: RateMetrics,
    pub speed_histogram: SpeedHistogram,
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub rows: Vec<ReportRow>,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn build_report(groups: &[GroupResult]) -> Report {
    let rows = groups
        .iter()
        .map(|g| {
            let d = &g.displacement;
            let samples: usize = d.iter().map(|m| m.misses.len()).sum();
            let missed: usize = d.iter().map(|m| m.misses.iter().filter(|x| **x).count()).sum();
            ReportRow {
                model: g.model.clone(),
                conditions: g.conditions.clone(),
                segments: d.len(),
                ade: mean_of(d.iter().map(|m| m.ade)),
                min_ade: mean_of(d.iter().map(|m| m.min_ade)),
                fde: mean_of(d.iter().map(|m| m.fde)),
                min_fde: mean_of(d.iter().map(|m| m.min_fde)),
                miss_rate: if samples == 0 { f64::NAN } else { missed as f64 / samples as f64 },
                mfd: mean_of(d.iter().map(|m| m.mfd)),
                collision_rate: g.rates.collision_rate,
                waypoint_reach_rate: g.rates.waypoint_reach_rate,
                target_speed_reach_rate: g.rates.target_speed_reach_rate,
                offroad_rate: g.rates.offroad_rate,
                red_light_rate: g.rates.red_light_rate,
                avg_waypoints_reached: g.rates.avg_waypoints_reached,
                avg_episode_length: g.rates.avg_episode_length,
                rates: g.rates.clone(),
                speed_histogram: SpeedHistogram::from_speeds(g.speeds.iter().cloned()),
            }
        })
        .collect();
    Report { version: REPORT_VERSION, rows }
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.version != REPORT_VERSION {
            return Err(Error::Version { expected: REPORT_VERSION.to_string(), found: r.version.to_string() });
        }
        Ok(r)
    }

    /// Aligned table in the column order ADE, minADE, FDE, minFDE, miss
    /// rate, MFD, collision rate, waypoint reach, target-speed reach.
    pub fn to_text(&self) -> String {
        let header = [
            "Model", "Cond", "ADE", "minADE", "FDE", "minFDE", "Miss Rate", "MFD", "Collision Rate",
            "Waypoint Reach Rate", "Target Speed Reach Rate",
        ];
        let num = |v: f64| if v.is_finite() { format!("{v:.3}") } else { "-".to_string() };
        let opt = |v: Option<f64>| v.map(num).unwrap_or_else(|| "-".to_string());
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.model.clone(),
                    r.conditions.clone(),
                    num(r.ade),
                    num(r.min_ade),
                    num(r.fde),
                    num(r.min_fde),
                    num(r.miss_rate),
                    num(r.mfd),
                    num(r.collision_rate),
                    opt(r.waypoint_reach_rate),
                    opt(r.target_speed_reach_rate),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, row: &[&str]| {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, w))| if i < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &header);
        for r in &cells {
            line(&mut out, &r.iter().map(String::as_str).collect::<Vec<_>>());
        }
        for r in &self.rows {
            let h = &r.speed_histogram;
            let _ = writeln!(out, "\nspeed histogram {} / {} (m/s bin: count)", r.model, r.conditions);
            for (bin, c) in h.counts.iter().enumerate().filter(|(_, c)| **c > 0) {
                let _ = writeln!(out, "  {:>3}-{:<3} {c}", bin, bin + 1);
            }
        }
        out
    }
}
