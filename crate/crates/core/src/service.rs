//! Live steering sessions and their JSON wire protocol.
//!
//! A [`SessionManager`] owns the registered maps and checkpoints and any
//! number of independent sessions. Each session is a fully policy-driven
//! rollout that advances only when stepped. Commands take effect at the next
//! step. Snapshots carry the full joint state so a reader that missed some
//! can resume from any later one.

use std::collections::BTreeMap;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditionKind, ReachParams, TargetSpeed, Waypoint};
use crate::data::{place_agents, PlacementConfig};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::scene::MapMesh;
use crate::simulation::{InfractionKind, Simulator, StepOutcome};

pub const SERVICE_DT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    Paused,
    Ended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Command {
    /// Replaces the agent's remaining waypoints, or appends to them.
    SetWaypoints {
        agent: String,
        points: Vec<[f64; 2]>,
        #[serde(default)]
        append: bool,
    },
    /// Installs a single target speed; `null` clears it.
    SetTargetSpeed { agent: String, value: Option<f64> },
    Pause,
    Resume,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSnapshot {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
    pub active_waypoint: Option<[f64; 2]>,
    pub active_target_speed: Option<f64>,
    /// Waypoints still queued after the active one.
    pub queued_waypoints: usize,
    /// True if the agent reached any condition since the previous snapshot.
    pub reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SnapshotEvent {
    Reached { t: usize, agent: String, condition: ConditionKind, index: usize },
    Infraction { t: usize, kind: InfractionKind, agents: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: usize,
    pub time: f64,
    pub status: SessionStatus,
    pub agents: Vec<AgentSnapshot>,
    /// Events since the previous snapshot.
    pub events: Vec<SnapshotEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    CreateSession { map: String, checkpoint: String, n_agents: usize, seed: u64 },
    Command { session: String, command: Command },
    Step { session: String, #[serde(default = "one")] n: usize },
    Subscribe { session: String },
    /// Toggles stepping at 10 Hz by the server clock.
    AutoRun { session: String, enabled: bool },
    Snapshot { session: String },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Snapshot {
        session: String,
        #[serde(flatten)]
        snapshot: Snapshot,
    },
    Ack { detail: serde_json::Value },
    Error { kind: String, detail: String },
}

impl ServerMessage {
    pub fn error(e: &Error) -> Self {
        let kind = match e {
            Error::NotFound(_) => "not_found",
            Error::Validation(_) => "validation",
            Error::State(_) => "state",
            Error::Json(_) | Error::Parse { .. } => "parse",
            _ => "internal",
        };
        ServerMessage::Error { kind: kind.into(), detail: e.to_string() }
    }
}

/// Result of dispatching one client message.
#[derive(Debug)]
pub enum Reply {
    Ack(serde_json::Value),
    Snapshot(String, Snapshot),
    /// The current snapshot, followed by one per step on the receiver.
    Subscribed(String, Snapshot, Receiver<Snapshot>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub maps: Vec<String>,
    pub checkpoints: Vec<String>,
}

struct Session {
    policy: Arc<Policy>,
    sim: Simulator,
    status: SessionStatus,
    auto_run: bool,
    latest: Snapshot,
    subscribers: Vec<Sender<Snapshot>>,
}

impl Session {
    fn require_running(&self) -> Result<()> {
        match self.status {
            SessionStatus::Running => Ok(()),
            s => Err(Error::State(format!("session is {s:?}, not running").to_lowercase())),
        }
    }

    fn agent_index(&self, id: &str) -> Result<usize> {
        self.sim.agent_ids().iter().position(|a| a == id).ok_or_else(|| Error::NotFound(format!("agent {id}")))
    }

    fn snapshot(&self, outcomes: &[StepOutcome]) -> Snapshot {
        let ids = self.sim.agent_ids();
        let mut reached = vec![false; ids.len()];
        let mut events = Vec::new();
        for o in outcomes {
            for r in &o.reached {
                reached[r.agent] = true;
                events.push(SnapshotEvent::Reached { t: o.t, agent: ids[r.agent].clone(), condition: r.kind, index: r.index });
            }
            for inf in &o.infractions {
                events.push(SnapshotEvent::Infraction {
                    t: o.t,
                    kind: inf.kind,
                    agents: inf.agents.iter().map(|&a| ids[a].clone()).collect(),
                });
            }
        }
        let agents = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let s = self.sim.states()[i];
                let c = &self.sim.conditions()[i];
                AgentSnapshot {
                    id: id.clone(),
                    x: s.x,
                    y: s.y,
                    psi: s.psi,
                    v: s.v,
                    active_waypoint: c.active_waypoint().map(|w| w.position()),
                    active_target_speed: c.active_target_speed().map(|v| v.value()),
                    queued_waypoints: c.waypoints.len().saturating_sub(c.waypoint_cursor + 1),
                    reached: reached[i],
                }
            })
            .collect();
        Snapshot { t: self.sim.t(), time: self.sim.time(), status: self.status, agents, events }
    }

    /// Refreshes the latest snapshot after a command, keeping its events.
    fn refresh(&mut self) {
        let events = std::mem::take(&mut self.latest.events);
        let flags: Vec<bool> = self.latest.agents.iter().map(|a| a.reached).collect();
        self.latest = self.snapshot(&[]);
        self.latest.events = events;
        for (a, r) in self.latest.agents.iter_mut().zip(flags) {
            a.reached = r;
        }
    }

    fn step(&mut self, n: usize) -> Result<Snapshot> {
        if n == 0 {
            return Ok(self.latest.clone());
        }
        self.require_running()?;
        let mut outcomes = Vec::with_capacity(n);
        for _ in 0..n {
            let o = self.sim.step(Some(&self.policy))?;
            let snap = self.snapshot(std::slice::from_ref(&o));
            self.subscribers.retain(|tx| tx.send(snap.clone()).is_ok());
            outcomes.push(o);
        }
        self.latest = self.snapshot(&outcomes);
        Ok(self.latest.clone())
    }

    fn apply(&mut self, cmd: Command) -> Result<()> {
        match cmd {
            Command::SetWaypoints { agent, points, append } => {
                self.require_running()?;
                let i = self.agent_index(&agent)?;
                if points.iter().flatten().any(|c| !c.is_finite()) {
                    return Err(Error::Validation("waypoint coordinates must be finite".into()));
                }
                let c = self.sim.conditions_mut(i)?;
                let mut list: Vec<Waypoint> = if append { c.waypoints[c.waypoint_cursor.min(c.waypoints.len())..].to_vec() } else { vec![] };
                list.extend(points.iter().map(|p| Waypoint::new(p[0], p[1])));
                c.waypoints = list;
                c.waypoint_cursor = 0;
            }
            Command::SetTargetSpeed { agent, value } => {
                self.require_running()?;
                let i = self.agent_index(&agent)?;
                let speeds = match value {
                    Some(v) => vec![TargetSpeed::new(v)?],
                    None => vec![],
                };
                let c = self.sim.conditions_mut(i)?;
                c.target_speeds = speeds;
                c.speed_cursor = 0;
            }
            Command::Pause => {
                self.require_running()?;
                self.status = SessionStatus::Paused;
            }
            Command::Resume => match self.status {
                SessionStatus::Ended => return Err(Error::State("session has ended".into())),
                _ => self.status = SessionStatus::Running,
            },
            Command::End => {
                if self.status == SessionStatus::Ended {
                    return Err(Error::State("session has already ended".into()));
                }
                self.status = SessionStatus::Ended;
                self.auto_run = false;
            }
        }
        self.refresh();
        if self.status == SessionStatus::Ended {
            self.subscribers.retain(|tx| tx.send(self.latest.clone()).is_ok());
            self.subscribers.clear();
        }
        Ok(())
    }
}

/// Registry of maps, checkpoints and live sessions. Each session has its own
/// lock, so distinct sessions step concurrently.
pub struct SessionManager {
    maps: BTreeMap<String, Arc<MapMesh>>,
    checkpoints: BTreeMap<String, Arc<Policy>>,
    placement: PlacementConfig,
    reach: ReachParams,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
    next_id: Mutex<u64>,
}

impl SessionManager {
    pub fn new(maps: BTreeMap<String, MapMesh>, checkpoints: BTreeMap<String, Policy>) -> Self {
        Self {
            maps: maps.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            checkpoints: checkpoints.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            placement: PlacementConfig::default(),
            reach: ReachParams::default(),
            sessions: RwLock::new(BTreeMap::new()),
            next_id: Mutex::new(0),
        }
    }

    pub fn with_placement(mut self, placement: PlacementConfig) -> Self {
        self.placement = placement;
        self
    }

    pub fn catalog(&self) -> Catalog {
        Catalog { maps: self.maps.keys().cloned().collect(), checkpoints: self.checkpoints.keys().cloned().collect() }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .expect("session registry poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id}")))
    }

    fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        let s = self.session(id)?;
        let mut guard = s.lock().expect("session poisoned");
        f(&mut guard)
    }

    pub fn create_session(&self, map: &str, checkpoint: &str, n_agents: usize, seed: u64) -> Result<(String, Snapshot)> {
        let mesh = self.maps.get(map).cloned().ok_or_else(|| Error::NotFound(format!("map {map}")))?;
        let policy = self
            .checkpoints
            .get(checkpoint)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("checkpoint {checkpoint}")))?;
        let mut initial = place_agents(&mesh, n_agents, seed, &self.placement)?;
        initial.location = map.to_string();
        initial.dt = SERVICE_DT;
        let all: Vec<usize> = (0..n_agents).collect();
        let sim = Simulator::new(mesh, &initial, &all, Some(&policy), vec![Default::default(); n_agents], SERVICE_DT, seed, self.reach)?;
        let mut session = Session {
            policy,
            sim,
            status: SessionStatus::Running,
            auto_run: false,
            latest: Snapshot { t: 0, time: 0.0, status: SessionStatus::Running, agents: vec![], events: vec![] },
            subscribers: vec![],
        };
        session.latest = session.snapshot(&[]);
        let id = {
            let mut next = self.next_id.lock().expect("id counter poisoned");
            *next += 1;
            format!("s{:04}", *next)
        };
        let snap = session.latest.clone();
        self.sessions.write().expect("session registry poisoned").insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok((id, snap))
    }

    pub fn apply_command(&self, session: &str, command: Command) -> Result<()> {
        self.with_session(session, |s| s.apply(command))
    }

    pub fn step_session(&self, session: &str, n: usize) -> Result<Snapshot> {
        self.with_session(session, |s| s.step(n))
    }

    pub fn snapshot(&self, session: &str) -> Result<Snapshot> {
        self.with_session(session, |s| Ok(s.latest.clone()))
    }

    /// Subscribes to a running or paused session. The receiver gets one
    /// snapshot per step until it is dropped or the session ends.
    pub fn subscribe(&self, session: &str) -> Result<(Snapshot, Receiver<Snapshot>)> {
        self.with_session(session, |s| {
            if s.status == SessionStatus::Ended {
                return Err(Error::State("session has ended".into()));
            }
            let (tx, rx) = channel();
            s.subscribers.push(tx);
            Ok((s.latest.clone(), rx))
        })
    }

    pub fn set_auto_run(&self, session: &str, enabled: bool) -> Result<()> {
        self.with_session(session, |s| {
            if enabled {
                s.require_running()?;
            }
            s.auto_run = enabled;
            Ok(())
        })
    }

    /// Advances every running auto-run session by one step. Sessions whose
    /// step fails are ended and reported.
    pub fn tick(&self) -> Vec<(String, Error)> {
        let sessions: Vec<(String, Arc<Mutex<Session>>)> = self
            .sessions
            .read()
            .expect("session registry poisoned")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let mut failures = Vec::new();
        for (id, s) in sessions {
            let mut s = s.lock().expect("session poisoned");
            if s.auto_run && s.status == SessionStatus::Running {
                if let Err(e) = s.step(1) {
                    s.auto_run = false;
                    failures.push((id, e));
                }
            }
        }
        failures
    }

    pub fn dispatch(&self, msg: ClientMessage) -> Result<Reply> {
        match msg {
            ClientMessage::CreateSession { map, checkpoint, n_agents, seed } => {
                let (id, snap) = self.create_session(&map, &checkpoint, n_agents, seed)?;
                Ok(Reply::Snapshot(id, snap))
            }
            ClientMessage::Command { session, command } => {
                self.apply_command(&session, command)?;
                Ok(Reply::Ack(serde_json::json!({ "session": session })))
            }
            ClientMessage::Step { session, n } => {
                let snap = self.step_session(&session, n)?;
                Ok(Reply::Snapshot(session, snap))
            }
            ClientMessage::Subscribe { session } => {
                let (snap, rx) = self.subscribe(&session)?;
                Ok(Reply::Subscribed(session, snap, rx))
            }
            ClientMessage::AutoRun { session, enabled } => {
                self.set_auto_run(&session, enabled)?;
                Ok(Reply::Ack(serde_json::json!({ "session": session, "auto_run": enabled })))
            }
            ClientMessage::Snapshot { session } => {
                let snap = self.snapshot(&session)?;
                Ok(Reply::Snapshot(session, snap))
            }
        }
    }
}
