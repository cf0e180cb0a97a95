//! Trajectory logs, dataset manifests, window extraction and the synthetic
//! traffic generator.
//!
//! A trajectory log is JSON Lines with one scene per line:
//! `{"location", "dt", "start_time", "agents": [{"id", "length", "width",
//! "states": [[x, y, psi, v] | null, ...]}]}`. A `null` state marks an agent
//! that is absent at that step.

mod placement;
mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::scene::{AgentGeometry, AgentState, MapMesh, TrajectorySegment};

pub use placement::{place_agents, PlacementConfig};
pub use synthetic::{generate_synthetic, CarFollowing, MapFamily, SyntheticConfig};

pub const DATASET_VERSION: u32 = 1;
pub const DEFAULT_DT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentLog {
    pub id: String,
    pub length: f64,
    pub width: f64,
    pub states: Vec<Option<[f64; 4]>>,
}

/// One recorded scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLog {
    pub location: String,
    pub dt: f64,
    #[serde(default)]
    pub start_time: f64,
    pub agents: Vec<AgentLog>,
}

impl SceneLog {
    pub fn len(&self) -> usize {
        self.agents.iter().map(|a| a.states.len()).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Validation(format!("scene dt must be positive, got {}", self.dt)));
        }
        let t = self.len();
        for a in &self.agents {
            AgentGeometry::new(a.length, a.width)?;
            if a.states.len() != t {
                return Err(Error::Shape(format!("agent {} has {} states, scene has {t}", a.id, a.states.len())));
            }
            if a.states.iter().flatten().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NumericDomain(format!("agent {} has a non-finite state", a.id)));
            }
        }
        Ok(())
    }

    /// The whole scene as one segment.
    pub fn to_segment(&self) -> TrajectorySegment {
        self.window(0, self.len())
    }

    fn window(&self, start: usize, len: usize) -> TrajectorySegment {
        let keep: Vec<&AgentLog> = self
            .agents
            .iter()
            .filter(|a| a.states[start..start + len].iter().any(Option::is_some))
            .collect();
        let mut states = Vec::with_capacity(len);
        let mut present = Vec::with_capacity(len);
        for t in start..start + len {
            states.push(
                keep.iter()
                    .map(|a| a.states[t].map(AgentState::from_array).unwrap_or(AgentState { x: 0.0, y: 0.0, psi: 0.0, v: 0.0 }))
                    .collect(),
            );
            present.push(keep.iter().map(|a| a.states[t].is_some()).collect());
        }
        TrajectorySegment {
            location: self.location.clone(),
            dt: self.dt,
            start_time: self.start_time + start as f64 * self.dt,
            states,
            present,
            geometries: keep.iter().map(|a| AgentGeometry { length: a.length, width: a.width }).collect(),
            agent_ids: keep.iter().map(|a| a.id.clone()).collect(),
        }
    }

    /// Sliding windows of `window` steps every `stride` steps. Windows
    /// without an agent present throughout are dropped.
    pub fn windows(&self, window: usize, stride: usize) -> Vec<TrajectorySegment> {
        let t = self.len();
        if window < 2 || stride == 0 || t < window {
            return vec![];
        }
        (0..=t - window)
            .step_by(stride)
            .map(|s| self.window(s, window))
            .filter(|seg| !seg.ego_candidates().is_empty())
            .collect()
    }

    pub fn from_segment(seg: &TrajectorySegment) -> Self {
        Self {
            location: seg.location.clone(),
            dt: seg.dt,
            start_time: seg.start_time,
            agents: (0..seg.num_agents())
                .map(|i| AgentLog {
                    id: seg.agent_ids[i].clone(),
                    length: seg.geometries[i].length,
                    width: seg.geometries[i].width,
                    states: (0..seg.len())
                        .map(|t| seg.present[t][i].then(|| seg.states[t][i].to_array()))
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Parses a JSON Lines trajectory log. Errors name the failing line.
pub fn parse_log(text: &str, source_name: &str) -> Result<Vec<SceneLog>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse { source_name: source_name.to_string(), line: i + 1, message };
        let scene: SceneLog = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
        scene.validate().map_err(|e| parse(e.to_string()))?;
        out.push(scene);
    }
    Ok(out)
}

pub fn write_log(scenes: &[SceneLog]) -> Result<String> {
    let mut out = String::new();
    for s in scenes {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub location: String,
    pub map: PathBuf,
    pub log: PathBuf,
}

/// Index of a dataset directory. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub dt: f64,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn empty(root: &Path) -> Self {
        Self { version: DATASET_VERSION, dt: DEFAULT_DT, entries: vec![], root: root.to_path_buf() }
    }

    pub fn map_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.map)
    }

    pub fn log_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.log)
    }
}

/// In-memory dataset: maps by location plus scene logs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub maps: BTreeMap<String, MapMesh>,
    pub scenes: Vec<SceneLog>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `maps/<location>.json`, `logs/<location>.jsonl` and the manifest.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<DatasetManifest> {
    for sub in ["maps", "logs"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut by_location: BTreeMap<&str, Vec<SceneLog>> = BTreeMap::new();
    for s in &data.scenes {
        if !data.maps.contains_key(&s.location) {
            return Err(Error::NotFound(format!("map for location {}", s.location)));
        }
        by_location.entry(&s.location).or_default().push(s.clone());
    }
    let mut manifest = DatasetManifest::empty(dir);
    for (loc, map) in &data.maps {
        let entry = ManifestEntry {
            location: loc.clone(),
            map: PathBuf::from("maps").join(format!("{loc}.json")),
            log: PathBuf::from("logs").join(format!("{loc}.jsonl")),
        };
        write_atomic(&dir.join(&entry.map), serde_json::to_string(map)?.as_bytes())?;
        let scenes = by_location.remove(loc.as_str()).unwrap_or_default();
        write_atomic(&dir.join(&entry.log), write_log(&scenes)?.as_bytes())?;
        manifest.entries.push(entry);
    }
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Reads a manifest from a dataset directory or a manifest file path and
/// checks that every referenced file exists.
pub fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = read_text(&file)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { source_name: file.display().to_string(), line: e.line(), message: e.to_string() })?;
    let found = value.get("version").and_then(|v| v.as_u64());
    if found != Some(DATASET_VERSION as u64) {
        return Err(Error::Version {
            expected: DATASET_VERSION.to_string(),
            found: found.map(|v| v.to_string()).unwrap_or_else(|| "none".into()),
        });
    }
    let mut manifest: DatasetManifest = serde_json::from_value(value)
        .map_err(|e| Error::Parse { source_name: file.display().to_string(), line: 0, message: e.to_string() })?;
    if (manifest.dt - DEFAULT_DT).abs() > 1e-12 {
        return Err(Error::Validation(format!("dataset dt must be {DEFAULT_DT}, got {}", manifest.dt)));
    }
    manifest.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    for e in &manifest.entries {
        for p in [manifest.map_path(e), manifest.log_path(e)] {
            if !p.exists() {
                return Err(Error::NotFound(p.display().to_string()));
            }
        }
    }
    Ok(manifest)
}

/// Loads every map and scene a manifest references.
pub fn load_all(manifest: &DatasetManifest) -> Result<Dataset> {
    let mut data = Dataset::default();
    for e in &manifest.entries {
        let mp = manifest.map_path(e);
        let map = MapMesh::from_json(&read_text(&mp)?).map_err(|err| Error::Parse {
            source_name: mp.display().to_string(),
            line: 0,
            message: err.to_string(),
        })?;
        data.maps.insert(e.location.clone(), map);
        let lp = manifest.log_path(e);
        data.scenes.extend(parse_log(&read_text(&lp)?, &lp.display().to_string())?);
    }
    Ok(data)
}

/// Sliding windows over every scene, in manifest order.
pub fn load_segments(manifest: &DatasetManifest, window: usize, stride: usize) -> Result<Vec<TrajectorySegment>> {
    Ok(load_all(manifest)?.segments(window, stride))
}

impl Dataset {
    pub fn segments(&self, window: usize, stride: usize) -> Vec<TrajectorySegment> {
        self.scenes.iter().flat_map(|s| s.windows(window, stride)).collect()
    }

    pub fn map_for(&self, seg: &TrajectorySegment) -> Result<&MapMesh> {
        self.maps.get(&seg.location).ok_or_else(|| Error::NotFound(format!("map for location {}", seg.location)))
    }
}
