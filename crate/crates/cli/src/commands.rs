use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use steerdrive::checkpoint::Checkpoint;
use steerdrive::conditioning::{AgentConditions, ConditionsFile};
use steerdrive::data::{generate_synthetic, load_all, load_dataset, parse_log, place_agents, save_dataset, Dataset, PlacementConfig, SyntheticConfig};
use steerdrive::evaluation::{evaluate, EvalConfig};
use steerdrive::metrics::build_report;
use steerdrive::raster::{render, RasterConfig, SceneView};
use steerdrive::scene::MapMesh;
use steerdrive::simulation::{rollout, RolloutConfig, RolloutMode};
use steerdrive::training::{train, TrainConfig};

use crate::{Command, EvalArgs, GenerateArgs, RenderArgs, RolloutArgs, TrainArgs};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_data(dir: &Path) -> Result<Dataset> {
    let manifest = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok(load_all(&manifest)?)
}

fn load_policy(path: &Path) -> Result<steerdrive::policy::Policy> {
    Ok(Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?.policy)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenerateData(a) => generate_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Rollout(a) => rollout_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Serve(a) => crate::server::serve(a),
    }
}

fn generate_data(a: GenerateArgs) -> Result<()> {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SyntheticConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(n) = a.scenes {
        cfg.scenes = n;
    }
    let data = generate_synthetic(&cfg)?;
    let manifest = save_dataset(&a.out, &data)?;
    println!("wrote {} scenes on {} maps to {}", data.scenes.len(), manifest.entries.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let data = load_data(&a.data)?;
    let validation = a.validation.as_deref().map(load_data).transpose()?;
    let outcome = train(&data, validation.as_ref(), &cfg, &a.out)?;
    let last = outcome.checkpoints.last().ok_or_else(|| anyhow!("training wrote no checkpoint"))?;
    println!("trained {} steps; final checkpoint {}", outcome.steps, last.display());
    Ok(())
}

/// Text report path paired with a JSON report path.
pub fn text_report_path(json: &Path) -> PathBuf {
    json.with_extension("txt")
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let policy = load_policy(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let name = a.name.clone().unwrap_or_else(|| stem(&a.ckpt));
    let mut groups = Vec::new();
    for mode in &a.conditions {
        let cfg = EvalConfig {
            samples: a.samples,
            horizon: a.horizon,
            stride: a.stride,
            conditions: *mode,
            strategy: a.strategy,
            max_segments: a.max_segments,
            seed: a.seed,
            model: name.clone(),
            ..Default::default()
        };
        log::info!("evaluating {name} with conditions {mode}");
        groups.push(evaluate(&policy, &data, &cfg)?);
    }
    let report = build_report(&groups);
    let text = report.to_text();
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&a.report, report.to_json()?).with_context(|| format!("writing {}", a.report.display()))?;
    let txt = text_report_path(&a.report);
    fs::write(&txt, &text).with_context(|| format!("writing {}", txt.display()))?;
    print!("{text}");
    Ok(())
}

fn rollout_cmd(a: RolloutArgs) -> Result<()> {
    let policy = load_policy(&a.ckpt)?;
    let map = MapMesh::from_json(&read(&a.map)?).with_context(|| format!("parsing map {}", a.map.display()))?;
    let conditions = match &a.conditions {
        Some(p) => ConditionsFile::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => ConditionsFile::default(),
    };
    let mut scene = place_agents(&map, a.agents, a.seed, &PlacementConfig::default())?;
    scene.location = stem(&a.map);
    for id in conditions.agents.keys() {
        if !scene.agent_ids.contains(id) {
            bail!("conditions name agent {id:?}, but the rollout has agents agent-0 to agent-{}", a.agents.saturating_sub(1));
        }
    }
    let conds: Vec<AgentConditions> = scene.agent_ids.iter().map(|id| conditions.conditions_for(id)).collect();
    let cfg = RolloutConfig::new(RolloutMode::Autonomous, a.steps, a.seed);
    let record = rollout(Arc::new(map), &scene, Some(&policy), conds, &cfg)?;
    let mut buf = Vec::new();
    record.write_jsonl(&mut buf)?;
    fs::write(&a.out, buf).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{} steps, {} reach events, {} infractions -> {}",
        record.steps(),
        record.condition_events.len(),
        record.infractions.len(),
        a.out.display()
    );
    Ok(())
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let scenes = parse_log(&read(&a.segment)?, &a.segment.display().to_string())?;
    let scene = scenes
        .get(a.scene)
        .ok_or_else(|| anyhow!("{} holds {} scenes, no scene {}", a.segment.display(), scenes.len(), a.scene))?;
    let seg = scene.to_segment();
    if a.t >= seg.len() {
        bail!("t={} is past the last step {}", a.t, seg.len() - 1);
    }
    if a.ego >= seg.num_agents() {
        bail!("ego {} out of range; the scene has {} agents", a.ego, seg.num_agents());
    }
    if !seg.present[a.t][a.ego] {
        bail!("agent {} is absent at t={}", seg.agent_ids[a.ego], a.t);
    }
    let map_path = a.map.clone().unwrap_or_else(|| {
        let dir = a.segment.parent().unwrap_or(Path::new("."));
        dir.join("..").join("maps").join(format!("{}.json", seg.location))
    });
    let map = MapMesh::from_json(&read(&map_path)?).with_context(|| format!("parsing map {}", map_path.display()))?;
    let phases = map.light_phases(seg.time_at(a.t));
    let view = SceneView {
        states: &seg.states[a.t],
        present: &seg.present[a.t],
        geometries: &seg.geometries,
        map: &map,
        light_phases: &phases,
    };
    let cfg = RasterConfig { size: a.size, ..Default::default() };
    let waypoint = a.waypoint;
    let raster = render(&cfg, &view, a.ego, waypoint, steerdrive::conditioning::ReachParams::default().radius);
    write_png(raster.pixels(), raster.size(), a.scale.max(1), &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Saves an RGB raster, upscaled by pixel replication.
pub fn write_png(pixels: &[u8], size: usize, scale: u32, out: &Path) -> Result<()> {
    let side = size as u32 * scale;
    let img = image::RgbImage::from_fn(side, side, |x, y| {
        let i = 3 * ((y / scale) as usize * size + (x / scale) as usize);
        image::Rgb([pixels[i], pixels[i + 1], pixels[i + 2]])
    });
    img.save(out).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

/// Maps in `dir`, or in `dir/maps` for a dataset directory, keyed by stem.
pub fn load_maps(dir: &Path) -> Result<BTreeMap<String, MapMesh>> {
    let root = if dir.join("maps").is_dir() { dir.join("maps") } else { dir.to_path_buf() };
    let mut maps = BTreeMap::new();
    let entries = fs::read_dir(&root).with_context(|| format!("listing {}", root.display()))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let map = MapMesh::from_json(&read(&path)?).with_context(|| format!("parsing map {}", path.display()))?;
            maps.insert(stem(&path), map);
        }
    }
    if maps.is_empty() {
        bail!("no map files in {}", root.display());
    }
    Ok(maps)
}

pub fn load_checkpoints(paths: &[PathBuf]) -> Result<BTreeMap<String, steerdrive::policy::Policy>> {
    let mut out = BTreeMap::new();
    for p in paths {
        if out.insert(stem(p), load_policy(p)?).is_some() {
            bail!("two checkpoints share the name {}", stem(p));
        }
    }
    Ok(out)
}
