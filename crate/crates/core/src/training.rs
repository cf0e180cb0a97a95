//! Negative-ELBO training with random conditioning.
//!
//! The ego runs free on its own predicted states while every other agent is
//! replayed from the log. Each step renders the mixed scene, draws a latent
//! from the posterior given the ground-truth action, pushes the predicted
//! state through the kinematic model and scores it against the logged next
//! state. The rasterizer has no gradient: birdview pixels enter the graph as
//! constants.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::conditioning::{last_timestep_condition, sample_conditions, AgentConditions, ReachParams, SamplerConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kinematics;
use crate::nn::{Adam, Graph, Grads, StateNoise, Var};
use crate::policy::{Architecture, LatentSource, Policy};
use crate::raster::{render, SceneView};
use crate::scene::{AgentState, MapMesh, TrajectorySegment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionStrategy {
    /// Spatial waypoints and temporal target speeds drawn along the ego's
    /// logged track.
    Sampled,
    /// One waypoint and one target speed taken from the final logged state.
    LastTimestep,
    None,
}

impl ConditionStrategy {
    pub fn conditions<R: Rng + ?Sized>(
        &self,
        track: &[AgentState],
        sampler: &SamplerConfig,
        waypoints: bool,
        speeds: bool,
        rng: &mut R,
    ) -> AgentConditions {
        match self {
            ConditionStrategy::Sampled => sample_conditions(track, sampler, waypoints, speeds, rng),
            ConditionStrategy::LastTimestep => last_timestep_condition(track).filtered(waypoints, speeds),
            ConditionStrategy::None => AgentConditions::unconditioned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Probability that a segment is trained with its conditions.
    pub p_c: f64,
    /// States per training window.
    pub segment_len: usize,
    pub stride: usize,
    pub dt: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// KL weight ramps linearly from 0 to 1 over this fraction of all steps.
    pub kl_warmup_fraction: f64,
    pub reach: ReachParams,
    pub sampler: SamplerConfig,
    pub strategy: ConditionStrategy,
    pub use_waypoints: bool,
    pub use_speeds: bool,
    pub noise: StateNoise,
    pub arch: Architecture,
    pub checkpoint_every: usize,
    /// Validation windows scored at every checkpoint.
    pub validation_segments: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p_c: 0.5,
            segment_len: 40,
            stride: 10,
            dt: 0.1,
            batch_size: 8,
            learning_rate: 1e-3,
            epochs: 1,
            max_steps: None,
            kl_warmup_fraction: 0.1,
            reach: ReachParams::default(),
            sampler: SamplerConfig::default(),
            strategy: ConditionStrategy::Sampled,
            use_waypoints: true,
            use_speeds: true,
            noise: StateNoise::default(),
            arch: Architecture::default(),
            checkpoint_every: 500,
            validation_segments: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_c) {
            return Err(Error::Config(format!("p_c must lie in [0, 1], got {}", self.p_c)));
        }
        if self.segment_len < 2 {
            return Err(Error::Config(format!("segments need at least 2 states, got {}", self.segment_len)));
        }
        if self.stride == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("stride, batch size and checkpoint interval must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.dt > 0.0) {
            return Err(Error::Config("learning rate and dt must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_fraction) {
            return Err(Error::Config("KL warm-up fraction must lie in [0, 1]".into()));
        }
        self.arch.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loss of one segment and its parts, all summed over steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLoss {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    /// Per-step terms, one per transition.
    pub terms: Vec<f64>,
}

/// Non-differentiable inputs observed during one unroll: the rendered
/// birdviews and the target speed fed to each step.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenInputs {
    pub rasters: Vec<Vec<f64>>,
    pub target_speeds: Vec<Option<f64>>,
}

/// Everything a segment loss depends on apart from the parameters.
#[derive(Debug, Clone, Copy)]
pub struct SegmentInputs<'a> {
    pub segment: &'a TrajectorySegment,
    pub map: &'a MapMesh,
    pub ego: usize,
    pub conditions: &'a AgentConditions,
    /// One latent draw per transition.
    pub eps: &'a [Vec<f64>],
    pub kl_weight: f64,
    pub noise: StateNoise,
    pub reach: ReachParams,
}

fn check_inputs(policy: &Policy, inp: &SegmentInputs<'_>) -> Result<()> {
    let seg = inp.segment;
    if seg.len() < 2 {
        return Err(Error::Validation(format!("segment has {} states, need at least 2", seg.len())));
    }
    if inp.ego >= seg.num_agents() {
        return Err(Error::NotFound(format!("ego index {}", inp.ego)));
    }
    if !seg.present.iter().all(|row| row[inp.ego]) {
        return Err(Error::Validation(format!("ego {} is not present at every step", seg.agent_ids[inp.ego])));
    }
    if inp.eps.len() != seg.len() - 1 || inp.eps.iter().any(|e| e.len() != policy.arch().latent) {
        return Err(Error::Shape(format!(
            "need {} latent draws of width {}",
            seg.len() - 1,
            policy.arch().latent
        )));
    }
    Ok(())
}

struct Unrolled {
    total: Var,
    recon: Var,
    kl: Var,
    terms: Vec<Var>,
    frozen: FrozenInputs,
}

fn unroll(policy: &Policy, g: &mut Graph<'_>, inp: &SegmentInputs<'_>, frozen: Option<&FrozenInputs>) -> Result<Unrolled> {
    let seg = inp.segment;
    let ego = inp.ego;
    let geom = seg.geometries[ego];
    let rcfg = policy.arch().raster_config();
    let mut conds = inp.conditions.clone();
    let mut record = FrozenInputs { rasters: Vec::new(), target_speeds: Vec::new() };
    let mut state = g.input(seg.states[0][ego].to_array().to_vec());
    let mut h = g.input(policy.initial_state());
    let mut terms = Vec::with_capacity(seg.len() - 1);
    let mut recons = Vec::with_capacity(seg.len() - 1);
    let mut kls = Vec::with_capacity(seg.len() - 1);
    for t in 0..seg.len() - 1 {
        let ego_now = AgentState::from_array(g.value(state).try_into().expect("state width 4"));
        let (pixels, target_speed) = match frozen {
            Some(f) => (f.rasters[t].clone(), f.target_speeds[t]),
            None => {
                let mut states = seg.states[t].clone();
                states[ego] = ego_now;
                let phases = inp.map.light_phases(seg.time_at(t));
                let view = SceneView {
                    states: &states,
                    present: &seg.present[t],
                    geometries: &seg.geometries,
                    map: inp.map,
                    light_phases: &phases,
                };
                let wp = conds.active_waypoint().map(|w| w.position());
                let raster = render(&rcfg, &view, ego, wp, inp.reach.radius);
                (raster.to_chw(), conds.active_target_speed().map(|s| s.value()))
            }
        };
        record.rasters.push(pixels.clone());
        record.target_speeds.push(target_speed);

        let target = seg.states[t + 1][ego];
        let action_gt = kinematics::inverse(&seg.states[t][ego], &target, seg.dt, &geom)?.action.clamped();
        let b = g.input(pixels);
        let speed = g.slice(state, 3, 1);
        let latent = LatentSource::Posterior { action: action_gt, eps: inp.eps[t].clone() };
        let out = policy.step_graph(g, b, speed, h, target_speed, &latent)?;
        let next = g.kinematic_step(state, out.action, seg.dt, geom.length)?;
        let nll = g.state_nll(next, &target, &inp.noise);
        let (mu, sigma) = out.posterior.expect("posterior mode");
        let kl = g.kl_std_normal(mu, sigma)?;
        let weighted = g.scale(kl, inp.kl_weight);
        let term = g.add(nll, weighted);
        g.check_finite(term, &format!("loss term at step {t}"))?;
        terms.push(term);
        recons.push(nll);
        kls.push(kl);
        state = next;
        h = out.h_next;
        let reached = AgentState::from_array(g.value(state).try_into().expect("state width 4"));
        conds.advance(&reached, &inp.reach);
    }
    let sum = |g: &mut Graph<'_>, parts: &[Var]| {
        let c = g.concat(parts);
        g.sum(c)
    };
    let total = sum(g, &terms);
    let recon = sum(g, &recons);
    let kl = sum(g, &kls);
    Ok(Unrolled { total, recon, kl, terms, frozen: record })
}

fn evaluate(policy: &Policy, inp: &SegmentInputs<'_>, frozen: Option<&FrozenInputs>, grads: Option<&mut Grads>) -> Result<(SegmentLoss, FrozenInputs)> {
    check_inputs(policy, inp)?;
    let mut g = Graph::new(policy.params());
    let u = unroll(policy, &mut g, inp, frozen)?;
    let loss = SegmentLoss {
        loss: g.scalar(u.total),
        recon: g.scalar(u.recon),
        kl: g.scalar(u.kl),
        terms: u.terms.iter().map(|v| g.scalar(*v)).collect(),
    };
    if !loss.loss.is_finite() {
        return Err(Error::Divergence(format!("segment loss is {}", loss.loss)));
    }
    if let Some(grads) = grads {
        g.backward(u.total, grads);
        if !grads.all_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
    }
    Ok((loss, u.frozen))
}

/// Loss of one segment without gradients.
pub fn segment_loss(policy: &Policy, inp: &SegmentInputs<'_>) -> Result<SegmentLoss> {
    Ok(evaluate(policy, inp, None, None)?.0)
}

/// Loss of one segment; gradients are added into `grads`.
pub fn segment_loss_and_grads(policy: &Policy, inp: &SegmentInputs<'_>, grads: &mut Grads) -> Result<SegmentLoss> {
    Ok(evaluate(policy, inp, None, Some(grads))?.0)
}

/// Result of one conditional training step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: SegmentLoss,
    pub grads: Grads,
    pub conditioned: bool,
}

/// Draws whether to condition, draws the latent noise and evaluates the
/// segment loss and gradients. Without conditioning (or with an exhausted
/// list) every step is unconditional.
pub fn conditional_training_step<R: Rng + ?Sized>(
    policy: &Policy,
    segment: &TrajectorySegment,
    map: &MapMesh,
    ego: usize,
    conditions: &AgentConditions,
    config: &TrainConfig,
    kl_weight: f64,
    rng: &mut R,
) -> Result<StepResult> {
    let conditioned = rng.gen_bool(config.p_c);
    let eps: Vec<Vec<f64>> = (1..segment.len()).map(|_| policy.draw_eps(rng)).collect();
    let none = AgentConditions::unconditioned();
    let inputs = SegmentInputs {
        segment,
        map,
        ego,
        conditions: if conditioned { conditions } else { &none },
        eps: &eps,
        kl_weight,
        noise: config.noise,
        reach: config.reach,
    };
    let mut grads = policy.params().zero_grads();
    let loss = segment_loss_and_grads(policy, &inputs, &mut grads)?;
    Ok(StepResult { loss, grads, conditioned })
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(tensor, index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares analytic gradients against central differences for
/// `per_tensor` random entries of every tensor. Birdviews and target speeds
/// are frozen at their values from the unperturbed pass, matching the
/// constant treatment they get in the analytic gradient.
pub fn gradcheck<R: Rng + ?Sized>(
    policy: &Policy,
    inp: &SegmentInputs<'_>,
    step: f64,
    per_tensor: usize,
    rng: &mut R,
) -> Result<GradcheckReport> {
    let mut grads = policy.params().zero_grads();
    let (_, frozen) = evaluate(policy, inp, None, Some(&mut grads))?;
    let mut probe = policy.clone();
    let mut report = GradcheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    let tensors: Vec<_> = policy.params().iter().map(|(id, name, t)| (id, name.to_string(), t.numel())).collect();
    for (id, name, numel) in tensors {
        for _ in 0..per_tensor.min(numel) {
            let k = rng.gen_range(0..numel);
            let base = policy.params().get(id).data[k];
            probe.params_mut().get_mut(id).data[k] = base + step;
            let up = evaluate(&probe, inp, Some(&frozen), None)?.0.loss;
            probe.params_mut().get_mut(id).data[k] = base - step;
            let down = evaluate(&probe, inp, Some(&frozen), None)?.0.loss;
            probe.params_mut().get_mut(id).data[k] = base;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(id)[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((name.clone(), k, analytic, numeric));
                }
            }
        }
    }
    Ok(report)
}

/// One line of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub kl_weight: f64,
    pub grad_norm: f64,
    pub conditioned: usize,
    pub unconditioned: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub steps: usize,
    pub checkpoints: Vec<PathBuf>,
    pub history: Vec<MetricsRecord>,
}

/// A training window with the agent it trains and that agent's conditions.
#[derive(Debug, Clone)]
pub struct Example {
    pub segment: TrajectorySegment,
    pub ego: usize,
}

fn segment_id(seg: &TrajectorySegment) -> String {
    format!("{}@{:.1}s", seg.location, seg.start_time)
}

fn kl_weight(step: usize, total: usize, fraction: f64) -> f64 {
    let warm = (fraction * total as f64).round() as usize;
    if warm == 0 {
        1.0
    } else {
        ((step + 1) as f64 / warm as f64).min(1.0)
    }
}

/// Mean loss over windows with fixed noise and full conditioning.
pub fn validation_loss(policy: &Policy, data: &Dataset, windows: &[Example], config: &TrainConfig) -> Result<f64> {
    if windows.is_empty() {
        return Ok(f64::NAN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_da7a);
    let mut total = 0.0;
    for ex in windows {
        let map = data.map_for(&ex.segment)?;
        let track = ex.segment.track(ex.ego);
        let conds = config.strategy.conditions(&track, &config.sampler, config.use_waypoints, config.use_speeds, &mut rng);
        let eps: Vec<Vec<f64>> = (1..ex.segment.len()).map(|_| policy.draw_eps(&mut rng)).collect();
        let inp = SegmentInputs {
            segment: &ex.segment,
            map,
            ego: ex.ego,
            conditions: &conds,
            eps: &eps,
            kl_weight: 1.0,
            noise: config.noise,
            reach: config.reach,
        };
        total += segment_loss(policy, &inp)
            .map_err(|e| Error::Divergence(format!("validation segment {}: {e}", segment_id(&ex.segment))))?
            .loss;
    }
    Ok(total / windows.len() as f64)
}

/// Fixed-ego validation windows: the first ego candidate of evenly spaced
/// segments.
pub fn validation_windows(data: &Dataset, config: &TrainConfig) -> Vec<Example> {
    let segs = data.segments(config.segment_len, config.stride);
    let n = config.validation_segments.min(segs.len());
    if n == 0 {
        return vec![];
    }
    let every = segs.len() / n;
    segs.into_iter()
        .step_by(every.max(1))
        .take(n)
        .filter_map(|s| s.ego_candidates().first().copied().map(|ego| Example { segment: s, ego }))
        .collect()
}

fn save_checkpoint(policy: &Policy, step: usize, config: &TrainConfig, rng: &ChaCha8Rng, out: &Path) -> Result<PathBuf> {
    let mut ck = Checkpoint::new(policy.clone(), step as u64);
    ck.train_config = Some(serde_json::to_value(config)?);
    ck.rng_state = Some(serde_json::to_value(rng)?);
    let path = out.join(format!("ckpt_{step}.bin"));
    ck.save(&path)?;
    Ok(path)
}

/// Trains a fresh policy on `train`, scoring `validation` at every
/// checkpoint. Writes `ckpt_{step}.bin` files and `metrics.jsonl` to `out`.
pub fn train(train: &Dataset, validation: Option<&Dataset>, config: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let policy = Policy::new(config.arch.clone(), &mut rng)?;
    train_from(policy, train, validation, config, out, rng)
}

fn train_from(
    mut policy: Policy,
    train: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
    out: &Path,
    mut rng: ChaCha8Rng,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let segments: Vec<TrajectorySegment> = train
        .segments(config.segment_len, config.stride)
        .into_iter()
        .filter(|s| !s.ego_candidates().is_empty())
        .collect();
    if segments.is_empty() {
        return Err(Error::Config(format!(
            "no training windows of {} states with a fully present agent",
            config.segment_len
        )));
    }
    let val_windows = validation.map(|v| validation_windows(v, config)).unwrap_or_default();
    let batches_per_epoch = segments.len().div_ceil(config.batch_size);
    let planned = (batches_per_epoch * config.epochs).min(config.max_steps.unwrap_or(usize::MAX));

    let metrics_path = out.join("metrics.jsonl");
    let mut log = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut checkpoints = vec![save_checkpoint(&policy, 0, config, &rng, out)?];
    let mut history = Vec::new();
    let mut adam = Adam::new(config.learning_rate);
    let mut step = 0;
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..segments.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            if step >= planned {
                break 'epochs;
            }
            let weight = kl_weight(step, planned, config.kl_warmup_fraction);
            let mut grads = policy.params().zero_grads();
            let mut rec = MetricsRecord {
                step: step + 1,
                epoch,
                loss: 0.0,
                recon: 0.0,
                kl: 0.0,
                kl_weight: weight,
                grad_norm: 0.0,
                conditioned: 0,
                unconditioned: 0,
                val_loss: None,
            };
            for &idx in batch {
                let seg = &segments[idx];
                let candidates = seg.ego_candidates();
                let ego = candidates[(epoch + idx) % candidates.len()];
                let map = train.map_for(seg)?;
                let track = seg.track(ego);
                let conds =
                    config.strategy.conditions(&track, &config.sampler, config.use_waypoints, config.use_speeds, &mut rng);
                let res = conditional_training_step(&policy, seg, map, ego, &conds, config, weight, &mut rng)
                    .map_err(|e| match e {
                        Error::Divergence(m) | Error::NumericDomain(m) => {
                            Error::Divergence(format!("segment {} ego {}: {m}", segment_id(seg), seg.agent_ids[ego]))
                        }
                        other => other,
                    })?;
                grads.add_scaled(&res.grads, 1.0 / batch.len() as f64);
                let n = batch.len() as f64;
                rec.loss += res.loss.loss / n;
                rec.recon += res.loss.recon / n;
                rec.kl += res.loss.kl / n;
                if res.conditioned {
                    rec.conditioned += 1;
                } else {
                    rec.unconditioned += 1;
                }
            }
            rec.grad_norm = adam.update(policy.params_mut(), &grads);
            if !policy.params().all_finite() {
                return Err(Error::Divergence(format!("parameters became non-finite at step {}", step + 1)));
            }
            step += 1;
            let last = step == planned;
            if step % config.checkpoint_every == 0 || last {
                if !val_windows.is_empty() {
                    rec.val_loss = Some(validation_loss(&policy, validation.expect("windows imply data"), &val_windows, config)?);
                }
                checkpoints.push(save_checkpoint(&policy, step, config, &rng, out)?);
            }
            serde_json::to_writer(&mut log, &rec)?;
            log.write_all(b"\n").map_err(|e| Error::io(&metrics_path, e))?;
            log::info!("step {step}/{planned} loss {:.4} kl {:.4}", rec.loss, rec.kl);
            history.push(rec);
        }
    }
    Ok(TrainOutcome { policy, steps: step, checkpoints, history })
}
