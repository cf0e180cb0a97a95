//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! The two trained models are cached under the cargo target directory,
//! keyed by a hash of the data and training configs. Set
//! `STEERDRIVE_ACCEPTANCE_FRESH=1` to retrain, and
//! `STEERDRIVE_ACCEPTANCE_STRICT=1` to exit non-zero when a criterion fails.

use std::fs;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steerdrive::checkpoint::Checkpoint;
use steerdrive::conditioning::{
    sample_target_speeds_temporal, sample_waypoints_with_radii, AgentConditions, ConditionKind, ReachParams,
    SamplerConfig, TargetSpeed, Waypoint,
};
use steerdrive::data::{generate_synthetic, Dataset, SyntheticConfig};
use steerdrive::evaluation::{eval_windows, evaluate_windows, ConditionMode, EvalConfig, EvalWindow};
use steerdrive::kinematics;
use steerdrive::metrics::{build_report, displacement_metrics, ReportRow};
use steerdrive::nn::StateNoise;
use steerdrive::policy::{Architecture, LatentSource, Policy};
use steerdrive::raster::{render, SceneView};
use steerdrive::scene::{Action, AgentGeometry, AgentState, MapMesh, TrajectorySegment, ACCEL_MAX, STEER_MAX};
use steerdrive::simulation::{rollout, RolloutConfig, RolloutMode};
use steerdrive::training::{gradcheck, train, ConditionStrategy, SegmentInputs, TrainConfig};

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(name: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { name, pass, detail }
}

fn main() -> ExitCode {
    let checks: Vec<(&str, fn() -> Verdict)> = vec![
        ("gradient correctness", gradient_correctness),
        ("kinematics fidelity", kinematics_fidelity),
        ("sampler invariants", sampler_invariants),
        ("scheduler oracle", scheduler_oracle),
        ("metric oracles", metric_oracles),
        ("film identity", film_identity),
    ];
    let mut verdicts = Vec::new();
    for (name, check) in checks {
        let v = run_guarded(name, check);
        report(&v);
        verdicts.push(v);
    }
    verdicts.extend(trained_criteria());
    let v = run_guarded("determinism", determinism);
    report(&v);
    verdicts.push(v);
    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!("acceptance: {passed}/{} criteria passed", verdicts.len());
    let strict = std::env::var("STEERDRIVE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < verdicts.len() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn report(v: &Verdict) {
    println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
}

fn run_guarded(name: &'static str, check: fn() -> Verdict) -> Verdict {
    match std::panic::catch_unwind(check) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(name, false, format!("panicked: {msg}"))
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient correctness

fn plaza(half_x: f64, half_y: f64) -> MapMesh {
    MapMesh {
        triangles: vec![
            [-half_x, -half_y, half_x, -half_y, half_x, half_y],
            [-half_x, -half_y, half_x, half_y, -half_x, half_y],
        ],
        ..Default::default()
    }
}

fn two_agent_segment(steps: usize) -> TrajectorySegment {
    let g = AgentGeometry { length: 4.5, width: 1.9 };
    let mut rows = vec![vec![AgentState::new(0.0, -1.5, 0.05, 6.0), AgentState::new(8.0, 2.0, -0.1, 5.0)]];
    for t in 0..steps - 1 {
        let prev = rows.last().unwrap().clone();
        let acts = [Action::new(0.8, 0.05 * (t as f64 * 0.7).sin()), Action::new(-0.5, -0.03)];
        rows.push(prev.iter().zip(acts).map(|(s, a)| kinematics::step(s, &a, 0.1, &g).unwrap()).collect());
    }
    TrajectorySegment {
        location: "toy".into(),
        dt: 0.1,
        start_time: 0.0,
        present: vec![vec![true, true]; steps],
        states: rows,
        geometries: vec![g, g],
        agent_ids: vec!["a".into(), "b".into()],
    }
}

/// A small policy whose FiLM generators are moved off their zero init.
fn awake_policy(arch: Architecture, seed: u64) -> Policy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Policy::new(arch, &mut rng).unwrap();
    let film: Vec<(String, usize)> = p
        .params()
        .iter()
        .filter(|(_, n, _)| n.starts_with("film"))
        .map(|(_, n, t)| (n.to_string(), t.numel()))
        .collect();
    assert!(!film.is_empty(), "policy has no FiLM tensors");
    for (name, n) in film {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.2..0.2)).collect();
        p.params_mut().set(&name, &v).unwrap();
    }
    p
}

fn gradient_correctness() -> Verdict {
    let started = Instant::now();
    let seg = two_agent_segment(5);
    let map = plaza(100.0, 20.0);
    let policy = awake_policy(Architecture::small(16), 1);
    let end = seg.states[4][0];
    let conds = AgentConditions::new(vec![Waypoint::new(end.x, end.y + 1.0)], vec![TargetSpeed::new(7.0).unwrap()]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eps: Vec<Vec<f64>> = (0..4).map(|_| policy.draw_eps(&mut rng)).collect();
    let inp = SegmentInputs {
        segment: &seg,
        map: &map,
        ego: 0,
        conditions: &conds,
        eps: &eps,
        kl_weight: 1.0,
        noise: StateNoise::default(),
        reach: ReachParams::default(),
    };
    let report = gradcheck(&policy, &inp, 1e-5, 8, &mut rng).unwrap();
    let secs = started.elapsed().as_secs_f64();
    verdict(
        "gradient correctness",
        report.max_rel_error < 1e-3 && secs < 60.0 && report.checked > 0,
        format!(
            "max relative error {:.2e} over {} entries with central step 1e-5 (< 1e-3), {:.1} s (< 60 s)",
            report.max_rel_error, report.checked, secs
        ),
    )
}

// ---------------------------------------------------------------------------
// Kinematics fidelity

/// Algebraic least-squares circle fit; returns centre and radius.
fn fit_circle(points: &[[f64; 2]]) -> ([f64; 2], f64) {
    let n = points.len() as f64;
    let (mx, my) = (
        points.iter().map(|p| p[0]).sum::<f64>() / n,
        points.iter().map(|p| p[1]).sum::<f64>() / n,
    );
    let (mut suu, mut svv, mut suv, mut suuu, mut svvv, mut suvv, mut svuu) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for p in points {
        let (u, v) = (p[0] - mx, p[1] - my);
        suu += u * u;
        svv += v * v;
        suv += u * v;
        suuu += u * u * u;
        svvv += v * v * v;
        suvv += u * v * v;
        svuu += v * u * u;
    }
    let (b1, b2) = (0.5 * (suuu + suvv), 0.5 * (svvv + svuu));
    let det = suu * svv - suv * suv;
    let uc = (b1 * svv - b2 * suv) / det;
    let vc = (suu * b2 - suv * b1) / det;
    let r = (uc * uc + vc * vc + (suu + svv) / n).sqrt();
    ([uc + mx, vc + my], r)
}

fn kinematics_fidelity() -> Verdict {
    let geom = AgentGeometry::default();
    let mut worst_circle: f64 = 0.0;
    for (v, steer) in [(5.0, 0.3), (12.0, -0.15), (2.0, 0.7)] {
        let slip = (0.5 * f64::tan(steer)).atan();
        let continuous = (geom.length / 2.0) / slip.sin().abs();
        let period = 2.0 * std::f64::consts::PI * continuous / v;
        let steps = (period / 0.01).ceil() as usize;
        let mut s = AgentState::new(3.0, -4.0, 0.4, v);
        let mut pts = vec![s.position()];
        for _ in 0..steps {
            s = kinematics::step(&s, &Action::new(0.0, steer), 0.01, &geom).unwrap();
            pts.push(s.position());
        }
        let (_, r) = fit_circle(&pts);
        worst_circle = worst_circle.max((r - continuous).abs() / continuous);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_inverse: f64 = 0.0;
    let mut approximate = 0;
    for _ in 0..1000 {
        let s = AgentState::new(
            rng.gen_range(-200.0..200.0),
            rng.gen_range(-200.0..200.0),
            rng.gen_range(-3.1..3.1),
            rng.gen_range(1.0..30.0),
        );
        let a = Action::new(rng.gen_range(-ACCEL_MAX..ACCEL_MAX), rng.gen_range(-STEER_MAX..STEER_MAX));
        let next = kinematics::step(&s, &a, 0.1, &geom).unwrap();
        let back = kinematics::inverse(&s, &next, 0.1, &geom).unwrap();
        approximate += back.approximate as usize;
        worst_inverse = worst_inverse.max((back.action.accel - a.accel).abs()).max((back.action.steer - a.steer).abs());
    }
    verdict(
        "kinematics fidelity",
        worst_circle < 0.01 && worst_inverse < 1e-6 && approximate == 0,
        format!(
            "circle radius error {:.2e} (< 1%), round-trip error {:.2e} over 1000 actions (< 1e-6), {approximate} approximate",
            worst_circle, worst_inverse
        ),
    )
}

// ---------------------------------------------------------------------------
// Sampler invariants

fn random_track<R: Rng>(rng: &mut R) -> Vec<AgentState> {
    let len = rng.gen_range(1..=120);
    let geom = AgentGeometry::default();
    let kind = rng.gen_range(0..4);
    let mut s = AgentState::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-3.0..3.0), 0.0);
    s.v = match kind {
        0 => 0.0,
        _ => rng.gen_range(0.0..30.0),
    };
    let mut track = vec![s];
    let stop_at = rng.gen_range(0..len.max(1));
    for t in 1..len {
        let a = if kind == 0 {
            Action::new(0.0, 0.0)
        } else if kind == 1 && t >= stop_at {
            Action::new(-ACCEL_MAX, 0.0)
        } else {
            Action::new(rng.gen_range(-3.0..3.0), rng.gen_range(-0.3..0.3))
        };
        let mut next = kinematics::step(&s, &a, 0.1, &geom).unwrap();
        next.v = next.v.min(30.0);
        track.push(next);
        s = next;
    }
    track
}

fn sampler_invariants() -> Verdict {
    let cfg = SamplerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut problems: Vec<String> = Vec::new();
    let mut stationary = 0;
    for i in 0..1000 {
        let track = random_track(&mut rng);
        let still = track.iter().all(|s| s.distance_to(track[0].position()) == 0.0);
        stationary += still as usize;
        let max_conditions = if still { 1_000_000 } else { cfg.max_conditions };
        let mut draw_rng = ChaCha8Rng::seed_from_u64(i);
        let wps = sample_waypoints_with_radii(&track, max_conditions, || draw_rng.gen_range(cfg.d_min..=cfg.d_max));
        let mut anchor = 0;
        let mut prev: Option<usize> = None;
        for (w, d_r) in &wps {
            if prev.is_some_and(|p| w.step <= p) {
                problems.push(format!("track {i}: waypoint steps not increasing"));
            }
            let at = track[w.step];
            if w.value.position() != at.position() {
                problems.push(format!("track {i}: waypoint off track"));
            }
            let disp = at.distance_to(track[anchor].position());
            if !(disp <= *d_r && *d_r <= cfg.d_max && *d_r >= cfg.d_min) {
                problems.push(format!("track {i}: displacement {disp} vs d_r {d_r}"));
            }
            anchor = w.step.max(anchor + 1);
            prev = Some(w.step);
        }
        if wps.len() > cfg.max_conditions || (still && wps.len() != 1) {
            problems.push(format!("track {i}: {} waypoints", wps.len()));
        }
        let speeds = sample_target_speeds_temporal(&track, cfg.dt_min, cfg.dt_max, cfg.max_conditions, &mut rng);
        let mut prev = 0;
        for (k, s) in speeds.iter().enumerate() {
            if (k > 0 && s.step <= prev) || s.step - prev > cfg.dt_max || s.step >= track.len() {
                problems.push(format!("track {i}: speed steps {prev} -> {}", s.step));
            }
            if s.value.value() != track[s.step].v.max(0.0) {
                problems.push(format!("track {i}: speed off track"));
            }
            prev = s.step;
        }
        if speeds.len() > cfg.max_conditions {
            problems.push(format!("track {i}: {} speeds", speeds.len()));
        }
    }
    verdict(
        "sampler invariants",
        problems.is_empty() && stationary > 0,
        if problems.is_empty() {
            format!("1000 tracks ({stationary} stationary) satisfy ordering, on-track, radius, gap and length bounds")
        } else {
            format!("{} violations, first: {}", problems.len(), problems[0])
        },
    )
}

// ---------------------------------------------------------------------------
// Scheduler oracle

/// Steps at which each condition in `targets` is reached when they are
/// presented one at a time, scanning states 1.. in order.
fn greedy_scan<T>(track: &[AgentState], targets: &[T], reached: impl Fn(&AgentState, &T) -> bool) -> Vec<usize> {
    let mut hits = Vec::new();
    let mut from = 1;
    for target in targets {
        match (from..track.len()).find(|&t| reached(&track[t], target)) {
            Some(t) => {
                hits.push(t);
                from = t + 1;
            }
            None => break,
        }
    }
    hits
}

fn cursor_history(hits: &[usize], len: usize) -> Vec<usize> {
    (0..len).map(|t| hits.iter().filter(|&&h| h <= t).count()).collect()
}

fn scheduler_oracle() -> Verdict {
    let reach = ReachParams::default();
    let map = Arc::new(plaza(400.0, 400.0));
    let geom = AgentGeometry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut mismatches = Vec::new();
    let mut reached_total = 0;
    for case in 0..100 {
        let agents = rng.gen_range(1..=3);
        let len = rng.gen_range(10..=60);
        let mut rows = vec![(0..agents)
            .map(|i| AgentState::new(i as f64 * 30.0, rng.gen_range(-5.0..5.0), rng.gen_range(-0.5..0.5), rng.gen_range(0.0..15.0)))
            .collect::<Vec<_>>()];
        for _ in 1..len {
            let prev = rows.last().unwrap().clone();
            rows.push(
                prev.iter()
                    .map(|s| kinematics::step(s, &Action::new(rng.gen_range(-3.0..3.0), rng.gen_range(-0.2..0.2)), 0.1, &geom).unwrap())
                    .collect(),
            );
        }
        let seg = TrajectorySegment {
            location: "plaza".into(),
            dt: 0.1,
            start_time: 0.0,
            present: vec![vec![true; agents]; len],
            states: rows,
            geometries: vec![geom; agents],
            agent_ids: (0..agents).map(|i| format!("a{i}")).collect(),
        };
        let conditions: Vec<AgentConditions> = (0..agents)
            .map(|i| {
                let track = seg.track(i);
                let mut wps = Vec::new();
                let mut sps = Vec::new();
                for _ in 0..rng.gen_range(0..6) {
                    let p = track[rng.gen_range(0..len)];
                    wps.push(Waypoint::new(p.x + rng.gen_range(-2.5..2.5), p.y + rng.gen_range(-2.5..2.5)));
                }
                for _ in 0..rng.gen_range(0..6) {
                    let v = track[rng.gen_range(0..len)].v + rng.gen_range(-1.5..1.5);
                    sps.push(TargetSpeed::new(v.max(0.0)).unwrap());
                }
                AgentConditions::new(wps, sps)
            })
            .collect();
        let record = rollout(map.clone(), &seg, None, conditions.clone(), &RolloutConfig::new(RolloutMode::Replay, len - 1, case)).unwrap();
        for (i, c) in conditions.iter().enumerate() {
            let track = seg.track(i);
            for kind in [ConditionKind::Waypoint, ConditionKind::TargetSpeed] {
                let expected = match kind {
                    ConditionKind::Waypoint => greedy_scan(&track, &c.waypoints, |s, w| (s.x - w.x).hypot(s.y - w.y) <= reach.radius),
                    ConditionKind::TargetSpeed => greedy_scan(&track, &c.target_speeds, |s, ts| (s.v - ts.value()).abs() <= reach.speed_tol),
                };
                let got: Vec<usize> = record
                    .condition_events
                    .iter()
                    .filter(|e| e.agent == i && e.kind == kind)
                    .map(|e| e.step)
                    .collect();
                reached_total += got.len();
                if cursor_history(&got, len) != cursor_history(&expected, len) {
                    mismatches.push(format!("case {case} agent {i} {kind:?}: {got:?} vs {expected:?}"));
                }
            }
        }
    }

    let at_origin = AgentState::new(0.0, 0.0, 0.0, 10.0);
    let mut edge = AgentConditions::new(vec![Waypoint::new(2.0, 0.0)], vec![TargetSpeed::new(11.0).unwrap()]);
    let boundary = edge.advance(&at_origin, &reach).len() == 2;
    let mut beyond = AgentConditions::new(vec![Waypoint::new(2.0 + 1e-9, 0.0)], vec![TargetSpeed::new(11.0 + 1e-9).unwrap()]);
    let outside = beyond.advance(&at_origin, &reach).is_empty();

    verdict(
        "scheduler oracle",
        mismatches.is_empty() && boundary && outside && reached_total > 0,
        if mismatches.is_empty() {
            format!(
                "100 replayed trajectories match the greedy scan ({reached_total} reaches); distance exactly R and |dv| exactly eps reached: {boundary}, just beyond rejected: {outside}"
            )
        } else {
            format!("{} mismatches, first: {}", mismatches.len(), mismatches[0])
        },
    )
}

// ---------------------------------------------------------------------------
// Metric oracles

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    let mut miss_mismatch = 0;
    for _ in 0..100 {
        let k = rng.gen_range(1..=8);
        let t = rng.gen_range(1..=60);
        let gt: Vec<[f64; 2]> = (0..t).map(|_| [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)]).collect();
        let samples: Vec<Vec<[f64; 2]>> = (0..k)
            .map(|_| gt.iter().map(|p| [p[0] + rng.gen_range(-3.0..3.0), p[1] + rng.gen_range(-3.0..3.0)]).collect())
            .collect();
        let m = displacement_metrics(&samples, &gt).unwrap();

        let err = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let mut total = 0.0;
        let mut min_ade = f64::MAX;
        let mut fde_sum = 0.0;
        let mut min_fde = f64::MAX;
        let mut misses = Vec::new();
        for s in &samples {
            let mut sum = 0.0;
            let mut missed = false;
            for j in 0..t {
                let e = err(s[j], gt[j]);
                sum += e;
                missed |= e > 2.0;
            }
            total += sum;
            min_ade = min_ade.min(sum / t as f64);
            let f = err(s[t - 1], gt[t - 1]);
            fde_sum += f;
            min_fde = min_fde.min(f);
            misses.push(missed);
        }
        let mut mfd: f64 = 0.0;
        for a in &samples {
            for b in &samples {
                mfd = mfd.max(err(a[t - 1], b[t - 1]));
            }
        }
        let oracle = [total / (k * t) as f64, min_ade, fde_sum / k as f64, min_fde, mfd];
        let got = [m.ade, m.min_ade, m.fde, m.min_fde, m.mfd];
        for (o, g) in oracle.iter().zip(got) {
            worst = worst.max((o - g).abs());
        }
        miss_mismatch += (misses != m.misses) as usize;
    }

    let gt = vec![[0.0, 0.0], [1.0, 1.0]];
    let on_edge = displacement_metrics(&[vec![[2.0, 0.0], [1.0, -1.0]]], &gt).unwrap();
    let edge_ok = on_edge.misses == [false];
    let single = displacement_metrics(&[vec![[0.5, 0.0], [3.0, 1.0]]], &gt).unwrap();
    let single_ok = single.min_ade == single.ade && single.min_fde == single.fde && single.mfd == 0.0;
    verdict(
        "metric oracles",
        worst <= 1e-9 && miss_mismatch == 0 && edge_ok && single_ok,
        format!(
            "max deviation {worst:.1e} over 100 instances (<= 1e-9), miss flag mismatches {miss_mismatch}, 2.0 m not a miss: {edge_ok}, K=1 min equals mean and MFD 0: {single_ok}"
        ),
    )
}

// ---------------------------------------------------------------------------
// FiLM identity

fn film_identity() -> Verdict {
    let mut differing = 0;
    let mut compared = 0;
    for arch in [Architecture::small(16), Architecture::default()] {
        let with = awake_policy(arch, 31);
        let without = with.without_film();
        let seg = two_agent_segment(3);
        let map = plaza(100.0, 20.0);
        let phases = map.light_phases(0.0);
        let view = SceneView {
            states: &seg.states[0],
            present: &seg.present[0],
            geometries: &seg.geometries,
            map: &map,
            light_phases: &phases,
        };
        let raster = render(&with.arch().raster_config(), &view, 0, Some([10.0, 1.0]), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let h: Vec<f64> = (0..with.arch().hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let latent = LatentSource::Prior { eps: with.draw_eps(&mut rng) };
            let speed = rng.gen_range(0.0..20.0);
            let a = with.step_values(&raster, speed, &h, None, &latent).unwrap();
            let b = without.step_values(&raster, speed, &h, None, &latent).unwrap();
            let bits = |o: &steerdrive::policy::PolicyOutput| -> Vec<u64> {
                [o.action.accel, o.action.steer].iter().chain(&o.h_next).chain(&o.z).map(|x| x.to_bits()).collect()
            };
            compared += 1;
            differing += (bits(&a) != bits(&b)) as usize;
        }

        let data = generate_synthetic(&SyntheticConfig { scenes: 1, episode_length: 4.0, seed: 4, ..Default::default() }).unwrap();
        let scene = data.segments(20, 20).into_iter().next().unwrap();
        let map = Arc::new(data.map_for(&scene).unwrap().clone());
        let conds: Vec<AgentConditions> = (0..scene.num_agents())
            .map(|i| {
                let last = scene.states[scene.len() - 1][i];
                AgentConditions::new(vec![Waypoint::new(last.x, last.y)], vec![])
            })
            .collect();
        let cfg = RolloutConfig::new(RolloutMode::Autonomous, 19, 8);
        let ra = rollout(map.clone(), &scene, Some(&with), conds.clone(), &cfg).unwrap();
        let rb = rollout(map, &scene, Some(&without), conds, &cfg).unwrap();
        compared += 1;
        differing += (ra != rb) as usize;
    }
    verdict(
        "film identity",
        differing == 0,
        format!("{differing} of {compared} unconditioned step outputs and rollouts differ from the FiLM-free policy"),
    )
}

// ---------------------------------------------------------------------------
// Determinism

fn cli(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_steerdrive")).args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = |rel: &str| dir.path().join(rel);
    cli(&["generate-data", "--seed", "3", "--scenes", "4", "--out", s(&d("data"))]);
    let train_cfg = TrainConfig {
        segment_len: 20,
        batch_size: 4,
        max_steps: Some(4),
        checkpoint_every: 2,
        validation_segments: 4,
        arch: Architecture::small(16),
        seed: 5,
        ..Default::default()
    };
    fs::write(d("train.json"), serde_json::to_string(&train_cfg).unwrap()).unwrap();
    let mut same = Vec::new();
    for run in ["a", "b"] {
        cli(&["train", "--data", s(&d("data")), "--config", s(&d("train.json")), "--out", s(&d(&format!("train_{run}")))]);
    }
    for f in ["metrics.jsonl", "ckpt_2.bin", "ckpt_4.bin"] {
        same.push((format!("train {f}"), fs::read(d("train_a").join(f)).unwrap() == fs::read(d("train_b").join(f)).unwrap()));
    }
    let ckpt = d("train_a/ckpt_4.bin");
    for run in ["a", "b"] {
        cli(&[
            "eval", "--ckpt", s(&ckpt), "--data", s(&d("data")), "--samples", "3", "--horizon", "20", "--conditions",
            "none,w+ts", "--max-segments", "4", "--seed", "9", "--report", s(&d(&format!("eval_{run}.json"))),
        ]);
    }
    same.push(("eval report".into(), fs::read(d("eval_a.json")).unwrap() == fs::read(d("eval_b.json")).unwrap()));
    let mut maps: Vec<PathBuf> = fs::read_dir(d("data/maps")).unwrap().map(|e| e.unwrap().path()).collect();
    maps.sort();
    for run in ["a", "b"] {
        cli(&[
            "rollout", "--ckpt", s(&ckpt), "--map", s(&maps[0]), "--seed", "2", "--agents", "4", "--steps", "30", "--out",
            s(&d(&format!("rollout_{run}.jsonl"))),
        ]);
    }
    same.push(("rollout".into(), fs::read(d("rollout_a.jsonl")).unwrap() == fs::read(d("rollout_b.jsonl")).unwrap()));

    let original = fs::read(&ckpt).unwrap();
    let loaded = Checkpoint::load(&ckpt).unwrap();
    loaded.save(&d("resaved.bin")).unwrap();
    let again = Checkpoint::load(&d("resaved.bin")).unwrap();
    again.save(&d("resaved2.bin")).unwrap();
    same.push((
        "checkpoint save/load/save".into(),
        original == fs::read(d("resaved.bin")).unwrap() && original == fs::read(d("resaved2.bin")).unwrap(),
    ));

    let broken: Vec<&str> = same.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.as_str()).collect();
    verdict(
        "determinism",
        broken.is_empty(),
        if broken.is_empty() {
            format!("{} artifacts byte-identical across repeated train, eval and rollout runs and save/load/save", same.len())
        } else {
            format!("differs: {}", broken.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------
// Trained-model criteria

fn train_data_config() -> SyntheticConfig {
    SyntheticConfig { scenes: 300, seed: 1, ..Default::default() }
}

fn heldout_data_config() -> SyntheticConfig {
    SyntheticConfig { scenes: 60, seed: 2, ..Default::default() }
}

fn train_config(strategy: ConditionStrategy) -> TrainConfig {
    TrainConfig { epochs: EPOCHS, strategy, checkpoint_every: 1000, validation_segments: 32, ..Default::default() }
}

const EPOCHS: usize = 6;
const HELDOUT_WINDOWS: usize = 200;

fn cache_dir() -> PathBuf {
    let key = serde_json::to_string(&(
        env!("CARGO_PKG_VERSION"),
        train_data_config(),
        heldout_data_config(),
        train_config(ConditionStrategy::Sampled),
        train_config(ConditionStrategy::LastTimestep),
    ))
    .unwrap();
    let hash = steerdrive::simulation::stable_hash(key.as_bytes());
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(format!("{hash:016x}"))
}

/// Trains (or loads from the cache) the model for `strategy`.
fn trained(strategy: ConditionStrategy, data: &Dataset, heldout: &Dataset) -> Policy {
    let name = match strategy {
        ConditionStrategy::Sampled => "sampled",
        ConditionStrategy::LastTimestep => "last-timestep",
        ConditionStrategy::None => "none",
    };
    let dir = cache_dir().join(name);
    let done = dir.join("final.bin");
    let fresh = std::env::var("STEERDRIVE_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1");
    if done.exists() && !fresh {
        println!("  using cached {name} model at {}", done.display());
        return Checkpoint::load(&done).unwrap().policy;
    }
    let started = Instant::now();
    let out = train(data, Some(heldout), &train_config(strategy), &dir).unwrap();
    Checkpoint::new(out.policy.clone(), out.steps as u64).save(&done).unwrap();
    println!("  trained {name} model: {} steps in {:.0} s", out.steps, started.elapsed().as_secs_f64());
    out.policy
}

fn eval_row(policy: &Policy, data: &Dataset, windows: &[EvalWindow], horizon: usize, mode: ConditionMode, strategy: ConditionStrategy, model: &str) -> ReportRow {
    let cfg = EvalConfig { horizon, conditions: mode, strategy, model: model.into(), ..Default::default() };
    let group = evaluate_windows(policy, data, windows, &cfg).unwrap();
    build_report(&[group]).rows.remove(0)
}

fn pct(x: Option<f64>) -> f64 {
    100.0 * x.unwrap_or(f64::NAN)
}

fn trained_criteria() -> Vec<Verdict> {
    let setup = std::panic::catch_unwind(|| {
        let data = generate_synthetic(&train_data_config()).unwrap();
        let heldout = generate_synthetic(&heldout_data_config()).unwrap();
        let segments = data.segments(train_config(ConditionStrategy::Sampled).segment_len, 10).len();
        println!("  training data: {segments} segments of {} states", train_config(ConditionStrategy::Sampled).segment_len);
        (data, heldout, segments)
    });
    let (data, heldout, segments) = match setup {
        Ok(x) => x,
        Err(_) => {
            let failed = vec![
                verdict("conditioning effectiveness", false, "data generation panicked".into()),
                verdict("horizon generalization", false, "data generation panicked".into()),
            ];
            failed.iter().for_each(report);
            return failed;
        }
    };
    let sampled = match std::panic::catch_unwind(AssertUnwindSafe(|| trained(ConditionStrategy::Sampled, &data, &heldout))) {
        Ok(p) => p,
        Err(_) => {
            let failed = vec![
                verdict("conditioning effectiveness", false, "training the sampled model panicked".into()),
                verdict("horizon generalization", false, "training the sampled model panicked".into()),
            ];
            failed.iter().for_each(report);
            return failed;
        }
    };

    let effectiveness = run_guarded_with("conditioning effectiveness", AssertUnwindSafe(|| {
        let windows = eval_windows(&heldout, 40, 10, Some(HELDOUT_WINDOWS)).unwrap();
        let none = eval_row(&sampled, &heldout, &windows, 40, ConditionMode::None, ConditionStrategy::Sampled, "sampled");
        let both = eval_row(&sampled, &heldout, &windows, 40, ConditionMode::Both, ConditionStrategy::Sampled, "sampled");
        let dw = pct(both.waypoint_reach_rate) - pct(none.waypoint_reach_rate);
        let dts = pct(both.target_speed_reach_rate) - pct(none.target_speed_reach_rate);
        let dc = 100.0 * (both.collision_rate - none.collision_rate);
        verdict(
            "conditioning effectiveness",
            segments >= 5000 && windows.len() == HELDOUT_WINDOWS && dw >= 10.0 && dts >= 5.0 && dc <= 1.0,
            format!(
                "{} held-out windows, {segments} training segments; waypoint reach {:.3} -> {:.3} ({dw:+.1} pts, need >= +10), target-speed reach {:.3} -> {:.3} ({dts:+.1} pts, need >= +5), collision {:.3} -> {:.3} ({dc:+.1} pts, need <= +1)",
                windows.len(),
                none.waypoint_reach_rate.unwrap_or(f64::NAN),
                both.waypoint_reach_rate.unwrap_or(f64::NAN),
                none.target_speed_reach_rate.unwrap_or(f64::NAN),
                both.target_speed_reach_rate.unwrap_or(f64::NAN),
                none.collision_rate,
                both.collision_rate,
            ),
        )
    }));
    report(&effectiveness);

    let generalization = run_guarded_with("horizon generalization", AssertUnwindSafe(|| {
        let last = trained(ConditionStrategy::LastTimestep, &data, &heldout);
        let windows = eval_windows(&heldout, 80, 10, Some(HELDOUT_WINDOWS)).unwrap();
        let a = eval_row(&sampled, &heldout, &windows, 80, ConditionMode::Both, ConditionStrategy::LastTimestep, "sampled");
        let b = eval_row(&last, &heldout, &windows, 80, ConditionMode::Both, ConditionStrategy::LastTimestep, "last-timestep");
        verdict(
            "horizon generalization",
            a.collision_rate < b.collision_rate && a.fde <= b.fde,
            format!(
                "{} windows at 80 steps; collision sampled {:.3} vs last-timestep {:.3} (need strictly lower), FDE {:.2} vs {:.2} m (need no worse)",
                windows.len(),
                a.collision_rate,
                b.collision_rate,
                a.fde,
                b.fde
            ),
        )
    }));
    report(&generalization);
    vec![effectiveness, generalization]
}

fn run_guarded_with(name: &'static str, check: impl FnOnce() -> Verdict + std::panic::UnwindSafe) -> Verdict {
    std::panic::catch_unwind(check).unwrap_or_else(|_| verdict(name, false, "panicked".into()))
}
