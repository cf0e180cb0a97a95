//! Kinematic bicycle model referenced at the geometric center.
//!
//! Heading and speed advance with the forward-Euler update of the
//! center-referenced bicycle (`l_f = l_r = L/2`). Position moves along the
//! chord of the constant-curvature arc swept at the start-of-step speed,
//! which is the exact solution of the continuous model for a zero-order-held
//! action when acceleration is zero.

use crate::error::{Error, Result};
use crate::scene::{wrap_angle, Action, AgentGeometry, AgentState, STEER_MAX};

/// Jacobian of the transition: rows are `(x', y', psi', v')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepJacobian {
    pub d_state: [[f64; 4]; 4],
    pub d_action: [[f64; 2]; 4],
}

fn sinc_and_derivative(h: f64) -> (f64, f64) {
    if h.abs() < 1e-4 {
        let h2 = h * h;
        (1.0 - h2 / 6.0 + h2 * h2 / 120.0, -h / 3.0 + h * h2 / 30.0)
    } else {
        let (s, c) = h.sin_cos();
        (s / h, (h * c - s) / (h * h))
    }
}

fn check_inputs(state: &AgentState, action: &Action, dt: f64, length: f64) -> Result<()> {
    if !state.is_finite() || !action.accel.is_finite() || !action.steer.is_finite() {
        return Err(Error::NumericDomain(format!(
            "non-finite kinematic input: {state:?} {action:?}"
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::Validation(format!("dt must be positive, got {dt}")));
    }
    if !(length > 0.0) {
        return Err(Error::Validation(format!("length must be positive, got {length}")));
    }
    Ok(())
}

/// Slip angle at the geometric center for a front-wheel angle.
pub fn slip_angle(steer: f64) -> f64 {
    (0.5 * steer.tan()).atan()
}

/// Advances one agent by `dt` seconds. Actions are clamped to bounds first.
pub fn step(state: &AgentState, action: &Action, dt: f64, geom: &AgentGeometry) -> Result<AgentState> {
    check_inputs(state, action, dt, geom.length)?;
    Ok(transition(state, &action.clamped(), dt, geom.length))
}

fn transition(s: &AgentState, a: &Action, dt: f64, length: f64) -> AgentState {
    let slip = slip_angle(a.steer);
    let dpsi = s.v * slip.sin() * dt / (0.5 * length);
    let half = 0.5 * dpsi;
    let (c, _) = sinc_and_derivative(half);
    let chord = s.v * dt * c;
    let theta = s.psi + slip + half;
    AgentState {
        x: s.x + chord * theta.cos(),
        y: s.y + chord * theta.sin(),
        psi: wrap_angle(s.psi + dpsi),
        v: (s.v + a.accel * dt).max(0.0),
    }
}

/// Transition plus its Jacobian with respect to state and raw (unclamped)
/// action. Clamped action components and the zero-speed floor have zero
/// derivative.
pub fn step_with_jacobian(
    s: &AgentState,
    action: &Action,
    dt: f64,
    length: f64,
) -> Result<(AgentState, StepJacobian)> {
    check_inputs(s, action, dt, length)?;
    let a = action.clamped();
    let next = transition(s, &a, dt, length);

    let slip = slip_angle(a.steer);
    let (ss, cs) = slip.sin_cos();
    let k = dt / (0.5 * length);
    let half = 0.5 * s.v * ss * k;
    let (c, dc) = sinc_and_derivative(half);
    let d = s.v * dt;
    let theta = s.psi + slip + half;
    let (st, ct) = theta.sin_cos();

    let mut ds = [[0.0; 4]; 4];
    ds[0][0] = 1.0;
    ds[1][1] = 1.0;
    ds[0][2] = -d * c * st;
    ds[1][2] = d * c * ct;
    ds[2][2] = 1.0;
    // d/dv: chord length and half-angle both scale with v.
    let dh_dv = 0.5 * ss * k;
    ds[0][3] = dt * c * ct + d * dc * dh_dv * ct - d * c * st * dh_dv;
    ds[1][3] = dt * c * st + d * dc * dh_dv * st + d * c * ct * dh_dv;
    ds[2][3] = ss * k;
    let speed_live = s.v + a.accel * dt > 0.0;
    ds[3][3] = if speed_live { 1.0 } else { 0.0 };

    let mut da = [[0.0; 2]; 4];
    if speed_live && action.accel.abs() <= crate::scene::ACCEL_MAX {
        da[3][0] = dt;
    }
    if action.steer.abs() <= STEER_MAX {
        let t = a.steer.tan();
        let dslip = 0.5 * (1.0 + t * t) / (1.0 + 0.25 * t * t);
        let dh_dslip = 0.5 * s.v * cs * k;
        let dtheta = 1.0 + dh_dslip;
        da[0][1] = (d * dc * dh_dslip * ct - d * c * st * dtheta) * dslip;
        da[1][1] = (d * dc * dh_dslip * st + d * c * ct * dtheta) * dslip;
        da[2][1] = s.v * cs * k * dslip;
    }
    Ok((
        next,
        StepJacobian {
            d_state: ds,
            d_action: da,
        },
    ))
}

/// Result of recovering an action from two consecutive states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveredAction {
    pub action: Action,
    /// Set when no in-bounds action reproduces `next` exactly.
    pub approximate: bool,
}

const EXACT_TOL: f64 = 1e-6;

fn residual_sq(prev: &AgentState, next: &AgentState, a: &Action, dt: f64, length: f64) -> f64 {
    let p = transition(prev, a, dt, length);
    let dpsi = wrap_angle(next.psi - p.psi);
    (p.x - next.x).powi(2) + (p.y - next.y).powi(2) + dpsi * dpsi + (p.v - next.v).powi(2)
}

/// Recovers the action that [`step`] maps `prev` to `next`, falling back to
/// a least-squares fit when the pair is off-model.
pub fn inverse(prev: &AgentState, next: &AgentState, dt: f64, geom: &AgentGeometry) -> Result<RecoveredAction> {
    if !prev.is_finite() || !next.is_finite() {
        return Err(Error::NumericDomain(format!("non-finite states {prev:?} {next:?}")));
    }
    if !(dt > 0.0) {
        return Err(Error::Validation(format!("dt must be positive, got {dt}")));
    }
    let length = geom.length;
    let mut approximate = false;

    let raw_accel = if next.v <= 0.0 && prev.v > 0.0 {
        // Any braking at least this hard lands on zero.
        -prev.v / dt
    } else {
        (next.v - prev.v) / dt
    };
    let accel = raw_accel.clamp(-crate::scene::ACCEL_MAX, crate::scene::ACCEL_MAX);
    if accel != raw_accel {
        approximate = true;
    }

    let dpsi = wrap_angle(next.psi - prev.psi);
    let max_slip = slip_angle(STEER_MAX);
    let steer = if prev.v == 0.0 {
        if dpsi != 0.0 {
            approximate = true;
        }
        0.0
    } else {
        let sin_slip = dpsi * 0.5 * length / (prev.v * dt);
        let slip = if sin_slip.abs() > max_slip.sin() {
            approximate = true;
            max_slip.copysign(sin_slip)
        } else {
            sin_slip.asin()
        };
        (2.0 * slip.tan()).atan()
    };

    let mut action = Action { accel, steer };
    if !approximate && residual_sq(prev, next, &action, dt, length).sqrt() <= EXACT_TOL {
        return Ok(RecoveredAction {
            action,
            approximate: false,
        });
    }
    if prev.v > 0.0 {
        action.steer = fit_steer(prev, next, accel, dt, length, steer);
    }
    Ok(RecoveredAction {
        action,
        approximate: true,
    })
}

/// One-dimensional least-squares fit of the steering angle: coarse grid,
/// then golden-section refinement around the best cell.
fn fit_steer(prev: &AgentState, next: &AgentState, accel: f64, dt: f64, length: f64, seed: f64) -> f64 {
    let f = |steer: f64| residual_sq(prev, next, &Action { accel, steer }, dt, length);
    let n = 160;
    let mut best = (f(seed), seed);
    for i in 0..=n {
        let s = -STEER_MAX + 2.0 * STEER_MAX * i as f64 / n as f64;
        let r = f(s);
        if r < best.0 {
            best = (r, s);
        }
    }
    let cell = 2.0 * STEER_MAX / n as f64;
    let (mut lo, mut hi) = ((best.1 - cell).max(-STEER_MAX), (best.1 + cell).min(STEER_MAX));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if f(m1) < f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let s = 0.5 * (lo + hi);
    if f(s) <= best.0 {
        s
    } else {
        best.1
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::scene::ACCEL_MAX;

    fn geom(l: f64) -> AgentGeometry {
        AgentGeometry { length: l, width: 1.8 }
    }

    #[test]
    fn straight_line() {
        let s = step(&AgentState::new(0.0, 0.0, 0.0, 10.0), &Action::new(0.0, 0.0), 0.1, &geom(4.0)).unwrap();
        assert!((s.x - 1.0).abs() < 1e-12 && s.y.abs() < 1e-12 && s.psi == 0.0 && s.v == 10.0);
    }

    #[test]
    fn accelerate_from_rest() {
        let s = step(&AgentState::new(0.0, 0.0, 0.0, 0.0), &Action::new(1.0, 0.0), 0.1, &geom(4.0)).unwrap();
        assert_eq!((s.x, s.y, s.psi), (0.0, 0.0, 0.0));
        assert!((s.v - 0.1).abs() < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        let bad = AgentState::new(f64::NAN, 0.0, 0.0, 1.0);
        assert!(matches!(
            step(&bad, &Action::default(), 0.1, &geom(4.0)),
            Err(Error::NumericDomain(_))
        ));
    }

    /// RK4 on the continuous model with the action held constant.
    fn ode_oracle(s: AgentState, a: Action, duration: f64, h: f64, length: f64) -> AgentState {
        let slip = (0.5 * a.steer.tan()).atan();
        let f = |y: [f64; 4]| {
            let v = y[3].max(0.0);
            [
                v * (y[2] + slip).cos(),
                v * (y[2] + slip).sin(),
                v * slip.sin() / (0.5 * length),
                a.accel,
            ]
        };
        let mut y = s.to_array();
        let n = (duration / h).round() as usize;
        for _ in 0..n {
            let k1 = f(y);
            let k2 = f(std::array::from_fn(|i| y[i] + 0.5 * h * k1[i]));
            let k3 = f(std::array::from_fn(|i| y[i] + 0.5 * h * k2[i]));
            let k4 = f(std::array::from_fn(|i| y[i] + h * k3[i]));
            y = std::array::from_fn(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        }
        AgentState::from_array(y)
    }

    #[test]
    fn matches_fine_step_ode() {
        let s0 = AgentState::new(0.0, 0.0, 0.0, 5.0);
        let a = Action::new(0.0, 0.2);
        let got = step(&s0, &a, 0.1, &geom(4.0)).unwrap();
        let want = ode_oracle(s0, a, 0.1, 1e-4, 4.0);
        assert!((got.x - want.x).hypot(got.y - want.y) < 1e-3, "{got:?} vs {want:?}");
        assert!((got.psi - want.psi).abs() < 1e-9);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s = AgentState::new(
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.5..25.0),
            );
            let a = Action::new(rng.gen_range(-4.5..4.5), rng.gen_range(-0.75..0.75));
            let (_, jac) = step_with_jacobian(&s, &a, 0.1, 4.3).unwrap();
            let eps = 1e-6;
            for j in 0..4 {
                let mut p = s.to_array();
                let mut m = s.to_array();
                p[j] += eps;
                m[j] -= eps;
                let fp = transition(&AgentState::from_array(p), &a, 0.1, 4.3).to_array();
                let fm = transition(&AgentState::from_array(m), &a, 0.1, 4.3).to_array();
                for i in 0..4 {
                    let mut d = fp[i] - fm[i];
                    if i == 2 {
                        d = wrap_angle(d);
                    }
                    assert!((d / (2.0 * eps) - jac.d_state[i][j]).abs() < 1e-6, "ds[{i}][{j}]");
                }
            }
            for j in 0..2 {
                let mut p = a;
                let mut m = a;
                if j == 0 {
                    p.accel += eps;
                    m.accel -= eps;
                } else {
                    p.steer += eps;
                    m.steer -= eps;
                }
                let fp = transition(&s, &p, 0.1, 4.3).to_array();
                let fm = transition(&s, &m, 0.1, 4.3).to_array();
                for i in 0..4 {
                    let d = wrap_angle(fp[i] - fm[i]);
                    let d = if i == 2 { d } else { fp[i] - fm[i] };
                    assert!((d / (2.0 * eps) - jac.d_action[i][j]).abs() < 1e-6, "da[{i}][{j}]");
                }
            }
        }
    }

    #[test]
    fn clamped_action_has_zero_derivative() {
        let s = AgentState::new(0.0, 0.0, 0.0, 5.0);
        let (_, jac) = step_with_jacobian(&s, &Action::new(9.0, 1.5), 0.1, 4.0).unwrap();
        assert!(jac.d_action.iter().all(|r| r[0] == 0.0 && r[1] == 0.0));
    }

    #[test]
    fn round_trip_random_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let s = AgentState::new(
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-PI..PI),
                rng.gen_range(1.0..30.0),
            );
            let a = Action::new(rng.gen_range(-ACCEL_MAX..ACCEL_MAX), rng.gen_range(-STEER_MAX..STEER_MAX));
            let g = geom(rng.gen_range(3.0..6.0));
            let next = step(&s, &a, 0.1, &g).unwrap();
            let r = inverse(&s, &next, 0.1, &g).unwrap();
            assert!(!r.approximate);
            worst = worst.max((r.action.accel - a.accel).abs()).max((r.action.steer - a.steer).abs());
        }
        assert!(worst < 1e-6, "worst round-trip error {worst}");
    }

    #[test]
    fn inverse_trivial_cases() {
        let s = AgentState::new(0.0, 0.0, 0.0, 0.0);
        let r = inverse(&s, &s, 0.1, &geom(4.0)).unwrap();
        assert_eq!(r.action, Action::new(0.0, 0.0));
        assert!(!r.approximate);

        let r = inverse(
            &AgentState::new(0.0, 0.0, 0.0, 10.0),
            &AgentState::new(1.0, 0.0, 0.0, 10.0),
            0.1,
            &geom(4.0),
        )
        .unwrap();
        assert!(r.action.accel.abs() < 1e-12 && r.action.steer.abs() < 1e-12);
    }

    #[test]
    fn stationary_turn_is_unidentifiable() {
        let r = inverse(
            &AgentState::new(0.0, 0.0, 0.0, 0.0),
            &AgentState::new(0.0, 0.0, 0.3, 0.0),
            0.1,
            &geom(4.0),
        )
        .unwrap();
        assert!(r.approximate);
        assert_eq!(r.action.steer, 0.0);
    }

    #[test]
    fn off_model_pair_gets_least_squares_fit() {
        let prev = AgentState::new(0.0, 0.0, 0.0, 10.0);
        let a = Action::new(0.5, 0.1);
        let mut next = step(&prev, &a, 0.1, &geom(4.0)).unwrap();
        next.y += 0.05;
        let r = inverse(&prev, &next, 0.1, &geom(4.0)).unwrap();
        assert!(r.approximate);
        let refit = step(&prev, &r.action, 0.1, &geom(4.0)).unwrap();
        let exact = step(&prev, &a, 0.1, &geom(4.0)).unwrap();
        let err = |s: &AgentState| (s.x - next.x).powi(2)
            + (s.y - next.y).powi(2)
            + wrap_angle(s.psi - next.psi).powi(2)
            + (s.v - next.v).powi(2);
        assert!(err(&refit) <= err(&exact) + 1e-12);
    }

    fn fit_circle(p: [[f64; 2]; 3]) -> f64 {
        let [a, b, c] = p;
        let d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]));
        let sq = |q: [f64; 2]| q[0] * q[0] + q[1] * q[1];
        let ux = (sq(a) * (b[1] - c[1]) + sq(b) * (c[1] - a[1]) + sq(c) * (a[1] - b[1])) / d;
        let uy = (sq(a) * (c[0] - b[0]) + sq(b) * (a[0] - c[0]) + sq(c) * (b[0] - a[0])) / d;
        (a[0] - ux).hypot(a[1] - uy)
    }

    #[test]
    fn constant_input_traces_continuous_circle() {
        let g = geom(4.0);
        for &(v, steer) in &[(5.0, 0.2), (12.0, -0.35), (2.0, 0.7)] {
            let mut s = AgentState::new(0.0, 0.0, 0.0, v);
            let mut pts = vec![s.position()];
            for _ in 0..600 {
                s = step(&s, &Action::new(0.0, steer), 0.01, &g).unwrap();
                pts.push(s.position());
            }
            let r = fit_circle([pts[0], pts[200], pts[400]]);
            let continuous = 0.5 * g.length / slip_angle(steer).sin().abs();
            assert!((r - continuous).abs() / continuous < 0.01);
        }
    }

    proptest! {
        #[test]
        fn speed_never_negative(v in 0.0..30.0f64, accel in -20.0..20.0f64, steer in -2.0..2.0f64) {
            let s = step(&AgentState::new(0.0, 0.0, 0.0, v), &Action::new(accel, steer), 0.1, &geom(4.0)).unwrap();
            prop_assert!(s.v >= 0.0);
        }

        #[test]
        fn zero_steer_keeps_heading_line(x in -10.0..10.0f64, y in -10.0..10.0f64, psi in -3.0..3.0f64, v in 0.0..30.0f64) {
            let s0 = AgentState::new(x, y, psi, v);
            let s1 = step(&s0, &Action::new(0.7, 0.0), 0.1, &geom(4.0)).unwrap();
            prop_assert_eq!(s1.psi, s0.psi);
            // Lateral offset in the heading frame stays zero.
            let lateral = -(s1.x - x) * psi.sin() + (s1.y - y) * psi.cos();
            prop_assert!(lateral.abs() < 1e-12);
        }
    }
}
