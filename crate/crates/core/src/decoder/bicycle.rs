//! Kinematic bicycle model integrated with explicit Euler.
//!
//! Rear-axle form with state `(x, y, heading, speed)` and control
//! `(acceleration, steering)`:
//!
//! ```text
//! x'       = x + v cos(heading) dt
//! y'       = y + v sin(heading) dt
//! heading' = heading + v tan(steer) dt / wheelbase
//! v'       = v + a dt
//! ```
//!
//! The scalar path ([`bicycle_step`], [`bicycle_rollout`]) and the graph path
//! ([`rollout_graph`]) evaluate the same expressions in the same order, so
//! they agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::scenario::AgentState;
use crate::tensor::Tensor;

pub const MAX_ACCEL: f64 = 5.0;
pub const MAX_STEER: f64 = 0.6;
pub const DEFAULT_WHEELBASE: f64 = 2.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub accel: f64,
    pub steer: f64,
}

impl Control {
    pub fn new(accel: f64, steer: f64) -> Self {
        Self { accel, steer }
    }

    /// Clamped into `|accel| <= 5`, `|steer| <= 0.6`.
    pub fn clamped(self) -> Self {
        Self {
            accel: self.accel.clamp(-MAX_ACCEL, MAX_ACCEL),
            steer: self.steer.clamp(-MAX_STEER, MAX_STEER),
        }
    }

    pub fn within_bounds(&self) -> bool {
        self.accel.abs() <= MAX_ACCEL && self.steer.abs() <= MAX_STEER
    }
}

/// Per-step controls for one planning horizon.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ControlSequence(pub Vec<Control>);

impl ControlSequence {
    pub fn zeros(n: usize) -> Self {
        Self(vec![Control::new(0.0, 0.0); n])
    }

    /// Builds a sequence, clamping every pair into bounds.
    pub fn clamped(controls: impl IntoIterator<Item = Control>) -> Self {
        Self(controls.into_iter().map(Control::clamped).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> Option<Control> {
        self.0.first().copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BicycleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl BicycleState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self { x, y, heading, speed }
    }

    /// Speed is the norm of the stored velocity.
    pub fn from_agent(s: &AgentState) -> Self {
        Self { x: s.x, y: s.y, heading: s.heading, speed: s.vx.hypot(s.vy) }
    }

    pub fn pose(&self) -> [f64; 3] {
        [self.x, self.y, self.heading]
    }
}

pub fn bicycle_step(s: BicycleState, u: Control, dt: f64, wheelbase: f64) -> BicycleState {
    BicycleState {
        x: s.x + s.speed * s.heading.cos() * dt,
        y: s.y + s.speed * s.heading.sin() * dt,
        heading: s.heading + s.speed * u.steer.tan() * (dt / wheelbase),
        speed: s.speed + u.accel * dt,
    }
}

/// States after each control, excluding the initial state.
pub fn bicycle_rollout(initial: BicycleState, controls: &[Control], dt: f64, wheelbase: f64) -> Vec<BicycleState> {
    assert!(wheelbase > 0.0, "wheelbase must be positive");
    let mut s = initial;
    controls
        .iter()
        .map(|&u| {
            s = bicycle_step(s, u, dt, wheelbase);
            s
        })
        .collect()
}

/// Differentiable rollout of `rows` independent control sequences from a
/// shared initial state. `accel` and `steer` are `[rows, N]`; the result is
/// `[rows, N, 3]` poses `(x, y, heading)` after each step.
pub fn rollout_graph(g: &mut Graph, initial: BicycleState, accel: Var, steer: Var, dt: f64, wheelbase: f64) -> Var {
    assert!(wheelbase > 0.0, "wheelbase must be positive");
    let rows = g.value(accel).rows();
    let n = g.value(accel).cols();
    assert_eq!(g.value(steer).rows(), rows);
    assert_eq!(g.value(steer).cols(), n);
    let mut x = g.input(Tensor::filled(&[rows, 1], initial.x));
    let mut y = g.input(Tensor::filled(&[rows, 1], initial.y));
    let mut heading = g.input(Tensor::filled(&[rows, 1], initial.heading));
    let mut speed = g.input(Tensor::filled(&[rows, 1], initial.speed));
    let mut poses = Vec::with_capacity(3 * n);
    for t in 0..n {
        let a = g.slice_cols(accel, t, t + 1);
        let d = g.slice_cols(steer, t, t + 1);
        let cos = g.cos(heading);
        let sin = g.sin(heading);
        let vc = g.mul(speed, cos);
        let vs = g.mul(speed, sin);
        let dx = g.scale(vc, dt);
        let dy = g.scale(vs, dt);
        let tan = g.tan(d);
        let vt = g.mul(speed, tan);
        let dh = g.scale(vt, dt / wheelbase);
        let dv = g.scale(a, dt);
        x = g.add(x, dx);
        y = g.add(y, dy);
        heading = g.add(heading, dh);
        speed = g.add(speed, dv);
        poses.extend_from_slice(&[x, y, heading]);
    }
    let flat = g.concat_cols(&poses);
    g.reshape(flat, vec![rows, n, 3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_step_moves_one_meter() {
        let s = bicycle_step(BicycleState::new(0.0, 0.0, 0.0, 10.0), Control::new(0.0, 0.0), 0.1, 2.8);
        assert_eq!((s.x, s.y, s.heading, s.speed), (1.0, 0.0, 0.0, 10.0));
    }

    #[test]
    fn constant_accel_from_rest_matches_euler_sum() {
        let controls = vec![Control::new(2.0, 0.0); 50];
        let traj = bicycle_rollout(BicycleState::new(0.0, 0.0, 0.0, 0.0), &controls, 0.1, 2.8);
        let last = traj.last().unwrap();
        assert!((last.speed - 10.0).abs() < 1e-12);
        // x_N = Σ_{t<N} v_t dt with v_t = 0.2 t
        let expected: f64 = (0..50).map(|t| 0.2 * t as f64 * 0.1).sum();
        assert!((last.x - expected).abs() < 1e-12);
        assert!((expected - 24.5).abs() < 1e-12);
    }

    #[test]
    fn clamp_bounds_controls() {
        let c = Control::new(9.0, -2.0).clamped();
        assert_eq!(c, Control::new(5.0, -0.6));
        assert!(c.within_bounds());
    }

    #[test]
    fn graph_rollout_is_bit_identical_to_scalar_rollout() {
        let init = BicycleState::new(1.0, -2.0, 0.3, 4.0);
        let controls: Vec<Control> = (0..12).map(|t| Control::new(0.3 * (t as f64).sin(), 0.05 * t as f64 - 0.2)).collect();
        let scalar = bicycle_rollout(init, &controls, 0.1, 2.8);
        let mut g = Graph::new();
        let a = g.input(Tensor::new(vec![1, 12], controls.iter().map(|c| c.accel).collect()));
        let d = g.input(Tensor::new(vec![1, 12], controls.iter().map(|c| c.steer).collect()));
        let traj = rollout_graph(&mut g, init, a, d, 0.1, 2.8);
        let v = g.value(traj);
        assert_eq!(v.shape(), &[1, 12, 3]);
        for (t, s) in scalar.iter().enumerate() {
            assert_eq!(v.row(t), &s.pose());
        }
    }
}
