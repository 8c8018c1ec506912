//! Plan refinement hook applied to the chosen mode's controls before the
//! first one is executed.

use crate::autodiff::Graph;
use crate::decoder::{rollout_graph, BicycleState, Control, ControlSequence};
use crate::scenario::LocalMap;
use crate::tensor::Tensor;

/// Everything a refiner may look at, expressed in the observation frame.
#[derive(Clone, Copy, Debug)]
pub struct RefineContext<'a> {
    pub start: BicycleState,
    /// Predicted poses of each valid neighbor under the chosen mode.
    pub predictions: &'a [Vec<[f64; 3]>],
    pub map: &'a LocalMap,
    pub dt: f64,
    pub wheelbase: f64,
}

pub trait PlanRefiner: Sync {
    fn name(&self) -> &'static str;

    /// Returns controls inside the actuator bounds.
    fn refine(&self, initial: &ControlSequence, ctx: &RefineContext) -> ControlSequence;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityRefiner;

impl PlanRefiner for IdentityRefiner {
    fn name(&self) -> &'static str {
        "none"
    }

    fn refine(&self, initial: &ControlSequence, _ctx: &RefineContext) -> ControlSequence {
        ControlSequence::clamped(initial.0.iter().copied())
    }
}

/// Fixed-iteration projected gradient descent on
/// `w_track Σ‖u − u₀‖² + w_smooth Σ‖u_{t+1} − u_t‖² + w_coll Σ relu(d_safe − d)²`,
/// where `d` is the distance from the rolled-out ego position to each
/// predicted neighbor position at the same step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientRefiner {
    pub iterations: usize,
    pub step_size: f64,
    pub tracking_weight: f64,
    pub smoothness_weight: f64,
    pub collision_weight: f64,
    pub safe_distance: f64,
}

impl Default for GradientRefiner {
    fn default() -> Self {
        Self {
            iterations: 20,
            step_size: 0.05,
            tracking_weight: 1.0,
            smoothness_weight: 1.0,
            collision_weight: 10.0,
            safe_distance: 3.0,
        }
    }
}

impl PlanRefiner for GradientRefiner {
    fn name(&self) -> &'static str {
        "gradient"
    }

    fn refine(&self, initial: &ControlSequence, ctx: &RefineContext) -> ControlSequence {
        refine_plan_gradient(initial, ctx, self)
    }
}

fn sum_of_squares(g: &mut Graph, v: crate::autodiff::Var) -> crate::autodiff::Var {
    let sq = g.mul(v, v);
    g.sum(sq)
}

pub fn refine_plan_gradient(initial: &ControlSequence, ctx: &RefineContext, p: &GradientRefiner) -> ControlSequence {
    let n = initial.len();
    let mut current = ControlSequence::clamped(initial.0.iter().copied());
    if n == 0 {
        return current;
    }
    let a0 = Tensor::new(vec![1, n], initial.0.iter().map(|u| u.accel).collect());
    let d0 = Tensor::new(vec![1, n], initial.0.iter().map(|u| u.steer).collect());
    for _ in 0..p.iterations {
        let mut g = Graph::new();
        let accel = g.input(Tensor::new(vec![1, n], current.0.iter().map(|u| u.accel).collect()));
        let steer = g.input(Tensor::new(vec![1, n], current.0.iter().map(|u| u.steer).collect()));
        let mut terms = Vec::new();

        let (ta, td) = (g.input(a0.clone()), g.input(d0.clone()));
        let da = g.sub(accel, ta);
        let dd = g.sub(steer, td);
        let (sa, sd) = (sum_of_squares(&mut g, da), sum_of_squares(&mut g, dd));
        let track = g.add(sa, sd);
        terms.push(g.scale(track, p.tracking_weight));

        if n > 1 {
            let mut smooth = Vec::new();
            for u in [accel, steer] {
                let next = g.slice_cols(u, 1, n);
                let prev = g.slice_cols(u, 0, n - 1);
                let diff = g.sub(next, prev);
                smooth.push(sum_of_squares(&mut g, diff));
            }
            let s = g.add(smooth[0], smooth[1]);
            terms.push(g.scale(s, p.smoothness_weight));
        }

        if !ctx.predictions.is_empty() {
            let poses = rollout_graph(&mut g, ctx.start, accel, steer, ctx.dt, ctx.wheelbase);
            let poses = g.reshape(poses, vec![n, 3]);
            for pred in ctx.predictions {
                let steps = pred.len().min(n);
                if steps == 0 {
                    continue;
                }
                let rows = g.slice_rows(poses, 0, steps);
                let xy = g.slice_cols(rows, 0, 2);
                let q: Vec<f64> = pred[..steps].iter().flat_map(|q| [q[0], q[1]]).collect();
                let q = g.input(Tensor::new(vec![steps, 2], q));
                let diff = g.sub(xy, q);
                let dist = g.row_norm(diff);
                let neg = g.scale(dist, -1.0);
                let shortfall = g.add_scalar(neg, p.safe_distance);
                let pen = g.relu(shortfall);
                let sq = sum_of_squares(&mut g, pen);
                terms.push(g.scale(sq, p.collision_weight));
            }
        }

        let mut cost = terms[0];
        for &t in &terms[1..] {
            cost = g.add(cost, t);
        }
        let grads = g.backward(cost);
        let zero = Tensor::zeros(&[1, n]);
        let ga = grads.wrt(accel).unwrap_or(&zero);
        let gd = grads.wrt(steer).unwrap_or(&zero);
        current = ControlSequence::clamped(current.0.iter().enumerate().map(|(t, u)| {
            Control::new(u.accel - p.step_size * ga.data()[t], u.steer - p.step_size * gd.data()[t])
        }));
    }
    current
}
