//! Training objective: best-mode selection, smooth-L1 prediction loss, mode
//! cross-entropy and the planning ADE/FDE imitation terms.
//!
//! Plain-value functions operate on [`ModelOutput`]; [`total_loss_graph`]
//! builds the same objective on a [`Graph`] for training.

use crate::autodiff::{smooth_l1, Graph, Var};
use crate::config::{LossWeights, ModelConfig};
use crate::decoder::ModelOutput;
use crate::model::Forward;
use crate::scenario::ScenarioFrame;
use crate::tensor::Tensor;

/// Probability floor applied before the logarithm in the score loss.
pub const PROB_FLOOR: f64 = 1e-12;

fn displacement(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean planar displacement over the first `pred.len()` steps.
pub fn mean_displacement(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    pred.iter().zip(gt).map(|(p, q)| displacement(p, q)).sum::<f64>() / pred.len() as f64
}

/// Mode whose joint trajectories (ego plus valid neighbors) have the lowest
/// summed mean displacement to the logged futures; ties go to the lower index.
pub fn select_best_mode(output: &ModelOutput, frame: &ScenarioFrame) -> usize {
    let mut best = (0, f64::INFINITY);
    for m in 0..output.num_modes() {
        let mut err = mean_displacement(&output.ego_trajectories[m], &frame.gt_futures[0]);
        for (k, nb) in frame.neighbors.iter().enumerate() {
            if nb.valid {
                err += mean_displacement(&output.neighbor_trajectories[m][k], &frame.gt_futures[k + 1]);
            }
        }
        if err < best.1 {
            best = (m, err);
        }
    }
    best.0
}

/// Smooth-L1 averaged over valid neighbors, steps and the three channels.
/// Zero when no neighbor is valid.
pub fn prediction_loss(pred: &[Vec<[f64; 3]>], gt: &[Vec<[f64; 3]>], valid: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, q), _) in pred.iter().zip(gt).zip(valid).filter(|(_, &v)| v) {
        for (a, b) in p.iter().zip(q) {
            for c in 0..3 {
                sum += smooth_l1(a[c] - b[c]);
            }
            count += 3;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// `-ln p[best]` with `p` floored at [`PROB_FLOOR`]; the flag reports
/// whether the floor was hit.
pub fn score_loss(probs: &[f64], best: usize) -> (f64, bool) {
    let p = probs[best];
    (-(p.max(PROB_FLOOR)).ln(), p < PROB_FLOOR)
}

/// `Σ_t ‖pos_t − pos*_t‖ · Δt / T`.
pub fn ade_loss(plan: &[[f64; 3]], gt: &[[f64; 3]], dt: f64, horizon: f64) -> f64 {
    plan.iter().zip(gt).map(|(p, q)| displacement(p, q)).sum::<f64>() * dt / horizon
}

/// Final-step planar displacement.
pub fn fde_loss(plan: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    let n = plan.len();
    displacement(&plan[n - 1], &gt[n - 1])
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub prediction: f64,
    pub score: f64,
    pub ade: f64,
    pub fde: f64,
    pub total: f64,
    pub best_mode: usize,
    pub score_clamped: bool,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,pred,score,ade,fde,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{},{},{},{},{}", self.prediction, self.score, self.ade, self.fde, self.total)
    }

    /// Component-wise mean of several breakdowns (best mode of the first).
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown { best_mode: items.first().map_or(0, |b| b.best_mode), ..Default::default() };
        for b in items {
            out.prediction += b.prediction / n;
            out.score += b.score / n;
            out.ade += b.ade / n;
            out.fde += b.fde / n;
            out.total += b.total / n;
            out.score_clamped |= b.score_clamped;
        }
        out
    }

    /// First non-finite term, by name.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [("pred", self.prediction), ("score", self.score), ("ade", self.ade), ("fde", self.fde), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

pub fn weighted_total(w: &LossWeights, prediction: f64, score: f64, ade: f64, fde: f64) -> f64 {
    w.prediction * prediction + w.score * score + w.ade * ade + w.fde * fde
}

/// Four-term objective on plain values, using the first `N` logged steps.
pub fn total_loss(frame: &ScenarioFrame, output: &ModelOutput, weights: &LossWeights, dt: f64, horizon: f64) -> LossBreakdown {
    let best = select_best_mode(output, frame);
    let n = output.ego_trajectories[best].len();
    let gt: Vec<Vec<[f64; 3]>> = frame.gt_futures.iter().map(|f| f[..n].to_vec()).collect();
    let valid: Vec<bool> = frame.neighbors.iter().map(|a| a.valid).collect();
    let prediction = prediction_loss(&output.neighbor_trajectories[best], &gt[1..], &valid);
    let (score, score_clamped) = score_loss(&output.mode_probs, best);
    let ade = ade_loss(&output.ego_trajectories[best], &gt[0], dt, horizon);
    let fde = fde_loss(&output.ego_trajectories[best], &gt[0]);
    LossBreakdown {
        prediction,
        score,
        ade,
        fde,
        total: weighted_total(weights, prediction, score, ade, fde),
        best_mode: best,
        score_clamped,
    }
}

/// Builds the objective on the graph. The best mode is chosen from the
/// forward values and treated as a constant.
pub fn total_loss_graph(
    g: &mut Graph,
    fwd: &Forward,
    output: &ModelOutput,
    frame: &ScenarioFrame,
    weights: &LossWeights,
    config: &ModelConfig,
) -> (Var, LossBreakdown) {
    let (x_modes, n) = (config.modes, config.future_len);
    let best = select_best_mode(output, frame);
    let mut terms = Vec::with_capacity(4);

    let valid: Vec<usize> = (0..frame.neighbors.len()).filter(|&k| frame.neighbors[k].valid).collect();
    let prediction = if valid.is_empty() {
        g.input(Tensor::scalar(0.0))
    } else {
        let rows = g.gather_rows(fwd.neighbors, valid.iter().map(|&k| k * x_modes + best).collect());
        let mut target = Vec::with_capacity(valid.len() * 3 * n);
        for &k in &valid {
            for p in &frame.gt_futures[k + 1][..n] {
                target.extend_from_slice(p);
            }
        }
        let target = g.input(Tensor::new(vec![valid.len(), 3 * n], target));
        let diff = g.sub(rows, target);
        let l = g.smooth_l1(diff);
        g.mean(l)
    };
    terms.push((weights.prediction, prediction));

    let probs_best = g.slice_cols(fwd.probs, best, best + 1);
    let log_p = g.ln_clamped(probs_best, PROB_FLOOR);
    let score = g.scale(log_p, -1.0);
    terms.push((weights.score, score));

    let traj = g.reshape(fwd.plan.trajectory, vec![x_modes * n, 3]);
    let plan = g.slice_rows(traj, best * n, (best + 1) * n);
    let xy = g.slice_cols(plan, 0, 2);
    let gt_xy: Vec<f64> = frame.gt_futures[0][..n].iter().flat_map(|p| [p[0], p[1]]).collect();
    let gt_xy = g.input(Tensor::new(vec![n, 2], gt_xy));
    let diff = g.sub(xy, gt_xy);
    let dist = g.row_norm(diff);
    let sum = g.sum(dist);
    let ade = g.scale(sum, config.dt / config.horizon());
    terms.push((weights.ade, ade));
    let fde = g.slice_rows(dist, n - 1, n);
    let fde = g.reshape(fde, vec![]);
    terms.push((weights.fde, fde));

    let mut total: Option<Var> = None;
    for &(w, v) in &terms {
        let v = g.reshape(v, vec![]);
        let weighted = g.scale(v, w);
        total = Some(match total {
            None => weighted,
            Some(t) => g.add(t, weighted),
        });
    }
    let total = total.unwrap();
    let scalar = |g: &Graph, v: Var| g.value(v).data()[0];
    let breakdown = LossBreakdown {
        prediction: scalar(g, prediction),
        score: scalar(g, score),
        ade: scalar(g, ade),
        fde: scalar(g, fde),
        total: scalar(g, total),
        best_mode: best,
        score_clamped: output.mode_probs[best] < PROB_FLOOR,
    };
    (total, breakdown)
}
