//! Output heads: ego controls rolled out through the bicycle model, neighbor
//! trajectories and joint mode probabilities.

pub mod bicycle;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::nn::Mlp;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub use bicycle::{
    bicycle_rollout, bicycle_step, rollout_graph, BicycleState, Control, ControlSequence, DEFAULT_WHEELBASE, MAX_ACCEL,
    MAX_STEER,
};

/// Per-mode ego plan on the graph.
#[derive(Clone, Copy, Debug)]
pub struct EgoPlan {
    /// `[X, N]`
    pub accel: Var,
    /// `[X, N]`
    pub steer: Var,
    /// `[X, N, 3]`
    pub trajectory: Var,
}

/// Shared MLP from `[X, 2F]` mode contexts to `N` bounded control pairs each.
#[derive(Clone, Debug)]
pub struct EgoDecoder {
    pub mlp: Mlp,
    pub steps: usize,
}

impl EgoDecoder {
    pub fn new(store: &mut ParameterStore, prefix: &str, dim: usize, steps: usize, rng: &mut impl Rng) -> Self {
        Self { mlp: Mlp::new(store, &format!("{prefix}.mlp"), &[2 * dim, dim, 2 * steps], rng), steps }
    }

    /// Controls only: accelerations `5·tanh` and steering `0.6·tanh` of the
    /// first and second halves of the MLP output.
    pub fn controls(&self, g: &mut Graph, ctx: Var) -> (Var, Var) {
        let raw = self.mlp.forward(g, ctx);
        let a = g.slice_cols(raw, 0, self.steps);
        let d = g.slice_cols(raw, self.steps, 2 * self.steps);
        let a = g.tanh(a);
        let d = g.tanh(d);
        (g.scale(a, MAX_ACCEL), g.scale(d, MAX_STEER))
    }

    pub fn forward(&self, g: &mut Graph, ctx: Var, initial: BicycleState, dt: f64, wheelbase: f64) -> EgoPlan {
        let (accel, steer) = self.controls(g, ctx);
        let trajectory = rollout_graph(g, initial, accel, steer, dt, wheelbase);
        EgoPlan { accel, steer, trajectory }
    }
}

/// Shared MLP from per-(neighbor, mode) contexts to `N` pose offsets, added to
/// caller-supplied anchor poses.
#[derive(Clone, Debug)]
pub struct NeighborDecoder {
    pub mlp: Mlp,
    pub steps: usize,
}

impl NeighborDecoder {
    /// The output layer starts at zero so initial predictions are the anchors.
    pub fn new(store: &mut ParameterStore, prefix: &str, dim: usize, steps: usize, rng: &mut impl Rng) -> Self {
        let mlp = Mlp::new(store, &format!("{prefix}.mlp"), &[2 * dim, dim, 3 * steps], rng);
        let last = mlp.layers.last().expect("two layers");
        for id in [last.weight, last.bias] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        Self { mlp, steps }
    }

    /// `ctx` is `[rows, 2F]`, `anchors` is `[rows, 3N]`; returns `[rows, 3N]`
    /// laid out `(x, y, heading)` per step.
    pub fn forward(&self, g: &mut Graph, ctx: Var, anchors: &Tensor) -> Var {
        let offsets = self.mlp.forward(g, ctx);
        let base = g.input(anchors.clone());
        g.add(base, offsets)
    }
}

/// Max-pools each mode's contexts over valid agents and maps the pooled
/// vector to a logit; a softmax across modes gives the probabilities.
#[derive(Clone, Debug)]
pub struct ModeScorer {
    pub mlp: Mlp,
}

impl ModeScorer {
    pub fn new(store: &mut ParameterStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self { mlp: Mlp::new(store, &format!("{prefix}.mlp"), &[2 * dim, dim, 1], rng) }
    }

    /// `contexts[m]` is `[A, 2F]`; returns probabilities `[1, X]`.
    pub fn forward(&self, g: &mut Graph, contexts: &[Var], agent_mask: &[bool]) -> Var {
        let a = agent_mask.len();
        let stacked = g.concat_rows(contexts);
        let segments: Vec<Vec<usize>> = (0..contexts.len())
            .map(|m| (0..a).filter(|&i| agent_mask[i]).map(|i| m * a + i).collect())
            .collect();
        let pooled = g.segment_max(stacked, &segments);
        let logits = self.mlp.forward(g, pooled);
        let logits = g.reshape(logits, vec![1, contexts.len()]);
        g.softmax_rows(logits)
    }
}

/// Plain-value model output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub ego_controls: Vec<ControlSequence>,
    /// `[X][N]` poses.
    pub ego_trajectories: Vec<Vec<[f64; 3]>>,
    /// `[X][K][N]` poses; padded neighbors carry their anchor.
    pub neighbor_trajectories: Vec<Vec<Vec<[f64; 3]>>>,
    pub mode_probs: Vec<f64>,
}

impl ModelOutput {
    pub fn num_modes(&self) -> usize {
        self.mode_probs.len()
    }

    /// Highest-probability mode, ties to the lowest index.
    pub fn most_likely_mode(&self) -> usize {
        let mut best = 0;
        for (m, &p) in self.mode_probs.iter().enumerate() {
            if p > self.mode_probs[best] {
                best = m;
            }
        }
        best
    }

    pub fn is_finite(&self) -> bool {
        self.mode_probs.iter().all(|p| p.is_finite())
            && self.ego_trajectories.iter().flatten().flatten().all(|v| v.is_finite())
            && self.neighbor_trajectories.iter().flatten().flatten().flatten().all(|v| v.is_finite())
            && self.ego_controls.iter().flat_map(|c| &c.0).all(|u| u.accel.is_finite() && u.steer.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const F: usize = 6;
    const N: usize = 5;

    fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    fn zero(store: &mut ParameterStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_ego_decoder_gives_zero_controls() {
        let mut store = ParameterStore::new();
        let dec = EgoDecoder::new(&mut store, "dec.ego", F, N, &mut ChaCha8Rng::seed_from_u64(1));
        zero(&mut store);
        let mut g = Graph::with_params(&store);
        let ctx = g.input(random(&mut ChaCha8Rng::seed_from_u64(2), 3, 2 * F));
        let plan = dec.forward(&mut g, ctx, BicycleState::new(0.0, 0.0, 0.0, 4.0), 0.1, 2.8);
        assert_eq!(g.value(plan.accel).shape(), &[3, N]);
        assert!(g.value(plan.accel).data().iter().chain(g.value(plan.steer).data()).all(|&v| v == 0.0));
        assert_eq!(g.value(plan.trajectory).shape(), &[3, N, 3]);
    }

    #[test]
    fn decoded_controls_respect_bounds_for_large_weights() {
        let mut store = ParameterStore::new();
        let dec = EgoDecoder::new(&mut store, "dec.ego", F, N, &mut ChaCha8Rng::seed_from_u64(3));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).scale_assign(1e3);
        }
        let mut g = Graph::with_params(&store);
        let ctx = g.input(random(&mut ChaCha8Rng::seed_from_u64(4), 3, 2 * F));
        let (a, d) = dec.controls(&mut g, ctx);
        assert!(g.value(a).data().iter().all(|v| v.abs() <= MAX_ACCEL));
        assert!(g.value(d).data().iter().all(|v| v.abs() <= MAX_STEER));
    }

    #[test]
    fn identical_contexts_decode_identically() {
        let mut store = ParameterStore::new();
        let ego = EgoDecoder::new(&mut store, "dec.ego", F, N, &mut ChaCha8Rng::seed_from_u64(5));
        let nbr = NeighborDecoder::new(&mut store, "dec.nbr", F, N, &mut ChaCha8Rng::seed_from_u64(5));
        let row = random(&mut ChaCha8Rng::seed_from_u64(6), 1, 2 * F);
        let ctx = Tensor::new(vec![2, 2 * F], [row.data(), row.data()].concat());
        let mut g = Graph::with_params(&store);
        let c = g.input(ctx);
        let (a, _) = ego.controls(&mut g, c);
        assert_eq!(g.value(a).row(0), g.value(a).row(1));
        let p = nbr.forward(&mut g, c, &Tensor::zeros(&[2, 3 * N]));
        assert_eq!(g.value(p).shape(), &[2, 3 * N]);
        assert_eq!(g.value(p).row(0), g.value(p).row(1));
    }

    #[test]
    fn zero_neighbor_decoder_returns_anchors() {
        let mut store = ParameterStore::new();
        let nbr = NeighborDecoder::new(&mut store, "dec.nbr", F, N, &mut ChaCha8Rng::seed_from_u64(7));
        zero(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let anchors = random(&mut rng, 4, 3 * N);
        let mut g = Graph::with_params(&store);
        let c = g.input(random(&mut rng, 4, 2 * F));
        let p = nbr.forward(&mut g, c, &anchors);
        assert_eq!(g.value(p), &anchors);
    }

    #[test]
    fn scorer_outputs_a_distribution() {
        let mut store = ParameterStore::new();
        let scorer = ModeScorer::new(&mut store, "dec.score", F, &mut ChaCha8Rng::seed_from_u64(9));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let mut g = Graph::with_params(&store);
            let ctx: Vec<Var> = (0..3).map(|_| g.input(random(&mut rng, 4, 2 * F))).collect();
            let p = scorer.forward(&mut g, &ctx, &[true, true, false, true]);
            let p = g.value(p).data();
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_mode_contexts_give_uniform_probabilities() {
        let mut store = ParameterStore::new();
        let scorer = ModeScorer::new(&mut store, "dec.score", F, &mut ChaCha8Rng::seed_from_u64(11));
        let ctx = random(&mut ChaCha8Rng::seed_from_u64(12), 2, 2 * F);
        let mut g = Graph::with_params(&store);
        let c = g.input(ctx);
        let p = scorer.forward(&mut g, &[c, c, c], &[true, true]);
        for &v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_agent_pool_is_the_identity() {
        let mut store = ParameterStore::new();
        let scorer = ModeScorer::new(&mut store, "dec.score", F, &mut ChaCha8Rng::seed_from_u64(13));
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let rows: Vec<Tensor> = (0..3).map(|_| random(&mut rng, 1, 2 * F)).collect();
        let mut g = Graph::with_params(&store);
        let ctx: Vec<Var> = rows.iter().map(|r| g.input(r.clone())).collect();
        let p = scorer.forward(&mut g, &ctx, &[true]);
        let p = g.value(p).data().to_vec();

        let mut h = Graph::with_params(&store);
        let mut logits: Vec<f64> = rows
            .iter()
            .map(|r| {
                let x = h.input(r.clone());
                let y = scorer.mlp.forward(&mut h, x);
                h.value(y).data()[0]
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        logits.iter_mut().for_each(|l| *l = (*l - max).exp());
        let z: f64 = logits.iter().sum();
        for (a, b) in p.iter().zip(&logits) {
            assert!((a - b / z).abs() < 1e-12);
        }
    }

    #[test]
    fn most_likely_mode_breaks_ties_low() {
        let out = ModelOutput {
            ego_controls: vec![],
            ego_trajectories: vec![],
            neighbor_trajectories: vec![],
            mode_probs: vec![0.4, 0.4, 0.2],
        };
        assert_eq!(out.most_likely_mode(), 0);
    }
}
