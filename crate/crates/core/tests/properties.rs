mod common;

use common::oracles;
use common::{frame_for, random_tensor, randomize, rng, tiny_model_config};
use planpred::autodiff::Graph;
use planpred::decoder::{bicycle_rollout, BicycleState, Control, ControlSequence, ModelOutput};
use planpred::losses::{ade_loss, fde_loss, prediction_loss, score_loss, select_best_mode};
use planpred::map_graph::{build_knn_graph, EdgeConv};
use planpred::params::ParameterStore;
use planpred::scenario::{RigidTransform, Template};
use planpred::simulator::{boxes_overlap, OrientedBox};
use planpred::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn pose() -> impl Strategy<Value = [f64; 3]> {
    (-20.0..20.0f64, -20.0..20.0f64, -3.0..3.0f64).prop_map(|(x, y, h)| [x, y, h])
}

fn trajectories(agents: usize, steps: usize) -> impl Strategy<Value = Vec<Vec<[f64; 3]>>> {
    prop::collection::vec(prop::collection::vec(pose(), steps), agents)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_matches_brute_force(seed in any::<u64>(), n in 1usize..30, dim in 1usize..5, k_frac in 0.0..1.0f64) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[n, dim], 3.0);
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let graph = build_knn_graph(&x, k).unwrap();
        let points: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
        prop_assert_eq!(graph.edges, oracles::knn(&points, k));
    }

    #[test]
    fn edge_conv_ignores_neighbor_order(seed in any::<u64>(), n in 2usize..20, k_frac in 0.0..1.0f64) {
        let mut r = rng(seed);
        let mut store = ParameterStore::new();
        let conv = EdgeConv::new(&mut store, "c", 4, &mut r);
        let x = random_tensor(&mut r, &[n, 4], 2.0);
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let edges = build_knn_graph(&x, k).unwrap().edges;
        let mut shuffled = edges.clone();
        for list in &mut shuffled {
            list.shuffle(&mut r);
        }
        let run = |edges: &[Vec<usize>]| {
            let mut g = Graph::with_params(&store);
            let xi = g.input(x.clone());
            let (y, count) = conv.forward(&mut g, xi, edges);
            (g.value(y).clone(), count)
        };
        let (a, ca) = run(&edges);
        let (b, cb) = run(&shuffled);
        prop_assert_eq!(ca, n * k);
        prop_assert_eq!(ca, cb);
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn edge_conv_never_drops_below_its_self_loop(seed in any::<u64>(), n in 1usize..20, k_frac in 0.0..1.0f64) {
        let mut r = rng(seed);
        let mut store = ParameterStore::new();
        let conv = EdgeConv::new(&mut store, "c", 3, &mut r);
        let x = random_tensor(&mut r, &[n, 3], 2.0);
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let graph = build_knn_graph(&x, k).unwrap();
        let mut g = Graph::with_params(&store);
        let (y, _) = conv.forward_graph(&mut g, &graph);
        let zeros = Tensor::zeros(&[n, 3]);
        let own = g.input(x.clone());
        let z = g.input(zeros);
        let input = g.concat_cols(&[own, z]);
        let floor = conv.mlp.forward(&mut g, input);
        let (y, floor) = (g.value(y), g.value(floor));
        prop_assert!(y.data().iter().zip(floor.data()).all(|(a, b)| a >= b));
    }

    #[test]
    fn attention_rows_are_stochastic_and_masked_keys_are_opaque(
        seed in any::<u64>(), heads in 1usize..4, tq in 1usize..5, tk in 1usize..6,
    ) {
        let mut r = rng(seed);
        let d = 2 * heads;
        let mut mask: Vec<bool> = (0..tk).map(|_| r.gen_bool(0.6)).collect();
        let keep = r.gen_range(0..tk);
        mask[keep] = true;
        let q = random_tensor(&mut r, &[tq, d], 2.0);
        let k = random_tensor(&mut r, &[tk, d], 2.0);
        let v = random_tensor(&mut r, &[tk, d], 2.0);
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for j in (0..tk).filter(|&j| !mask[j]) {
            for c in 0..d {
                k2.row_mut(j)[c] = r.gen_range(-1e6..1e6);
                v2.row_mut(j)[c] = f64::NAN;
            }
        }
        let run = |k: &Tensor, v: &Tensor| {
            let mut g = Graph::new();
            let (qi, ki, vi) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
            let out = g.attention(qi, ki, vi, heads, 1, tq, tk, mask.clone());
            (g.value(out).clone(), g.attention_weights(out).unwrap().to_vec())
        };
        let (a, w) = run(&k, &v);
        let (b, _) = run(&k2, &v2);
        for row in w.chunks(tk) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().zip(&mask).all(|(x, &m)| m || *x == 0.0));
        }
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn collision_agrees_with_rasterization(
        a in (-5.0..5.0f64, -5.0..5.0f64, -3.2..3.2f64, 0.5..5.0f64, 0.3..2.5f64),
        b in (-5.0..5.0f64, -5.0..5.0f64, -3.2..3.2f64, 0.5..5.0f64, 0.3..2.5f64),
    ) {
        let a = OrientedBox::new(a.0, a.1, a.2, a.3, a.4);
        let b = OrientedBox::new(b.0, b.1, b.2, b.3, b.4);
        let (expected, _) = oracles::raster_overlap(&a, &b);
        prop_assert_eq!(boxes_overlap(&a, &b), expected);
        prop_assert_eq!(boxes_overlap(&a, &b), boxes_overlap(&b, &a));
    }

    #[test]
    fn losses_match_scalar_loops(
        pred in trajectories(3, 6), gt in trajectories(4, 6),
        valid in prop::collection::vec(any::<bool>(), 3),
        probs in prop::collection::vec(0.0..1.0f64, 4), best in 0usize..4,
    ) {
        prop_assert!((prediction_loss(&pred, &gt[1..], &valid) - oracles::prediction_loss(&pred, &gt[1..], &valid)).abs() <= 1e-12);
        prop_assert!((score_loss(&probs, best).0 - oracles::score_loss(&probs, best)).abs() <= 1e-12);
        prop_assert!((ade_loss(&pred[0], &gt[0], 0.1, 0.6) - oracles::ade(&pred[0], &gt[0], 0.1, 0.6)).abs() <= 1e-12);
        prop_assert!((fde_loss(&pred[0], &gt[0]) - oracles::fde(&pred[0], &gt[0])).abs() <= 1e-12);
    }

    #[test]
    fn best_mode_matches_enumeration(seed in any::<u64>(), modes in 1usize..5) {
        let config = tiny_model_config();
        let mut frame = frame_for(&config, Template::Straight, 3, 0.5, seed % 1000);
        let mut r = rng(seed);
        let n = config.future_len;
        let traj = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<[f64; 3]> {
            (0..n).map(|_| [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), 0.0]).collect()
        };
        frame.gt_futures = (0..3).map(|_| traj(&mut r)).collect();
        for nb in &mut frame.neighbors {
            nb.valid = r.gen_bool(0.7);
        }
        let output = ModelOutput {
            ego_controls: vec![ControlSequence::zeros(n); modes],
            ego_trajectories: (0..modes).map(|_| traj(&mut r)).collect(),
            neighbor_trajectories: (0..modes).map(|_| (0..2).map(|_| traj(&mut r)).collect()).collect(),
            mode_probs: vec![1.0 / modes as f64; modes],
        };
        let valid: Vec<bool> = frame.neighbors.iter().map(|a| a.valid).collect();
        let expected = oracles::best_mode(&output.ego_trajectories, &output.neighbor_trajectories, &frame.gt_futures, &valid);
        prop_assert_eq!(select_best_mode(&output, &frame), expected);
    }

    #[test]
    fn rigid_transform_preserves_distances(origin in pose(), p in pose(), q in pose()) {
        let t = RigidTransform::to_frame_of(origin[0], origin[1], origin[2]);
        let (a, b) = (t.point(p[0], p[1]), t.point(q[0], q[1]));
        let before = (p[0] - q[0]).hypot(p[1] - q[1]);
        prop_assert!(((a.0 - b.0).hypot(a.1 - b.1) - before).abs() <= 1e-9);
        let own = t.point(origin[0], origin[1]);
        prop_assert!(own.0.abs() <= 1e-12 && own.1.abs() <= 1e-12);
    }

    #[test]
    fn rollout_is_causal(
        controls in prop::collection::vec((-5.0..5.0f64, -0.6..0.6f64), 2..30),
        at_frac in 0.0..1.0f64, bump in (-5.0..5.0f64, -0.6..0.6f64),
    ) {
        let controls: Vec<Control> = controls.into_iter().map(|(a, s)| Control::new(a, s)).collect();
        let at = ((controls.len() - 1) as f64 * at_frac) as usize;
        let mut changed = controls.clone();
        changed[at] = Control::new(bump.0, bump.1);
        let s0 = BicycleState::new(1.0, 2.0, 0.3, 8.0);
        let a = bicycle_rollout(s0, &controls, 0.1, 2.8);
        let b = bicycle_rollout(s0, &changed, 0.1, 2.8);
        prop_assert_eq!(&a[..at], &b[..at]);
    }
}

#[test]
fn edge_count_is_vertices_times_k() {
    let mut r = rng(99);
    let mut store = ParameterStore::new();
    let conv = EdgeConv::new(&mut store, "c", 3, &mut r);
    randomize(&mut store, &mut r, 1.0);
    let x = random_tensor(&mut r, &[12, 3], 2.0);
    let graph = build_knn_graph(&x, 4).unwrap();
    let mut g = Graph::with_params(&store);
    let (y, count) = conv.forward_graph(&mut g, &graph);
    assert_eq!(count, 48);
    assert!(g.value(y).is_finite());
}
