#![allow(dead_code)]

pub mod oracles;

use planpred::autodiff::{Graph, Var};
use planpred::config::{LossWeights, ModelConfig, TrainConfig};
use planpred::decoder::{rollout_graph, BicycleState, EgoDecoder, ModeScorer, NeighborDecoder};
use planpred::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use planpred::losses::{total_loss, total_loss_graph};
use planpred::map_graph::{build_knn_graph, EdgeConv, ProxyPipeline};
use planpred::model::Model;
use planpred::nn::{AttentionConfig, Embedding, Linear, Lstm, Mlp, MultiHeadAttention};
use planpred::params::{ParamGrads, ParameterStore};
use planpred::scenario::{generate_scenario, GeneratorSpec, ScenarioFrame, Template};
use planpred::training::{evaluate, train, TrainOptions, Trained};
use planpred::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// Replaces every parameter with uniform noise so no branch starts at zero.
pub fn randomize(store: &mut ParameterStore, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
pub fn probe(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let r = g.input(random_tensor(&mut rng(seed), &shape, 1.0));
    let prod = g.mul(out, r);
    g.sum(prod)
}

pub fn finish(g: &Graph, loss: Var, store: &ParameterStore) -> planpred::Result<(f64, ParamGrads)> {
    let grads = g.backward(loss).param_grads(store);
    Ok((g.value(loss).data()[0], grads))
}

pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

/// Tolerance for single-op primitives; composite modules get 1e-3.
pub const SHALLOW: f64 = 1e-6;
pub const DEEP: f64 = 1e-3;

fn check(
    name: &'static str,
    tolerance: f64,
    store: &ParameterStore,
    opts: GradCheckOptions,
    eval: impl Fn(&ParameterStore) -> planpred::Result<(f64, ParamGrads)>,
) -> GradCase {
    let report = grad_check(store, eval, tolerance, opts).unwrap_or_else(|e| panic!("{name}: {e}"));
    GradCase { name, tolerance, report }
}

pub fn grad_linear() -> GradCase {
    let mut r = rng(1);
    let mut store = ParameterStore::new();
    let lin = Linear::new(&mut store, "lin", 5, 4, &mut r);
    randomize(&mut store, &mut r, 0.5);
    let x = random_tensor(&mut r, &[3, 5], 1.0);
    check("linear", SHALLOW, &store, GradCheckOptions::default(), |s| {
        let mut g = Graph::with_params(s);
        let xi = g.input(x.clone());
        let y = lin.forward(&mut g, xi);
        let loss = probe(&mut g, y, 2);
        finish(&g, loss, s)
    })
}

pub fn grad_mlp() -> GradCase {
    let mut r = rng(3);
    let mut store = ParameterStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[6, 8, 3], &mut r);
    randomize(&mut store, &mut r, 0.5);
    let x = random_tensor(&mut r, &[4, 6], 1.0);
    check("mlp", SHALLOW, &store, GradCheckOptions::default(), |s| {
        let mut g = Graph::with_params(s);
        let xi = g.input(x.clone());
        let y = mlp.forward(&mut g, xi);
        let loss = probe(&mut g, y, 4);
        finish(&g, loss, s)
    })
}

pub fn grad_embedding() -> GradCase {
    let mut r = rng(5);
    let mut store = ParameterStore::new();
    let emb = Embedding::new(&mut store, "emb", 5, 4, &mut r);
    check("embedding", SHALLOW, &store, GradCheckOptions::default(), |s| {
        let mut g = Graph::with_params(s);
        let y = emb.forward(&mut g, &[0, 3, 3, 1])?;
        let loss = probe(&mut g, y, 6);
        finish(&g, loss, s)
    })
}

pub fn grad_lstm() -> GradCase {
    let mut r = rng(7);
    let mut store = ParameterStore::new();
    let lstm = Lstm::new(&mut store, "lstm", 3, 4, 2, &mut r);
    randomize(&mut store, &mut r, 0.5);
    let seq = random_tensor(&mut r, &[5, 3], 1.0);
    check("lstm", DEEP, &store, GradCheckOptions::default(), |s| {
        let mut g = Graph::with_params(s);
        let x = g.input(seq.clone());
        let h = lstm.encode(&mut g, x);
        let loss = probe(&mut g, h, 8);
        finish(&g, loss, s)
    })
}

pub fn grad_attention() -> GradCase {
    let mut r = rng(9);
    let mut store = ParameterStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", AttentionConfig::new(8, 2).unwrap(), &mut r);
    randomize(&mut store, &mut r, 0.4);
    let q = random_tensor(&mut r, &[3, 8], 1.0);
    let kv = random_tensor(&mut r, &[4, 8], 1.0);
    check("attention", DEEP, &store, GradCheckOptions::default(), |s| {
        let mut g = Graph::with_params(s);
        let (qi, ki) = (g.input(q.clone()), g.input(kv.clone()));
        let out = mha.forward(&mut g, qi, ki, ki, &[true, false, true, true])?;
        let loss = probe(&mut g, out.output, 10);
        finish(&g, loss, s)
    })
}

pub fn grad_edge_conv() -> GradCase {
    let mut r = rng(11);
    let mut store = ParameterStore::new();
    let conv = EdgeConv::new(&mut store, "conv", 4, &mut r);
    randomize(&mut store, &mut r, 0.5);
    let x = random_tensor(&mut r, &[6, 4], 1.0);
    let graph = build_knn_graph(&x, 3).unwrap();
    check("edge_conv", DEEP, &store, GradCheckOptions::default(), |s| {
        let mut g = Graph::with_params(s);
        let xi = g.input(x.clone());
        let (y, _) = conv.forward(&mut g, xi, &graph.edges);
        let loss = probe(&mut g, y, 12);
        finish(&g, loss, s)
    })
}

pub fn grad_proxy_pipeline() -> GradCase {
    let mut r = rng(13);
    let mut store = ParameterStore::new();
    let pipe = ProxyPipeline::new(&mut store, "proxy", 4, 2, 2, 2, &mut r);
    randomize(&mut store, &mut r, 0.5);
    let encoded = random_tensor(&mut r, &[16, 4], 1.0);
    let masks = vec![vec![true; 8], [vec![true; 5], vec![false; 3]].concat()];
    check("proxy_pipeline", DEEP, &store, GradCheckOptions::default(), |s| {
        let mut g = Graph::with_params(s);
        let x = g.input(encoded.clone());
        let out = pipe.forward(&mut g, x, &masks)?;
        let loss = probe(&mut g, out.features, 14);
        finish(&g, loss, s)
    })
}

pub fn grad_decoders() -> GradCase {
    let mut r = rng(15);
    let mut store = ParameterStore::new();
    let (dim, steps) = (4, 5);
    let ego = EgoDecoder::new(&mut store, "ego", dim, steps, &mut r);
    let nbr = NeighborDecoder::new(&mut store, "nbr", dim, steps, &mut r);
    let scorer = ModeScorer::new(&mut store, "score", dim, &mut r);
    randomize(&mut store, &mut r, 0.5);
    let ctx = random_tensor(&mut r, &[1, 2 * dim], 1.0);
    let nbr_ctx = random_tensor(&mut r, &[3, 2 * dim], 1.0);
    let anchors = random_tensor(&mut r, &[3, 3 * steps], 5.0);
    let modes: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, &[3, 2 * dim], 1.0)).collect();
    check("decoders", DEEP, &store, GradCheckOptions::default(), |s| {
        let mut g = Graph::with_params(s);
        let c = g.input(ctx.clone());
        let plan = ego.forward(&mut g, c, BicycleState::new(0.0, 0.0, 0.1, 6.0), 0.1, 2.8);
        let a = probe(&mut g, plan.trajectory, 16);
        let nc = g.input(nbr_ctx.clone());
        let preds = nbr.forward(&mut g, nc, &anchors);
        let b = probe(&mut g, preds, 17);
        let contexts: Vec<Var> = modes.iter().map(|m| g.input(m.clone())).collect();
        let probs = scorer.forward(&mut g, &contexts, &[true, true, false]);
        let c = probe(&mut g, probs, 18);
        let ab = g.add(a, b);
        let loss = g.add(ab, c);
        finish(&g, loss, s)
    })
}

pub fn grad_bicycle_rollout() -> GradCase {
    let mut r = rng(19);
    let mut store = ParameterStore::new();
    store.insert("accel", random_tensor(&mut r, &[2, 6], 2.0));
    store.insert("steer", random_tensor(&mut r, &[2, 6], 0.3));
    check("bicycle_rollout", DEEP, &store, GradCheckOptions::default(), |s| {
        let mut g = Graph::with_params(s);
        let a = g.param(s.id("accel").unwrap());
        let d = g.param(s.id("steer").unwrap());
        let poses = rollout_graph(&mut g, BicycleState::new(1.0, -2.0, 0.4, 7.0), a, d, 0.1, 2.8);
        let loss = probe(&mut g, poses, 20);
        finish(&g, loss, s)
    })
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        model_dim: 8,
        a2a_heads: 2,
        a2m_lane_heads: 2,
        a2m_mode_heads: 2,
        knn_k: 2,
        proxy_group: 4,
        max_neighbors: 2,
        history_len: 4,
        future_len: 5,
        lane_len: 8,
        crosswalk_len: 8,
        lstm_layers: 1,
        attention_layers: 1,
        dgcnn_layers: 1,
        ..ModelConfig::default()
    }
}

pub fn frame_for(config: &ModelConfig, template: Template, agents: usize, seconds: f64, seed: u64) -> ScenarioFrame {
    let mut spec = GeneratorSpec::new(template, agents, [4.0, 12.0], seconds);
    spec.layout = config.layout();
    generate_scenario(seed, &spec).unwrap()
}

pub fn grad_total_loss() -> GradCase {
    let config = tiny_model_config();
    let (model, mut store) = Model::new(config.clone(), 3).unwrap();
    randomize(&mut store, &mut rng(21), 0.3);
    let frame = frame_for(&config, Template::Intersection, 3, 0.5, 4);
    let weights = LossWeights::default();
    let opts = GradCheckOptions { max_per_tensor: Some(4), ..GradCheckOptions::default() };
    check("total_loss", DEEP, &store, opts, |s| {
        let mut g = Graph::with_params(s);
        let fwd = model.forward(&mut g, &frame)?;
        let out = model.output(&g, &fwd);
        let (loss, _) = total_loss_graph(&mut g, &fwd, &out, &frame, &weights, &model.config);
        finish(&g, loss, s)
    })
}

pub fn gradient_suite() -> Vec<GradCase> {
    vec![
        grad_linear(),
        grad_mlp(),
        grad_embedding(),
        grad_lstm(),
        grad_attention(),
        grad_edge_conv(),
        grad_proxy_pipeline(),
        grad_decoders(),
        grad_bicycle_rollout(),
        grad_total_loss(),
    ]
}

/// The reduced end-to-end configuration used for the overfit run.
pub fn overfit_frames(config: &ModelConfig) -> Vec<ScenarioFrame> {
    let templates = [Template::Straight, Template::Arc, Template::Intersection, Template::Crosswalk];
    (0..16u64).map(|i| frame_for(config, templates[i as usize % 4], 5, 2.0, 100 + i)).collect()
}

pub struct OverfitResult {
    /// Mean total loss over the frames at the first step.
    pub initial_loss: f64,
    /// Mean total loss over the frames after the last update.
    pub final_loss: f64,
    pub prediction_ade: f64,
    pub planning_ade: f64,
    pub seconds: f64,
    pub trained: Trained,
}

/// 500 Adam steps at a constant 2e-4 over all 16 frames per step.
pub fn overfit() -> OverfitResult {
    let model = ModelConfig::desk();
    let frames = overfit_frames(&model);
    let cfg = TrainConfig { batch_size: 16, epochs: 500, halve_every: 1000, model, ..TrainConfig::default() };
    let t = std::time::Instant::now();
    let trained = train(&frames, &cfg, &TrainOptions::default()).unwrap();
    let seconds = t.elapsed().as_secs_f64();
    let evals = evaluate(&trained.model, &trained.store, &frames).unwrap();
    let n = evals.len() as f64;
    let m = &trained.model.config;
    let final_loss = frames
        .iter()
        .map(|f| {
            let out = trained.model.predict(&trained.store, f).unwrap();
            total_loss(f, &out, &cfg.weights, m.dt, m.horizon()).total
        })
        .sum::<f64>()
        / n;
    OverfitResult {
        initial_loss: trained.report.initial_loss().unwrap(),
        final_loss,
        prediction_ade: evals.iter().map(|e| e.prediction_ade).sum::<f64>() / n,
        planning_ade: evals.iter().map(|e| e.planning_ade).sum::<f64>() / n,
        seconds,
        trained,
    }
}
