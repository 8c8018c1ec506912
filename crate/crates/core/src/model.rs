//! The full network: encoders, map graphs, agent interaction, agent-map
//! attention and decoders wired together for one frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent_map::AgentMapAttention;
use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::decoder::{BicycleState, Control, ControlSequence, EgoDecoder, EgoPlan, ModeScorer, ModelOutput, NeighborDecoder};
use crate::encoders::{scaled_history_tensor, AgentEncoder, CrosswalkEncoder, LaneEncoder};
use crate::error::{Error, Result};
use crate::map_graph::ProxyPipeline;
use crate::params::ParameterStore;
use crate::scenario::{wrap_angle, AgentHistory, CrosswalkPolyline, LanePolyline, ScenarioFrame};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub lane_encoder: LaneEncoder,
    pub crosswalk_encoder: CrosswalkEncoder,
    pub agent_encoder: AgentEncoder,
    pub lane_graph: ProxyPipeline,
    pub crosswalk_graph: ProxyPipeline,
    pub agent_map: AgentMapAttention,
    pub ego_decoder: EgoDecoder,
    pub neighbor_decoder: NeighborDecoder,
    pub scorer: ModeScorer,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub plan: EgoPlan,
    /// `[K * X, 3N]`, row `k * X + m` for neighbor `k` in mode `m`.
    pub neighbors: Var,
    /// `[1, X]`
    pub probs: Var,
    /// `[A, F]` agent-agent interaction features.
    pub interaction: Var,
    pub agent_mask: Vec<bool>,
    pub edges_per_layer: Vec<usize>,
}

impl Model {
    /// Registers every parameter in a fresh store, initialised from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParameterStore)> {
        let mut store = ParameterStore::new();
        let model = Self::build(config, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok((model, store))
    }

    pub fn build(config: ModelConfig, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let f = config.model_dim;
        let c = &config;
        Ok(Self {
            lane_encoder: LaneEncoder { input_scale: c.input_scale, ..LaneEncoder::new(store, "lane_enc", f, rng) },
            crosswalk_encoder: CrosswalkEncoder {
                input_scale: c.input_scale,
                ..CrosswalkEncoder::new(store, "cw_enc", f, rng)
            },
            agent_encoder: AgentEncoder::new(store, "hist_lstm", "a2a", f, c.a2a_heads, c.lstm_layers, c.attention_layers, rng)?,
            lane_graph: ProxyPipeline::new(store, "lane_graph", f, c.dgcnn_layers, c.proxy_group, c.knn_k, rng),
            crosswalk_graph: ProxyPipeline::new(store, "cw_graph", f, c.dgcnn_layers, c.proxy_group, c.knn_k, rng),
            agent_map: AgentMapAttention::new(store, "a2m", f, c.a2m_lane_heads, c.a2m_mode_heads, c.modes, rng)?,
            ego_decoder: EgoDecoder::new(store, "dec.ego", f, c.future_len, rng),
            neighbor_decoder: NeighborDecoder::new(store, "dec.nbr", f, c.future_len, rng),
            scorer: ModeScorer::new(store, "dec.score", f, rng),
            config,
        })
    }

    /// Rebuilds the model for `config` and loads parameters from checkpoint bytes.
    pub fn from_checkpoint(config: ModelConfig, bytes: &[u8]) -> Result<(Self, ParameterStore)> {
        let (model, mut store) = Self::new(config, 0)?;
        store.load_from(&crate::checkpoint::decode(bytes)?)?;
        Ok((model, store))
    }

    /// Checks that the frame layout matches the configuration.
    pub fn check_frame(&self, frame: &ScenarioFrame) -> Result<()> {
        let c = &self.config;
        let checks = [
            ("agents", frame.num_agents(), c.max_neighbors + 1),
            ("history_len", frame.history_len(), c.history_len),
            ("lane_len", frame.lane_len(), c.lane_len),
            ("crosswalk_len", frame.crosswalk_len(), c.crosswalk_len),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Contract(format!("frame {name} is {got}, model expects {want}")));
            }
        }
        Ok(())
    }

    /// Neighbor anchors `[K * X, 3N]` from [`kinematic_anchor`]. Decoded
    /// offsets are added to these.
    fn neighbor_anchors(&self, frame: &ScenarioFrame) -> Tensor {
        let (x_modes, n) = (self.config.modes, self.config.future_len);
        let mut data = Vec::with_capacity(frame.neighbors.len() * x_modes * 3 * n);
        for nb in &frame.neighbors {
            let anchor: Vec<f64> = kinematic_anchor(nb, n, self.config.dt).into_iter().flatten().collect();
            for _ in 0..x_modes {
                data.extend_from_slice(&anchor);
            }
        }
        Tensor::new(vec![frame.neighbors.len() * x_modes, 3 * n], data)
    }

    pub fn forward(&self, g: &mut Graph, frame: &ScenarioFrame) -> Result<Forward> {
        self.check_frame(frame)?;
        let c = &self.config;
        let agents: Vec<&AgentHistory> = frame.agents().collect();
        let a = agents.len();
        let agent_mask = frame.agent_mask();

        let interaction = self.agent_encoder.interact(g, &scaled_history_tensor(&agents, c.input_scale), &agent_mask)?;

        let lanes: Vec<&LanePolyline> = frame.maps.iter().flat_map(|m| m.lanes.iter()).collect();
        let crosswalks: Vec<&CrosswalkPolyline> = frame.maps.iter().flat_map(|m| m.crosswalks.iter()).collect();
        let lane_enc = self.lane_encoder.encode(g, &lanes)?;
        let lane_masks: Vec<Vec<bool>> = lanes.iter().map(|l| l.mask.clone()).collect();
        let lane_out = self.lane_graph.forward(g, lane_enc.features, &lane_masks)?;
        let cw_enc = self.crosswalk_encoder.encode(g, &crosswalks);
        let cw_masks: Vec<Vec<bool>> = crosswalks.iter().map(|c| c.mask.clone()).collect();
        let cw_out = self.crosswalk_graph.forward(g, cw_enc.features, &cw_masks)?;
        let mut edges_per_layer = lane_out.edges_per_layer.clone();
        for (e, extra) in edges_per_layer.iter_mut().zip(&cw_out.edges_per_layer) {
            *e += extra;
        }

        let mav = self.agent_map.stage1(
            g,
            interaction,
            lane_out.features,
            &lane_enc.mask,
            c.lane_len,
            cw_out.features,
            &cw_enc.mask,
            c.crosswalk_len,
        );
        let modes = self.agent_map.stage2(g, interaction, &mav, &agent_mask)?;
        let contexts: Vec<Var> = modes.iter().map(|&ctx| g.concat_cols(&[interaction, ctx])).collect();

        let x_modes = c.modes;
        let stacked = g.concat_rows(&contexts);
        let ego_ctx = g.gather_rows(stacked, (0..x_modes).map(|m| m * a).collect());
        let initial = BicycleState::from_agent(frame.ego.current());
        let plan = self.ego_decoder.forward(g, ego_ctx, initial, c.dt, c.wheelbase);

        let k = a - 1;
        let neighbors = if k > 0 {
            let rows = (0..k * x_modes).map(|r| (r % x_modes) * a + r / x_modes + 1).collect();
            let nbr_ctx = g.gather_rows(stacked, rows);
            self.neighbor_decoder.forward(g, nbr_ctx, &self.neighbor_anchors(frame))
        } else {
            g.input(Tensor::zeros(&[0, 3 * c.future_len]))
        };
        let probs = self.scorer.forward(g, &contexts, &agent_mask);
        Ok(Forward { plan, neighbors, probs, interaction, agent_mask, edges_per_layer })
    }

    /// Reads the forward pass values into a [`ModelOutput`].
    pub fn output(&self, g: &Graph, fwd: &Forward) -> ModelOutput {
        let (x_modes, n) = (self.config.modes, self.config.future_len);
        let accel = g.value(fwd.plan.accel);
        let steer = g.value(fwd.plan.steer);
        let traj = g.value(fwd.plan.trajectory).data();
        let nbr = g.value(fwd.neighbors);
        let k = nbr.rows() / x_modes.max(1);
        let pose = |row: &[f64], t: usize| [row[3 * t], row[3 * t + 1], row[3 * t + 2]];
        ModelOutput {
            ego_controls: (0..x_modes)
                .map(|m| ControlSequence((0..n).map(|t| Control::new(accel.at(m, t), steer.at(m, t))).collect()))
                .collect(),
            ego_trajectories: (0..x_modes).map(|m| (0..n).map(|t| pose(&traj[m * 3 * n..], t)).collect()).collect(),
            neighbor_trajectories: (0..x_modes)
                .map(|m| (0..k).map(|j| (0..n).map(|t| pose(nbr.row(j * x_modes + m), t)).collect()).collect())
                .collect(),
            mode_probs: g.value(fwd.probs).data().to_vec(),
        }
    }

    pub fn predict(&self, store: &ParameterStore, frame: &ScenarioFrame) -> Result<ModelOutput> {
        let mut g = Graph::with_params(store);
        let fwd = self.forward(&mut g, frame)?;
        Ok(self.output(&g, &fwd))
    }
}

/// Extrapolates the agent's last observed speed, yaw rate and longitudinal
/// acceleration over `n` steps (Euler, as the bicycle model integrates).
pub fn kinematic_anchor(agent: &AgentHistory, n: usize, dt: f64) -> Vec<[f64; 3]> {
    let s = agent.current();
    let (yaw_rate, accel) = match agent.states.len() {
        0 | 1 => (0.0, 0.0),
        len => {
            let p = &agent.states[len - 2];
            (wrap_angle(s.heading - p.heading) / dt, (s.speed() - p.speed()) / dt)
        }
    };
    let (mut x, mut y, mut heading, mut speed) = (s.x, s.y, s.heading, s.speed());
    (0..n)
        .map(|_| {
            x += speed * heading.cos() * dt;
            y += speed * heading.sin() * dt;
            heading += yaw_rate * dt;
            speed = (speed + accel * dt).max(0.0);
            [x, y, heading]
        })
        .collect()
}
