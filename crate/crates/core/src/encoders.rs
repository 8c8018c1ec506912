//! Lane, crosswalk and agent-history encoders and the agent-agent
//! interaction block.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, Embedding, Linear, Lstm, Mlp, MultiHeadAttention};
use crate::params::ParameterStore;
use crate::scenario::{
    AgentHistory, CrosswalkPolyline, LanePolyline, LaneWaypoint, AGENT_FEATURES, LANE_CATEGORICAL, LANE_NUMERIC,
};
use crate::tensor::Tensor;

/// Encoded waypoint rows `[L, F]` (or several elements stacked) with their
/// validity mask.
#[derive(Clone, Debug)]
pub struct EncodedWaypoints {
    pub features: Var,
    pub mask: Vec<bool>,
}

/// Divides the metric entries (everything except headings) of the numeric
/// features by `scale`.
fn scale_metric(values: &mut [f64], heading_slots: &[usize], scale: f64) {
    for (i, v) in values.iter_mut().enumerate() {
        if !heading_slots.contains(&i) {
            *v /= scale;
        }
    }
}

#[derive(Clone, Debug)]
pub struct LaneEncoder {
    pub numeric: Linear,
    pub embeddings: Vec<Embedding>,
    pub mlp: Mlp,
    /// Metres per unit of the numeric input.
    pub input_scale: f64,
}

impl LaneEncoder {
    pub fn new(store: &mut ParameterStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let numeric = Linear::new(store, &format!("{prefix}.numeric"), LANE_NUMERIC, dim, rng);
        let embeddings = LaneWaypoint::VOCABS
            .iter()
            .enumerate()
            .map(|(i, &v)| Embedding::new(store, &format!("{prefix}.embed{i}"), v, dim, rng))
            .collect();
        let mlp = Mlp::new(store, &format!("{prefix}.mlp"), &[2 * dim, dim, dim], rng);
        Self { numeric, embeddings, mlp, input_scale: 1.0 }
    }

    /// Encodes the lanes back to back: `[lanes.len() * L, F]`.
    pub fn encode(&self, g: &mut Graph, lanes: &[&LanePolyline]) -> Result<EncodedWaypoints> {
        let rows: usize = lanes.iter().map(|l| l.waypoints.len()).sum();
        let mut numeric = Vec::with_capacity(rows * LANE_NUMERIC);
        let mut codes = (0..LANE_CATEGORICAL).map(|_| Vec::with_capacity(rows)).collect::<Vec<_>>();
        let mut mask = Vec::with_capacity(rows);
        for lane in lanes {
            for (w, &valid) in lane.waypoints.iter().zip(&lane.mask) {
                let mut values = w.numeric();
                scale_metric(&mut values, &[2, 5, 8], self.input_scale);
                numeric.extend_from_slice(&values);
                for (c, code) in codes.iter_mut().zip(w.codes()) {
                    c.push(code);
                }
                mask.push(valid);
            }
        }
        let x = g.input(Tensor::new(vec![rows, LANE_NUMERIC], numeric));
        let encoded_numeric = self.numeric.forward(g, x);
        let mut embedded: Option<Var> = None;
        for (emb, c) in self.embeddings.iter().zip(&codes) {
            let e = emb.forward(g, c)?;
            embedded = Some(match embedded {
                None => e,
                Some(acc) => g.add(acc, e),
            });
        }
        let joined = g.concat_cols(&[embedded.expect("at least one categorical field"), encoded_numeric]);
        Ok(EncodedWaypoints { features: self.mlp.forward(g, joined), mask })
    }
}

pub fn encode_lane(g: &mut Graph, encoder: &LaneEncoder, lane: &LanePolyline) -> Result<EncodedWaypoints> {
    encoder.encode(g, &[lane])
}

#[derive(Clone, Debug)]
pub struct CrosswalkEncoder {
    pub mlp: Mlp,
    pub input_scale: f64,
}

impl CrosswalkEncoder {
    pub fn new(store: &mut ParameterStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self { mlp: Mlp::new(store, &format!("{prefix}.mlp"), &[3, dim, dim], rng), input_scale: 1.0 }
    }

    pub fn encode(&self, g: &mut Graph, crosswalks: &[&CrosswalkPolyline]) -> EncodedWaypoints {
        let rows: usize = crosswalks.iter().map(|c| c.points.len()).sum();
        let mut data = Vec::with_capacity(rows * 3);
        let mut mask = Vec::with_capacity(rows);
        for cw in crosswalks {
            for (p, &valid) in cw.points.iter().zip(&cw.mask) {
                let mut values = *p;
                scale_metric(&mut values, &[2], self.input_scale);
                data.extend_from_slice(&values);
                mask.push(valid);
            }
        }
        let x = g.input(Tensor::new(vec![rows, 3], data));
        EncodedWaypoints { features: self.mlp.forward(g, x), mask }
    }
}

pub fn encode_crosswalk(g: &mut Graph, encoder: &CrosswalkEncoder, cw: &CrosswalkPolyline) -> EncodedWaypoints {
    encoder.encode(g, &[cw])
}

/// Histories `[A, M, 7]`, agent-major, with metric features divided by `scale`.
pub fn scaled_history_tensor(agents: &[&AgentHistory], scale: f64) -> Tensor {
    let mut t = history_tensor(agents);
    for row in t.data_mut().chunks_mut(AGENT_FEATURES) {
        scale_metric(row, &[4], scale);
    }
    t
}

/// Raw histories `[A, M, 7]`, agent-major.
pub fn history_tensor(agents: &[&AgentHistory]) -> Tensor {
    let m = agents.first().map_or(0, |a| a.states.len());
    let mut data = Vec::with_capacity(agents.len() * m * AGENT_FEATURES);
    for a in agents {
        assert_eq!(a.states.len(), m, "ragged histories");
        for s in &a.states {
            data.extend_from_slice(&s.features());
        }
    }
    Tensor::new(vec![agents.len(), m, AGENT_FEATURES], data)
}

/// Step `t` of every agent, `[A, 7]`.
fn step_slice(histories: &Tensor, t: usize) -> Tensor {
    let (a, m) = (histories.shape()[0], histories.shape()[1]);
    let mut data = Vec::with_capacity(a * AGENT_FEATURES);
    for i in 0..a {
        data.extend_from_slice(histories.row(i * m + t));
    }
    Tensor::new(vec![a, AGENT_FEATURES], data)
}

/// Shared history LSTM plus the two agent-agent interaction strategies.
///
/// Strategy A aligns each step's raw features to F, attends across agents
/// per step, then runs its own LSTM over the attended steps. Strategy B
/// encodes each history with the shared LSTM and attends once across the
/// encodings. Both strategies use the same stack of residual self-attention
/// layers; their outputs are summed.
#[derive(Clone, Debug)]
pub struct AgentEncoder {
    pub history: Lstm,
    pub align: Linear,
    pub attention: Vec<MultiHeadAttention>,
    pub step_lstm: Lstm,
}

impl AgentEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        history_prefix: &str,
        prefix: &str,
        dim: usize,
        heads: usize,
        lstm_layers: usize,
        attention_layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let config = AttentionConfig::new(dim, heads)?;
        let history = Lstm::new(store, history_prefix, AGENT_FEATURES, dim, lstm_layers, rng);
        let align = Linear::new(store, &format!("{prefix}.align"), AGENT_FEATURES, dim, rng);
        let attention = (0..attention_layers)
            .map(|i| MultiHeadAttention::new(store, &format!("{prefix}.attn{i}"), config, rng))
            .collect();
        let step_lstm = Lstm::new(store, &format!("{prefix}.lstm"), dim, dim, lstm_layers, rng);
        Ok(Self { history, align, attention, step_lstm })
    }

    pub fn dim(&self) -> usize {
        self.history.hidden
    }

    /// Final hidden state of the shared history LSTM for one `[M, 7]` history.
    pub fn encode_history(&self, g: &mut Graph, history: &Tensor) -> Var {
        let x = g.input(history.clone());
        self.history.encode(g, x)
    }

    /// Shared history encodings for a batch `[A, M, 7]`, `[A, F]`.
    pub fn encode_histories(&self, g: &mut Graph, histories: &Tensor) -> Var {
        let m = histories.shape()[1];
        let steps: Vec<Var> = (0..m).map(|t| g.input(step_slice(histories, t))).collect();
        self.history.forward_batch(g, &steps)
    }

    /// Residual self-attention stack over `batches` groups of `tokens` rows.
    fn self_attend(&self, g: &mut Graph, x: Var, batches: usize, tokens: usize, mask: &[bool]) -> Var {
        let full_mask: Vec<bool> = mask.iter().copied().cycle().take(batches * tokens).collect();
        let mut h = x;
        for layer in &self.attention {
            let a = layer.forward_batched(g, h, h, h, batches, tokens, tokens, full_mask.clone());
            h = g.add(h, a.output);
        }
        h
    }

    /// Agent-agent interaction features `[A, F]` for histories `[A, M, 7]`.
    pub fn interact(&self, g: &mut Graph, histories: &Tensor, mask: &[bool]) -> Result<Var> {
        let (a, m) = (histories.shape()[0], histories.shape()[1]);
        if mask.len() != a {
            return Err(Error::Contract(format!("agent mask of length {} for {a} agents", mask.len())));
        }
        if !mask.iter().any(|&v| v) {
            return Err(Error::Contract("agent interaction with every agent masked".into()));
        }
        // Strategy A: rows ordered time-major so each step is one attention batch.
        let mut time_major = Vec::with_capacity(a * m * AGENT_FEATURES);
        for t in 0..m {
            time_major.extend_from_slice(step_slice(histories, t).data());
        }
        let raw = g.input(Tensor::new(vec![m * a, AGENT_FEATURES], time_major));
        let aligned = self.align.forward(g, raw);
        let attended = self.self_attend(g, aligned, m, a, mask);
        let steps: Vec<Var> = (0..m).map(|t| g.slice_rows(attended, t * a, (t + 1) * a)).collect();
        let strategy_a = self.step_lstm.forward_batch(g, &steps);

        let encoded = self.encode_histories(g, histories);
        let strategy_b = self.self_attend(g, encoded, 1, a, mask);
        Ok(g.add(strategy_a, strategy_b))
    }
}
