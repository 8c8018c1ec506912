//! Differentiable building blocks: affine layers, ReLU MLPs, embeddings,
//! stacked LSTMs and multi-head attention.
//!
//! Every block registers its parameters in a [`ParameterStore`] at
//! construction and records its forward pass on a [`Graph`].

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParameterStore};
use crate::tensor::Tensor;

/// Affine map `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.register(&format!("{prefix}.weight"), &[in_dim, out_dim], Init::fan_in(in_dim), rng);
        let bias = store.register(&format!("{prefix}.bias"), &[out_dim], Init::Zeros, rng);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        assert_eq!(
            g.value(x).cols(),
            self.in_dim,
            "linear expects trailing dim {}, got {:?}",
            self.in_dim,
            g.value(x).shape()
        );
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Linear layers separated by ReLU; the last layer has no activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width from input to output, e.g. `[in, hidden, out]`.
    pub fn new(store: &mut ParameterStore, prefix: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{prefix}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i < last {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }
}

/// Lookup table for categorical codes.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParameterStore, prefix: &str, vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let table = store.register(&format!("{prefix}.table"), &[vocab, dim], Init::fan_in(dim), rng);
        Self { table, vocab, dim }
    }

    /// One row per code, shape `[codes.len(), dim]`.
    pub fn forward(&self, g: &mut Graph, codes: &[usize]) -> Result<Var> {
        if let Some(&bad) = codes.iter().find(|&&c| c >= self.vocab) {
            return Err(Error::Contract(format!("code {bad} outside vocabulary of size {}", self.vocab)));
        }
        let t = g.param(self.table);
        Ok(g.gather_rows(t, codes.to_vec()))
    }
}

#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

/// Stacked LSTM with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let init = Init::fan_in(hidden);
        let layers = (0..num_layers)
            .map(|l| {
                let input = if l == 0 { in_dim } else { hidden };
                LstmLayer {
                    w_ih: store.register(&format!("{prefix}.l{l}.w_ih"), &[input, 4 * hidden], init, rng),
                    w_hh: store.register(&format!("{prefix}.l{l}.w_hh"), &[hidden, 4 * hidden], init, rng),
                    bias: store.register(&format!("{prefix}.l{l}.bias"), &[4 * hidden], Init::Zeros, rng),
                }
            })
            .collect();
        Self { layers, in_dim, hidden }
    }

    /// Runs a batch of sequences; `steps[t]` is `[batch, in_dim]`. Returns the
    /// top layer's hidden state after the final step, `[batch, hidden]`.
    pub fn forward_batch(&self, g: &mut Graph, steps: &[Var]) -> Var {
        assert!(!steps.is_empty(), "LSTM needs at least one step");
        let batch = g.value(steps[0]).rows();
        let h_dim = self.hidden;
        let mut inputs: Vec<Var> = steps.to_vec();
        for layer in &self.layers {
            let w_ih = g.param(layer.w_ih);
            let w_hh = g.param(layer.w_hh);
            let bias = g.param(layer.bias);
            let mut h = g.input(Tensor::zeros(&[batch, h_dim]));
            let mut c = g.input(Tensor::zeros(&[batch, h_dim]));
            let mut outputs = Vec::with_capacity(inputs.len());
            for &x in &inputs {
                assert_eq!(g.value(x).rows(), batch, "LSTM batch size changed between steps");
                let xi = g.matmul(x, w_ih);
                let hh = g.matmul(h, w_hh);
                let pre = g.add(xi, hh);
                let pre = g.add_row(pre, bias);
                let i = g.slice_cols(pre, 0, h_dim);
                let f = g.slice_cols(pre, h_dim, 2 * h_dim);
                let cell = g.slice_cols(pre, 2 * h_dim, 3 * h_dim);
                let o = g.slice_cols(pre, 3 * h_dim, 4 * h_dim);
                let i = g.sigmoid(i);
                let f = g.sigmoid(f);
                let cell = g.tanh(cell);
                let o = g.sigmoid(o);
                let keep = g.mul(f, c);
                let write = g.mul(i, cell);
                c = g.add(keep, write);
                let tc = g.tanh(c);
                h = g.mul(o, tc);
                outputs.push(h);
            }
            inputs = outputs;
        }
        *inputs.last().unwrap()
    }

    /// Encodes one sequence `[M, in_dim]` into its final hidden state `[hidden]`.
    pub fn encode(&self, g: &mut Graph, sequence: Var) -> Var {
        let m = g.value(sequence).rows();
        let steps: Vec<Var> = (0..m).map(|t| g.slice_rows(sequence, t, t + 1)).collect();
        let h = self.forward_batch(g, &steps);
        g.reshape(h, vec![self.hidden])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || model_dim == 0 || !model_dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!("{num_heads} heads do not divide model dim {model_dim}")));
        }
        Ok(Self { model_dim, num_heads })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Multi-head scaled dot-product attention with learned Q/K/V and output
/// projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub config: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Output of an attention pass plus the node that carries its weights.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub core: Var,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParameterStore, prefix: &str, config: AttentionConfig, rng: &mut impl Rng) -> Self {
        let d = config.model_dim;
        Self {
            config,
            query: Linear::new(store, &format!("{prefix}.q"), d, d, rng),
            key: Linear::new(store, &format!("{prefix}.k"), d, d, rng),
            value: Linear::new(store, &format!("{prefix}.v"), d, d, rng),
            output: Linear::new(store, &format!("{prefix}.o"), d, d, rng),
        }
    }

    /// Batched attention: `queries` is `[batches*tq, d]`, `keys`/`values` are
    /// `[batches*tk, d]`, `key_mask` flags valid keys. Batches without any
    /// valid key produce `output`-bias rows and must be masked by the caller.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_batched(
        &self,
        g: &mut Graph,
        queries: Var,
        keys: Var,
        values: Var,
        batches: usize,
        tq: usize,
        tk: usize,
        key_mask: Vec<bool>,
    ) -> Attended {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, keys);
        let v = self.value.forward(g, values);
        let core = g.attention(q, k, v, self.config.num_heads, batches, tq, tk, key_mask);
        let output = self.output.forward(g, core);
        Attended { output, core }
    }

    /// Single-batch attention `[tq, d] x [tk, d] -> [tq, d]`. Every query must
    /// see at least one unmasked key.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, values: Var, key_mask: &[bool]) -> Result<Attended> {
        let tq = g.value(queries).rows();
        let tk = g.value(keys).rows();
        if key_mask.len() != tk {
            return Err(Error::Contract(format!("mask length {} for {tk} keys", key_mask.len())));
        }
        if !key_mask.iter().any(|&m| m) {
            return Err(Error::Contract("attention with every key masked".into()));
        }
        Ok(self.forward_batched(g, queries, keys, values, 1, tq, tk, key_mask.to_vec()))
    }
}
