//! Map-map interaction: feature-space k-NN graphs, edge convolution and the
//! proxy-waypoint pipeline.
//!
//! Each map element (lane or crosswalk) is split into contiguous groups of
//! `l` waypoints. Group means (over valid waypoints only) form proxy
//! vertices; two edge-convolution layers run on the proxies with the graph
//! rebuilt from the current features before each layer; the result is
//! duplicated back to every waypoint of the group and added to the input.

use std::io::Write;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Directed k-NN graph over feature vectors. `edges[i]` starts with `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGraph {
    pub vertices: Tensor,
    pub edges: Vec<Vec<usize>>,
}

impl FeatureGraph {
    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Edge list as `src,dst` lines, one per edge, where `src` is the
    /// neighbor and `dst` the vertex being updated.
    pub fn write_edge_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "src,dst")?;
        for (i, nbrs) in self.edges.iter().enumerate() {
            for &j in nbrs {
                writeln!(out, "{j},{i}")?;
            }
        }
        Ok(())
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Neighbor lists over the given rows of `x`; returned indices are positions
/// within `rows`. Every vertex lists itself first, then the `k - 1` nearest
/// others by Euclidean distance, ties toward the lower index.
fn knn_lists(x: &Tensor, rows: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = rows.len();
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    (0..n)
        .map(|i| {
            order.clear();
            let xi = x.row(rows[i]);
            order.extend((0..n).filter(|&j| j != i).map(|j| (squared_distance(xi, x.row(rows[j])), j)));
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            std::iter::once(i).chain(order.iter().take(k - 1).map(|&(_, j)| j)).collect()
        })
        .collect()
}

/// k-NN graph in feature space, self-loops included.
pub fn build_knn_graph(features: &Tensor, k: usize) -> Result<FeatureGraph> {
    let l = features.rows();
    if l == 0 || k == 0 || k > l {
        return Err(Error::Contract(format!("k = {k} must be in 1..={l}")));
    }
    let rows: Vec<usize> = (0..l).collect();
    Ok(FeatureGraph { vertices: features.clone(), edges: knn_lists(features, &rows, k) })
}

/// `P_i' = max_j f([P_i, P_i - P_j])` over the neighbors `j` of `i`.
#[derive(Clone, Debug)]
pub struct EdgeConv {
    pub mlp: Mlp,
}

impl EdgeConv {
    pub fn new(store: &mut ParameterStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self { mlp: Mlp::new(store, &format!("{prefix}.mlp"), &[2 * dim, dim, dim], rng) }
    }

    /// Updates every row of `x` listed in `edges` (row `i` uses `edges[i]`)
    /// and returns the new features with the number of edges evaluated.
    pub fn forward(&self, g: &mut Graph, x: Var, edges: &[Vec<usize>]) -> (Var, usize) {
        let mut centers = Vec::new();
        let mut nbrs = Vec::new();
        let mut segments = Vec::with_capacity(edges.len());
        for (i, list) in edges.iter().enumerate() {
            assert!(!list.is_empty(), "vertex {i} has no neighbors");
            segments.push((centers.len()..centers.len() + list.len()).collect::<Vec<_>>());
            centers.extend(std::iter::repeat_n(i, list.len()));
            nbrs.extend_from_slice(list);
        }
        let count = centers.len();
        let pi = g.gather_rows(x, centers);
        let pj = g.gather_rows(x, nbrs);
        let diff = g.sub(pi, pj);
        let input = g.concat_cols(&[pi, diff]);
        let e = self.mlp.forward(g, input);
        (g.segment_max(e, &segments), count)
    }

    pub fn forward_graph(&self, g: &mut Graph, graph: &FeatureGraph) -> (Var, usize) {
        let x = g.input(graph.vertices.clone());
        self.forward(g, x, &graph.edges)
    }
}

/// Result of [`ProxyPipeline::forward`].
#[derive(Clone, Debug)]
pub struct ProxyOutput {
    /// Same shape as the input features.
    pub features: Var,
    /// Edge evaluations performed by each layer.
    pub edges_per_layer: Vec<usize>,
    /// Graph used by each layer, over the compacted proxy rows.
    pub graphs: Vec<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug)]
pub struct ProxyPipeline {
    pub layers: Vec<EdgeConv>,
    pub group: usize,
    pub k: usize,
}

impl ProxyPipeline {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        dim: usize,
        num_layers: usize,
        group: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..num_layers).map(|i| EdgeConv::new(store, &format!("{prefix}.conv{i}"), dim, rng)).collect();
        Self { layers, group, k }
    }

    /// Runs the pipeline over `masks.len()` elements stacked in `encoded`
    /// (`[elements * L, F]`). Each element has its own graph; padded
    /// waypoints never contribute to a proxy and groups with no valid
    /// waypoint produce no proxy. The effective k is capped by the number of
    /// proxies in the element.
    pub fn forward(&self, g: &mut Graph, encoded: Var, masks: &[Vec<bool>]) -> Result<ProxyOutput> {
        let l = self.group;
        let len = masks.first().map_or(0, Vec::len);
        if l == 0 || len == 0 || !len.is_multiple_of(l) {
            return Err(Error::Contract(format!("group size {l} does not divide element length {len}")));
        }
        if masks.iter().any(|m| m.len() != len) {
            return Err(Error::Contract("elements of unequal length".into()));
        }
        let value = g.value(encoded);
        let dim = value.cols();
        if value.rows() != masks.len() * len {
            return Err(Error::Contract(format!("{} rows for {} elements of {len}", value.rows(), masks.len())));
        }

        let mut groups = Vec::new();
        let mut element_of_proxy = Vec::new();
        let mut proxy_of_row = vec![usize::MAX; masks.len() * len];
        for (e, mask) in masks.iter().enumerate() {
            for start in (0..len).step_by(l) {
                let members: Vec<usize> = (start..start + l).filter(|&i| mask[i]).map(|i| e * len + i).collect();
                if members.is_empty() {
                    continue;
                }
                proxy_of_row[e * len + start..e * len + start + l].fill(groups.len());
                groups.push(members);
                element_of_proxy.push(e);
            }
        }
        if groups.is_empty() {
            return Ok(ProxyOutput { features: encoded, edges_per_layer: vec![0; self.layers.len()], graphs: Vec::new() });
        }

        let mut ranges: Vec<(usize, usize)> = Vec::new();
        for (p, &e) in element_of_proxy.iter().enumerate() {
            match ranges.last_mut() {
                Some(r) if element_of_proxy[r.0] == e => r.1 = p + 1,
                _ => ranges.push((p, p + 1)),
            }
        }

        let num_proxies = groups.len();
        let mut h = g.group_mean(encoded, groups);
        let mut edges_per_layer = Vec::with_capacity(self.layers.len());
        let mut graphs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let current = g.value(h);
            let mut edges = Vec::with_capacity(num_proxies);
            for &(a, b) in &ranges {
                let rows: Vec<usize> = (a..b).collect();
                let k = self.k.min(rows.len());
                edges.extend(knn_lists(current, &rows, k).into_iter().map(|l| l.into_iter().map(|j| j + a).collect()));
            }
            let (next, count) = layer.forward(g, h, &edges);
            h = next;
            edges_per_layer.push(count);
            graphs.push(edges);
        }

        let zero = g.input(Tensor::zeros(&[1, dim]));
        let padded = g.concat_rows(&[h, zero]);
        let index = proxy_of_row.iter().map(|&p| if p == usize::MAX { num_proxies } else { p }).collect();
        let spread = g.gather_rows(padded, index);
        let features = g.add(encoded, spread);
        Ok(ProxyOutput { features, edges_per_layer, graphs })
    }
}
