//! Hierarchical agent-map cross-attention.
//!
//! Stage 1 attends from each agent to every one of its map elements
//! separately, giving one vector per element. Stage 2 runs X independent
//! attention modules from the agent over those vectors, one per mode.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, MultiHeadAttention};
use crate::params::ParameterStore;
use crate::scenario::{CROSSWALKS_PER_AGENT, LANES_PER_AGENT, MAP_ELEMENTS};
use crate::tensor::Tensor;

/// Per-agent map attention vectors, `[A * 10, F]` with lanes before
/// crosswalks inside each agent's block.
#[derive(Clone, Debug)]
pub struct MapAttentionVectors {
    pub vectors: Var,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct AgentMapAttention {
    pub lane: MultiHeadAttention,
    pub crosswalk: MultiHeadAttention,
    pub modes: Vec<MultiHeadAttention>,
}

/// Row mask as a `[rows, cols]` 0/1 tensor.
fn row_mask(mask: &[bool], cols: usize) -> Tensor {
    let data = mask.iter().flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, cols)).collect();
    Tensor::new(vec![mask.len(), cols], data)
}

impl AgentMapAttention {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        dim: usize,
        element_heads: usize,
        mode_heads: usize,
        modes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let element = AttentionConfig::new(dim, element_heads)?;
        let mode = AttentionConfig::new(dim, mode_heads)?;
        Ok(Self {
            lane: MultiHeadAttention::new(store, &format!("{prefix}.stage1.lane"), element, rng),
            crosswalk: MultiHeadAttention::new(store, &format!("{prefix}.stage1.cw"), element, rng),
            modes: (0..modes)
                .map(|m| MultiHeadAttention::new(store, &format!("{prefix}.stage2.mode{m}"), mode, rng))
                .collect(),
        })
    }

    /// One query per (agent, element) against that element's waypoints.
    /// `lanes` holds `A * 6` elements of `lane_len` rows, `crosswalks` holds
    /// `A * 4` elements of `cw_len` rows. Fully padded elements give zero rows.
    #[allow(clippy::too_many_arguments)]
    pub fn stage1(
        &self,
        g: &mut Graph,
        agents: Var,
        lanes: Var,
        lane_mask: &[bool],
        lane_len: usize,
        crosswalks: Var,
        cw_mask: &[bool],
        cw_len: usize,
    ) -> MapAttentionVectors {
        let a = g.value(agents).rows();
        let dim = g.value(agents).cols();
        let lane_q = g.gather_rows(agents, (0..a * LANES_PER_AGENT).map(|i| i / LANES_PER_AGENT).collect());
        let cw_q = g.gather_rows(agents, (0..a * CROSSWALKS_PER_AGENT).map(|i| i / CROSSWALKS_PER_AGENT).collect());
        let lane_out =
            self.lane.forward_batched(g, lane_q, lanes, lanes, a * LANES_PER_AGENT, 1, lane_len, lane_mask.to_vec());
        let cw_out = self.crosswalk.forward_batched(
            g,
            cw_q,
            crosswalks,
            crosswalks,
            a * CROSSWALKS_PER_AGENT,
            1,
            cw_len,
            cw_mask.to_vec(),
        );
        let stacked = g.concat_rows(&[lane_out.output, cw_out.output]);
        let lane_rows = a * LANES_PER_AGENT;
        let mut order = Vec::with_capacity(a * MAP_ELEMENTS);
        let mut mask = Vec::with_capacity(a * MAP_ELEMENTS);
        for i in 0..a {
            for e in 0..LANES_PER_AGENT {
                let b = i * LANES_PER_AGENT + e;
                order.push(b);
                mask.push(lane_mask[b * lane_len..(b + 1) * lane_len].iter().any(|&m| m));
            }
            for e in 0..CROSSWALKS_PER_AGENT {
                let b = i * CROSSWALKS_PER_AGENT + e;
                order.push(lane_rows + b);
                mask.push(cw_mask[b * cw_len..(b + 1) * cw_len].iter().any(|&m| m));
            }
        }
        let ordered = g.gather_rows(stacked, order);
        let m = g.input(row_mask(&mask, dim));
        MapAttentionVectors { vectors: g.mul(ordered, m), mask }
    }

    /// Context `[A, F]` per mode. Every valid agent needs a valid map element;
    /// rows of invalid agents are meaningless.
    pub fn stage2(&self, g: &mut Graph, agents: Var, mav: &MapAttentionVectors, agent_mask: &[bool]) -> Result<Vec<Var>> {
        let a = g.value(agents).rows();
        for (i, &valid) in agent_mask.iter().enumerate() {
            if valid && !mav.mask[i * MAP_ELEMENTS..(i + 1) * MAP_ELEMENTS].iter().any(|&m| m) {
                return Err(Error::Contract(format!("agent {i} has every map element masked")));
            }
        }
        Ok(self
            .modes
            .iter()
            .map(|module| {
                module.forward_batched(g, agents, mav.vectors, mav.vectors, a, 1, MAP_ELEMENTS, mav.mask.clone()).output
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const F: usize = 8;
    const LANE: usize = 5;
    const CW: usize = 3;

    fn random(rng: &mut impl Rng, rows: usize) -> Tensor {
        Tensor::new(vec![rows, F], (0..rows * F).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    struct Case {
        agents: Tensor,
        lanes: Tensor,
        lane_mask: Vec<bool>,
        cws: Tensor,
        cw_mask: Vec<bool>,
    }

    fn case(a: usize, seed: u64) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lane_mask: Vec<bool> = (0..a * 6 * LANE).map(|_| rng.gen_bool(0.7)).collect();
        lane_mask[0] = true;
        // Lane 2 of agent 0 is fully padded.
        lane_mask[2 * LANE..3 * LANE].iter_mut().for_each(|m| *m = false);
        let cw_mask = (0..a * 4 * CW).map(|_| rng.gen_bool(0.5)).collect();
        Case {
            agents: random(&mut rng, a),
            lanes: random(&mut rng, a * 6 * LANE),
            lane_mask,
            cws: random(&mut rng, a * 4 * CW),
            cw_mask,
        }
    }

    fn module(seed: u64) -> (ParameterStore, AgentMapAttention) {
        let mut store = ParameterStore::new();
        let m = AgentMapAttention::new(&mut store, "a2m", F, 4, 2, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (store, m)
    }

    fn run_stage1(store: &ParameterStore, m: &AgentMapAttention, c: &Case) -> (Tensor, Vec<bool>) {
        let mut g = Graph::with_params(store);
        let agents = g.input(c.agents.clone());
        let lanes = g.input(c.lanes.clone());
        let cws = g.input(c.cws.clone());
        let mav = m.stage1(&mut g, agents, lanes, &c.lane_mask, LANE, cws, &c.cw_mask, CW);
        (g.value(mav.vectors).clone(), mav.mask)
    }

    #[test]
    fn stage1_shape_and_padded_element() {
        let (store, m) = module(1);
        let c = case(2, 1);
        let (v, mask) = run_stage1(&store, &m, &c);
        assert_eq!(v.shape(), &[20, F]);
        assert!(!mask[2]);
        assert!(v.row(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_valid_waypoint_gives_its_value_projection() {
        let (store, m) = module(2);
        let mut c = case(1, 2);
        c.lane_mask[..LANE].iter_mut().enumerate().for_each(|(i, v)| *v = i == 3);
        let (v, _) = run_stage1(&store, &m, &c);
        let mut g = Graph::with_params(&store);
        let w = g.input(Tensor::new(vec![1, F], c.lanes.row(3).to_vec()));
        let proj = m.lane.value.forward(&mut g, w);
        let out = m.lane.output.forward(&mut g, proj);
        for (a, b) in v.row(0).iter().zip(g.value(out).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stage1_elements_are_independent_and_padding_is_opaque() {
        let (store, m) = module(3);
        let c = case(2, 3);
        let (base, mask) = run_stage1(&store, &m, &c);
        let mut changed = Case { lanes: c.lanes.clone(), agents: c.agents.clone(), cws: c.cws.clone(), lane_mask: c.lane_mask.clone(), cw_mask: c.cw_mask.clone() };
        // Rewrite every waypoint of lane 4 of agent 1 and every padded waypoint elsewhere.
        let lane4 = (6 + 4) * LANE;
        for r in 0..changed.lanes.rows() {
            if (lane4..lane4 + LANE).contains(&r) || !c.lane_mask[r] {
                changed.lanes.row_mut(r).iter_mut().for_each(|x| *x = *x * 3.0 + 5.0);
            }
        }
        let (after, _) = run_stage1(&store, &m, &changed);
        for i in 0..20 {
            let row_changed = after.row(i) != base.row(i);
            assert_eq!(row_changed, i == 14 && mask[14], "row {i}");
        }
    }

    fn run_stage2(store: &ParameterStore, m: &AgentMapAttention, agents: &Tensor, mav: &Tensor, mask: &[bool]) -> Vec<Tensor> {
        let mut g = Graph::with_params(store);
        let a = g.input(agents.clone());
        let v = g.input(mav.clone());
        let mav = MapAttentionVectors { vectors: v, mask: mask.to_vec() };
        let out = m.stage2(&mut g, a, &mav, &vec![true; agents.rows()]).unwrap();
        out.into_iter().map(|o| g.value(o).clone()).collect()
    }

    #[test]
    fn stage2_is_invariant_to_key_order() {
        let (store, m) = module(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let agents = random(&mut rng, 1);
        let mav = random(&mut rng, 10);
        let mask: Vec<bool> = (0..10).map(|i| i % 3 != 1).collect();
        let base = run_stage2(&store, &m, &agents, &mav, &mask);
        assert_eq!(base.len(), 3);
        assert_eq!(base[0].shape(), &[1, F]);
        let perm = [7, 2, 9, 0, 4, 1, 8, 3, 6, 5];
        let pm = Tensor::new(vec![10, F], perm.iter().flat_map(|&i| mav.row(i).to_vec()).collect());
        let pmask: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        let out = run_stage2(&store, &m, &agents, &pm, &pmask);
        for (a, b) in out.iter().zip(&base) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn tied_modules_agree_and_modes_are_independent() {
        let (mut store, m) = module(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let agents = random(&mut rng, 2);
        let mav = random(&mut rng, 20);
        let mask = vec![true; 20];
        let base = run_stage2(&store, &m, &agents, &mav, &mask);

        let first = store.id("a2m.stage2.mode1.q.weight").unwrap();
        store.value_mut(first).data_mut()[0] += 0.5;
        let perturbed = run_stage2(&store, &m, &agents, &mav, &mask);
        assert_eq!(perturbed[0], base[0]);
        assert_ne!(perturbed[1], base[1]);
        assert_eq!(perturbed[2], base[2]);

        let names: Vec<String> = store.named_values().map(|(n, _)| n.to_string()).collect();
        for n in names.iter().filter(|n| n.contains("stage2.mode0")) {
            let v = store.get(n).unwrap().clone();
            for m in 1..3 {
                let id = store.id(&n.replace("mode0", &format!("mode{m}"))).unwrap();
                *store.value_mut(id) = v.clone();
            }
        }
        let tied = run_stage2(&store, &m, &agents, &mav, &mask);
        assert_eq!(tied[0], tied[1]);
        assert_eq!(tied[1], tied[2]);
    }

    #[test]
    fn single_map_vector_gives_its_value_projection_in_every_mode() {
        let (store, m) = module(6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let agents = random(&mut rng, 1);
        let mav = random(&mut rng, 10);
        let mask: Vec<bool> = (0..10).map(|i| i == 6).collect();
        let out = run_stage2(&store, &m, &agents, &mav, &mask);
        for (module, ctx) in m.modes.iter().zip(&out) {
            let mut g = Graph::with_params(&store);
            let x = g.input(Tensor::new(vec![1, F], mav.row(6).to_vec()));
            let v = module.value.forward(&mut g, x);
            let o = module.output.forward(&mut g, v);
            for (a, b) in ctx.data().iter().zip(g.value(o).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn agent_without_map_is_rejected() {
        let (store, m) = module(7);
        let mut g = Graph::with_params(&store);
        let a = g.input(Tensor::zeros(&[1, F]));
        let v = g.input(Tensor::zeros(&[10, F]));
        let mav = MapAttentionVectors { vectors: v, mask: vec![false; 10] };
        assert!(matches!(m.stage2(&mut g, a, &mav, &[true]), Err(Error::Contract(_))));
    }
}
