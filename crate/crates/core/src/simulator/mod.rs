//! Closed-loop log replay: the ego replans every step and executes only the
//! first control of the chosen plan; every other agent follows its log.

mod collision;
mod metrics;
mod refine;

pub use collision::{boxes_overlap, collision_check, OrientedBox};
pub use metrics::{
    config_hash, distance_to_polyline, metrics, write_sim_report, EpisodeMetrics, EpisodeTrace, SIM_REPORT_HEADER,
};
pub use refine::{refine_plan_gradient, GradientRefiner, IdentityRefiner, PlanRefiner, RefineContext};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::decoder::{bicycle_step, BicycleState, Control, ControlSequence, ModelOutput};
use crate::error::{Error, Result};
use crate::losses::{mean_displacement, select_best_mode};
use crate::model::Model;
use crate::params::ParameterStore;
use crate::scenario::{normalize_to_ego_frame, wrap_angle, AgentHistory, AgentState, ScenarioFrame};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub horizon_seconds: f64,
    /// Lateral distance from the route centerline beyond which the ego
    /// counts as off route.
    pub off_route_threshold: f64,
    pub dt: f64,
    pub wheelbase: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { horizon_seconds: 10.0, off_route_threshold: 3.0, dt: 0.1, wheelbase: 2.8 }
    }
}

impl SimConfig {
    pub fn for_model(model: &ModelConfig) -> Self {
        Self { dt: model.dt, wheelbase: model.wheelbase, ..Self::default() }
    }

    pub fn steps(&self) -> usize {
        (self.horizon_seconds / self.dt).round() as usize
    }
}

/// A planner's answer for one observation.
#[derive(Clone, Debug, Default)]
pub struct Plan {
    pub controls: ControlSequence,
    /// Predicted poses of each valid neighbor under the chosen mode.
    pub predictions: Vec<Vec<[f64; 3]>>,
    pub output: Option<ModelOutput>,
}

pub trait Planner: Sync {
    /// `obs` is expressed in the ego's current frame; `step` counts executed
    /// steps since the episode start.
    fn plan(&self, obs: &ScenarioFrame, step: usize) -> Result<Plan>;
}

/// Runs the network and executes its highest-probability mode.
pub struct ModelPlanner<'a> {
    pub model: &'a Model,
    pub store: &'a ParameterStore,
}

impl Planner for ModelPlanner<'_> {
    fn plan(&self, obs: &ScenarioFrame, _step: usize) -> Result<Plan> {
        let out = self.model.predict(self.store, obs)?;
        if !out.is_finite() {
            return Err(Error::EpisodeAborted("non-finite model output".into()));
        }
        let mode = out.most_likely_mode();
        let predictions = obs
            .neighbors
            .iter()
            .enumerate()
            .filter(|(_, n)| n.valid)
            .map(|(k, _)| out.neighbor_trajectories[mode][k].clone())
            .collect();
        Ok(Plan { controls: out.ego_controls[mode].clone(), predictions, output: Some(out) })
    }
}

/// Replays the controls that generated the ego's log.
pub struct OraclePlanner<'a> {
    pub frame: &'a ScenarioFrame,
}

impl Planner for OraclePlanner<'_> {
    fn plan(&self, _obs: &ScenarioFrame, step: usize) -> Result<Plan> {
        let log = self.frame.oracle_controls[0].get(step..).unwrap_or(&[]);
        Ok(Plan { controls: ControlSequence::clamped(log.iter().map(|u| Control::new(u[0], u[1]))), ..Plan::default() })
    }
}

pub struct ZeroPlanner {
    pub steps: usize,
}

impl Planner for ZeroPlanner {
    fn plan(&self, _obs: &ScenarioFrame, _step: usize) -> Result<Plan> {
        Ok(Plan { controls: ControlSequence::zeros(self.steps), ..Plan::default() })
    }
}

/// Simulation state, in the coordinates of the episode's initial frame.
#[derive(Clone, Debug)]
pub struct World<'a> {
    pub frame: &'a ScenarioFrame,
    pub config: SimConfig,
    /// Executed steps.
    pub time: usize,
    pub ego: BicycleState,
    ego_states: Vec<AgentState>,
    /// Logged history followed by the logged future of every neighbor.
    neighbor_tracks: Vec<Vec<AgentState>>,
    pub trace: EpisodeTrace,
}

fn logged_track(history: &AgentHistory, future: &[[f64; 3]], dt: f64) -> Vec<AgentState> {
    let mut track = history.states.clone();
    if !history.valid {
        return track;
    }
    let (length, width) = (history.current().length, history.current().width);
    for p in future {
        let prev = track.last().unwrap();
        track.push(AgentState {
            x: p[0],
            y: p[1],
            vx: (p[0] - prev.x) / dt,
            vy: (p[1] - prev.y) / dt,
            heading: wrap_angle(p[2]),
            length,
            width,
        });
    }
    track
}

impl<'a> World<'a> {
    pub fn new(frame: &'a ScenarioFrame, config: SimConfig) -> Result<Self> {
        if frame.future_len() < config.steps() {
            return Err(Error::Contract(format!(
                "frame {} logs {} future steps, the episode needs {}",
                frame.seed,
                frame.future_len(),
                config.steps()
            )));
        }
        let ego = BicycleState::from_agent(frame.ego.current());
        let neighbor_tracks =
            frame.neighbors.iter().enumerate().map(|(k, n)| logged_track(n, &frame.gt_futures[k + 1], config.dt)).collect();
        let mut world = Self {
            frame,
            config,
            time: 0,
            ego,
            ego_states: frame.ego.states.clone(),
            neighbor_tracks,
            trace: EpisodeTrace { ego: vec![ego], ..EpisodeTrace::default() },
        };
        world.trace.neighbors.push(world.neighbor_poses());
        Ok(world)
    }

    /// Current logged pose of every neighbor slot.
    pub fn neighbor_poses(&self) -> Vec<Option<[f64; 3]>> {
        let idx = self.frame.history_len() - 1 + self.time;
        self.frame
            .neighbors
            .iter()
            .zip(&self.neighbor_tracks)
            .map(|(n, track)| n.valid.then(|| track[idx]).map(|s| [s.x, s.y, s.heading]))
            .collect()
    }

    fn neighbor_boxes(&self) -> Vec<OrientedBox> {
        let idx = self.frame.history_len() - 1 + self.time;
        self.frame
            .neighbors
            .iter()
            .zip(&self.neighbor_tracks)
            .filter(|(n, _)| n.valid)
            .map(|(_, track)| OrientedBox::from_state(&track[idx]))
            .collect()
    }

    /// The last `M` steps of every agent, re-expressed in the ego's current
    /// frame. Maps stay those of the initial frame.
    pub fn observation(&self) -> ScenarioFrame {
        let m = self.frame.history_len();
        let end = m + self.time;
        let mut obs = self.frame.clone();
        obs.ego.states = self.ego_states[end - m..end].to_vec();
        for (n, track) in obs.neighbors.iter_mut().zip(&self.neighbor_tracks) {
            if n.valid {
                n.states = track[end - m..end].to_vec();
            }
        }
        for (future, controls) in obs.gt_futures.iter_mut().zip(&mut obs.oracle_controls) {
            future.drain(..self.time.min(future.len()));
            controls.drain(..self.time.min(controls.len()));
        }
        normalize_to_ego_frame(&obs)
    }

    /// Replans, applies the optional refiner and executes the first control.
    pub fn step(&mut self, planner: &dyn Planner, refiner: Option<&dyn PlanRefiner>) -> Result<Plan> {
        let obs = self.observation();
        let plan = planner.plan(&obs, self.time)?;
        let controls = match refiner {
            Some(r) => {
                let map = &obs.maps[0];
                let ctx = RefineContext {
                    start: BicycleState::from_agent(obs.ego.current()),
                    predictions: &plan.predictions,
                    map,
                    dt: self.config.dt,
                    wheelbase: self.config.wheelbase,
                };
                r.refine(&plan.controls, &ctx)
            }
            None => plan.controls.clone(),
        };
        let u = controls.first().unwrap_or(Control::new(0.0, 0.0)).clamped();
        if !(u.accel.is_finite() && u.steer.is_finite()) {
            return Err(Error::EpisodeAborted(format!("non-finite control at step {}", self.time)));
        }
        self.ego = bicycle_step(self.ego, u, self.config.dt, self.config.wheelbase);
        self.time += 1;
        let ego = self.ego_states.last().unwrap();
        self.ego_states.push(AgentState {
            x: self.ego.x,
            y: self.ego.y,
            vx: self.ego.speed * self.ego.heading.cos(),
            vy: self.ego.speed * self.ego.heading.sin(),
            heading: wrap_angle(self.ego.heading),
            length: ego.length,
            width: ego.width,
        });
        let ego_box = OrientedBox::from_state(self.ego_states.last().unwrap());
        self.trace.ego.push(self.ego);
        self.trace.controls.push(u);
        self.trace.collisions.push(collision_check(&ego_box, &self.neighbor_boxes()));
        self.trace.neighbors.push(self.neighbor_poses());
        Ok(plan)
    }
}

/// Open-loop displacement of the best mode's neighbor predictions against the
/// logs, averaged over valid neighbors: `(ADE, FDE)`.
pub fn prediction_errors(output: &ModelOutput, frame: &ScenarioFrame) -> Option<(f64, f64)> {
    let best = select_best_mode(output, frame);
    let valid: Vec<usize> = (0..frame.neighbors.len()).filter(|&k| frame.neighbors[k].valid).collect();
    if valid.is_empty() {
        return None;
    }
    let (mut ade, mut fde) = (0.0, 0.0);
    for &k in &valid {
        let pred = &output.neighbor_trajectories[best][k];
        let gt = &frame.gt_futures[k + 1];
        ade += mean_displacement(pred, gt);
        let last = pred.len() - 1;
        fde += (pred[last][0] - gt[last][0]).hypot(pred[last][1] - gt[last][1]);
    }
    let n = valid.len() as f64;
    Some((ade / n, fde / n))
}

/// Runs `config.steps()` closed-loop steps. A non-finite planner output
/// ends the episode early with `aborted` set.
pub fn run_episode(
    frame: &ScenarioFrame,
    planner: &dyn Planner,
    config: SimConfig,
    refiner: Option<&dyn PlanRefiner>,
) -> Result<(EpisodeMetrics, EpisodeTrace)> {
    let mut world = World::new(frame, config)?;
    let mut first_output = None;
    let mut aborted = false;
    for _ in 0..config.steps() {
        match world.step(planner, refiner) {
            Ok(plan) => {
                if first_output.is_none() {
                    first_output = Some(plan.output);
                }
            }
            Err(Error::EpisodeAborted(reason)) => {
                log::warn!("frame {}: episode aborted at step {}: {reason}", frame.seed, world.time);
                aborted = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let mut m = metrics(&world.trace, &frame.gt_futures[0], &frame.route.centerline, config.dt, config.off_route_threshold);
    m.aborted = aborted;
    if let Some((ade, fde)) = first_output.flatten().as_ref().and_then(|o| prediction_errors(o, frame)) {
        m.prediction_ade = Some(ade);
        m.prediction_fde = Some(fde);
    }
    Ok((m, world.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, GeneratorSpec, Template};

    fn frame(template: Template, agents: usize, seconds: f64, seed: u64) -> ScenarioFrame {
        generate_scenario(seed, &GeneratorSpec::new(template, agents, [6.0, 10.0], seconds)).unwrap()
    }

    #[test]
    fn oracle_controls_reproduce_the_log() {
        for (template, seed) in [(Template::Straight, 1), (Template::Arc, 2), (Template::Intersection, 3)] {
            let f = frame(template, 4, 10.0, seed);
            let (m, trace) = run_episode(&f, &OraclePlanner { frame: &f }, SimConfig::default(), None).unwrap();
            for e in [m.position_error_3s, m.position_error_5s, m.position_error_10s] {
                assert!(e.unwrap() <= 1e-9, "{template:?}: {e:?}");
            }
            let log_length: f64 = std::iter::once([0.0, 0.0, 0.0])
                .chain(f.gt_futures[0].iter().copied())
                .collect::<Vec<_>>()
                .windows(2)
                .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
                .sum();
            assert!((m.progress - log_length).abs() <= 1e-9);
            assert!(!m.off_route);
            assert_eq!(trace.ego.len(), 101);
        }
    }

    #[test]
    fn neighbors_follow_their_logs_exactly() {
        let f = frame(Template::Intersection, 6, 10.0, 5);
        let (_, trace) = run_episode(&f, &ZeroPlanner { steps: 50 }, SimConfig::default(), None).unwrap();
        for (t, poses) in trace.neighbors.iter().enumerate().skip(1) {
            for (k, p) in poses.iter().enumerate() {
                let expected = f.neighbors[k].valid.then(|| f.gt_futures[k + 1][t - 1]);
                assert_eq!(p.map(|p| [p[0], p[1]]), expected.map(|e| [e[0], e[1]]));
            }
        }
    }

    #[test]
    fn zero_controls_from_standstill_stay_put() {
        let mut f = frame(Template::Straight, 3, 10.0, 9);
        for s in &mut f.ego.states {
            s.vx = 0.0;
            s.vy = 0.0;
        }
        let (m, trace) = run_episode(&f, &ZeroPlanner { steps: 50 }, SimConfig::default(), None).unwrap();
        assert!(trace.ego.iter().all(|s| s.x == 0.0 && s.y == 0.0));
        assert_eq!(m.progress, 0.0);
        let log3 = f.gt_futures[0][29];
        assert!((m.position_error_3s.unwrap() - log3[0].hypot(log3[1])).abs() < 1e-12);
    }

    #[test]
    fn short_logs_are_rejected() {
        let f = frame(Template::Straight, 2, 5.0, 1);
        assert!(matches!(World::new(&f, SimConfig::default()), Err(Error::Contract(_))));
        let cfg = SimConfig { horizon_seconds: 5.0, ..SimConfig::default() };
        let (m, _) = run_episode(&f, &OraclePlanner { frame: &f }, cfg, None).unwrap();
        assert!(m.position_error_5s.is_some());
        assert_eq!(m.position_error_10s, None);
    }

    #[test]
    fn identity_refiner_changes_nothing() {
        let f = frame(Template::Arc, 4, 10.0, 4);
        let planner = OraclePlanner { frame: &f };
        let plain = run_episode(&f, &planner, SimConfig::default(), None).unwrap();
        let refined = run_episode(&f, &planner, SimConfig::default(), Some(&IdentityRefiner)).unwrap();
        assert_eq!(plain, refined);
    }

    #[test]
    fn steering_into_a_neighbor_collides() {
        let mut f = frame(Template::Straight, 2, 10.0, 11);
        // Park the only neighbor 15 m ahead of the ego on its path.
        let k = f.neighbors.iter().position(|n| n.valid).unwrap();
        let parked = AgentState { x: 15.0, y: 0.0, vx: 0.0, vy: 0.0, heading: 0.0, length: 4.5, width: 2.0 };
        for s in &mut f.neighbors[k].states {
            *s = parked;
        }
        for p in &mut f.gt_futures[k + 1] {
            *p = [15.0, 0.0, 0.0];
        }
        let (m, _) = run_episode(&f, &ZeroPlanner { steps: 50 }, SimConfig::default(), None).unwrap();
        assert!(m.collision);
    }

    #[test]
    fn first_observation_is_the_frame() {
        let f = frame(Template::Intersection, 5, 10.0, 8);
        let world = World::new(&f, SimConfig::default()).unwrap();
        let obs = world.observation();
        for (a, b) in obs.agents().zip(f.agents()) {
            for (s, t) in a.states.iter().zip(&b.states) {
                assert!((s.x - t.x).abs() < 1e-12 && (s.y - t.y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn model_planner_runs_an_episode() {
        let cfg = ModelConfig::desk();
        let mut spec = GeneratorSpec::new(Template::Straight, 3, [6.0, 8.0], 2.0);
        spec.layout = cfg.layout();
        let f = generate_scenario(3, &spec).unwrap();
        let (model, store) = Model::new(cfg.clone(), 0).unwrap();
        let sim = SimConfig { horizon_seconds: 1.0, ..SimConfig::for_model(&cfg) };
        let planner = ModelPlanner { model: &model, store: &store };
        let (m, trace) = run_episode(&f, &planner, sim, None).unwrap();
        assert_eq!(trace.controls.len(), 10);
        assert!(m.prediction_ade.is_some() && m.prediction_fde.is_some());
        assert!(trace.controls.iter().all(|u| u.within_bounds()));
        let again = run_episode(&f, &planner, sim, Some(&GradientRefiner::default())).unwrap();
        assert_eq!(again.1.controls.len(), 10);
    }
}
