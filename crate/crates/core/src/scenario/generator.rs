//! Deterministic synthetic scenarios.
//!
//! A template lays out world lanes and crosswalks, agents are placed on
//! lanes (or crosswalks, for pedestrians) and every trajectory is integrated
//! through the kinematic bicycle model from a scripted control sequence. The
//! future part of that script is kept in the frame as oracle controls.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transform::{normalize_to_ego_frame, wrap_angle};
use super::{
    light, AgentHistory, AgentKind, AgentState, CrosswalkPolyline, LanePolyline, LaneWaypoint, LocalMap, Route,
    ScenarioFrame, CROSSWALKS_PER_AGENT, LANES_PER_AGENT,
};
use crate::decoder::bicycle::{bicycle_step, BicycleState, Control, DEFAULT_WHEELBASE};
use crate::error::{Error, Result};

pub const WORLD_LANE_WIDTH: f64 = 3.5;
const WAYPOINT_SPACING: f64 = 1.0;
const LANE_START: f64 = -120.0;
const LANE_END: f64 = 320.0;
/// Waypoints kept behind the agent when cutting a lane window.
const WINDOW_BACK: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    Straight,
    Arc,
    Intersection,
    Crosswalk,
}

impl std::str::FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight" => Ok(Template::Straight),
            "arc" => Ok(Template::Arc),
            "intersection" => Ok(Template::Intersection),
            "crosswalk" => Ok(Template::Crosswalk),
            other => Err(Error::Config(format!("unknown template {other:?}"))),
        }
    }
}

/// Fixed frame dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameLayout {
    /// Neighbor slots K.
    pub max_neighbors: usize,
    /// History length M (current state included).
    pub history_len: usize,
    pub lane_len: usize,
    pub crosswalk_len: usize,
    pub dt: f64,
    pub wheelbase: f64,
}

impl Default for FrameLayout {
    fn default() -> Self {
        Self { max_neighbors: 10, history_len: 20, lane_len: 50, crosswalk_len: 20, dt: 0.1, wheelbase: DEFAULT_WHEELBASE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub template: Template,
    pub num_agents: usize,
    /// `[min, max]` initial speed of vehicles, m/s.
    pub speed_range: [f64; 2],
    /// Logged future length in seconds.
    pub episode_seconds: f64,
    #[serde(default = "default_arc_radius")]
    pub arc_radius: f64,
    #[serde(default)]
    pub layout: FrameLayout,
}

fn default_arc_radius() -> f64 {
    20.0
}

impl GeneratorSpec {
    pub fn new(template: Template, num_agents: usize, speed_range: [f64; 2], episode_seconds: f64) -> Self {
        Self { template, num_agents, speed_range, episode_seconds, arc_radius: default_arc_radius(), layout: FrameLayout::default() }
    }

    pub fn future_len(&self) -> usize {
        (self.episode_seconds / self.layout.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.layout;
        let bad = |m: String| Err(Error::Config(m));
        if self.num_agents == 0 || self.num_agents > l.max_neighbors + 1 {
            return bad(format!("num_agents {} must be in 1..={}", self.num_agents, l.max_neighbors + 1));
        }
        let [lo, hi] = self.speed_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi && hi <= 40.0) {
            return bad(format!("speed_range {:?} must satisfy 0 <= min <= max <= 40", self.speed_range));
        }
        if !(l.dt > 0.0 && l.dt.is_finite()) {
            return bad("layout.dt must be positive".into());
        }
        if !(self.episode_seconds > 0.0) || self.future_len() == 0 {
            return bad(format!("episode_seconds {} too short", self.episode_seconds));
        }
        if ((self.future_len() as f64) * l.dt - self.episode_seconds).abs() > 1e-9 {
            return bad("episode_seconds must be a multiple of dt".into());
        }
        if l.history_len == 0 || l.lane_len == 0 || l.crosswalk_len < 2 {
            return bad("layout lengths must be positive (crosswalk_len >= 2)".into());
        }
        if !(l.wheelbase > 0.0) {
            return bad("layout.wheelbase must be positive".into());
        }
        if self.template == Template::Arc && !(self.arc_radius > 2.0 * WORLD_LANE_WIDTH) {
            return bad(format!("arc_radius {} too small", self.arc_radius));
        }
        Ok(())
    }
}

struct WorldLane {
    centerline: Vec<[f64; 3]>,
    speed_limit: f64,
    left_type: u8,
    right_type: u8,
    center_type: u8,
    light: u8,
    stop_index: Option<usize>,
}

impl WorldLane {
    fn straight(origin: (f64, f64), heading: f64, speed_limit: f64) -> Self {
        let n = ((LANE_END - LANE_START) / WAYPOINT_SPACING) as usize + 1;
        let (c, s) = (heading.cos(), heading.sin());
        let centerline = (0..n)
            .map(|i| {
                let d = LANE_START + i as f64 * WAYPOINT_SPACING;
                [origin.0 + d * c, origin.1 + d * s, wrap_angle(heading)]
            })
            .collect();
        Self { centerline, speed_limit, left_type: 1, right_type: 1, center_type: 2, light: light::UNKNOWN, stop_index: None }
    }

    /// Counter-clockwise circle around `center`; arc length 0 at angle -π/2.
    fn arc(center: (f64, f64), radius: f64, speed_limit: f64) -> Self {
        let n = ((LANE_END - LANE_START) / WAYPOINT_SPACING) as usize + 1;
        let centerline = (0..n)
            .map(|i| {
                let s = LANE_START + i as f64 * WAYPOINT_SPACING;
                let phi = -FRAC_PI_2 + s / radius;
                [center.0 + radius * phi.cos(), center.1 + radius * phi.sin(), wrap_angle(phi + FRAC_PI_2)]
            })
            .collect();
        Self { centerline, speed_limit, left_type: 1, right_type: 1, center_type: 2, light: light::UNKNOWN, stop_index: None }
    }

    fn pose_at(&self, s: f64) -> [f64; 3] {
        let i = ((s - LANE_START) / WAYPOINT_SPACING).round().clamp(0.0, (self.centerline.len() - 1) as f64);
        self.centerline[i as usize]
    }

    fn nearest(&self, x: f64, y: f64) -> (usize, f64) {
        self.centerline
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p[0] - x).hypot(p[1] - y)))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    }

    fn waypoint(&self, i: usize) -> LaneWaypoint {
        let [x, y, h] = self.centerline[i];
        let half = WORLD_LANE_WIDTH / 2.0;
        let (nx, ny) = (-h.sin(), h.cos());
        LaneWaypoint {
            center: [x, y, h],
            left_boundary: [x + half * nx, y + half * ny, h],
            right_boundary: [x - half * nx, y - half * ny, h],
            speed_limit: self.speed_limit,
            left_type: self.left_type,
            right_type: self.right_type,
            center_type: self.center_type,
            traffic_light: self.light,
            stop_sign: u8::from(self.stop_index == Some(i)),
            interpolating: 0,
        }
    }

    fn window(&self, x: f64, y: f64, len: usize) -> LanePolyline {
        let (near, _) = self.nearest(x, y);
        let start = near.saturating_sub(WINDOW_BACK);
        let mut poly = LanePolyline::padding(len);
        for k in 0..len {
            if let Some(i) = Some(start + k).filter(|&i| i < self.centerline.len()) {
                poly.waypoints[k] = self.waypoint(i);
                poly.mask[k] = true;
            }
        }
        poly
    }
}

struct WorldCrosswalk {
    from: (f64, f64),
    to: (f64, f64),
}

impl WorldCrosswalk {
    fn polyline(&self, len: usize) -> CrosswalkPolyline {
        let h = (self.to.1 - self.from.1).atan2(self.to.0 - self.from.0);
        let points = (0..len)
            .map(|k| {
                let f = k as f64 / (len - 1) as f64;
                [self.from.0 + f * (self.to.0 - self.from.0), self.from.1 + f * (self.to.1 - self.from.1), h]
            })
            .collect();
        CrosswalkPolyline { points, mask: vec![true; len] }
    }

    fn distance(&self, x: f64, y: f64) -> f64 {
        point_segment_distance((x, y), self.from, self.to)
    }
}

pub(crate) fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p.0 - (a.0 + t * dx)).hypot(p.1 - (a.1 + t * dy))
}

/// How an agent's controls are scripted.
#[derive(Clone, Copy, Debug)]
enum Script {
    /// Piecewise-constant acceleration keeping speed in `[lo, hi]`, constant steer.
    Cruise { amplitude: f64, lo: f64, hi: f64, steer: f64, profile: u64 },
    /// Constant deceleration until standstill.
    Brake { decel: f64 },
}

struct Placement {
    kind: AgentKind,
    start: [f64; 3],
    speed: f64,
    length: f64,
    width: f64,
    script: Script,
}

struct World {
    lanes: Vec<WorldLane>,
    crosswalks: Vec<WorldCrosswalk>,
    ego_lane: usize,
    /// Candidate vehicle slots: (lane, arc length at history start).
    slots: Vec<(usize, f64)>,
    /// Pedestrian slots: (crosswalk, walking direction +1/-1).
    walkers: Vec<(usize, f64)>,
    /// Per-lane script override (red-light approaches).
    stop_lanes: Vec<usize>,
    steer: Vec<f64>,
}

fn build_world(spec: &GeneratorSpec) -> World {
    let wb = spec.layout.wheelbase;
    match spec.template {
        Template::Straight => {
            let lanes = vec![
                WorldLane::straight((0.0, 0.0), 0.0, 15.0),
                WorldLane::straight((0.0, -WORLD_LANE_WIDTH), 0.0, 15.0),
                WorldLane::straight((0.0, WORLD_LANE_WIDTH), 0.0, 15.0),
                WorldLane::straight((0.0, 2.0 * WORLD_LANE_WIDTH), PI, 15.0),
            ];
            let mut slots = Vec::new();
            for lane in 0..3 {
                for k in -3..=4 {
                    if lane == 0 && k == 0 {
                        continue;
                    }
                    slots.push((lane, 18.0 * k as f64));
                }
            }
            for k in -4..=4 {
                slots.push((3, 20.0 * k as f64 - 40.0));
            }
            let steer = vec![0.0; lanes.len()];
            World { lanes, crosswalks: Vec::new(), ego_lane: 0, slots, walkers: Vec::new(), stop_lanes: Vec::new(), steer }
        }
        Template::Arc => {
            let r = spec.arc_radius;
            let radii = [r, r + WORLD_LANE_WIDTH, r - WORLD_LANE_WIDTH];
            let lanes: Vec<WorldLane> = radii.iter().map(|&rad| WorldLane::arc((0.0, r), rad, 12.0)).collect();
            let steer = radii.iter().map(|&rad| (wb / rad).atan()).collect();
            let mut slots = Vec::new();
            for lane in 0..3 {
                for k in -2..=3 {
                    if lane == 0 && k == 0 {
                        continue;
                    }
                    slots.push((lane, 16.0 * k as f64));
                }
            }
            World { lanes, crosswalks: Vec::new(), ego_lane: 0, slots, walkers: Vec::new(), stop_lanes: Vec::new(), steer }
        }
        Template::Intersection => {
            let cx = 45.0;
            let half = WORLD_LANE_WIDTH / 2.0;
            let mut lanes = vec![
                WorldLane::straight((0.0, 0.0), 0.0, 13.0),
                WorldLane::straight((0.0, -WORLD_LANE_WIDTH), 0.0, 13.0),
                WorldLane::straight((0.0, WORLD_LANE_WIDTH), PI, 13.0),
                WorldLane::straight((cx + half, 0.0), FRAC_PI_2, 11.0),
                WorldLane::straight((cx - half, 0.0), -FRAC_PI_2, 11.0),
            ];
            for lane in &mut lanes[..3] {
                lane.light = light::GREEN;
            }
            for lane in &mut lanes[3..] {
                lane.light = light::RED;
                lane.center_type = 3;
                // stop line 12 m before the crossing
                let (i, _) = lane.nearest(cx, 0.0);
                lane.stop_index = Some(i - 12);
            }
            let cw = 10.0;
            let crosswalks = vec![
                WorldCrosswalk { from: (cx - cw, -7.0), to: (cx - cw, 7.0) },
                WorldCrosswalk { from: (cx + cw, -7.0), to: (cx + cw, 7.0) },
                WorldCrosswalk { from: (cx - 7.0, cw), to: (cx + 7.0, cw) },
                WorldCrosswalk { from: (cx - 7.0, -cw), to: (cx + 7.0, -cw) },
            ];
            let mut slots = Vec::new();
            for k in [-2.0, 1.0, 2.0, 3.0] {
                slots.push((0, 17.0 * k));
            }
            for k in [-1.0, 0.0, 1.0, 2.0] {
                slots.push((1, 17.0 * k + 5.0));
            }
            for k in [-2.0, -1.0, 0.0, 1.0] {
                slots.push((2, 20.0 * k - 40.0));
            }
            // red-light approaches: start 30-60 m before the crossing
            for lane in [3, 4] {
                slots.push((lane, -60.0));
                slots.push((lane, -80.0));
            }
            let steer = vec![0.0; lanes.len()];
            let walkers = vec![(0, 1.0), (2, -1.0)];
            World { lanes, crosswalks, ego_lane: 0, slots, walkers, stop_lanes: vec![3, 4], steer }
        }
        Template::Crosswalk => {
            let lanes = vec![
                WorldLane::straight((0.0, 0.0), 0.0, 11.0),
                WorldLane::straight((0.0, WORLD_LANE_WIDTH), PI, 11.0),
            ];
            let crosswalks = vec![
                WorldCrosswalk { from: (40.0, -5.0), to: (40.0, 8.5) },
                WorldCrosswalk { from: (90.0, -5.0), to: (90.0, 8.5) },
                WorldCrosswalk { from: (-30.0, -5.0), to: (-30.0, 8.5) },
            ];
            let mut slots = Vec::new();
            for k in [-2.0, -1.0, 1.0, 2.0, 3.0] {
                slots.push((0, 19.0 * k));
            }
            for k in [-1.0, 0.0, 1.0, 2.0] {
                slots.push((1, 22.0 * k - 30.0));
            }
            let walkers = vec![(0, 1.0), (1, -1.0), (2, 1.0), (0, -1.0), (1, 1.0)];
            let steer = vec![0.0; lanes.len()];
            World { lanes, crosswalks, ego_lane: 0, slots, walkers, stop_lanes: Vec::new(), steer }
        }
    }
}

fn lane_script(spec: &GeneratorSpec, world: &World, lane: usize, rng: &mut ChaCha8Rng) -> (f64, Script) {
    let [lo, hi] = spec.speed_range;
    let v0 = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    if world.stop_lanes.contains(&lane) {
        // come to rest after 35-55 m
        let distance = rng.gen_range(35.0..55.0);
        return (v0, Script::Brake { decel: v0 * v0 / (2.0 * distance) });
    }
    let amplitude = ((hi - lo) / 4.0).min(1.0);
    (v0, Script::Cruise { amplitude, lo, hi, steer: world.steer[lane], profile: rng.gen() })
}

fn scripted_control(script: &Script, t: usize, state: &BicycleState, dt: f64) -> Control {
    match *script {
        Script::Cruise { amplitude, lo, hi, steer, profile } => {
            if amplitude == 0.0 {
                return Control::new(0.0, steer);
            }
            // piecewise-constant segments of 1.5 s, each drawn from the profile seed
            let segment = (t as f64 * dt / 1.5) as u64;
            let mut seg_rng = ChaCha8Rng::seed_from_u64(profile ^ segment.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut a = seg_rng.gen_range(-amplitude..=amplitude);
            if state.speed + a * dt > hi {
                a = (hi - state.speed) / dt;
            }
            if state.speed + a * dt < lo {
                a = (lo - state.speed) / dt;
            }
            Control::new(a, steer)
        }
        Script::Brake { decel } => {
            if state.speed <= 0.0 {
                return Control::new(0.0, 0.0);
            }
            let a = if state.speed - decel * dt < 0.0 { -state.speed / dt } else { -decel };
            Control::new(a, 0.0)
        }
    }
}

/// Produces one normalized frame; deterministic in `(seed, spec)`.
pub fn generate_scenario(seed: u64, spec: &GeneratorSpec) -> Result<ScenarioFrame> {
    spec.validate()?;
    let layout = &spec.layout;
    let (m, n) = (layout.history_len, spec.future_len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = build_world(spec);

    let mut lane_scripts: Vec<Option<(f64, Script)>> = (0..world.lanes.len()).map(|_| None).collect();
    let mut script_for = |lane: usize, rng: &mut ChaCha8Rng| {
        *lane_scripts[lane].get_or_insert_with(|| lane_script(spec, &world, lane, rng))
    };

    let vehicle_box = |rng: &mut ChaCha8Rng| (rng.gen_range(4.2..5.0), rng.gen_range(1.8..2.1));

    let mut placements = Vec::with_capacity(spec.num_agents);
    let (v0, script) = script_for(world.ego_lane, &mut rng);
    let (len, wid) = vehicle_box(&mut rng);
    placements.push(Placement {
        kind: AgentKind::Vehicle,
        start: world.lanes[world.ego_lane].pose_at(0.0),
        speed: v0,
        length: len,
        width: wid,
        script,
    });

    let mut slots: Vec<Option<(usize, f64)>> = world.slots.iter().copied().map(Some).collect();
    let walkers: Vec<(usize, f64)> = world.walkers.clone();
    let mut candidates: Vec<usize> = (0..slots.len() + walkers.len()).collect();
    candidates.shuffle(&mut rng);
    for c in candidates.into_iter().take(spec.num_agents - 1) {
        if c < slots.len() {
            let (lane, s) = slots[c].take().unwrap();
            let (v0, script) = script_for(lane, &mut rng);
            let (len, wid) = vehicle_box(&mut rng);
            placements.push(Placement {
                kind: AgentKind::Vehicle,
                start: world.lanes[lane].pose_at(s),
                speed: v0,
                length: len,
                width: wid,
                script,
            });
        } else {
            let (cw, dir) = walkers[c - slots.len()];
            let walk = &world.crosswalks[cw];
            let (from, to) = if dir > 0.0 { (walk.from, walk.to) } else { (walk.to, walk.from) };
            let heading = (to.1 - from.1).atan2(to.0 - from.0);
            let start_frac = rng.gen_range(0.0..0.3);
            let start = [from.0 + start_frac * (to.0 - from.0), from.1 + start_frac * (to.1 - from.1), heading];
            placements.push(Placement {
                kind: AgentKind::Pedestrian,
                start,
                speed: rng.gen_range(1.0..1.6),
                length: 0.6,
                width: 0.6,
                script: Script::Cruise { amplitude: 0.0, lo: 0.0, hi: 2.0, steer: 0.0, profile: 0 },
            });
        }
    }

    // integrate every agent over history and future
    struct Track {
        states: Vec<BicycleState>,
        controls: Vec<Control>,
    }
    let tracks: Vec<Track> = placements
        .iter()
        .map(|p| {
            let mut s = BicycleState::new(p.start[0], p.start[1], p.start[2], p.speed);
            let mut states = vec![s];
            let mut controls = Vec::with_capacity(m - 1 + n);
            for t in 0..(m - 1 + n) {
                let u = scripted_control(&p.script, t, &s, layout.dt);
                s = bicycle_step(s, u, layout.dt, layout.wheelbase);
                states.push(s);
                controls.push(u);
            }
            Track { states, controls }
        })
        .collect();

    // neighbors sorted by current distance to the ego
    let cur = |i: usize| tracks[i].states[m - 1];
    let ego_now = cur(0);
    let mut order: Vec<usize> = (1..tracks.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (cur(a).x - ego_now.x).hypot(cur(a).y - ego_now.y);
        let db = (cur(b).x - ego_now.x).hypot(cur(b).y - ego_now.y);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    order.insert(0, 0);

    let history = |i: usize| -> AgentHistory {
        let p = &placements[i];
        let states = tracks[i].states[..m]
            .iter()
            .map(|s| AgentState {
                x: s.x,
                y: s.y,
                vx: s.speed * s.heading.cos(),
                vy: s.speed * s.heading.sin(),
                heading: wrap_angle(s.heading),
                length: p.length,
                width: p.width,
            })
            .collect();
        AgentHistory { agent_id: i as u32, kind: p.kind, valid: true, states }
    };
    let local_map = |i: usize| -> LocalMap {
        let s = cur(i);
        let mut by_dist: Vec<(usize, f64)> =
            world.lanes.iter().enumerate().map(|(k, l)| (k, l.nearest(s.x, s.y).1)).collect();
        by_dist.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let mut map = LocalMap::padding(layout.lane_len, layout.crosswalk_len);
        for (slot, &(k, _)) in by_dist.iter().take(LANES_PER_AGENT).enumerate() {
            map.lanes[slot] = world.lanes[k].window(s.x, s.y, layout.lane_len);
        }
        let mut cw: Vec<(usize, f64)> =
            world.crosswalks.iter().enumerate().map(|(k, c)| (k, c.distance(s.x, s.y))).collect();
        cw.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for (slot, &(k, _)) in cw.iter().take(CROSSWALKS_PER_AGENT).enumerate() {
            map.crosswalks[slot] = world.crosswalks[k].polyline(layout.crosswalk_len);
        }
        map
    };

    let k = layout.max_neighbors;
    let mut neighbors = Vec::with_capacity(k);
    let mut maps = Vec::with_capacity(k + 1);
    let mut gt_futures = Vec::with_capacity(k + 1);
    let mut oracle_controls = Vec::with_capacity(k + 1);
    for slot in 0..=k {
        match order.get(slot) {
            Some(&i) => {
                if slot > 0 {
                    neighbors.push(history(i));
                }
                maps.push(local_map(i));
                let current_heading = tracks[i].states[m - 1].heading;
                let shift = wrap_angle(current_heading) - current_heading;
                gt_futures.push(tracks[i].states[m..].iter().map(|s| [s.x, s.y, s.heading + shift]).collect());
                oracle_controls.push(tracks[i].controls[m - 1..].iter().map(|u| [u.accel, u.steer]).collect());
            }
            None => {
                neighbors.push(AgentHistory::padding(m));
                maps.push(LocalMap::padding(layout.lane_len, layout.crosswalk_len));
                gt_futures.push(vec![[0.0; 3]; n]);
                oracle_controls.push(vec![[0.0; 2]; n]);
            }
        }
    }

    let ego_lane = &world.lanes[world.ego_lane];
    let ego_map = &maps[0];
    let route_lane = ego_map.lanes.iter().position(|l| {
        l.is_valid() && {
            let w = &l.waypoints[l.mask.iter().position(|&v| v).unwrap()];
            let (_, d) = ego_lane.nearest(w.center[0], w.center[1]);
            d < 1e-9
        }
    });
    let route = Route { lane: route_lane, centerline: ego_lane.centerline.clone() };

    let frame = ScenarioFrame { ego: history(0), neighbors, maps, gt_futures, oracle_controls, route, seed };
    let frame = normalize_to_ego_frame(&frame);
    frame.validate()?;
    Ok(frame)
}
