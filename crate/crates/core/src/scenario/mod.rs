//! Scenario data model: agent histories, per-agent local maps, logged futures.
//!
//! All agent-indexed collections put the ego first. Padded neighbors, lanes,
//! crosswalks and waypoints carry values but are flagged invalid; nothing
//! downstream reads them.

mod generator;
mod io;
mod transform;

pub use generator::{generate_scenario, FrameLayout, GeneratorSpec, Template, WORLD_LANE_WIDTH};
pub use io::{load_frames, parse_frames, save_frames, write_frames};
pub use transform::{normalize_to_ego_frame, wrap_angle, RigidTransform};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LANES_PER_AGENT: usize = 6;
pub const CROSSWALKS_PER_AGENT: usize = 4;
/// Map elements per agent: lanes first, then crosswalks.
pub const MAP_ELEMENTS: usize = LANES_PER_AGENT + CROSSWALKS_PER_AGENT;

/// Vocabulary sizes of the categorical lane codes.
pub const BOUNDARY_TYPES: usize = 5;
pub const CENTER_TYPES: usize = 5;
pub const TRAFFIC_LIGHT_STATES: usize = 4;
pub const BINARY_CODES: usize = 2;

/// Traffic-light codes.
pub mod light {
    pub const UNKNOWN: u8 = 0;
    pub const RED: u8 = 1;
    pub const YELLOW: u8 = 2;
    pub const GREEN: u8 = 3;
}

/// Number of raw features per history step.
pub const AGENT_FEATURES: usize = 7;
/// Numeric scalars per lane waypoint.
pub const LANE_NUMERIC: usize = 10;
/// Categorical codes per lane waypoint.
pub const LANE_CATEGORICAL: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    /// Radians in (-π, π].
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl AgentState {
    /// `[x, y, vx, vy, heading, length, width]`
    pub fn features(&self) -> [f64; AGENT_FEATURES] {
        [self.x, self.y, self.vx, self.vy, self.heading, self.length, self.width]
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentHistory {
    pub agent_id: u32,
    pub kind: AgentKind,
    /// False for padding slots.
    pub valid: bool,
    /// Oldest first; the last entry is the current state.
    pub states: Vec<AgentState>,
}

impl AgentHistory {
    pub fn current(&self) -> &AgentState {
        self.states.last().expect("empty history")
    }

    /// Padding slot: `len` copies of a unit-size box at the origin.
    pub fn padding(len: usize) -> Self {
        let s = AgentState { x: 0.0, y: 0.0, vx: 0.0, vy: 0.0, heading: 0.0, length: 1.0, width: 1.0 };
        Self { agent_id: 0, kind: AgentKind::Vehicle, valid: false, states: vec![s; len] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneWaypoint {
    /// `(x, y, heading)`
    pub center: [f64; 3],
    pub left_boundary: [f64; 3],
    pub right_boundary: [f64; 3],
    pub speed_limit: f64,
    pub left_type: u8,
    pub right_type: u8,
    pub center_type: u8,
    pub traffic_light: u8,
    pub stop_sign: u8,
    pub interpolating: u8,
}

impl LaneWaypoint {
    pub fn padding() -> Self {
        Self {
            center: [0.0; 3],
            left_boundary: [0.0; 3],
            right_boundary: [0.0; 3],
            speed_limit: 0.0,
            left_type: 0,
            right_type: 0,
            center_type: 0,
            traffic_light: 0,
            stop_sign: 0,
            interpolating: 0,
        }
    }

    pub fn numeric(&self) -> [f64; LANE_NUMERIC] {
        let [cx, cy, ch] = self.center;
        let [lx, ly, lh] = self.left_boundary;
        let [rx, ry, rh] = self.right_boundary;
        [cx, cy, ch, lx, ly, lh, rx, ry, rh, self.speed_limit]
    }

    pub fn codes(&self) -> [usize; LANE_CATEGORICAL] {
        [
            self.left_type as usize,
            self.right_type as usize,
            self.center_type as usize,
            self.traffic_light as usize,
            self.stop_sign as usize,
            self.interpolating as usize,
        ]
    }

    /// Vocabulary size for each entry of [`LaneWaypoint::codes`].
    pub const VOCABS: [usize; LANE_CATEGORICAL] =
        [BOUNDARY_TYPES, BOUNDARY_TYPES, CENTER_TYPES, TRAFFIC_LIGHT_STATES, BINARY_CODES, BINARY_CODES];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanePolyline {
    pub waypoints: Vec<LaneWaypoint>,
    pub mask: Vec<bool>,
}

impl LanePolyline {
    pub fn padding(len: usize) -> Self {
        Self { waypoints: vec![LaneWaypoint::padding(); len], mask: vec![false; len] }
    }

    pub fn is_valid(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrosswalkPolyline {
    /// `(x, y, heading)` per point.
    pub points: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
}

impl CrosswalkPolyline {
    pub fn padding(len: usize) -> Self {
        Self { points: vec![[0.0; 3]; len], mask: vec![false; len] }
    }

    pub fn is_valid(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalMap {
    pub lanes: Vec<LanePolyline>,
    pub crosswalks: Vec<CrosswalkPolyline>,
}

impl LocalMap {
    pub fn padding(lane_len: usize, crosswalk_len: usize) -> Self {
        Self {
            lanes: vec![LanePolyline::padding(lane_len); LANES_PER_AGENT],
            crosswalks: vec![CrosswalkPolyline::padding(crosswalk_len); CROSSWALKS_PER_AGENT],
        }
    }

    /// Validity of the 10 map elements, lanes first.
    pub fn element_mask(&self) -> [bool; MAP_ELEMENTS] {
        let mut m = [false; MAP_ELEMENTS];
        for (i, l) in self.lanes.iter().enumerate() {
            m[i] = l.is_valid();
        }
        for (i, c) in self.crosswalks.iter().enumerate() {
            m[LANES_PER_AGENT + i] = c.is_valid();
        }
        m
    }
}

/// Reference path for the ego.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    /// Index of the route lane within the ego's local map, if present there.
    pub lane: Option<usize>,
    /// Full route centerline `(x, y, heading)`, covering the whole episode.
    pub centerline: Vec<[f64; 3]>,
}

/// One sample: histories, local maps and logged futures for the ego and its
/// neighbors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFrame {
    pub ego: AgentHistory,
    pub neighbors: Vec<AgentHistory>,
    /// One per agent, ego first.
    pub maps: Vec<LocalMap>,
    /// One per agent, ego first: `(x, y, heading)` per future step. Headings
    /// continue the agent's current heading without wrapping.
    pub gt_futures: Vec<Vec<[f64; 3]>>,
    /// Scripted `(acceleration, steering)` that reproduce each agent's future
    /// through the bicycle model.
    pub oracle_controls: Vec<Vec<[f64; 2]>>,
    pub route: Route,
    pub seed: u64,
}

impl ScenarioFrame {
    /// Ego followed by neighbors.
    pub fn agents(&self) -> impl Iterator<Item = &AgentHistory> {
        std::iter::once(&self.ego).chain(self.neighbors.iter())
    }

    pub fn agent(&self, i: usize) -> &AgentHistory {
        if i == 0 {
            &self.ego
        } else {
            &self.neighbors[i - 1]
        }
    }

    pub fn agent_mut(&mut self, i: usize) -> &mut AgentHistory {
        if i == 0 {
            &mut self.ego
        } else {
            &mut self.neighbors[i - 1]
        }
    }

    pub fn num_agents(&self) -> usize {
        1 + self.neighbors.len()
    }

    pub fn agent_mask(&self) -> Vec<bool> {
        self.agents().map(|a| a.valid).collect()
    }

    pub fn history_len(&self) -> usize {
        self.ego.states.len()
    }

    pub fn future_len(&self) -> usize {
        self.gt_futures[0].len()
    }

    pub fn lane_len(&self) -> usize {
        self.maps[0].lanes[0].waypoints.len()
    }

    pub fn crosswalk_len(&self) -> usize {
        self.maps[0].crosswalks[0].points.len()
    }

    /// Checks every structural invariant; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        let m = self.ego.states.len();
        if m == 0 {
            return bad("ego: empty history".into());
        }
        if !self.ego.valid {
            return bad("ego: must be valid".into());
        }
        let agents = self.num_agents();
        for (i, a) in self.agents().enumerate() {
            if a.states.len() != m {
                return bad(format!("neighbors[{}].states: length {} != {m}", i.wrapping_sub(1), a.states.len()));
            }
            if a.valid {
                for s in &a.states {
                    if !(s.length > 0.0 && s.width > 0.0) {
                        return bad(format!("agent {i}: non-positive box size"));
                    }
                    if !(s.heading > -std::f64::consts::PI && s.heading <= std::f64::consts::PI) {
                        return bad(format!("agent {i}: heading {} outside (-pi, pi]", s.heading));
                    }
                }
            }
        }
        if self.maps.len() != agents {
            return bad(format!("maps: {} entries for {agents} agents", self.maps.len()));
        }
        if self.gt_futures.len() != agents {
            return bad(format!("gt_futures: {} entries for {agents} agents", self.gt_futures.len()));
        }
        if self.oracle_controls.len() != agents {
            return bad(format!("oracle_controls: {} entries for {agents} agents", self.oracle_controls.len()));
        }
        let n = self.gt_futures[0].len();
        if n == 0 {
            return bad("gt_futures: empty future".into());
        }
        if self.gt_futures.iter().any(|f| f.len() != n) {
            return bad("gt_futures: ragged lengths".into());
        }
        if self.oracle_controls.iter().any(|c| c.len() != n) {
            return bad("oracle_controls: length differs from gt_futures".into());
        }
        let lane_len = self.maps[0].lanes.first().map_or(0, |l| l.waypoints.len());
        let cw_len = self.maps[0].crosswalks.first().map_or(0, |c| c.points.len());
        for (i, map) in self.maps.iter().enumerate() {
            if map.lanes.len() != LANES_PER_AGENT {
                return bad(format!("maps[{i}].lanes: expected {LANES_PER_AGENT}, got {}", map.lanes.len()));
            }
            if map.crosswalks.len() != CROSSWALKS_PER_AGENT {
                return bad(format!(
                    "maps[{i}].crosswalks: expected {CROSSWALKS_PER_AGENT}, got {}",
                    map.crosswalks.len()
                ));
            }
            for lane in &map.lanes {
                if lane.waypoints.len() != lane_len || lane.mask.len() != lane_len || lane_len == 0 {
                    return bad(format!("maps[{i}].lanes: inconsistent waypoint count"));
                }
                for w in &lane.waypoints {
                    for (code, vocab) in w.codes().iter().zip(LaneWaypoint::VOCABS) {
                        if *code >= vocab {
                            return bad(format!("maps[{i}].lanes: code {code} outside vocabulary {vocab}"));
                        }
                    }
                }
            }
            for cw in &map.crosswalks {
                if cw.points.len() != cw_len || cw.mask.len() != cw_len || cw_len == 0 {
                    return bad(format!("maps[{i}].crosswalks: inconsistent point count"));
                }
            }
        }
        if let Some(l) = self.route.lane {
            if l >= LANES_PER_AGENT {
                return bad(format!("route.lane: {l} out of range"));
            }
        }
        Ok(())
    }
}
