use std::f64::consts::PI;

use super::{AgentState, ScenarioFrame};

/// Wraps an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Maps world coordinates into the frame of a pose `(x0, y0, heading0)`:
/// translate by `-(x0, y0)`, then rotate by `-heading0`.
#[derive(Clone, Copy, Debug)]
pub struct RigidTransform {
    origin: (f64, f64),
    heading: f64,
    cos: f64,
    sin: f64,
}

impl RigidTransform {
    pub fn to_frame_of(x0: f64, y0: f64, heading0: f64) -> Self {
        Self { origin: (x0, y0), heading: heading0, cos: heading0.cos(), sin: heading0.sin() }
    }

    pub fn point(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.origin.0;
        let dy = y - self.origin.1;
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }

    pub fn vector(&self, vx: f64, vy: f64) -> (f64, f64) {
        (self.cos * vx + self.sin * vy, -self.sin * vx + self.cos * vy)
    }

    /// Relative heading, unwrapped.
    pub fn heading(&self, h: f64) -> f64 {
        h - self.heading
    }

    pub fn pose(&self, p: [f64; 3]) -> [f64; 3] {
        let (x, y) = self.point(p[0], p[1]);
        [x, y, wrap_angle(self.heading(p[2]))]
    }

    pub fn state(&self, s: &AgentState) -> AgentState {
        let (x, y) = self.point(s.x, s.y);
        let (vx, vy) = self.vector(s.vx, s.vy);
        AgentState { x, y, vx, vy, heading: wrap_angle(self.heading(s.heading)), ..*s }
    }
}

/// Re-expresses the whole frame relative to the ego's current pose.
///
/// Future headings are shifted by the same multiple of 2π as the agent's
/// current heading so they stay continuous with it.
pub fn normalize_to_ego_frame(frame: &ScenarioFrame) -> ScenarioFrame {
    let cur = frame.ego.current();
    let tf = RigidTransform::to_frame_of(cur.x, cur.y, cur.heading);
    let mut out = frame.clone();
    for i in 0..out.num_agents() {
        let agent = out.agent_mut(i);
        let raw_current = tf.heading(agent.current().heading);
        let shift = wrap_angle(raw_current) - raw_current;
        for s in &mut agent.states {
            *s = tf.state(s);
        }
        for p in &mut out.gt_futures[i] {
            let (x, y) = tf.point(p[0], p[1]);
            *p = [x, y, tf.heading(p[2]) + shift];
        }
    }
    for map in &mut out.maps {
        for lane in &mut map.lanes {
            for w in &mut lane.waypoints {
                w.center = tf.pose(w.center);
                w.left_boundary = tf.pose(w.left_boundary);
                w.right_boundary = tf.pose(w.right_boundary);
            }
        }
        for cw in &mut map.crosswalks {
            for p in &mut cw.points {
                *p = tf.pose(*p);
            }
        }
    }
    for p in &mut out.route.centerline {
        *p = tf.pose(*p);
    }
    out
}
