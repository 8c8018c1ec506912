//! Oriented-box overlap by the separating-axis test.

use crate::scenario::AgentState;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(x: f64, y: f64, heading: f64, length: f64, width: f64) -> Self {
        Self { x, y, heading, length, width }
    }

    pub fn from_state(s: &AgentState) -> Self {
        Self::new(s.x, s.y, s.heading, s.length, s.width)
    }

    /// Unit vectors along the length and the width.
    fn axes(&self) -> [(f64, f64); 2] {
        let (s, c) = self.heading.sin_cos();
        [(c, s), (-s, c)]
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let [(fx, fy), (lx, ly)] = self.axes();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)]
            .map(|(a, b)| (self.x + a * hl * fx + b * hw * lx, self.y + a * hl * fy + b * hw * ly))
    }

    /// Whether `(px, py)` lies inside or on the box.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let [(fx, fy), (lx, ly)] = self.axes();
        let (dx, dy) = (px - self.x, py - self.y);
        (dx * fx + dy * fy).abs() <= self.length / 2.0 && (dx * lx + dy * ly).abs() <= self.width / 2.0
    }
}

fn project(corners: &[(f64, f64); 4], axis: (f64, f64)) -> (f64, f64) {
    corners.iter().map(|&(x, y)| x * axis.0 + y * axis.1).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p), hi.max(p))
    })
}

/// True when the boxes overlap or touch: no separating axis among the
/// four edge normals.
pub fn boxes_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    let (ca, cb) = (a.corners(), b.corners());
    a.axes().into_iter().chain(b.axes()).all(|axis| {
        let (a_lo, a_hi) = project(&ca, axis);
        let (b_lo, b_hi) = project(&cb, axis);
        a_lo <= b_hi && b_lo <= a_hi
    })
}

pub fn collision_check(ego: &OrientedBox, others: &[OrientedBox]) -> bool {
    others.iter().any(|o| boxes_overlap(ego, o))
}
