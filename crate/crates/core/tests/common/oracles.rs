//! Straightforward reference implementations the library is checked against.

use planpred::simulator::OrientedBox;

/// Self first, then the `k - 1` nearest others by squared distance, ties to the lower index.
#[allow(clippy::needless_range_loop)]
pub fn knn(points: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let dist: Vec<Vec<f64>> = points
        .iter()
        .map(|p| points.iter().map(|q| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()).collect())
        .collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut chosen = vec![i];
        while chosen.len() < k {
            let mut best: Option<usize> = None;
            for j in 0..n {
                if chosen.contains(&j) {
                    continue;
                }
                match best {
                    Some(b) if dist[i][b] <= dist[i][j] => {}
                    _ => best = Some(j),
                }
            }
            chosen.push(best.unwrap());
        }
        out.push(chosen);
    }
    out
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn prediction_loss(pred: &[Vec<[f64; 3]>], gt: &[Vec<[f64; 3]>], valid: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut terms = 0.0;
    for k in 0..pred.len() {
        if !valid[k] {
            continue;
        }
        for t in 0..pred[k].len() {
            for c in 0..3 {
                total += smooth_l1(pred[k][t][c] - gt[k][t][c]);
                terms += 1.0;
            }
        }
    }
    if terms == 0.0 {
        0.0
    } else {
        total / terms
    }
}

pub fn score_loss(probs: &[f64], best: usize) -> f64 {
    -f64::max(probs[best], 1e-12).ln()
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn ade(plan: &[[f64; 3]], gt: &[[f64; 3]], dt: f64, horizon: f64) -> f64 {
    let mut s = 0.0;
    for t in 0..plan.len() {
        s += dist(plan[t], gt[t]);
    }
    s * dt / horizon
}

pub fn fde(plan: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    dist(plan[plan.len() - 1], gt[plan.len() - 1])
}

/// Exhaustive arg-min of the joint mean displacement, lowest index on ties.
pub fn best_mode(ego: &[Vec<[f64; 3]>], nbrs: &[Vec<Vec<[f64; 3]>>], gt: &[Vec<[f64; 3]>], valid: &[bool]) -> usize {
    let mean = |p: &[[f64; 3]], q: &[[f64; 3]]| p.iter().zip(q).map(|(a, b)| dist(*a, *b)).sum::<f64>() / p.len() as f64;
    let costs: Vec<f64> = (0..ego.len())
        .map(|m| {
            let mut c = mean(&ego[m], &gt[0]);
            for k in 0..valid.len() {
                if valid[k] {
                    c += mean(&nbrs[m][k], &gt[k + 1]);
                }
            }
            c
        })
        .collect();
    let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    costs.iter().position(|&c| c == min).unwrap()
}

fn inside(b: &OrientedBox, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - b.x, py - b.y);
    let along = dx * b.heading.cos() + dy * b.heading.sin();
    let across = -dx * b.heading.sin() + dy * b.heading.cos();
    along.abs() <= b.length / 2.0 && across.abs() <= b.width / 2.0
}

fn corners(b: &OrientedBox) -> Vec<(f64, f64)> {
    let (c, s) = (b.heading.cos(), b.heading.sin());
    let mut out = Vec::new();
    for (u, v) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let (a, w) = (u * b.length / 2.0, v * b.width / 2.0);
        out.push((b.x + a * c - w * s, b.y + a * s + w * c));
    }
    out
}

fn bounds(pts: &[(f64, f64)]) -> [f64; 4] {
    let mut r = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for &(x, y) in pts {
        r = [r[0].min(x), r[1].min(y), r[2].max(x), r[3].max(y)];
    }
    r
}

/// Whether some cell center of a `cells x cells` grid over `region` lies in both boxes.
pub fn raster_overlap_in(a: &OrientedBox, b: &OrientedBox, region: [f64; 4], cells: usize) -> bool {
    let (w, h) = ((region[2] - region[0]) / cells as f64, (region[3] - region[1]) / cells as f64);
    for i in 0..cells {
        for j in 0..cells {
            let (px, py) = (region[0] + (i as f64 + 0.5) * w, region[1] + (j as f64 + 0.5) * h);
            if inside(a, px, py) && inside(b, px, py) {
                return true;
            }
        }
    }
    false
}

/// Rasterized overlap on a 200 x 200 grid over both boxes. When the coarse
/// grid finds nothing, the grid is re-laid over the intersection of the two
/// bounding rectangles, which shrinks every pass; returns the verdict and
/// the number of passes used.
pub fn raster_overlap(a: &OrientedBox, b: &OrientedBox) -> (bool, usize) {
    let (ra, rb) = (bounds(&corners(a)), bounds(&corners(b)));
    let union = [ra[0].min(rb[0]), ra[1].min(rb[1]), ra[2].max(rb[2]), ra[3].max(rb[3])];
    if raster_overlap_in(a, b, union, 200) {
        return (true, 1);
    }
    let inter = [ra[0].max(rb[0]), ra[1].max(rb[1]), ra[2].min(rb[2]), ra[3].min(rb[3])];
    if inter[0] > inter[2] || inter[1] > inter[3] {
        return (false, 1);
    }
    let mut region = inter;
    for pass in 2..=6 {
        if raster_overlap_in(a, b, region, 200) {
            return (true, pass);
        }
        // Clip to where both boxes can still meet: the hull of cells touching either box.
        let (w, h) = ((region[2] - region[0]) / 200.0, (region[3] - region[1]) / 200.0);
        let mut hit = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for i in 0..200 {
            for j in 0..200 {
                let (px, py) = (region[0] + (i as f64 + 0.5) * w, region[1] + (j as f64 + 0.5) * h);
                if near(a, px, py, w.hypot(h)) && near(b, px, py, w.hypot(h)) {
                    hit = [hit[0].min(px - w), hit[1].min(py - h), hit[2].max(px + w), hit[3].max(py + h)];
                }
            }
        }
        if hit[0] > hit[2] {
            return (false, pass);
        }
        region = hit;
    }
    (false, 6)
}

fn near(b: &OrientedBox, px: f64, py: f64, margin: f64) -> bool {
    let grown = OrientedBox { length: b.length + 2.0 * margin, width: b.width + 2.0 * margin, ..*b };
    inside(&grown, px, py)
}

/// Radius of the circle through three points.
pub fn circumradius(p: [f64; 2], q: [f64; 2], r: [f64; 2]) -> f64 {
    let a = ((q[0] - r[0]).powi(2) + (q[1] - r[1]).powi(2)).sqrt();
    let b = ((p[0] - r[0]).powi(2) + (p[1] - r[1]).powi(2)).sqrt();
    let c = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    let area2 = ((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])).abs();
    a * b * c / (2.0 * area2)
}
