//! Episode metrics and the `sim_report.csv` writer.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{BicycleState, Control};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub collision: bool,
    pub off_route: bool,
    /// Set when the planner produced a non-finite output; the remaining
    /// metrics then cover the steps executed before the abort.
    pub aborted: bool,
    pub progress: f64,
    pub mean_abs_accel: f64,
    pub mean_abs_jerk: f64,
    pub mean_abs_lat_accel: f64,
    /// Absent when the episode ended before the checkpoint.
    pub position_error_3s: Option<f64>,
    pub position_error_5s: Option<f64>,
    pub position_error_10s: Option<f64>,
    /// Absent for planners without predictions or frames without neighbors.
    pub prediction_ade: Option<f64>,
    pub prediction_fde: Option<f64>,
}

/// Executed ego states (initial state first), the controls that produced
/// them, and per-step collision flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeTrace {
    pub ego: Vec<BicycleState>,
    pub controls: Vec<Control>,
    pub collisions: Vec<bool>,
    /// Logged neighbor poses at each executed step, `None` for padding.
    pub neighbors: Vec<Vec<Option<[f64; 3]>>>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Smallest distance from `(x, y)` to a point of the polyline.
pub fn distance_to_polyline(x: f64, y: f64, line: &[[f64; 3]]) -> f64 {
    line.iter().map(|p| (p[0] - x).hypot(p[1] - y)).fold(f64::INFINITY, f64::min)
}

/// Closed-loop metrics. `ego_log` is the logged ego future aligned so that
/// `ego_log[t - 1]` corresponds to `trace.ego[t]`.
pub fn metrics(
    trace: &EpisodeTrace,
    ego_log: &[[f64; 3]],
    route: &[[f64; 3]],
    dt: f64,
    off_route_threshold: f64,
) -> EpisodeMetrics {
    let ego = &trace.ego;
    let progress = ego.windows(2).map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y)).sum();
    let jerk = mean(trace.controls.windows(2).map(|w| ((w[1].accel - w[0].accel) / dt).abs()));
    let lat = mean(ego.windows(2).map(|w| (w[0].speed * (w[1].heading - w[0].heading) / dt).abs()));
    let position_error = |seconds: f64| {
        let step = (seconds / dt).round() as usize;
        (step >= 1 && step < ego.len() && step <= ego_log.len()).then(|| {
            let (s, l) = (ego[step], ego_log[step - 1]);
            (s.x - l[0]).hypot(s.y - l[1])
        })
    };
    let off_route =
        !route.is_empty() && ego.iter().any(|s| distance_to_polyline(s.x, s.y, route) > off_route_threshold);
    EpisodeMetrics {
        collision: trace.collisions.iter().any(|&c| c),
        off_route,
        aborted: false,
        progress,
        mean_abs_accel: mean(trace.controls.iter().map(|u| u.accel.abs())),
        mean_abs_jerk: jerk,
        mean_abs_lat_accel: lat,
        position_error_3s: position_error(3.0),
        position_error_5s: position_error(5.0),
        position_error_10s: position_error(10.0),
        prediction_ade: None,
        prediction_fde: None,
    }
}

/// First 16 hex digits of the SHA-256 of the concatenated parts.
pub fn config_hash(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub const SIM_REPORT_HEADER: &str = "seed,config_hash,collision,off_route,aborted,progress,mean_abs_accel,\
mean_abs_jerk,mean_abs_lat_accel,position_error_3s,position_error_5s,position_error_10s,prediction_ade,prediction_fde";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| mean(present.into_iter()))
}

/// One row per episode in input order, then an aggregate row whose
/// collision, off-route and abort columns are rates in percent and whose
/// other columns are means over the episodes reporting them.
pub fn write_sim_report<W: Write>(mut out: W, rows: &[(u64, EpisodeMetrics)], hash: &str) -> Result<()> {
    writeln!(out, "{SIM_REPORT_HEADER}")?;
    for (seed, m) in rows {
        writeln!(
            out,
            "{seed},{hash},{},{},{},{},{},{},{},{},{},{},{},{}",
            u8::from(m.collision),
            u8::from(m.off_route),
            u8::from(m.aborted),
            m.progress,
            m.mean_abs_accel,
            m.mean_abs_jerk,
            m.mean_abs_lat_accel,
            opt(m.position_error_3s),
            opt(m.position_error_5s),
            opt(m.position_error_10s),
            opt(m.prediction_ade),
            opt(m.prediction_fde),
        )?;
    }
    let n = rows.len().max(1) as f64;
    let rate = |f: fn(&EpisodeMetrics) -> bool| 100.0 * rows.iter().filter(|(_, m)| f(m)).count() as f64 / n;
    let avg = |f: fn(&EpisodeMetrics) -> f64| mean(rows.iter().map(|(_, m)| f(m)));
    let avg_opt = |f: fn(&EpisodeMetrics) -> Option<f64>| opt(mean_opt(rows.iter().map(|(_, m)| f(m))));
    writeln!(
        out,
        "mean,{hash},{},{},{},{},{},{},{},{},{},{},{},{}",
        rate(|m| m.collision),
        rate(|m| m.off_route),
        rate(|m| m.aborted),
        avg(|m| m.progress),
        avg(|m| m.mean_abs_accel),
        avg(|m| m.mean_abs_jerk),
        avg(|m| m.mean_abs_lat_accel),
        avg_opt(|m| m.position_error_3s),
        avg_opt(|m| m.position_error_5s),
        avg_opt(|m| m.position_error_10s),
        avg_opt(|m| m.prediction_ade),
        avg_opt(|m| m.prediction_fde),
    )?;
    Ok(())
}
