//! Static SVG output: scenario frames with plans and predictions, and line
//! charts of metric CSV columns.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use planpred::decoder::ModelOutput;
use planpred::scenario::{load_frames, ScenarioFrame};
use planpred::simulator::OrientedBox;

use crate::PlotArgs;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const MARGIN: f64 = 30.0;
const GROUND_TRUTH: &str = "#000000";
const PLAN: &str = "#d62728";
/// Prediction colors, one shade per mode.
const MAGENTAS: [&str; 4] = ["#cc00cc", "#e055e0", "#eb8ceb", "#f4bdf4"];

pub fn run(a: PlotArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if a.data.extension().is_some_and(|e| e == "csv") {
        let written = plot_csv(&a.data, &a.out)?;
        println!("wrote {written} charts to {}", a.out.display());
        return Ok(());
    }
    let mut frames = load_frames(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    frames.truncate(a.count);
    let outputs = crate::commands::predictions(&a, &frames)?;
    for (i, f) in frames.iter().enumerate() {
        let svg = frame_svg(f, outputs.as_ref().map(|o| &o[i]));
        let path = a.out.join(format!("frame_{}.svg", f.seed));
        std::fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} frame plots to {}", frames.len(), a.out.display());
    Ok(())
}

/// Maps data coordinates into the canvas, preserving aspect ratio, y up.
struct Viewport {
    min: (f64, f64),
    scale: f64,
}

impl Viewport {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
        for (x, y) in points {
            lo = (lo.0.min(x), lo.1.min(y));
            hi = (hi.0.max(x), hi.1.max(y));
        }
        if !lo.0.is_finite() {
            return Self { min: (0.0, 0.0), scale: 1.0 };
        }
        let span = ((hi.0 - lo.0).max(1e-6), (hi.1 - lo.1).max(1e-6));
        let scale = ((WIDTH - 2.0 * MARGIN) / span.0).min((HEIGHT - 2.0 * MARGIN) / span.1);
        Self { min: lo, scale }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (MARGIN + (x - self.min.0) * self.scale, HEIGHT - MARGIN - (y - self.min.1) * self.scale)
    }

    fn polyline(&self, pts: impl Iterator<Item = (f64, f64)>, stroke: &str, width: f64, extra: &str) -> String {
        let coords: Vec<String> = pts
            .map(|(x, y)| {
                let (u, v) = self.map(x, y);
                format!("{u:.2},{v:.2}")
            })
            .collect();
        format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"{width}\" {extra}/>\n",
            coords.join(" ")
        )
    }
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{MARGIN}\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">{title}</text>\n"
    )
}

pub fn frame_svg(frame: &ScenarioFrame, output: Option<&ModelOutput>) -> String {
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for a in frame.agents().filter(|a| a.valid) {
        pts.extend(a.states.iter().map(|s| (s.x, s.y)));
    }
    for (i, fut) in frame.gt_futures.iter().enumerate() {
        if frame.agent(i).valid {
            pts.extend(fut.iter().map(|p| (p[0], p[1])));
        }
    }
    let view = Viewport::fit(pts.into_iter());
    let mut svg = header(&format!("frame {}", frame.seed));

    for lane in frame.maps.iter().flat_map(|m| &m.lanes) {
        let valid = || lane.waypoints.iter().zip(&lane.mask).filter(|(_, &v)| v).map(|(w, _)| w);
        svg += &view.polyline(valid().map(|w| (w.center[0], w.center[1])), "#bbbbbb", 1.0, "stroke-dasharray=\"4 4\"");
        svg += &view.polyline(valid().map(|w| (w.left_boundary[0], w.left_boundary[1])), "#dddddd", 1.0, "");
        svg += &view.polyline(valid().map(|w| (w.right_boundary[0], w.right_boundary[1])), "#dddddd", 1.0, "");
    }
    for cw in frame.maps.iter().flat_map(|m| &m.crosswalks) {
        let pts = cw.points.iter().zip(&cw.mask).filter(|(_, &v)| v).map(|(p, _)| (p[0], p[1]));
        svg += &view.polyline(pts, "#9999cc", 4.0, "stroke-opacity=\"0.5\"");
    }

    for (i, agent) in frame.agents().enumerate().filter(|(_, a)| a.valid) {
        svg += &view.polyline(agent.states.iter().map(|s| (s.x, s.y)), "#888888", 1.5, "");
        svg += &view.polyline(frame.gt_futures[i].iter().map(|p| (p[0], p[1])), GROUND_TRUTH, 1.5, "");
        let corners = OrientedBox::from_state(agent.current()).corners();
        let fill = if i == 0 { "#1f77b4" } else { "#7f7f7f" };
        let coords: Vec<String> = corners
            .iter()
            .map(|&(x, y)| {
                let (u, v) = view.map(x, y);
                format!("{u:.2},{v:.2}")
            })
            .collect();
        let _ = writeln!(svg, "<polygon points=\"{}\" fill=\"{fill}\" fill-opacity=\"0.7\"/>", coords.join(" "));
    }

    if let Some(out) = output {
        let best = out.most_likely_mode();
        for (m, modes) in out.neighbor_trajectories.iter().enumerate() {
            let color = MAGENTAS[m.min(MAGENTAS.len() - 1)];
            for (k, traj) in modes.iter().enumerate() {
                if frame.neighbors[k].valid {
                    svg += &view.polyline(traj.iter().map(|p| (p[0], p[1])), color, 1.5, "");
                }
            }
        }
        for (m, plan) in out.ego_trajectories.iter().enumerate() {
            let (width, extra) = if m == best { (2.5, "") } else { (1.0, "stroke-opacity=\"0.4\"") };
            svg += &view.polyline(plan.iter().map(|p| (p[0], p[1])), PLAN, width, extra);
        }
    }
    svg + "</svg>\n"
}

/// One chart per numeric column, against the row index. Rows whose first
/// field is not a number (e.g. aggregate rows) are skipped.
fn plot_csv(path: &Path, out_dir: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let Some(head) = lines.next() else { bail!("{} is empty", path.display()) };
    let columns: Vec<&str> = head.split(',').collect();
    let rows: Vec<Vec<Option<f64>>> = lines
        .map(|l| l.split(',').map(|v| v.trim().parse::<f64>().ok()).collect::<Vec<_>>())
        .filter(|r| r.first().is_some_and(|v| v.is_some()))
        .collect();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    let mut written = 0;
    for (c, name) in columns.iter().enumerate().skip(1) {
        let series: Vec<(f64, f64)> = rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.get(c).copied().flatten().map(|v| (i as f64, v)))
            .filter(|(_, v)| v.is_finite())
            .collect();
        if series.is_empty() {
            continue;
        }
        let view = Viewport::fit(series.iter().copied());
        let mut svg = header(&format!("{stem}: {name}"));
        let (lo, hi) = series.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(_, v)| (a.min(v), b.max(v)));
        let _ = writeln!(
            svg,
            "<text x=\"{MARGIN}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">min {lo:.4} max {hi:.4}</text>",
            HEIGHT - 8.0
        );
        svg += &view.polyline(series.into_iter(), PLAN, 1.5, "");
        svg += "</svg>\n";
        let file = out_dir.join(format!("{stem}_{name}.svg"));
        std::fs::write(&file, svg).with_context(|| format!("writing {}", file.display()))?;
        written += 1;
    }
    Ok(written)
}
