//! End-to-end training: Adam on mini-batches with a step-halving learning
//! rate, optional gradient clipping, per-epoch checkpoints and a CSV log.
//!
//! Per-frame gradients may be computed on worker threads; they are merged in
//! frame order so results are bitwise reproducible.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::config::{LossWeights, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{mean_displacement, select_best_mode, total_loss_graph, LossBreakdown};
use crate::model::Model;
use crate::params::{ParamGrads, ParameterStore};
use crate::scenario::ScenarioFrame;

/// `base_lr · 0.5^⌊epoch / halve_every⌋`
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.base_lr * 0.5f64.powi((epoch / config.halve_every) as i32)
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ParamGrads,
    v: ParamGrads,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParameterStore) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: ParamGrads::zeros_like(store), v: ParamGrads::zeros_like(store), t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParameterStore, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.get_mut(id).data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(id).data(), self.v.get(id).data());
            for ((p, mi), vi) in store.value_mut(id).data_mut().iter_mut().zip(m).zip(v) {
                *p -= lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Loss and parameter gradients for one frame.
pub fn frame_gradients(
    model: &Model,
    store: &ParameterStore,
    frame: &ScenarioFrame,
    weights: &LossWeights,
) -> Result<(ParamGrads, LossBreakdown)> {
    let mut g = Graph::with_params(store);
    let fwd = model.forward(&mut g, frame)?;
    let output = model.output(&g, &fwd);
    let (loss, breakdown) = total_loss_graph(&mut g, &fwd, &output, frame, weights, &model.config);
    Ok((g.backward(loss).param_grads(store), breakdown))
}

/// Mean gradient and mean breakdown over `frames`, merged in order.
pub fn batch_gradients(
    model: &Model,
    store: &ParameterStore,
    frames: &[&ScenarioFrame],
    weights: &LossWeights,
) -> Result<(ParamGrads, LossBreakdown)> {
    let per_frame: Vec<(ParamGrads, LossBreakdown)> =
        frames.par_iter().map(|f| frame_gradients(model, store, f, weights)).collect::<Result<_>>()?;
    let mut total = ParamGrads::zeros_like(store);
    let mut losses = Vec::with_capacity(per_frame.len());
    for (g, l) in &per_frame {
        total.add_assign(g);
        losses.push(*l);
    }
    total.scale(1.0 / frames.len() as f64);
    Ok((total, LossBreakdown::mean(&losses)))
}

/// Open-loop errors of one frame under its best mode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameEval {
    pub best_mode: usize,
    /// Mean over valid neighbors of their mean displacement.
    pub prediction_ade: f64,
    /// Mean over valid neighbors of their final displacement.
    pub prediction_fde: f64,
    pub planning_ade: f64,
    pub planning_fde: f64,
}

pub fn evaluate_frame(model: &Model, store: &ParameterStore, frame: &ScenarioFrame) -> Result<FrameEval> {
    let n = model.config.future_len;
    if frame.future_len() < n {
        return Err(Error::Contract(format!("frame {} logs {} future steps, need {n}", frame.seed, frame.future_len())));
    }
    let out = model.predict(store, frame)?;
    let best = select_best_mode(&out, frame);
    let (mut ade, mut fde, mut count) = (0.0, 0.0, 0usize);
    for (k, nb) in frame.neighbors.iter().enumerate() {
        if nb.valid {
            let pred = &out.neighbor_trajectories[best][k];
            let gt = &frame.gt_futures[k + 1];
            ade += mean_displacement(pred, gt);
            fde += mean_displacement(&pred[n - 1..], &gt[n - 1..n]);
            count += 1;
        }
    }
    let c = count.max(1) as f64;
    let plan = &out.ego_trajectories[best];
    let gt = &frame.gt_futures[0];
    Ok(FrameEval {
        best_mode: best,
        prediction_ade: ade / c,
        prediction_fde: fde / c,
        planning_ade: mean_displacement(plan, gt),
        planning_fde: mean_displacement(&plan[n - 1..], &gt[n - 1..n]),
    })
}

/// Evaluates frames in parallel; results keep input order.
pub fn evaluate(model: &Model, store: &ParameterStore, frames: &[ScenarioFrame]) -> Result<Vec<FrameEval>> {
    frames.par_iter().map(|f| evaluate_frame(model, store, f)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean validation errors, when validation frames were supplied.
    pub validation: Option<FrameEval>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub wall_seconds: f64,
    /// Parameters whose gradient was exactly zero at every step.
    pub never_updated: Vec<String>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss.total)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss.total)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `ckpt_epoch{n}.gdpp` and `train_log.csv`.
    pub out_dir: Option<PathBuf>,
    pub validation: Vec<ScenarioFrame>,
}

pub struct Trained {
    pub model: Model,
    pub store: ParameterStore,
    pub report: TrainReport,
}

fn mean_eval(evals: &[FrameEval]) -> FrameEval {
    let n = evals.len().max(1) as f64;
    let mut m = FrameEval::default();
    for e in evals {
        m.prediction_ade += e.prediction_ade / n;
        m.prediction_fde += e.prediction_fde / n;
        m.planning_ade += e.planning_ade / n;
        m.planning_fde += e.planning_fde / n;
    }
    m
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch}.gdpp")
}

/// Trains from a fresh initialisation seeded by `config.seed`.
pub fn train(frames: &[ScenarioFrame], config: &TrainConfig, options: &TrainOptions) -> Result<Trained> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::Config("training needs at least one frame".into()));
    }
    let started = Instant::now();
    let (model, mut store) = Model::new(config.model.clone(), config.seed)?;
    for f in frames.iter().chain(&options.validation) {
        model.check_frame(f)?;
        if f.future_len() < config.model.future_len {
            return Err(Error::Contract(format!(
                "frame {} logs {} future steps, model needs {}",
                f.seed,
                f.future_len(),
                config.model.future_len
            )));
        }
    }
    let mut log = match &options.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(dir.join("train_log.csv"))?);
            writeln!(w, "{}", LossBreakdown::CSV_HEADER)?;
            Some(w)
        }
        None => None,
    };

    let mut adam = Adam::new(&store);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut touched = vec![false; store.len()];
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ScenarioFrame> = chunk.iter().map(|&i| &frames[i]).collect();
            let (mut grads, loss) = batch_gradients(&model, &store, &batch, &config.weights)?;
            if let Some(term) = loss.non_finite_term() {
                return Err(Error::NonFiniteLoss { term, step });
            }
            if loss.score_clamped {
                log::warn!("step {step}: best-mode probability below floor, score loss clamped");
            }
            let grad_norm = grads.global_norm();
            if !grad_norm.is_finite() {
                return Err(Error::NonFiniteLoss { term: "gradient", step });
            }
            if let Some(clip) = config.clip_norm {
                if grad_norm > clip {
                    grads.scale(clip / grad_norm);
                }
            }
            for (t, g) in touched.iter_mut().zip(grads.iter()) {
                *t |= g.data().iter().any(|&v| v != 0.0);
            }
            adam.step(&mut store, &grads, lr);
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", loss.csv_row(step))?;
            }
            report.steps.push(StepRecord { step, epoch, lr, grad_norm, loss });
            epoch_loss += loss.total;
            batches += 1;
            step += 1;
        }
        let checkpoint = match &options.out_dir {
            Some(dir) => {
                let path = dir.join(checkpoint_name(epoch));
                checkpoint::save(&store, &path)?;
                Some(path)
            }
            None => None,
        };
        let validation = if options.validation.is_empty() {
            None
        } else {
            Some(mean_eval(&evaluate(&model, &store, &options.validation)?))
        };
        log::info!("epoch {epoch}: lr {lr:e}, mean loss {:.6}", epoch_loss / batches as f64);
        report.epochs.push(EpochRecord { epoch, mean_loss: epoch_loss / batches as f64, validation, checkpoint });
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    report.never_updated =
        store.ids().filter(|id| !touched[id.index()]).map(|id| store.name(id).to_string()).collect();
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok(Trained { model, store, report })
}

/// Writes the config next to the checkpoints so evaluation can rebuild the model.
pub fn save_config(dir: &Path, config: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    Ok(())
}
