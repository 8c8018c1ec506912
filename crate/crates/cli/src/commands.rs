use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use planpred::model::Model;
use planpred::params::ParameterStore;
use planpred::scenario::{generate_scenario, load_frames, save_frames, GeneratorSpec, ScenarioFrame, Template};
use planpred::simulator::{
    config_hash, prediction_errors, run_episode, write_sim_report, GradientRefiner, ModelPlanner, PlanRefiner,
};
use planpred::training::{train, TrainOptions};
use rayon::prelude::*;

use crate::settings::RunConfig;
use crate::{Command, EvalArgs, GenArgs, PlotArgs, RefinerArg, SimulateArgs, TrainArgs};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Simulate(a) => simulate(a),
        Command::Plot(a) => crate::plot::run(a),
    }
}

/// Spec used by `gen` when no config is given.
pub fn default_generator_spec() -> GeneratorSpec {
    GeneratorSpec::new(Template::Straight, 6, [5.0, 12.0], 10.0)
}

fn gen(a: GenArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<GeneratorSpec>(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => default_generator_spec(),
    };
    if let Some(t) = &a.template {
        spec.template = t.parse()?;
    }
    spec.validate()?;
    let frames = (0..a.count)
        .map(|i| generate_scenario(a.seed.wrapping_add(i), &spec))
        .collect::<planpred::Result<Vec<_>>>()?;
    save_frames(&a.out, &frames).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn read_frames(path: &Path) -> Result<Vec<ScenarioFrame>> {
    load_frames(path).with_context(|| format!("reading {}", path.display()))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = a.seed {
        run.train.seed = seed;
    }
    let cfg = &run.train;
    let frames = read_frames(&a.data)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.json"), run.to_json()?)?;
    let options = TrainOptions { out_dir: Some(a.out.clone()), ..TrainOptions::default() };
    let trained = train(&frames, cfg, &options)?;
    for e in &trained.report.epochs {
        println!("epoch {} mean loss {:.6}", e.epoch, e.mean_loss);
    }
    println!("wrote checkpoints and train_log.csv to {}", a.out.display());
    Ok(())
}

fn load_model(ckpt: &Path, cfg: &RunConfig) -> Result<(Model, ParameterStore)> {
    let bytes = std::fs::read(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    Model::from_checkpoint(cfg.train.model.clone(), &bytes).with_context(|| format!("loading {}", ckpt.display()))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = RunConfig::for_checkpoint(a.config.as_deref(), &a.ckpt)?;
    let (model, store) = load_model(&a.ckpt, &cfg)?;
    let frames = read_frames(&a.data)?;
    let n = cfg.train.model.future_len;
    if let Some(f) = frames.iter().find(|f| f.future_len() < n) {
        bail!("frame {} logs {} future steps, the model predicts {n}", f.seed, f.future_len());
    }
    let rows: Vec<Option<(f64, f64)>> = pool(a.jobs)?.install(|| {
        frames
            .par_iter()
            .map(|f| Ok(prediction_errors(&model.predict(&store, f)?, f)))
            .collect::<planpred::Result<Vec<_>>>()
    })?;
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "frame,ade,fde")?;
    for (f, r) in frames.iter().zip(&rows) {
        writeln!(out, "{},{},{}", f.seed, fmt_opt(r.map(|r| r.0)), fmt_opt(r.map(|r| r.1)))?;
    }
    let present: Vec<(f64, f64)> = rows.iter().flatten().copied().collect();
    let mean = |f: fn(&(f64, f64)) -> f64| {
        (!present.is_empty()).then(|| present.iter().map(f).sum::<f64>() / present.len() as f64)
    };
    writeln!(out, "mean,{},{}", fmt_opt(mean(|r| r.0)), fmt_opt(mean(|r| r.1)))?;
    out.flush()?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = RunConfig::for_checkpoint(a.config.as_deref(), &a.ckpt)?;
    let (model, store) = load_model(&a.ckpt, &cfg)?;
    let mut frames = read_frames(&a.data)?;
    if let Some(n) = a.episodes {
        if n > frames.len() {
            bail!("--episodes {n} exceeds the {} frames in {}", frames.len(), a.data.display());
        }
        frames.truncate(n);
    }
    let gradient = GradientRefiner::default();
    let refiner: Option<&dyn PlanRefiner> = match a.refiner {
        RefinerArg::None => None,
        RefinerArg::Gradient => Some(&gradient),
    };
    let planner = ModelPlanner { model: &model, store: &store };
    let sim = cfg.sim;
    let results = pool(a.jobs)?.install(|| {
        frames
            .par_iter()
            .map(|f| run_episode(f, &planner, sim, refiner).map(|(m, _)| (f.seed, m)))
            .collect::<planpred::Result<Vec<_>>>()
    })?;
    let refiner_name = refiner.map_or("none", |r| r.name());
    let hash = config_hash(&[
        serde_json::to_string(&cfg.train.model)?.as_bytes(),
        serde_json::to_string(&sim)?.as_bytes(),
        refiner_name.as_bytes(),
    ]);
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    write_sim_report(&mut w, &results, &hash)?;
    w.flush()?;
    println!("wrote {} episodes to {}", results.len(), a.out.display());
    Ok(())
}

/// Frames with the model's output, for plotting.
pub fn predictions(a: &PlotArgs, frames: &[ScenarioFrame]) -> Result<Option<Vec<planpred::decoder::ModelOutput>>> {
    let Some(ckpt) = &a.ckpt else { return Ok(None) };
    let cfg = RunConfig::for_checkpoint(a.config.as_deref(), ckpt)?;
    let (model, store) = load_model(ckpt, &cfg)?;
    let outs = frames.iter().map(|f| model.predict(&store, f)).collect::<planpred::Result<Vec<_>>>()?;
    Ok(Some(outs))
}
