use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use planpred::config::TrainConfig;
use planpred::simulator::SimConfig;
use serde_json::Value;

/// A training config document, optionally carrying a `"sim"` object for
/// the simulator settings.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub sim: SimConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        let Some(obj) = doc.as_object_mut() else { bail!("config must be a JSON object") };
        let sim_overrides = obj.remove("sim");
        let train = TrainConfig::from_json(&doc.to_string())?;
        let mut sim = serde_json::to_value(SimConfig::for_model(&train.model))?;
        if let Some(overrides) = sim_overrides {
            let Value::Object(fields) = overrides else { bail!("\"sim\" must be a JSON object") };
            for (k, v) in fields {
                sim[k] = v;
            }
        }
        let sim: SimConfig = serde_json::from_value(sim).context("invalid \"sim\" settings")?;
        if !(sim.horizon_seconds > 0.0 && sim.off_route_threshold >= 0.0) {
            bail!("sim.horizon_seconds must be positive and sim.off_route_threshold non-negative");
        }
        Ok(Self { train, sim })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut doc = serde_json::to_value(&self.train)?;
        doc["sim"] = serde_json::to_value(self.sim)?;
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// The explicit path, else `config.json` beside the checkpoint, else defaults.
    pub fn for_checkpoint(explicit: Option<&Path>, ckpt: &Path) -> Result<Self> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        let beside: PathBuf = ckpt.parent().unwrap_or(Path::new(".")).join("config.json");
        if beside.is_file() {
            log::info!("using {}", beside.display());
            return Self::load(&beside);
        }
        Ok(Self::default())
    }
}
