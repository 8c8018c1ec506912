//! Model and training configuration with full-scale defaults.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::FrameLayout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width F shared by every encoder.
    pub model_dim: usize,
    pub a2a_heads: usize,
    pub a2m_lane_heads: usize,
    pub a2m_mode_heads: usize,
    pub knn_k: usize,
    /// Proxy group size l.
    pub proxy_group: usize,
    /// Number of modes X.
    pub modes: usize,
    /// Neighbor slots K.
    pub max_neighbors: usize,
    /// History length M.
    pub history_len: usize,
    /// Future steps N.
    pub future_len: usize,
    pub lane_len: usize,
    pub crosswalk_len: usize,
    pub lstm_layers: usize,
    pub attention_layers: usize,
    pub dgcnn_layers: usize,
    pub dt: f64,
    pub wheelbase: f64,
    /// Metres per unit for metric network inputs (positions, velocities,
    /// sizes, speed limits); headings enter unscaled.
    pub input_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_dim: 256,
            a2a_heads: 8,
            a2m_lane_heads: 8,
            a2m_mode_heads: 4,
            knn_k: 20,
            proxy_group: 2,
            modes: 3,
            max_neighbors: 10,
            history_len: 20,
            future_len: 50,
            lane_len: 50,
            crosswalk_len: 20,
            lstm_layers: 2,
            attention_layers: 2,
            dgcnn_layers: 2,
            dt: 0.1,
            wheelbase: 2.8,
            input_scale: 1.0,
        }
    }
}

impl ModelConfig {
    /// The reduced configuration used for quick overfitting runs.
    pub fn desk() -> Self {
        Self {
            model_dim: 32,
            knn_k: 4,
            proxy_group: 4,
            max_neighbors: 4,
            history_len: 10,
            future_len: 20,
            lane_len: 20,
            crosswalk_len: 20,
            ..Self::default()
        }
    }

    /// Frame layout matching this model, for the scenario generator.
    pub fn layout(&self) -> FrameLayout {
        FrameLayout {
            max_neighbors: self.max_neighbors,
            history_len: self.history_len,
            lane_len: self.lane_len,
            crosswalk_len: self.crosswalk_len,
            dt: self.dt,
            wheelbase: self.wheelbase,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("model_dim", self.model_dim),
            ("a2a_heads", self.a2a_heads),
            ("a2m_lane_heads", self.a2m_lane_heads),
            ("a2m_mode_heads", self.a2m_mode_heads),
            ("knn_k", self.knn_k),
            ("proxy_group", self.proxy_group),
            ("modes", self.modes),
            ("history_len", self.history_len),
            ("future_len", self.future_len),
            ("lane_len", self.lane_len),
            ("crosswalk_len", self.crosswalk_len),
            ("lstm_layers", self.lstm_layers),
            ("attention_layers", self.attention_layers),
            ("dgcnn_layers", self.dgcnn_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, h) in [("a2a_heads", self.a2a_heads), ("a2m_lane_heads", self.a2m_lane_heads), ("a2m_mode_heads", self.a2m_mode_heads)] {
            if !self.model_dim.is_multiple_of(h) {
                return bad(format!("{name} = {h} does not divide model_dim {}", self.model_dim));
            }
        }
        for (name, len) in [("lane_len", self.lane_len), ("crosswalk_len", self.crosswalk_len)] {
            if len % self.proxy_group != 0 {
                return bad(format!("proxy_group {} does not divide {name} {len}", self.proxy_group));
            }
        }
        let finite_positive = |v: f64| v > 0.0 && v.is_finite();
        if !finite_positive(self.dt) || !finite_positive(self.wheelbase) || !finite_positive(self.input_scale) {
            return bad("dt, wheelbase and input_scale must be positive".into());
        }
        Ok(())
    }

    /// Planning horizon T in seconds.
    pub fn horizon(&self) -> f64 {
        self.future_len as f64 * self.dt
    }
}

/// Weights λ₁..λ₄ of the prediction, score, ADE and FDE terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub prediction: f64,
    pub score: f64,
    pub ade: f64,
    pub fde: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { prediction: 0.5, score: 1.0, ade: 1.0, fde: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("prediction", self.prediction), ("score", self.score), ("ade", self.ade), ("fde", self.fde)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub halve_every: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            base_lr: 2e-4,
            halve_every: 4,
            epochs: 20,
            seed: 0,
            clip_norm: Some(10.0),
            weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.halve_every == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size, halve_every and epochs must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        self.weights.validate()?;
        self.model.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.base_lr, 2e-4);
        assert_eq!(c.halve_every, 4);
        assert_eq!((c.weights.prediction, c.weights.score, c.weights.ade, c.weights.fde), (0.5, 1.0, 1.0, 1.0));
        let m = &c.model;
        assert_eq!((m.model_dim, m.a2a_heads, m.a2m_mode_heads, m.knn_k, m.modes), (256, 8, 4, 20, 3));
        c.validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = TrainConfig::from_json(r#"{"epochs": 3, "model": {"model_dim": 32}}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.model.model_dim, 32);
        assert_eq!(c.model.knn_k, 20);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(TrainConfig::from_json(r#"{"epoch": 3}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"model": {"model_dim": 30}}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"model": {"proxy_group": 3}}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"weights": {"ade": -1}}"#).is_err());
    }
}
