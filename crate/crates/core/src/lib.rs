//! Planning-centric multimodal prediction: graph-embedded map encoding,
//! transformer agent interaction, joint multimodal prediction and imitation
//! planning through a differentiable kinematic bicycle rollout, plus training
//! and a closed-loop log-replay evaluation harness.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent_map;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod map_graph;
pub mod model;
pub mod nn;
pub mod params;
pub mod scenario;
pub mod simulator;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
