//! Backbone, feature pyramid and dense head, in the standard and the
//! alignment-preserving wiring.

pub mod config;
pub mod gate;
pub mod model;

pub use config::{
    prior_bias, ApaConfig, BackboneConfig, BiasConfig, DetectorConfig, FpnConfig, GateForm,
    HeadConfig,
};
pub use gate::{apply_gate, clamp_gate, classify, cropped_identity, gate, Projection, GATE_LIMIT};
pub use model::{DenseOutputs, Detector, LevelOutput, EXPAND, REDUCE, SHARED_BIAS};
