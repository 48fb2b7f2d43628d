//! A small, gradient-checked numeric network layer.
//!
//! [`Tensor`] carries reverse-mode differentiation; on top of it live
//! scaled dot-product and multi-head attention, RoIAlign, point set
//! abstraction / feature propagation, the 16-bin viewpoint code, the
//! teacher-gated distillation loss and a desk-scale fusion student.

mod attention;
mod demo;
mod distill;
mod fusion;
pub mod gradcheck;
mod params;
mod pointset;
mod roi;
mod tensor;
mod viewpoint;

use thiserror::Error;

pub use attention::{attention, attention_weights, multi_head, AttentionParams};
pub use demo::{run_distill_demo, DemoConfig, DemoReport};
pub use distill::{
    distill_batch_loss, distill_loss, harden_target, ScriptedTeacher, TeacherOracle, DEFAULT_BAND,
};
pub use fusion::{student_fusion_forward, FusionConfig, FusionOutput};
pub use params::{Adam, Bound, ParamStore};
pub use pointset::{
    farthest_point_sampling, feature_propagation, set_abstraction, three_nn_weights, Mlp, PointBackbone,
    PointBackboneConfig, SetAbstractionLayer,
};
pub use roi::roi_align;
pub use tensor::Tensor;
pub use viewpoint::{viewpoint_decode, viewpoint_encode, VIEWPOINT_BINS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MicronetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("region of interest has zero area")]
    ZeroAreaBox,
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
