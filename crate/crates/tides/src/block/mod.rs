//! The residual sequence-model block and the assembled model.

pub mod glu;
pub mod model;
pub mod norm;

pub use glu::{glu_inner_width, GluFeedForward};
pub use model::{
    cross_entropy_loss, fresh_stats, parameter_count, Mode, ModelConfig, TaskHead, TidesBlock,
    TidesModel,
};
pub use norm::{batchnorm_no_affine, RunningStats, BN_EPS, BN_MOMENTUM};
