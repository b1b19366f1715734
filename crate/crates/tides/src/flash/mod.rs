//! The Fading Flash diagnostic: data generation with closed-form targets,
//! three parameter-matched toy models isolating where input-dependence and
//! the timestep live, the training protocol, the dilation-grid evaluation,
//! and the effective-decay probe.

pub mod eval;
pub mod generator;
pub mod toy;
pub mod train;

pub use eval::{
    effective_decay_probe, evaluate_at, evaluate_grid, probe_sequence, EvalReport, EvalRow,
    GlowPredictor, TargetOracle, EVAL_DELTA_GRID, PROBE_FLOOR,
};
pub use generator::{
    compute_target, generate_sequence, segment_count, FlashSequence, FLASH_LEN, ZONE_RATES,
};
pub use toy::{build_toy_model, toy_parameter_count, ToyKind, ToyModel, TOY_BC_RANK, TOY_STATES};
pub use train::{train_toy, TrainSettings, TrainedToy, TRAIN_BATCH, TRAIN_LR, TRAIN_STEPS};
