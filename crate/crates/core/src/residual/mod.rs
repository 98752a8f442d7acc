//! Residual policy learning: a deterministic actor with twin critics,
//! n-step TD targets, EMA target networks, and scheduled OU exploration
//! over a masked subset of fingertip axes. The learned residual is added
//! to the retargeted replay action each step.

mod buffer;
mod learner;
mod mlp;
mod noise;
mod train;

pub use buffer::ReplayBuffer;
pub use learner::{
    compose_action, mask_apply, AxisMask, InputScales, LearnerConfig, PolicyInput, ResidualError,
    ResidualLearner, Transition, UpdateOutcome,
};
pub use noise::OuNoise;
pub use train::{
    load_checkpoint, save_checkpoint, train, Checkpoint, EpisodeRecord, RolloutEnv, StepOutcome,
    TrainConfig, TrainLog,
};
