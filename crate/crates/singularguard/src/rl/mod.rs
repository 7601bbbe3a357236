//! Reinforcement learning for singularity-aware reaching: a kinematic
//! environment with shaped rewards, small hand-rolled policy/value
//! networks, clipped-surrogate optimization, and a staged curriculum
//! that widens the target distribution as the rolling success rate
//! clears each stage's bar.

pub mod env;
pub mod net;
pub mod ppo;
pub mod train;

pub use env::{
    CurriculumStage, EnvConfig, EnvError, ReachEnv, RewardBreakdown, RewardConfig, StepInfo,
    CURRICULUM, OBS_DIM,
};
pub use net::{Adam, Mlp, PolicyNet, ValueNet};
pub use ppo::{DivergedUpdate, PpoConfig, Transition};
pub use train::{
    evaluate, export_curves, load_params, save_params, train, Curriculum, SuccessReport,
    TrainConfig, TrainError, TrainOutcome, TrainingLog,
};
