//! Singularity-aware control toolkit for a UR10-class 6-DOF manipulator.
//!
//! The crate measures how close a configuration is to kinematic singularity
//! (manipulability, condition number, smallest singular value), classifies
//! operating safety with a weighted fuzzy rule base, solves position IK
//! while filtering singular solutions, trains a reinforcement-learning
//! reaching policy under a safety-aware curriculum, and runs a real-time
//! monitor loop with a tiered emergency policy.

pub use nalgebra;

pub mod config;
pub mod fuzzy;
pub mod ik;
pub mod kinematics;
pub mod metrics;
pub mod monitor;
pub mod rl;
pub mod scan;
