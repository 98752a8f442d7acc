//! Object-centric trajectory-matching rewards for robot manipulation.
//!
//! The crate covers the full loop from demonstration data to a trained
//! residual policy:
//!
//! - [`geometry`]: rigid transforms, calibration bundles, fingertip
//!   retargeting, and camera-based spatial offsets.
//! - [`trackio`]: point-track and fingertip trajectory file formats,
//!   stream alignment, and resampling.
//! - [`objmotion`]: object motion extraction from tracked points and the
//!   trajectory-matching reward.
//! - [`otreward`]: entropic optimal-transport baseline rewards.
//! - [`kinematics`]: kinematic chains, analytic Jacobians, and
//!   gradient-descent inverse kinematics for arm-hand systems.
//! - [`residual`]: residual reinforcement learning on top of a replayed
//!   base trajectory.
//! - [`sim`]: a quasi-static planar pushing simulator used to validate
//!   the whole pipeline end to end.

pub mod geometry;
pub mod kinematics;
pub mod objmotion;
pub mod otreward;
pub mod residual;
pub mod sim;
pub mod trackio;

pub use geometry::{
    retarget_fingertips, spatial_offset, CalibrationBundle, CameraIntrinsics, FingertipSet,
    HomTransform,
};
pub use objmotion::{episode_rewards, object_motion, reward_h2r, MotionSeries, RewardMode};
pub use trackio::{FingertipTrajectory, SyncedDemo, TrackFrame, TrackSet, TrackSource};
