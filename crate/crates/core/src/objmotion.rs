//! Object-motion extraction from tracked point sets and the
//! trajectory-matching reward.
//!
//! Motion at frame t is summarized relative to frame 1: the centroid
//! displacement, and optionally a mean-rotation measure built from 2D cross
//! products of centered point pairs. The reward between a robot and a human
//! motion is the negative RMSE over the stacked components.

use crate::trackio::{resample_to_length, TrackFrame, TrackSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("frame at t={t} has no visible points")]
    DegenerateFrame { t: f64 },
    #[error("frames at t={t} and t={t_ref} share only {common} visible points (need 2)")]
    TooFewCommonPoints { t: f64, t_ref: f64, common: usize },
    #[error("motions have mismatched layouts ({a} vs {b} components)")]
    LayoutMismatch { a: usize, b: usize },
    #[error("frame index {t} out of range 1..={len}")]
    IndexOutOfRange { t: usize, len: usize },
}

/// Per-frame motion summary relative to frame 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectMotion {
    /// Centroid of the visible points at this frame (pixels).
    pub centroid: [f64; 2],
    /// Centroid displacement vs frame 1 (pixels).
    pub d_trans: [f64; 2],
    /// Mean-rotation measure vs frame 1 (pixel²-scaled), when requested.
    pub d_rot: Option<f64>,
}

impl ObjectMotion {
    /// Stacked component vector, with `d_rot` scaled by `w_rot`.
    fn components(&self, w_rot: f64) -> Vec<f64> {
        match self.d_rot {
            Some(r) => vec![self.d_trans[0], self.d_trans[1], w_rot * r],
            None => vec![self.d_trans[0], self.d_trans[1]],
        }
    }
}

/// Motion summaries for every frame of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSeries {
    pub motions: Vec<ObjectMotion>,
    pub source: crate::trackio::TrackSource,
}

/// Reward sparsity mode: dense scores every frame, sparse only the last k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Dense,
    Sparse(usize),
}

impl RewardMode {
    pub fn sparse_default() -> Self {
        RewardMode::Sparse(5)
    }
}

/// Mean of the visible points.
pub fn centroid(frame: &TrackFrame) -> Result<[f64; 2], MotionError> {
    let mut sum = [0.0, 0.0];
    let mut count = 0usize;
    for p in frame.visible_points() {
        sum[0] += p[0];
        sum[1] += p[1];
        count += 1;
    }
    if count == 0 {
        return Err(MotionError::DegenerateFrame { t: frame.t });
    }
    Ok([sum[0] / count as f64, sum[1] / count as f64])
}

/// Centroid displacement of `frame_t` relative to `frame_1`.
pub fn mean_translation(
    frame_t: &TrackFrame,
    frame_1: &TrackFrame,
) -> Result<[f64; 2], MotionError> {
    let ct = centroid(frame_t)?;
    let c1 = centroid(frame_1)?;
    Ok([ct[0] - c1[0], ct[1] - c1[1]])
}

/// Mean 2D cross product of centered point pairs over the points visible in
/// both frames. Centering uses the common-subset centroids so occlusions do
/// not leak translation into the rotation measure.
pub fn mean_rotation(frame_t: &TrackFrame, frame_1: &TrackFrame) -> Result<f64, MotionError> {
    debug_assert_eq!(frame_t.n(), frame_1.n());
    let common: Vec<usize> = (0..frame_t.n())
        .filter(|&i| frame_t.vis[i] && frame_1.vis[i])
        .collect();
    if common.len() < 2 {
        return Err(MotionError::TooFewCommonPoints {
            t: frame_t.t,
            t_ref: frame_1.t,
            common: common.len(),
        });
    }
    let k = common.len() as f64;
    let mut ct = [0.0, 0.0];
    let mut c1 = [0.0, 0.0];
    for &i in &common {
        ct[0] += frame_t.pts[i][0];
        ct[1] += frame_t.pts[i][1];
        c1[0] += frame_1.pts[i][0];
        c1[1] += frame_1.pts[i][1];
    }
    for v in ct.iter_mut().chain(c1.iter_mut()) {
        *v /= k;
    }
    let mut acc = 0.0;
    for &i in &common {
        let a = [frame_t.pts[i][0] - ct[0], frame_t.pts[i][1] - ct[1]];
        let b = [frame_1.pts[i][0] - c1[0], frame_1.pts[i][1] - c1[1]];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    Ok(acc / k)
}

/// Motion summary at frame `t` (1-based, frame 1 is the reference).
pub fn object_motion(
    tracks: &TrackSet,
    t: usize,
    with_rotation: bool,
) -> Result<ObjectMotion, MotionError> {
    if t < 1 || t > tracks.len() {
        return Err(MotionError::IndexOutOfRange {
            t,
            len: tracks.len(),
        });
    }
    let frame_t = &tracks.frames[t - 1];
    let frame_1 = &tracks.frames[0];
    let d_rot = if with_rotation {
        Some(mean_rotation(frame_t, frame_1)?)
    } else {
        None
    };
    Ok(ObjectMotion {
        centroid: centroid(frame_t)?,
        d_trans: mean_translation(frame_t, frame_1)?,
        d_rot,
    })
}

/// Motion summaries for every frame.
pub fn motion_series(tracks: &TrackSet, with_rotation: bool) -> Result<MotionSeries, MotionError> {
    let motions = (1..=tracks.len())
        .map(|t| object_motion(tracks, t, with_rotation))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MotionSeries {
        motions,
        source: tracks.source,
    })
}

/// Negative RMSE over the stacked motion components, `d_rot` weighted by
/// `w_rot` on both sides.
pub fn reward_h2r_weighted(
    m_r: &ObjectMotion,
    m_h: &ObjectMotion,
    w_rot: f64,
) -> Result<f64, MotionError> {
    let a = m_r.components(w_rot);
    let b = m_h.components(w_rot);
    if a.len() != b.len() {
        return Err(MotionError::LayoutMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(0.0 - mse.sqrt())
}

/// [`reward_h2r_weighted`] with the default weight 1.0.
pub fn reward_h2r(m_r: &ObjectMotion, m_h: &ObjectMotion) -> Result<f64, MotionError> {
    reward_h2r_weighted(m_r, m_h, 1.0)
}

/// Per-frame rewards for a robot trajectory against a human one. The robot
/// track set is resampled to the human length first so frames compare at
/// equal t. Sparse(k) zeroes all but the last k frames.
pub fn episode_rewards(
    robot: &TrackSet,
    human: &TrackSet,
    mode: RewardMode,
    with_rotation: bool,
) -> Result<Vec<f64>, MotionError> {
    episode_rewards_weighted(robot, human, mode, with_rotation, 1.0)
}

/// [`episode_rewards`] with an explicit rotation weight.
pub fn episode_rewards_weighted(
    robot: &TrackSet,
    human: &TrackSet,
    mode: RewardMode,
    with_rotation: bool,
    w_rot: f64,
) -> Result<Vec<f64>, MotionError> {
    let t_target = human.len();
    let resampled;
    let robot = if robot.len() == t_target {
        robot
    } else {
        resampled = resample_to_length(robot, t_target);
        &resampled
    };
    let m_r = motion_series(robot, with_rotation)?;
    let m_h = motion_series(human, with_rotation)?;
    debug_assert_eq!(m_r.motions.len(), m_h.motions.len());
    let first_scored = match mode {
        RewardMode::Dense => 0,
        RewardMode::Sparse(k) => t_target.saturating_sub(k),
    };
    m_r.motions
        .iter()
        .zip(m_h.motions.iter())
        .enumerate()
        .map(|(i, (r, h))| {
            if i < first_scored {
                Ok(0.0)
            } else {
                reward_h2r_weighted(r, h, w_rot)
            }
        })
        .collect()
}
