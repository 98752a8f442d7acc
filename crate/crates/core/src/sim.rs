//! Quasi-static planar manipulation sandbox.
//!
//! A rigid rectangle slides on a tabletop under fingertip contact. Each step
//! the object picks up every contacting tip's displacement weighted by how
//! deep the tip sits in the contact band, plus the rotation those drags
//! exert about the object centroid. A fixed top-down camera renders tracked
//! points from the object surface, so the reward stack consumes the same
//! kind of data a real point tracker would produce.

use std::f64::consts::TAU;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::FingertipSet;
use crate::objmotion::{self, ObjectMotion, RewardMode};
use crate::otreward;
use crate::residual::{PolicyInput, RolloutEnv, StepOutcome};
use crate::trackio::{FingertipTrajectory, TrackFrame, TrackSet, TrackSource};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("half extents must be positive and finite")]
    BadExtents,
    #[error("need at least 4 sample points, got {got}")]
    TooFewPoints { got: usize },
    #[error("sample point {index} lies outside the object")]
    PointOutside { index: usize },
    #[error("{name} must be positive and finite")]
    BadParam { name: &'static str },
    #[error("{name} must be finite")]
    NonFinite { name: &'static str },
    #[error("box-rotate needs rotation tracking enabled")]
    RotationRequired,
    #[error("mask axes must be non-empty, unique, and < 12")]
    BadMask,
    #[error("track assembly failed: {0}")]
    Tracks(String),
    #[error("motion extraction failed: {0}")]
    Motion(String),
}

/// Object pose on the table: position in meters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn to_world(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.theta.sin_cos();
        Vector2::new(c * p.x - s * p.y + self.x, s * p.x + c * p.y + self.y)
    }

    pub fn to_body(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.theta.sin_cos();
        let d = p - self.position();
        Vector2::new(c * d.x + s * d.y, -s * d.x + c * d.y)
    }
}

/// A rigid rectangle plus the tracked surface points riding on it.
///
/// `last_tips` latches fingertip positions so the first step after a reset
/// establishes contact without moving anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanarScene {
    pub pose: Pose2,
    half_extents: [f64; 2],
    friction_gain: f64,
    rotation_gain: f64,
    contact_radius: f64,
    sample_points: Vec<Vector2<f64>>,
    last_tips: Option<[Vector2<f64>; 4]>,
}

impl PlanarScene {
    pub fn new(
        pose: Pose2,
        half_extents: [f64; 2],
        friction_gain: f64,
        rotation_gain: f64,
        contact_radius: f64,
        sample_points: Vec<Vector2<f64>>,
    ) -> Result<Self, SimError> {
        if !pose.is_finite() {
            return Err(SimError::NonFinite { name: "pose" });
        }
        if !(half_extents[0] > 0.0 && half_extents[1] > 0.0)
            || !half_extents[0].is_finite()
            || !half_extents[1].is_finite()
        {
            return Err(SimError::BadExtents);
        }
        if !(friction_gain > 0.0) || !friction_gain.is_finite() {
            return Err(SimError::BadParam {
                name: "friction_gain",
            });
        }
        if !(rotation_gain > 0.0) || !rotation_gain.is_finite() {
            return Err(SimError::BadParam {
                name: "rotation_gain",
            });
        }
        if !(contact_radius > 0.0) || !contact_radius.is_finite() {
            return Err(SimError::BadParam {
                name: "contact_radius",
            });
        }
        if sample_points.len() < 4 {
            return Err(SimError::TooFewPoints {
                got: sample_points.len(),
            });
        }
        for (index, p) in sample_points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite())
                || p.x.abs() > half_extents[0]
                || p.y.abs() > half_extents[1]
            {
                return Err(SimError::PointOutside { index });
            }
        }
        Ok(Self {
            pose,
            half_extents,
            friction_gain,
            rotation_gain,
            contact_radius,
            sample_points,
            last_tips: None,
        })
    }

    /// Builds a scene whose sample points come in (p, -p) pairs, so their
    /// body-frame centroid is exactly the object center.
    pub fn with_generated_points(
        pose: Pose2,
        half_extents: [f64; 2],
        friction_gain: f64,
        rotation_gain: f64,
        contact_radius: f64,
        pairs: usize,
        seed: u64,
    ) -> Result<Self, SimError> {
        if pairs < 2 {
            return Err(SimError::TooFewPoints { got: 2 * pairs });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::with_capacity(2 * pairs);
        for _ in 0..pairs {
            let u = 0.9 * half_extents[0] * rng.gen_range(-1.0..1.0);
            let v = 0.9 * half_extents[1] * rng.gen_range(-1.0..1.0);
            pts.push(Vector2::new(u, v));
            pts.push(Vector2::new(-u, -v));
        }
        Self::new(
            pose,
            half_extents,
            friction_gain,
            rotation_gain,
            contact_radius,
            pts,
        )
    }

    pub fn half_extents(&self) -> [f64; 2] {
        self.half_extents
    }

    pub fn contact_radius(&self) -> f64 {
        self.contact_radius
    }

    pub fn friction_gain(&self) -> f64 {
        self.friction_gain
    }

    pub fn rotation_gain(&self) -> f64 {
        self.rotation_gain
    }

    pub fn sample_points(&self) -> &[Vector2<f64>] {
        &self.sample_points
    }

    /// Second moment of a uniform rectangle about its center, per unit mass.
    pub fn rotational_inertia(&self) -> f64 {
        let [hx, hy] = self.half_extents;
        (hx * hx + hy * hy) / 3.0
    }

    fn rect_distance(&self, p_body: &Vector2<f64>) -> f64 {
        let dx = (p_body.x.abs() - self.half_extents[0]).max(0.0);
        let dy = (p_body.y.abs() - self.half_extents[1]).max(0.0);
        (dx * dx + dy * dy).sqrt()
    }

    /// Contact weight in [0, 1]: 1 on the object, falling linearly to 0 at
    /// `contact_radius` away from its boundary.
    pub fn overlap(&self, tip_world: &Vector2<f64>) -> f64 {
        let d = self.rect_distance(&self.pose.to_body(tip_world));
        (1.0 - d / self.contact_radius).clamp(0.0, 1.0)
    }

    /// Advances the object under one fingertip waypoint. Contact weights are
    /// evaluated where the tips were last seen, against the current pose, so
    /// a tip drags the object rather than teleporting it.
    pub fn step(&mut self, tips: &FingertipSet) {
        let now = planar_tips(tips);
        let Some(prev) = self.last_tips else {
            self.last_tips = Some(now);
            return;
        };
        let center = self.pose.position();
        let mut drag = Vector2::new(0.0, 0.0);
        let mut torque = 0.0;
        for i in 0..4 {
            let w = self.overlap(&prev[i]);
            if w == 0.0 {
                continue;
            }
            let d = now[i] - prev[i];
            drag += w * d;
            let r = prev[i] - center;
            torque += w * (r.x * d.y - r.y * d.x);
        }
        self.pose.x += self.friction_gain * drag.x;
        self.pose.y += self.friction_gain * drag.y;
        self.pose.theta += self.rotation_gain * torque / self.rotational_inertia();
        self.last_tips = Some(now);
    }
}

fn planar_tips(tips: &FingertipSet) -> [Vector2<f64>; 4] {
    let t = tips.tips();
    [
        Vector2::new(t[0].x, t[0].y),
        Vector2::new(t[1].x, t[1].y),
        Vector2::new(t[2].x, t[2].y),
        Vector2::new(t[3].x, t[3].y),
    ]
}

/// Fixed top-down camera: `u = ppm * (x - origin)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimCamera {
    pub ppm: f64,
    pub origin: [f64; 2],
}

impl SimCamera {
    pub fn new(ppm: f64, origin: [f64; 2]) -> Result<Self, SimError> {
        if !(ppm > 0.0) || !ppm.is_finite() {
            return Err(SimError::BadParam { name: "ppm" });
        }
        if !(origin[0].is_finite() && origin[1].is_finite()) {
            return Err(SimError::NonFinite { name: "origin" });
        }
        Ok(Self { ppm, origin })
    }

    pub fn project(&self, p: &Vector2<f64>) -> [f64; 2] {
        [
            self.ppm * (p.x - self.origin[0]),
            self.ppm * (p.y - self.origin[1]),
        ]
    }
}

impl Default for SimCamera {
    fn default() -> Self {
        Self {
            ppm: 1000.0,
            origin: [-0.2, -0.2],
        }
    }
}

/// Renders the scene's sample points into one tracked frame, all visible.
pub fn synth_frame(scene: &PlanarScene, cam: &SimCamera, t: f64) -> TrackFrame {
    let pts = scene
        .sample_points
        .iter()
        .map(|p| cam.project(&scene.pose.to_world(p)))
        .collect();
    TrackFrame {
        t,
        pts,
        vis: vec![true; scene.sample_points.len()],
    }
}

/// Hides each point independently with probability `rate`.
pub fn apply_occlusion(frame: &mut TrackFrame, rate: f64, rng: &mut ChaCha8Rng) {
    for v in frame.vis.iter_mut() {
        if rng.gen::<f64>() < rate {
            *v = false;
        }
    }
}

/// Systematic hand-to-robot calibration error: a constant offset plus a
/// slow per-channel sinusoid, both added to every commanded tip position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibError {
    pub offset: [f64; 3],
    pub noise_amp: f64,
    freqs: [[f64; 3]; 4],
    phases: [[f64; 3]; 4],
}

impl CalibError {
    pub fn new(offset: [f64; 3], noise_amp: f64, seed: u64) -> Result<Self, SimError> {
        if offset.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite { name: "offset" });
        }
        if !noise_amp.is_finite() || noise_amp < 0.0 {
            return Err(SimError::BadParam { name: "noise_amp" });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut freqs = [[0.0; 3]; 4];
        let mut phases = [[0.0; 3]; 4];
        for i in 0..4 {
            for j in 0..3 {
                freqs[i][j] = rng.gen_range(0.05..0.3);
                phases[i][j] = rng.gen_range(0.0..TAU);
            }
        }
        Ok(Self {
            offset,
            noise_amp,
            freqs,
            phases,
        })
    }

    /// The identity error: replay executes exactly as commanded.
    pub fn none() -> Self {
        Self {
            offset: [0.0; 3],
            noise_amp: 0.0,
            freqs: [[0.0; 3]; 4],
            phases: [[0.0; 3]; 4],
        }
    }

    pub fn is_none(&self) -> bool {
        self.offset == [0.0; 3] && self.noise_amp == 0.0
    }

    /// Executed tip positions for a command issued at time `t`.
    pub fn apply(&self, t: f64, tips: &FingertipSet) -> FingertipSet {
        let mut out = [[0.0; 3]; 4];
        for i in 0..4 {
            let tip = tips.tip(i);
            for j in 0..3 {
                out[i][j] = tip[j]
                    + self.offset[j]
                    + self.noise_amp * (TAU * self.freqs[i][j] * t + self.phases[i][j]).sin();
            }
        }
        FingertipSet::new(out)
    }
}

/// Applies a calibration error to a whole trajectory, timestamp by timestamp.
pub fn perturb_calibration(traj: &FingertipTrajectory, calib: &CalibError) -> FingertipTrajectory {
    let entries = traj
        .entries()
        .iter()
        .map(|(t, f)| (*t, calib.apply(*t, f)))
        .collect();
    FingertipTrajectory::new(entries).expect("timestamps preserved")
}

/// Replays a fingertip trajectory through a copy of the scene, rendering
/// one tracked frame per waypoint. Returns the tracks and the final pose.
pub fn rollout_tracks(
    scene: &PlanarScene,
    cam: &SimCamera,
    traj: &FingertipTrajectory,
    source: TrackSource,
) -> Result<(TrackSet, Pose2), SimError> {
    let mut s = scene.clone();
    let mut frames = Vec::with_capacity(traj.len());
    for (t, tips) in traj.entries() {
        s.step(tips);
        frames.push(synth_frame(&s, cam, *t));
    }
    let tracks = TrackSet::new(frames, source).map_err(|e| SimError::Tracks(e.to_string()))?;
    Ok((tracks, s.pose))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    PaperSlide,
    BoxRotate,
}

/// Everything needed to reproduce one benchmark task: object, contact
/// model, scripted demonstration, and reward configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPreset {
    pub kind: TaskKind,
    /// Flat fingertip-action axes the residual policy may move.
    pub mask_axes: Vec<usize>,
    pub reward_mode: RewardMode,
    pub with_rotation: bool,
    pub w_rot: f64,
    pub horizon: usize,
    pub start_pose: Pose2,
    pub half_extents: [f64; 2],
    pub friction_gain: f64,
    pub rotation_gain: f64,
    pub contact_radius: f64,
    pub sample_pairs: usize,
}

impl TaskPreset {
    /// Slide a sheet 20 cm across the table with the thumb. Dense reward,
    /// translation only; the residual may move the thumb in x and y.
    pub fn paper_slide() -> Self {
        Self {
            kind: TaskKind::PaperSlide,
            mask_axes: vec![0, 1],
            reward_mode: RewardMode::Dense,
            with_rotation: false,
            w_rot: 1.0,
            horizon: 50,
            start_pose: Pose2::identity(),
            half_extents: [0.075, 0.02],
            friction_gain: 1.0,
            // A flat sheet resists twisting far more than sliding.
            rotation_gain: 0.05,
            contact_radius: 0.015,
            sample_pairs: 4,
        }
    }

    /// Spin a box in place with a thumb-index pinch. Sparse reward over the
    /// last five frames, rotation tracked; the residual may move thumb and
    /// index in x and y.
    pub fn box_rotate() -> Self {
        Self {
            kind: TaskKind::BoxRotate,
            mask_axes: vec![0, 1, 3, 4],
            reward_mode: RewardMode::sparse_default(),
            with_rotation: true,
            w_rot: 0.01,
            horizon: 50,
            start_pose: Pose2::identity(),
            half_extents: [0.06, 0.06],
            friction_gain: 0.5,
            rotation_gain: 0.5,
            contact_radius: 0.015,
            sample_pairs: 4,
        }
    }

    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::PaperSlide => Self::paper_slide(),
            TaskKind::BoxRotate => Self::box_rotate(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.kind == TaskKind::BoxRotate && !self.with_rotation {
            return Err(SimError::RotationRequired);
        }
        if self.mask_axes.is_empty()
            || self.mask_axes.iter().any(|&a| a >= 12)
            || (1..self.mask_axes.len()).any(|i| self.mask_axes[i..].contains(&self.mask_axes[i - 1]))
        {
            return Err(SimError::BadMask);
        }
        if self.horizon == 0 {
            return Err(SimError::BadParam { name: "horizon" });
        }
        if !self.w_rot.is_finite() || self.w_rot < 0.0 {
            return Err(SimError::BadParam { name: "w_rot" });
        }
        if !self.start_pose.is_finite() {
            return Err(SimError::NonFinite { name: "start_pose" });
        }
        Ok(())
    }

    pub fn make_scene(&self, sample_seed: u64) -> Result<PlanarScene, SimError> {
        PlanarScene::with_generated_points(
            self.start_pose,
            self.half_extents,
            self.friction_gain,
            self.rotation_gain,
            self.contact_radius,
            self.sample_pairs,
            sample_seed,
        )
    }

    /// The scripted demonstration at 5 Hz: `horizon` motion waypoints after
    /// the initial placement.
    pub fn script(&self) -> FingertipTrajectory {
        let entries = (0..=self.horizon)
            .map(|k| (0.2 * k as f64, self.script_waypoint(k)))
            .collect();
        FingertipTrajectory::new(entries).expect("script timestamps are strictly increasing")
    }

    fn script_waypoint(&self, k: usize) -> FingertipSet {
        let kf = k as f64;
        match self.kind {
            TaskKind::PaperSlide => {
                let x = -0.085 + 0.004 * kf;
                FingertipSet::new([
                    [x, 0.0, 0.0],
                    [x, 0.25, 0.0],
                    [x, 0.30, 0.0],
                    [x, 0.35, 0.0],
                ])
            }
            TaskKind::BoxRotate => {
                let phi = kf * TAU / 360.0;
                let r = 0.045;
                let (s, c) = phi.sin_cos();
                FingertipSet::new([
                    [-r * c, -r * s, 0.0],
                    [r * c, r * s, 0.0],
                    [0.0, 0.30, 0.0],
                    [0.0, 0.35, 0.0],
                ])
            }
        }
    }
}

/// Runs the scripted demonstration and records it as a human track set.
pub fn make_expert_demo(
    preset: &TaskPreset,
    cam: &SimCamera,
    sample_seed: u64,
) -> Result<(FingertipTrajectory, TrackSet, Pose2), SimError> {
    preset.validate()?;
    let scene = preset.make_scene(sample_seed)?;
    let traj = preset.script();
    let (tracks, pose) = rollout_tracks(&scene, cam, &traj, TrackSource::Human)?;
    Ok((traj, tracks, pose))
}

/// How the environment scores an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardBackend {
    /// Object-motion matching against the demo, emitted per step.
    Hudor,
    /// Optimal-transport rewards over per-frame point features, relabeled
    /// at episode end (the plan needs the whole trajectory).
    PointOt {
        eps: f64,
        max_iters: usize,
        tol: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEnvConfig {
    pub preset: TaskPreset,
    pub camera: SimCamera,
    /// Execution error applied to every command, unknown to the policy.
    pub calib: CalibError,
    pub occlusion_rate: f64,
    pub occlusion_seed: u64,
    pub sample_seed: u64,
    /// Offset of the robot object's start pose from the demo's.
    pub start_offset: Pose2,
    /// Translation applied to the whole replayed trajectory, meters. This is
    /// how a measured object offset is corrected before an episode starts.
    pub replay_shift: [f64; 3],
    pub backend: RewardBackend,
}

impl SimEnvConfig {
    pub fn new(preset: TaskPreset) -> Self {
        Self {
            preset,
            camera: SimCamera::default(),
            calib: CalibError::none(),
            occlusion_rate: 0.0,
            occlusion_seed: 7,
            sample_seed: 11,
            start_offset: Pose2::identity(),
            replay_shift: [0.0; 3],
            backend: RewardBackend::Hudor,
        }
    }
}

/// Rollout environment over the planar scene.
///
/// Each episode replays the demo script as the base trajectory. The policy's
/// residual is added to the commanded waypoints; the configured calibration
/// error then corrupts execution. Observations carry the next waypoint, the
/// last executed motion, and the object motion extracted from the rendered
/// tracks, exactly as the live pipeline would supply them.
#[derive(Debug, Clone)]
pub struct SimEnv {
    cfg: SimEnvConfig,
    scene0: PlanarScene,
    replay: FingertipTrajectory,
    human_tracks: TrackSet,
    human_motions: Vec<ObjectMotion>,
    expert_pose: Pose2,
    scene: PlanarScene,
    frames: Vec<TrackFrame>,
    exec_prev: [f64; 12],
    k: usize,
    episodes_started: u64,
    occ_rng: ChaCha8Rng,
}

impl SimEnv {
    pub fn new(cfg: SimEnvConfig) -> Result<Self, SimError> {
        cfg.preset.validate()?;
        if !cfg.occlusion_rate.is_finite() || !(0.0..=1.0).contains(&cfg.occlusion_rate) {
            return Err(SimError::BadParam {
                name: "occlusion_rate",
            });
        }
        if !cfg.start_offset.is_finite() {
            return Err(SimError::NonFinite {
                name: "start_offset",
            });
        }
        if cfg.replay_shift.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite {
                name: "replay_shift",
            });
        }
        if let RewardBackend::PointOt {
            eps,
            max_iters,
            tol,
        } = cfg.backend
        {
            if !(eps > 0.0) || !eps.is_finite() || max_iters == 0 || !(tol > 0.0) {
                return Err(SimError::BadParam {
                    name: "point-ot solver",
                });
            }
        }
        let (replay, human_tracks, expert_pose) =
            make_expert_demo(&cfg.preset, &cfg.camera, cfg.sample_seed)?;
        let replay = if cfg.replay_shift == [0.0; 3] {
            replay
        } else {
            let shift = Vector3::from(cfg.replay_shift);
            replay.map_frames(|f| f.translate(&shift))
        };
        let human_motions = objmotion::motion_series(&human_tracks, cfg.preset.with_rotation)
            .map_err(|e| SimError::Motion(e.to_string()))?
            .motions;
        let mut scene0 = cfg.preset.make_scene(cfg.sample_seed)?;
        scene0.pose.x += cfg.start_offset.x;
        scene0.pose.y += cfg.start_offset.y;
        scene0.pose.theta += cfg.start_offset.theta;
        let scene = scene0.clone();
        let occ_rng = ChaCha8Rng::seed_from_u64(cfg.occlusion_seed);
        Ok(Self {
            cfg,
            scene0,
            replay,
            human_tracks,
            human_motions,
            expert_pose,
            scene,
            frames: Vec::new(),
            exec_prev: [0.0; 12],
            k: 0,
            episodes_started: 0,
            occ_rng,
        })
    }

    pub fn config(&self) -> &SimEnvConfig {
        &self.cfg
    }

    pub fn horizon(&self) -> usize {
        self.cfg.preset.horizon
    }

    /// Observation motion block width: 2 without rotation, 3 with.
    pub fn motion_dim(&self) -> usize {
        if self.cfg.preset.with_rotation {
            3
        } else {
            2
        }
    }

    pub fn current_pose(&self) -> Pose2 {
        self.scene.pose
    }

    pub fn start_pose(&self) -> Pose2 {
        self.scene0.pose
    }

    pub fn expert_pose(&self) -> Pose2 {
        self.expert_pose
    }

    /// Planar displacement the demo achieved.
    pub fn expert_displacement(&self) -> f64 {
        let s = self.cfg.preset.start_pose;
        ((self.expert_pose.x - s.x).powi(2) + (self.expert_pose.y - s.y).powi(2)).sqrt()
    }

    /// Signed rotation the demo achieved.
    pub fn expert_rotation(&self) -> f64 {
        self.expert_pose.theta - self.cfg.preset.start_pose.theta
    }

    pub fn replay(&self) -> &FingertipTrajectory {
        &self.replay
    }

    pub fn human_tracks(&self) -> &TrackSet {
        &self.human_tracks
    }

    /// Tracks rendered so far in the current episode.
    pub fn episode_tracks(&self) -> Result<TrackSet, SimError> {
        TrackSet::new(self.frames.clone(), TrackSource::Robot)
            .map_err(|e| SimError::Tracks(e.to_string()))
    }

    fn render_frame(&mut self, t: f64) -> TrackFrame {
        let mut frame = synth_frame(&self.scene, &self.cfg.camera, t);
        if self.cfg.occlusion_rate > 0.0 {
            apply_occlusion(&mut frame, self.cfg.occlusion_rate, &mut self.occ_rng);
            let mut visible = frame.vis.iter().filter(|&&v| v).count();
            let mut i = 0;
            // Motion extraction needs two common points per frame pair.
            while visible < 2 && i < frame.vis.len() {
                if !frame.vis[i] {
                    frame.vis[i] = true;
                    visible += 1;
                }
                i += 1;
            }
        }
        frame
    }

    fn build_input(&self, ds: [f64; 12], motion: &ObjectMotion) -> PolicyInput {
        let idx = (self.k + 1).min(self.cfg.preset.horizon);
        let a_r = self.replay.entries()[idx].1.flatten();
        let mut motion_r = vec![motion.d_trans[0], motion.d_trans[1]];
        if self.cfg.preset.with_rotation {
            motion_r.push(motion.d_rot.unwrap_or(0.0));
        }
        PolicyInput {
            a_r,
            ds,
            centroid_r: motion.centroid,
            motion_r,
        }
    }
}

impl RolloutEnv for SimEnv {
    fn reset(&mut self) -> Result<PolicyInput, String> {
        self.scene = self.scene0.clone();
        self.frames.clear();
        self.k = 0;
        self.occ_rng = ChaCha8Rng::seed_from_u64(
            self.cfg
                .occlusion_seed
                .wrapping_add(self.episodes_started.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        self.episodes_started += 1;
        let (t0, start) = &self.replay.entries()[0];
        let exec = self.cfg.calib.apply(*t0, start);
        self.scene.step(&exec);
        let frame = self.render_frame(*t0);
        let centroid = objmotion::centroid(&frame).map_err(|e| e.to_string())?;
        self.frames.push(frame);
        self.exec_prev = exec.flatten();
        let motion = ObjectMotion {
            centroid,
            d_trans: [0.0, 0.0],
            d_rot: self.cfg.preset.with_rotation.then_some(0.0),
        };
        Ok(self.build_input([0.0; 12], &motion))
    }

    fn step(&mut self, action: &FingertipSet) -> Result<StepOutcome, String> {
        let horizon = self.cfg.preset.horizon;
        if self.frames.is_empty() {
            return Err("step before reset".into());
        }
        if self.k >= horizon {
            return Err("episode is over; call reset".into());
        }
        self.k += 1;
        let t_k = self.replay.entries()[self.k].0;
        let exec = self.cfg.calib.apply(t_k, action);
        self.scene.step(&exec);
        let frame = self.render_frame(t_k);
        self.frames.push(frame);
        let tracks = self.episode_tracks().map_err(|e| e.to_string())?;
        let robot_m = objmotion::object_motion(&tracks, self.k + 1, self.cfg.preset.with_rotation)
            .map_err(|e| e.to_string())?;
        let reward = match self.cfg.backend {
            RewardBackend::Hudor => {
                let human_m = &self.human_motions[self.k];
                let raw = objmotion::reward_h2r_weighted(&robot_m, human_m, self.cfg.preset.w_rot)
                    .map_err(|e| e.to_string())?;
                match self.cfg.preset.reward_mode {
                    RewardMode::Dense => raw,
                    RewardMode::Sparse(last) => {
                        if self.k + last > horizon {
                            raw
                        } else {
                            0.0
                        }
                    }
                }
            }
            RewardBackend::PointOt { .. } => 0.0,
        };
        let exec_flat = exec.flatten();
        let mut ds = [0.0; 12];
        for i in 0..12 {
            ds[i] = exec_flat[i] - self.exec_prev[i];
        }
        self.exec_prev = exec_flat;
        Ok(StepOutcome {
            input: self.build_input(ds, &robot_m),
            reward,
            done: self.k == horizon,
        })
    }

    fn relabel_rewards(&mut self, rewards: &[f64]) -> Result<Option<Vec<f64>>, String> {
        let RewardBackend::PointOt {
            eps,
            max_iters,
            tol,
        } = self.cfg.backend
        else {
            return Ok(None);
        };
        if self.frames.len() != rewards.len() + 1 {
            return Err(format!(
                "relabel needs a full episode: {} frames for {} steps",
                self.frames.len(),
                rewards.len()
            ));
        }
        let robot = self.episode_tracks().map_err(|e| e.to_string())?;
        let ot = otreward::point_ot_rewards(&robot, &self.human_tracks, eps, max_iters, tol)
            .map_err(|e| e.to_string())?;
        Ok(Some(ot.rewards[1..].to_vec()))
    }
}

/// Outcome of one evaluation rollout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub total_reward: f64,
    pub mean_reward: f64,
    pub steps: usize,
    pub rewards: Vec<f64>,
    pub final_pose: Pose2,
    pub displacement: f64,
    pub rotation: f64,
}

/// Runs one full episode under a fixed residual policy (no exploration) and
/// summarizes what the object did.
pub fn rollout_with<F>(env: &mut SimEnv, mut policy: F) -> Result<EvalOutcome, String>
where
    F: FnMut(&PolicyInput) -> [f64; 12],
{
    let mut input = env.reset()?;
    let mut rewards = Vec::with_capacity(env.horizon());
    loop {
        let residual = policy(&input);
        let a_r = FingertipSet::unflatten(&input.a_r);
        let out = env.step(&a_r.add_flat(&residual))?;
        rewards.push(out.reward);
        let done = out.done;
        input = out.input;
        if done {
            break;
        }
    }
    if let Some(new) = env.relabel_rewards(&rewards)? {
        rewards = new;
    }
    let start = env.start_pose();
    let fin = env.current_pose();
    let total_reward: f64 = rewards.iter().sum();
    let steps = rewards.len();
    Ok(EvalOutcome {
        total_reward,
        mean_reward: total_reward / steps as f64,
        steps,
        rewards,
        final_pose: fin,
        displacement: ((fin.x - start.x).powi(2) + (fin.y - start.y).powi(2)).sqrt(),
        rotation: fin.theta - start.theta,
    })
}
