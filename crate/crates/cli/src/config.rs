use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use object_reward_kit::objmotion::RewardMode;
use object_reward_kit::residual::{AxisMask, InputScales, LearnerConfig, TrainConfig};
use object_reward_kit::sim::{RewardBackend, TaskKind, TaskPreset};

use crate::errors::CliError;

/// One file drives every subcommand; each reads the sections it needs.
/// Unknown keys are rejected so typos fail loudly instead of silently
/// falling back to defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory. Never re-emitted: the effective config must
    /// reproduce results wherever it is pointed, not pin a location.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    /// Master seed; when set it overrides the learner, noise, occlusion,
    /// and eval pose seeds. Scene geometry seeds stay config-pinned.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub io: IoPaths,
    pub reward: RewardCfg,
    pub ot: OtCfg,
    pub ik: IkCfg,
    pub task: TaskCfg,
    pub learner: LearnerCfg,
    pub train: TrainCfg,
    pub eval: EvalCfg,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robot_tracks: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub human_tracks: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robot_features: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub human_features: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chain: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ik_target: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum KindName {
    PaperSlide,
    BoxRotate,
}

impl From<KindName> for TaskKind {
    fn from(k: KindName) -> TaskKind {
        match k {
            KindName::PaperSlide => TaskKind::PaperSlide,
            KindName::BoxRotate => TaskKind::BoxRotate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendName {
    Hudor,
    PointOt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardCfg {
    pub mode: ModeName,
    pub sparse_k: usize,
    pub with_rotation: bool,
    pub w_rot: f64,
}

impl Default for RewardCfg {
    fn default() -> Self {
        Self { mode: ModeName::Dense, sparse_k: 5, with_rotation: false, w_rot: 1.0 }
    }
}

impl RewardCfg {
    pub fn mode(&self) -> RewardMode {
        match self.mode {
            ModeName::Dense => RewardMode::Dense,
            ModeName::Sparse => RewardMode::Sparse(self.sparse_k),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OtCfg {
    pub eps: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for OtCfg {
    fn default() -> Self {
        Self { eps: 0.05, max_iters: 5000, tol: 1e-9 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkCfg {
    pub lr_arm: f64,
    pub lr_hand: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub clamp_limits: bool,
}

impl Default for IkCfg {
    fn default() -> Self {
        Self { lr_arm: 0.002, lr_hand: 0.1, max_iters: 2000, tol: 1e-3, clamp_limits: true }
    }
}

impl IkCfg {
    pub fn to_opts(&self) -> object_reward_kit::kinematics::IkOptions {
        object_reward_kit::kinematics::IkOptions {
            lr_arm: self.lr_arm,
            lr_hand: self.lr_hand,
            max_iters: self.max_iters,
            tol: self.tol,
            clamp_limits: self.clamp_limits,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskCfg {
    pub kind: KindName,
    /// Execution-error offset in meters, applied to every commanded tip.
    pub calib_offset: [f64; 3],
    pub calib_noise: f64,
    pub calib_seed: u64,
    pub occlusion_rate: f64,
    pub occlusion_seed: u64,
    pub sample_seed: u64,
    pub backend: BackendName,
    /// Preset overrides; the preset's own values apply when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparse_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_rot: Option<f64>,
}

impl Default for TaskCfg {
    fn default() -> Self {
        Self {
            kind: KindName::PaperSlide,
            calib_offset: [0.0; 3],
            calib_noise: 0.0,
            calib_seed: 2,
            occlusion_rate: 0.0,
            occlusion_seed: 7,
            sample_seed: 11,
            backend: BackendName::Hudor,
            mode: None,
            sparse_k: None,
            w_rot: None,
        }
    }
}

impl TaskCfg {
    pub fn preset(&self) -> TaskPreset {
        let mut p = TaskPreset::for_kind(self.kind.into());
        if let Some(mode) = self.mode {
            p.reward_mode = match mode {
                ModeName::Dense => RewardMode::Dense,
                ModeName::Sparse => RewardMode::Sparse(self.sparse_k.unwrap_or(5)),
            };
        } else if let Some(k) = self.sparse_k {
            if let RewardMode::Sparse(_) = p.reward_mode {
                p.reward_mode = RewardMode::Sparse(k);
            }
        }
        if let Some(w) = self.w_rot {
            p.w_rot = w;
        }
        p
    }

    pub fn backend(&self, ot: &OtCfg) -> RewardBackend {
        match self.backend {
            BackendName::Hudor => RewardBackend::Hudor,
            BackendName::PointOt => RewardBackend::PointOt {
                eps: ot.eps,
                max_iters: ot.max_iters,
                tol: ot.tol,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerCfg {
    pub max_residual: f64,
    pub gamma: f64,
    pub n_step: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: usize,
    pub buffer_capacity: usize,
    pub reward_scale: f64,
    pub input_scales: InputScales,
    pub seed: u64,
}

impl Default for LearnerCfg {
    fn default() -> Self {
        Self {
            max_residual: 0.02,
            gamma: 0.99,
            n_step: 3,
            batch_size: 256,
            tau: 0.01,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            hidden: 64,
            buffer_capacity: 100_000,
            reward_scale: 0.001,
            input_scales: InputScales::default(),
            seed: 0,
        }
    }
}

impl LearnerCfg {
    pub fn to_core(&self, mask: AxisMask, motion_dim: usize) -> LearnerConfig {
        let mut c = LearnerConfig::new(mask, motion_dim);
        c.max_residual = self.max_residual;
        c.gamma = self.gamma;
        c.n_step = self.n_step;
        c.batch_size = self.batch_size;
        c.tau = self.tau;
        c.actor_lr = self.actor_lr;
        c.critic_lr = self.critic_lr;
        c.hidden = self.hidden;
        c.buffer_capacity = self.buffer_capacity;
        c.reward_scale = self.reward_scale;
        c.input_scales = self.input_scales;
        c.seed = self.seed;
        c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCfg {
    pub episodes: usize,
    pub noise_theta: f64,
    pub noise_mu: f64,
    pub noise_sigma0: f64,
    pub noise_sigma1: f64,
    pub noise_decay_steps: u64,
    pub noise_seed: u64,
    /// Gradient steps per episode; unset runs one per collected step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub updates_per_episode: Option<usize>,
    pub eval_each_episode: bool,
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self {
            episodes: 500,
            noise_theta: 0.15,
            noise_mu: 0.0,
            noise_sigma0: 0.2,
            noise_sigma1: 0.02,
            noise_decay_steps: 20_000,
            noise_seed: 1,
            updates_per_episode: None,
            eval_each_episode: true,
        }
    }
}

impl TrainCfg {
    pub fn to_core(&self) -> TrainConfig {
        let mut c = TrainConfig::default();
        c.noise_theta = self.noise_theta;
        c.noise_mu = self.noise_mu;
        c.noise_sigma0 = self.noise_sigma0;
        c.noise_sigma1 = self.noise_sigma1;
        c.noise_decay_steps = self.noise_decay_steps;
        c.noise_seed = self.noise_seed;
        c.updates_per_episode = self.updates_per_episode;
        c.eval_each_episode = self.eval_each_episode;
        c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCfg {
    pub rollouts: usize,
    pub pose_seed: u64,
    /// Uniform start-pose offset bounds: x, y in meters, theta in radians.
    pub max_offset: [f64; 3],
    /// Fraction of the expert displacement or rotation counted a success.
    pub success_threshold: f64,
}

impl Default for EvalCfg {
    fn default() -> Self {
        Self {
            rollouts: 10,
            pose_seed: 5,
            max_offset: [0.02, 0.02, 0.0],
            success_threshold: 0.8,
        }
    }
}

/// Shared flags; file values lose to flags, built-in defaults lose to both.
#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $OBJECT_REWARD_KIT_OUT, then ./out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed overriding learner, noise, occlusion, and pose seeds.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.learner.seed = seed;
        self.train.noise_seed = seed;
        self.task.occlusion_seed = seed;
        self.eval.pose_seed = seed;
    }

    /// Every referenced input must exist before any work starts.
    pub fn validate_files(&self) -> Result<(), CliError> {
        let paths = [
            &self.io.robot_tracks,
            &self.io.human_tracks,
            &self.io.robot_features,
            &self.io.human_features,
            &self.io.chain,
            &self.io.ik_target,
            &self.io.checkpoint,
        ];
        for p in paths.into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::config(format!(
                    "file not found: {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn resolve_out(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.out {
            return p.clone();
        }
        if let Ok(p) = env::var("OBJECT_REWARD_KIT_OUT") {
            if !p.is_empty() {
                return PathBuf::from(p);
            }
        }
        PathBuf::from("out")
    }

    pub fn require(path: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
        path.clone()
            .ok_or_else(|| CliError::config(format!("config is missing io.{key}")))
    }
}

/// Loads, overrides, validates, then emits the effective config into `out`
/// so the run can be reproduced from the artifact alone.
pub fn prepare(
    common: &CommonArgs,
    apply: impl FnOnce(&mut RunConfig),
) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    apply(&mut cfg);
    if let Some(seed) = common.seed {
        cfg.apply_seed(seed);
    } else if let Some(seed) = cfg.seed {
        cfg.apply_seed(seed);
    }
    cfg.validate_files()?;
    let out = cfg.resolve_out(common.out.as_deref());
    fs::create_dir_all(&out)
        .map_err(|e| CliError::config(format!("{}: {e}", out.display())))?;
    let text = toml::to_string_pretty(&cfg).expect("config serializes");
    fs::write(out.join("config.toml"), text)
        .map_err(|e| CliError::config(format!("{}: {e}", out.display())))?;
    Ok((cfg, out))
}
