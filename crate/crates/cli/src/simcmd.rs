use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use object_reward_kit::geometry::{spatial_offset, CameraIntrinsics, FingertipSet, HomTransform};
use object_reward_kit::objmotion::centroid;
use object_reward_kit::residual::{
    load_checkpoint, save_checkpoint, train, AxisMask, Checkpoint, PolicyInput, ResidualLearner,
    RolloutEnv, TrainLog,
};
use object_reward_kit::sim::{CalibError, Pose2, SimEnv, SimEnvConfig, SimError, TaskKind};

use crate::config::{prepare, BackendName, CommonArgs, KindName, RunConfig};
use crate::errors::{motion_err, residual_err, CliError};

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Task preset.
    #[arg(long)]
    pub task: Option<KindName>,
    /// Number of training episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Reward backend driving the policy updates.
    #[arg(long)]
    pub backend: Option<BackendName>,
    /// Calibration-error offset in meters.
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"], allow_negative_numbers = true)]
    pub calib_offset: Option<Vec<f64>>,
    /// Probability that a tracked point drops out per frame.
    #[arg(long)]
    pub occlusion_rate: Option<f64>,
    /// Steps over which exploration noise decays to its floor.
    #[arg(long)]
    pub noise_decay_steps: Option<u64>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(k) = self.task {
            cfg.task.kind = k;
        }
        if let Some(n) = self.episodes {
            cfg.train.episodes = n;
        }
        if let Some(b) = self.backend {
            cfg.task.backend = b;
        }
        if let Some(o) = &self.calib_offset {
            cfg.task.calib_offset = [o[0], o[1], o[2]];
        }
        if let Some(r) = self.occlusion_rate {
            cfg.task.occlusion_rate = r;
        }
        if let Some(d) = self.noise_decay_steps {
            cfg.train.noise_decay_steps = d;
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint written by train-sim.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Task preset the checkpoint was trained on.
    #[arg(long)]
    pub task: Option<KindName>,
    /// Number of evaluation rollouts.
    #[arg(long)]
    pub rollouts: Option<usize>,
    /// Calibration-error offset in meters.
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"], allow_negative_numbers = true)]
    pub calib_offset: Option<Vec<f64>>,
    /// Start-pose offset bounds: x (m), y (m), theta (rad).
    #[arg(long, num_args = 3, value_names = ["X", "Y", "THETA"], allow_negative_numbers = true)]
    pub max_offset: Option<Vec<f64>>,
}

fn sim_cfg_err(e: SimError) -> CliError {
    CliError::config(e.to_string())
}

fn build_env(
    cfg: &RunConfig,
    start_offset: Pose2,
    replay_shift: [f64; 3],
    with_calib: bool,
) -> Result<SimEnv, CliError> {
    let mut ec = SimEnvConfig::new(cfg.task.preset());
    if with_calib {
        ec.calib = CalibError::new(cfg.task.calib_offset, cfg.task.calib_noise, cfg.task.calib_seed)
            .map_err(sim_cfg_err)?;
    }
    ec.occlusion_rate = cfg.task.occlusion_rate;
    ec.occlusion_seed = cfg.task.occlusion_seed;
    ec.sample_seed = cfg.task.sample_seed;
    ec.start_offset = start_offset;
    ec.replay_shift = replay_shift;
    ec.backend = cfg.task.backend(&cfg.ot);
    SimEnv::new(ec).map_err(sim_cfg_err)
}

/// One noise-free episode recording the object pose after every step.
/// OT-relabeled backends rewrite the reward vector at episode end, exactly
/// as the training loop does.
fn pose_rollout(
    env: &mut SimEnv,
    mut policy: impl FnMut(&PolicyInput) -> Result<[f64; 12], CliError>,
) -> Result<(Vec<Pose2>, Vec<f64>), CliError> {
    let mut input = env.reset().map_err(CliError::numeric)?;
    let mut poses = vec![env.current_pose()];
    let mut rewards = Vec::new();
    loop {
        let residual = policy(&input)?;
        let a = FingertipSet::unflatten(&input.a_r).add_flat(&residual);
        let out = env.step(&a).map_err(CliError::numeric)?;
        poses.push(env.current_pose());
        rewards.push(out.reward);
        let done = out.done;
        input = out.input;
        if done {
            break;
        }
    }
    if let Some(new) = env.relabel_rewards(&rewards).map_err(CliError::numeric)? {
        rewards = new;
    }
    Ok((poses, rewards))
}

fn write_out(out: &Path, name: &str, text: &str) -> Result<(), CliError> {
    fs::write(out.join(name), text)
        .map_err(|e| CliError::config(format!("{}: {e}", out.display())))
}

fn write_curve(out: &Path, log: &TrainLog) -> Result<(), CliError> {
    let mut text = String::from("episode,return,eval_return,sigma\n");
    for r in &log.episodes {
        let ev = r.eval_return.map_or_else(String::new, |v| v.to_string());
        text += &format!("{},{},{},{}\n", r.ep, r.ret, ev, r.sigma);
    }
    write_out(out, "reward_curve.csv", &text)
}

fn write_trajectories(
    out: &Path,
    cfg: &RunConfig,
    env: &mut SimEnv,
    learner: &ResidualLearner,
) -> Result<(), CliError> {
    let mut expert_env = build_env(cfg, Pose2::identity(), [0.0; 3], false)?;
    let (expert, _) = pose_rollout(&mut expert_env, |_| Ok([0.0; 12]))?;
    let (replay, _) = pose_rollout(env, |_| Ok([0.0; 12]))?;
    let (trained, _) = pose_rollout(env, |input| {
        learner.act(input, None).map_err(residual_err)
    })?;
    let mut text = String::from(
        "step,expert_x,expert_y,expert_theta,replay_x,replay_y,replay_theta,trained_x,trained_y,trained_theta\n",
    );
    for k in 0..expert.len() {
        let (e, r, p) = (&expert[k], &replay[k], &trained[k]);
        text += &format!(
            "{k},{},{},{},{},{},{},{},{},{}\n",
            e.x, e.y, e.theta, r.x, r.y, r.theta, p.x, p.y, p.theta
        );
    }
    write_out(out, "trajectories.csv", &text)
}

pub fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let (cfg, out) = prepare(&args.common, |cfg| args.apply(cfg))?;
    let mut env = build_env(&cfg, Pose2::identity(), [0.0; 3], true)?;
    let mask = AxisMask::from_axes(&env.config().preset.mask_axes).map_err(residual_err)?;
    let lc = cfg.learner.to_core(mask, env.motion_dim());
    let mut learner = ResidualLearner::new(lc).map_err(residual_err)?;
    let tc = cfg.train.to_core();
    let mut noise = tc.make_noise(learner.mask().num_active()).map_err(residual_err)?;

    let log_path = out.join("train_log.jsonl");
    let file = File::create(&log_path)
        .map_err(|e| CliError::config(format!("{}: {e}", log_path.display())))?;
    let mut sink = BufWriter::new(file);
    let log = train(&mut env, &mut learner, &mut noise, cfg.train.episodes, &tc, Some(&mut sink))
        .map_err(residual_err)?;
    sink.flush()
        .map_err(|e| CliError::config(format!("{}: {e}", log_path.display())))?;

    write_curve(&out, &log)?;
    write_trajectories(&out, &cfg, &mut env, &learner)?;
    let ckpt = Checkpoint { learner, noise, episodes_done: log.episodes.len() };
    save_checkpoint(&ckpt, &out.join("checkpoint.json")).map_err(residual_err)?;
    Ok(())
}

/// Pixel-space offset between the demo's first frame and this episode's,
/// reprojected into a meter-space shift for the replayed trajectory.
fn replay_correction(env: &mut SimEnv) -> Result<Vector3<f64>, CliError> {
    env.reset().map_err(CliError::numeric)?;
    let tracks = env.episode_tracks().map_err(|e| CliError::data(e.to_string()))?;
    let c_r = centroid(&tracks.frames[0]).map_err(motion_err)?;
    let c_h = centroid(&env.human_tracks().frames[0]).map_err(motion_err)?;
    let cam = env.config().camera;
    let intr = CameraIntrinsics::new(
        cam.ppm,
        cam.ppm,
        -cam.ppm * cam.origin[0],
        -cam.ppm * cam.origin[1],
    )
    .map_err(|e| CliError::config(e.to_string()))?;
    let h_rc = HomTransform::translation(0.0, 0.0, 1.0);
    let o_hat = spatial_offset(
        &Vector2::new(c_h[0], c_h[1]),
        1.0,
        &intr,
        &h_rc,
        &Vector3::zeros(),
    )
    .map_err(|e| CliError::numeric(e.to_string()))?;
    spatial_offset(&Vector2::new(c_r[0], c_r[1]), 1.0, &intr, &h_rc, &o_hat)
        .map_err(|e| CliError::numeric(e.to_string()))
}

#[derive(Serialize)]
struct EvalSummary {
    rollouts: usize,
    successes: usize,
    success_rate: f64,
    expert_displacement: f64,
    expert_rotation: f64,
    mean_displacement: f64,
    mean_rotation: f64,
}

pub fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let (cfg, out) = prepare(&args.common, |cfg| {
        if let Some(p) = &args.checkpoint {
            cfg.io.checkpoint = Some(p.clone());
        }
        if let Some(k) = args.task {
            cfg.task.kind = k;
        }
        if let Some(n) = args.rollouts {
            cfg.eval.rollouts = n;
        }
        if let Some(o) = &args.calib_offset {
            cfg.task.calib_offset = [o[0], o[1], o[2]];
        }
        if let Some(m) = &args.max_offset {
            cfg.eval.max_offset = [m[0], m[1], m[2]];
        }
    })?;
    let ckpt_path = RunConfig::require(&cfg.io.checkpoint, "checkpoint")?;
    let ck = load_checkpoint(&ckpt_path).map_err(residual_err)?;
    let learner = ck.learner;

    let probe = build_env(&cfg, Pose2::identity(), [0.0; 3], true)?;
    if learner.config().motion_dim != probe.motion_dim()
        || learner.mask().indices() != probe.config().preset.mask_axes
    {
        return Err(CliError::config(
            "checkpoint does not match the configured task's action mask or motion layout",
        ));
    }
    let kind = probe.config().preset.kind;
    let expert_disp = probe.expert_displacement();
    let expert_rot = probe.expert_rotation();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.pose_seed);
    let m = cfg.eval.max_offset;
    let offsets: Vec<Pose2> = (0..cfg.eval.rollouts)
        .map(|_| {
            let x = rng.gen_range(-1.0..1.0) * m[0];
            let y = rng.gen_range(-1.0..1.0) * m[1];
            let th = rng.gen_range(-1.0..1.0) * m[2];
            Pose2::new(x, y, th)
        })
        .collect();

    let mut text = String::from(
        "rollout,offset_x,offset_y,offset_theta,displacement,rotation,mean_reward,success\n",
    );
    let mut successes = 0usize;
    let mut sum_disp = 0.0;
    let mut sum_rot = 0.0;
    for (i, off) in offsets.iter().enumerate() {
        let mut probe = build_env(&cfg, *off, [0.0; 3], true)?;
        let corr = replay_correction(&mut probe)?;
        let mut env = build_env(&cfg, *off, [corr.x, corr.y, corr.z], true)?;
        let (_, rewards) = pose_rollout(&mut env, |input| {
            learner.act(input, None).map_err(residual_err)
        })?;
        let start = env.start_pose();
        let fin = env.current_pose();
        let displacement = ((fin.x - start.x).powi(2) + (fin.y - start.y).powi(2)).sqrt();
        let rotation = fin.theta - start.theta;
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let frac = match kind {
            TaskKind::PaperSlide => displacement / expert_disp,
            TaskKind::BoxRotate => rotation.abs() / expert_rot.abs(),
        };
        let success = frac >= cfg.eval.success_threshold;
        successes += success as usize;
        sum_disp += displacement;
        sum_rot += rotation;
        text += &format!(
            "{i},{},{},{},{displacement},{rotation},{mean_reward},{}\n",
            off.x, off.y, off.theta, success as u8
        );
    }
    write_out(&out, "eval.csv", &text)?;

    let n = cfg.eval.rollouts;
    let summary = EvalSummary {
        rollouts: n,
        successes,
        success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
        expert_displacement: expert_disp,
        expert_rotation: expert_rot,
        mean_displacement: if n == 0 { 0.0 } else { sum_disp / n as f64 },
        mean_rotation: if n == 0 { 0.0 } else { sum_rot / n as f64 },
    };
    let sj = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_out(&out, "summary.json", &(sj + "\n"))
}
