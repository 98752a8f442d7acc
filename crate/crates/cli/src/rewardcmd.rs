use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use object_reward_kit::objmotion::{episode_rewards_weighted, motion_series, MotionSeries};
use object_reward_kit::otreward::{feature_ot_rewards, point_ot_rewards, FeatureSeries, OtRewards};
use object_reward_kit::trackio::{load_tracks, resample_to_length, TrackSet, TrackSource};

use crate::config::{prepare, CommonArgs, ModeName, RunConfig};
use crate::errors::{motion_err, ot_err, track_err, CliError};

#[derive(Debug, clap::Args)]
pub struct RewardArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Robot track file (JSONL).
    #[arg(long)]
    pub robot: Option<PathBuf>,
    /// Human track file (JSONL).
    #[arg(long)]
    pub human: Option<PathBuf>,
    /// Reward mode.
    #[arg(long)]
    pub mode: Option<ModeName>,
    /// Number of trailing frames scored in sparse mode.
    #[arg(long)]
    pub sparse_k: Option<usize>,
    /// Weight on the rotation component.
    #[arg(long)]
    pub w_rot: Option<f64>,
    /// Include rotation in the motion comparison.
    #[arg(long)]
    pub with_rotation: Option<bool>,
}

impl RewardArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.robot {
            cfg.io.robot_tracks = Some(p.clone());
        }
        if let Some(p) = &self.human {
            cfg.io.human_tracks = Some(p.clone());
        }
        if let Some(m) = self.mode {
            cfg.reward.mode = m;
        }
        if let Some(k) = self.sparse_k {
            cfg.reward.sparse_k = k;
        }
        if let Some(w) = self.w_rot {
            cfg.reward.w_rot = w;
        }
        if let Some(r) = self.with_rotation {
            cfg.reward.with_rotation = r;
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct OtRewardArgs {
    #[command(flatten)]
    pub reward: RewardArgs,
    /// Robot feature series (JSONL); switches to the feature-OT baseline.
    #[arg(long)]
    pub robot_features: Option<PathBuf>,
    /// Human feature series (JSONL).
    #[arg(long)]
    pub human_features: Option<PathBuf>,
    /// Entropic regularization strength.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Sinkhorn iteration cap.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Marginal error below which Sinkhorn stops.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    mean: f64,
    min: f64,
    #[serde(rename = "final")]
    last: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    warning: Option<String>,
}

fn write_summary(out: &Path, rewards: &[f64], warning: Option<String>) -> Result<(), CliError> {
    if let Some(bad) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(CliError::numeric(format!(
            "non-finite reward at row {bad}"
        )));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let min = rewards.iter().cloned().fold(f64::INFINITY, f64::min);
    let summary = Summary { mean, min, last: *rewards.last().expect("nonempty"), warning };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(out.join("summary.json"), text + "\n")
        .map_err(|e| CliError::config(format!("{}: {e}", out.display())))
}

fn motion_row(m: &MotionSeries, i: usize) -> (f64, f64, f64) {
    let mo = &m.motions[i];
    (mo.d_trans[0], mo.d_trans[1], mo.d_rot.unwrap_or(0.0))
}

fn write_reward_csv(
    out: &Path,
    human: &TrackSet,
    m_r: &MotionSeries,
    m_h: &MotionSeries,
    rewards: &[f64],
) -> Result<(), CliError> {
    let mut text = String::from(
        "t,robot_d_trans_x,robot_d_trans_y,robot_d_rot,human_d_trans_x,human_d_trans_y,human_d_rot,reward\n",
    );
    for (i, r) in rewards.iter().enumerate() {
        let t = human.frames[i].t;
        let (rx, ry, rr) = motion_row(m_r, i);
        let (hx, hy, hr) = motion_row(m_h, i);
        text += &format!("{t},{rx},{ry},{rr},{hx},{hy},{hr},{r}\n");
    }
    fs::write(out.join("rewards.csv"), text)
        .map_err(|e| CliError::config(format!("{}: {e}", out.display())))
}

struct TrackPair {
    robot: TrackSet,
    human: TrackSet,
}

/// Loads both track files and resamples the robot set to the human length
/// so every downstream row compares frames at equal t.
fn load_pair(cfg: &RunConfig) -> Result<TrackPair, CliError> {
    let robot_path = RunConfig::require(&cfg.io.robot_tracks, "robot_tracks")?;
    let human_path = RunConfig::require(&cfg.io.human_tracks, "human_tracks")?;
    let robot = load_tracks(&robot_path, TrackSource::Robot).map_err(track_err)?;
    let human = load_tracks(&human_path, TrackSource::Human).map_err(track_err)?;
    let robot = if robot.len() == human.len() {
        robot
    } else {
        resample_to_length(&robot, human.len())
    };
    Ok(TrackPair { robot, human })
}

pub fn run_reward(args: &RewardArgs) -> Result<(), CliError> {
    let (cfg, out) = prepare(&args.common, |cfg| args.apply(cfg))?;
    let pair = load_pair(&cfg)?;
    let rewards = episode_rewards_weighted(
        &pair.robot,
        &pair.human,
        cfg.reward.mode(),
        cfg.reward.with_rotation,
        cfg.reward.w_rot,
    )
    .map_err(motion_err)?;
    let m_r = motion_series(&pair.robot, cfg.reward.with_rotation).map_err(motion_err)?;
    let m_h = motion_series(&pair.human, cfg.reward.with_rotation).map_err(motion_err)?;
    write_reward_csv(&out, &pair.human, &m_r, &m_h, &rewards)?;
    write_summary(&out, &rewards, None)
}

#[derive(Deserialize)]
struct FeatRow {
    t: f64,
    z: Vec<f64>,
}

fn load_feature_file(path: &Path) -> Result<(Vec<f64>, FeatureSeries), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let mut ts = Vec::new();
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: FeatRow = serde_json::from_str(line).map_err(|e| {
            CliError::config(format!("{}:{}: malformed record: {e}", path.display(), ln + 1))
        })?;
        ts.push(row.t);
        rows.push(row.z);
    }
    let series = FeatureSeries::from_rows(rows).map_err(ot_err)?;
    Ok((ts, series))
}

fn ot_warning(r: &OtRewards) -> Option<String> {
    if r.converged {
        None
    } else {
        Some(format!(
            "sinkhorn stopped at marginal error {:.3e} after {} iterations",
            r.marginal_error, r.iterations
        ))
    }
}

pub fn run_ot_reward(args: &OtRewardArgs) -> Result<(), CliError> {
    let (cfg, out) = prepare(&args.reward.common, |cfg| {
        args.reward.apply(cfg);
        if let Some(p) = &args.robot_features {
            cfg.io.robot_features = Some(p.clone());
        }
        if let Some(p) = &args.human_features {
            cfg.io.human_features = Some(p.clone());
        }
        if let Some(e) = args.eps {
            cfg.ot.eps = e;
        }
        if let Some(n) = args.max_iters {
            cfg.ot.max_iters = n;
        }
        if let Some(t) = args.tol {
            cfg.ot.tol = t;
        }
    })?;

    if cfg.io.robot_features.is_some() || cfg.io.human_features.is_some() {
        let rp = RunConfig::require(&cfg.io.robot_features, "robot_features")?;
        let hp = RunConfig::require(&cfg.io.human_features, "human_features")?;
        let (ts, robot) = load_feature_file(&rp)?;
        let (_, human) = load_feature_file(&hp)?;
        let result = feature_ot_rewards(&robot, &human, cfg.ot.eps, cfg.ot.max_iters, cfg.ot.tol)
            .map_err(ot_err)?;
        let mut text = String::from("t,reward\n");
        for (t, r) in ts.iter().zip(&result.rewards) {
            text += &format!("{t},{r}\n");
        }
        fs::write(out.join("rewards.csv"), text)
            .map_err(|e| CliError::config(format!("{}: {e}", out.display())))?;
        return write_summary(&out, &result.rewards, ot_warning(&result));
    }

    let pair = load_pair(&cfg)?;
    let result = point_ot_rewards(&pair.robot, &pair.human, cfg.ot.eps, cfg.ot.max_iters, cfg.ot.tol)
        .map_err(ot_err)?;
    let m_r = motion_series(&pair.robot, cfg.reward.with_rotation).map_err(motion_err)?;
    let m_h = motion_series(&pair.human, cfg.reward.with_rotation).map_err(motion_err)?;
    write_reward_csv(&out, &pair.human, &m_r, &m_h, &result.rewards)?;
    write_summary(&out, &result.rewards, ot_warning(&result))
}
