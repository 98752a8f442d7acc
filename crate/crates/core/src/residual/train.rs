//! Episode-level training loop: replay + residual rollouts feeding the
//! learner, with per-episode updates, noise-free evaluation, JSONL logging,
//! and reload-exact checkpoints.

use super::learner::{
    compose_action, PolicyInput, ResidualError, ResidualLearner, Transition,
};
use super::noise::OuNoise;
use crate::geometry::FingertipSet;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Observation, reward, and termination flag for one executed action.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub input: PolicyInput,
    pub reward: f64,
    pub done: bool,
}

/// Environment driven by composed fingertip actions. `reset` starts an
/// episode and returns the first observation.
pub trait RolloutEnv {
    fn reset(&mut self) -> Result<PolicyInput, String>;
    fn step(&mut self, action: &FingertipSet) -> Result<StepOutcome, String>;

    /// Trajectory-level reward backends may replace the per-step rewards
    /// once an episode is complete. Called right after the episode ends
    /// with the emitted rewards in step order; None keeps them as-is.
    fn relabel_rewards(&mut self, rewards: &[f64]) -> Result<Option<Vec<f64>>, String> {
        let _ = rewards;
        Ok(None)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub noise_theta: f64,
    pub noise_mu: f64,
    pub noise_sigma0: f64,
    pub noise_sigma1: f64,
    pub noise_decay_steps: u64,
    pub noise_seed: u64,
    /// Gradient steps after each episode; None runs one per collected step.
    pub updates_per_episode: Option<usize>,
    pub eval_each_episode: bool,
    /// Safety cap for environments that never signal done.
    pub max_steps_per_episode: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            noise_theta: 0.15,
            noise_mu: 0.0,
            noise_sigma0: 0.2,
            noise_sigma1: 0.02,
            noise_decay_steps: 20_000,
            noise_seed: 1,
            updates_per_episode: None,
            eval_each_episode: true,
            max_steps_per_episode: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn make_noise(&self, dim: usize) -> Result<OuNoise, ResidualError> {
        OuNoise::new(
            dim,
            self.noise_theta,
            self.noise_mu,
            self.noise_sigma0,
            self.noise_sigma1,
            self.noise_decay_steps,
            self.noise_seed,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub ep: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub steps: usize,
    /// Noise scale at the start of the episode.
    pub sigma: f64,
    pub eval_return: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub episodes: Vec<EpisodeRecord>,
}

fn rollout(
    env: &mut dyn RolloutEnv,
    learner: &ResidualLearner,
    mut noise: Option<&mut OuNoise>,
    mut collect: Option<&mut Vec<Transition>>,
    max_steps: usize,
    ep: usize,
) -> Result<(f64, usize), ResidualError> {
    let mut input = env
        .reset()
        .map_err(|msg| ResidualError::Env { ep, msg })?;
    let collect_from = collect.as_deref().map_or(0, Vec::len);
    let mut rewards = Vec::new();
    loop {
        let residual = learner.act(&input, noise.as_deref_mut())?;
        let action_m = learner.active_values(&residual);
        let a_r = FingertipSet::unflatten(&input.a_r);
        let composed = compose_action(&a_r, &residual);
        let out = env
            .step(&composed)
            .map_err(|msg| ResidualError::Env { ep, msg })?;
        rewards.push(out.reward);
        if let Some(buf) = collect.as_deref_mut() {
            buf.push(Transition {
                input: input.clone(),
                action: action_m,
                reward: out.reward,
                next_input: out.input.clone(),
                done: out.done,
            });
        }
        input = out.input;
        if out.done || rewards.len() >= max_steps {
            break;
        }
    }
    let steps = rewards.len();
    if let Some(new) = env
        .relabel_rewards(&rewards)
        .map_err(|msg| ResidualError::Env { ep, msg })?
    {
        if new.len() != steps {
            return Err(ResidualError::Env {
                ep,
                msg: format!("relabel returned {} rewards for {steps} steps", new.len()),
            });
        }
        if let Some(buf) = collect.as_deref_mut() {
            for (t, r) in buf[collect_from..].iter_mut().zip(&new) {
                t.reward = *r;
            }
        }
        rewards = new;
    }
    Ok((rewards.iter().sum(), steps))
}

/// Runs `episodes` of collect-then-update. Each record is written to
/// `log_sink` as it completes, so a failed run leaves a usable partial log.
pub fn train(
    env: &mut dyn RolloutEnv,
    learner: &mut ResidualLearner,
    noise: &mut OuNoise,
    episodes: usize,
    cfg: &TrainConfig,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainLog, ResidualError> {
    let mut log = TrainLog::default();
    for ep in 0..episodes {
        noise.reset();
        let sigma = noise.sigma();
        let mut transitions = Vec::new();
        let (ret, steps) = rollout(
            env,
            learner,
            Some(noise),
            Some(&mut transitions),
            cfg.max_steps_per_episode,
            ep,
        )?;
        for t in transitions {
            learner.push_transition(t)?;
        }
        let n_updates = cfg.updates_per_episode.unwrap_or(steps);
        learner.update(n_updates);
        let eval_return = if cfg.eval_each_episode {
            let (r, _) = rollout(env, learner, None, None, cfg.max_steps_per_episode, ep)?;
            Some(r)
        } else {
            None
        };
        let rec = EpisodeRecord {
            ep,
            ret,
            steps,
            sigma,
            eval_return,
        };
        if let Some(sink) = log_sink.as_mut() {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(sink, "{line}").map_err(|source| ResidualError::Io {
                path: "training log".into(),
                source,
            })?;
        }
        log.episodes.push(rec);
    }
    Ok(log)
}

/// Everything needed to resume or evaluate a run, minus the replay buffer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub learner: ResidualLearner,
    pub noise: OuNoise,
    pub episodes_done: usize,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), ResidualError> {
    let text = serde_json::to_string(ckpt).expect("checkpoint serializes");
    fs::write(path, text).map_err(|source| ResidualError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ResidualError> {
    let text = fs::read_to_string(path).map_err(|source| ResidualError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|source| ResidualError::Parse {
            path: path.display().to_string(),
            source,
        })?;
    ckpt.learner.restore_buffer();
    Ok(ckpt)
}
