//! The residual learner: deterministic actor, twin critics, n-step TD
//! targets bootstrapped through EMA target critics.

use super::buffer::ReplayBuffer;
#[cfg(test)]
use super::mlp::Linear;
use super::mlp::{Adam, Mlp};
use super::noise::OuNoise;
use crate::geometry::FingertipSet;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ResidualError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("axis mask must keep at least one axis active")]
    EmptyMask,
    #[error("axis index {0} out of range 0..12")]
    AxisRange(usize),
    #[error("motion vector has {got} entries, learner expects {expected}")]
    MotionDim { expected: usize, got: usize },
    #[error("action has {got} entries, expected {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("invalid option: {0}")]
    BadConfig(&'static str),
    #[error("environment failure at episode {ep}: {msg}")]
    Env { ep: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

/// Which of the 12 fingertip axes (X/Y/Z per finger, flatten order) the
/// residual policy may move.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[bool; 12]", into = "[bool; 12]")]
pub struct AxisMask {
    active: [bool; 12],
}

impl AxisMask {
    pub fn new(active: [bool; 12]) -> Result<Self, ResidualError> {
        if !active.iter().any(|&a| a) {
            return Err(ResidualError::EmptyMask);
        }
        Ok(Self { active })
    }

    pub fn all_active() -> Self {
        Self { active: [true; 12] }
    }

    pub fn from_axes(axes: &[usize]) -> Result<Self, ResidualError> {
        let mut active = [false; 12];
        for &i in axes {
            if i >= 12 {
                return Err(ResidualError::AxisRange(i));
            }
            active[i] = true;
        }
        Self::new(active)
    }

    pub fn is_active(&self, axis: usize) -> bool {
        self.active[axis]
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..12).filter(|&i| self.active[i]).collect()
    }
}

impl TryFrom<[bool; 12]> for AxisMask {
    type Error = ResidualError;
    fn try_from(active: [bool; 12]) -> Result<Self, Self::Error> {
        Self::new(active)
    }
}

impl From<AxisMask> for [bool; 12] {
    fn from(m: AxisMask) -> Self {
        m.active
    }
}

/// Zeroes inactive axes, passes active ones through.
pub fn mask_apply(raw: &[f64; 12], mask: &AxisMask) -> [f64; 12] {
    let mut out = [0.0; 12];
    for (i, v) in raw.iter().enumerate() {
        if mask.is_active(i) {
            out[i] = *v;
        }
    }
    out
}

/// a = a_r + residual, elementwise in the base frame.
pub fn compose_action(a_r: &FingertipSet, residual: &[f64; 12]) -> FingertipSet {
    a_r.add_flat(residual)
}

/// Observation fed to the policy: replay action, fingertip deltas, and the
/// robot-side object centroid and motion components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyInput {
    pub a_r: [f64; 12],
    pub ds: [f64; 12],
    pub centroid_r: [f64; 2],
    pub motion_r: Vec<f64>,
}

impl PolicyInput {
    pub fn dim(&self) -> usize {
        26 + self.motion_r.len()
    }

    pub fn is_finite(&self) -> bool {
        self.a_r.iter().all(|v| v.is_finite())
            && self.ds.iter().all(|v| v.is_finite())
            && self.centroid_r.iter().all(|v| v.is_finite())
            && self.motion_r.iter().all(|v| v.is_finite())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.a_r);
        v.extend_from_slice(&self.ds);
        v.extend_from_slice(&self.centroid_r);
        v.extend_from_slice(&self.motion_r);
        v
    }

    /// Feature vector with per-block scaling applied, as fed to the nets.
    pub fn scaled_vec(&self, s: &InputScales) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend(self.a_r.iter().map(|x| s.a_r * x));
        v.extend(self.ds.iter().map(|x| s.ds * x));
        v.extend(self.centroid_r.iter().map(|x| s.centroid * x));
        for (i, x) in self.motion_r.iter().enumerate() {
            let scale = if i < 2 { s.motion_trans } else { s.motion_rot };
            v.push(scale * x);
        }
        v
    }
}

/// Per-block feature scaling applied before the networks. Track-space
/// blocks arrive in pixels (hundreds) and pixel² (thousands); left raw
/// they dwarf the metric blocks and saturate the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScales {
    pub a_r: f64,
    pub ds: f64,
    pub centroid: f64,
    pub motion_trans: f64,
    pub motion_rot: f64,
}

impl Default for InputScales {
    fn default() -> Self {
        Self {
            a_r: 1.0,
            ds: 1.0,
            centroid: 0.01,
            motion_trans: 0.01,
            motion_rot: 0.001,
        }
    }
}

impl InputScales {
    fn values(&self) -> [f64; 5] {
        [
            self.a_r,
            self.ds,
            self.centroid,
            self.motion_trans,
            self.motion_rot,
        ]
    }
}

/// One environment step as stored in replay. `action` holds only the
/// active-axis residual values in mask order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub input: PolicyInput,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_input: PolicyInput,
    pub done: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub mask: AxisMask,
    /// Motion components per frame: 2 (translation) or 3 (with rotation).
    pub motion_dim: usize,
    /// Per-axis residual bound, meters.
    pub max_residual: f64,
    pub gamma: f64,
    pub n_step: usize,
    pub batch_size: usize,
    /// EMA rate for target critics.
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: usize,
    pub buffer_capacity: usize,
    /// Multiplies env rewards inside TD targets to keep them O(1).
    pub reward_scale: f64,
    pub input_scales: InputScales,
    pub seed: u64,
}

impl LearnerConfig {
    pub fn new(mask: AxisMask, motion_dim: usize) -> Self {
        Self {
            mask,
            motion_dim,
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

    pub fn input_dim(&self) -> usize {
        26 + self.motion_dim
    }

    fn validate(&self) -> Result<(), ResidualError> {
        if !(self.motion_dim == 2 || self.motion_dim == 3) {
            return Err(ResidualError::BadConfig("motion_dim must be 2 or 3"));
        }
        if !(self.max_residual > 0.0) {
            return Err(ResidualError::BadConfig("max_residual must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(ResidualError::BadConfig("gamma must lie in (0, 1]"));
        }
        if self.n_step == 0 {
            return Err(ResidualError::BadConfig("n_step must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(ResidualError::BadConfig("batch_size must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(ResidualError::BadConfig("tau must lie in (0, 1]"));
        }
        if self.hidden == 0 {
            return Err(ResidualError::BadConfig("hidden width must be at least 1"));
        }
        if self.buffer_capacity < self.batch_size {
            return Err(ResidualError::BadConfig(
                "buffer_capacity must be at least batch_size",
            ));
        }
        if self
            .input_scales
            .values()
            .iter()
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(ResidualError::BadConfig(
                "input scales must be positive and finite",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateOutcome {
    /// Buffer smaller than one batch; nothing changed.
    Skipped { needed: usize, have: usize },
    Applied {
        critic_loss: f64,
        actor_loss: f64,
        batches: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualLearner {
    cfg: LearnerConfig,
    actor: Mlp,
    critic1: Mlp,
    critic2: Mlp,
    target1: Mlp,
    target2: Mlp,
    actor_opt: Adam,
    critic1_opt: Adam,
    critic2_opt: Adam,
    rng: ChaCha8Rng,
    #[serde(skip, default)]
    buffer: ReplayBuffer<Transition>,
}

impl ResidualLearner {
    pub fn new(cfg: LearnerConfig) -> Result<Self, ResidualError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dim = cfg.input_dim();
        let m = cfg.mask.num_active();
        let h = cfg.hidden;
        let actor = Mlp::new(&[dim, h, h, m], true, &mut rng);
        let critic1 = Mlp::new(&[dim + m, h, h, 1], false, &mut rng);
        let critic2 = Mlp::new(&[dim + m, h, h, 1], false, &mut rng);
        let target1 = critic1.clone();
        let target2 = critic2.clone();
        let actor_opt = Adam::new(cfg.actor_lr, &actor);
        let critic1_opt = Adam::new(cfg.critic_lr, &critic1);
        let critic2_opt = Adam::new(cfg.critic_lr, &critic2);
        let buffer = ReplayBuffer::new(cfg.buffer_capacity);
        Ok(Self {
            cfg,
            actor,
            critic1,
            critic2,
            target1,
            target2,
            actor_opt,
            critic1_opt,
            critic2_opt,
            rng,
            buffer,
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.cfg
    }

    pub fn mask(&self) -> &AxisMask {
        &self.cfg.mask
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    /// Rebuilds buffer capacity after deserialization (the buffer itself is
    /// not part of checkpoints).
    pub fn restore_buffer(&mut self) {
        if self.buffer.capacity() != self.cfg.buffer_capacity {
            self.buffer = ReplayBuffer::new(self.cfg.buffer_capacity);
        }
    }

    fn check_input(&self, input: &PolicyInput, what: &'static str) -> Result<(), ResidualError> {
        if !input.is_finite() {
            return Err(ResidualError::NonFinite(what));
        }
        if input.motion_r.len() != self.cfg.motion_dim {
            return Err(ResidualError::MotionDim {
                expected: self.cfg.motion_dim,
                got: input.motion_r.len(),
            });
        }
        Ok(())
    }

    pub fn push_transition(&mut self, t: Transition) -> Result<(), ResidualError> {
        self.check_input(&t.input, "transition input")?;
        self.check_input(&t.next_input, "transition next input")?;
        let m = self.cfg.mask.num_active();
        if t.action.len() != m {
            return Err(ResidualError::ActionDim {
                expected: m,
                got: t.action.len(),
            });
        }
        if !t.reward.is_finite() || t.action.iter().any(|v| !v.is_finite()) {
            return Err(ResidualError::NonFinite("transition"));
        }
        self.buffer.push(t);
        Ok(())
    }

    fn actor_forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = self.actor.forward(x);
        a.apply(|v| *v = self.cfg.max_residual * v.tanh());
        a
    }

    /// Residual for one input as a full 12-vector: actor output plus
    /// optional OU noise, clipped per axis, inactive axes zero.
    pub fn act(
        &self,
        input: &PolicyInput,
        noise: Option<&mut OuNoise>,
    ) -> Result<[f64; 12], ResidualError> {
        self.check_input(input, "policy input")?;
        let x = DMatrix::from_vec(input.dim(), 1, input.scaled_vec(&self.cfg.input_scales));
        let a = self.actor_forward(&x);
        let m = self.cfg.mask.num_active();
        let mut values: Vec<f64> = (0..m).map(|i| a[(i, 0)]).collect();
        if let Some(n) = noise {
            if n.dim() != m {
                return Err(ResidualError::ActionDim {
                    expected: m,
                    got: n.dim(),
                });
            }
            for (v, g) in values.iter_mut().zip(n.sample()) {
                *v += g;
            }
        }
        let bound = self.cfg.max_residual;
        let mut out = [0.0; 12];
        for (v, axis) in values.iter().zip(self.cfg.mask.indices()) {
            out[axis] = v.clamp(-bound, bound);
        }
        Ok(out)
    }

    /// Active-axis entries of a full 12-vector residual, in mask order.
    pub fn active_values(&self, residual: &[f64; 12]) -> Vec<f64> {
        self.cfg.mask.indices().iter().map(|&i| residual[i]).collect()
    }

    fn inputs_matrix(&self, inputs: &[&PolicyInput]) -> DMatrix<f64> {
        let dim = self.cfg.input_dim();
        let mut s = DMatrix::zeros(dim, inputs.len());
        for (j, inp) in inputs.iter().enumerate() {
            for (i, v) in inp.scaled_vec(&self.cfg.input_scales).into_iter().enumerate() {
                s[(i, j)] = v;
            }
        }
        s
    }

    fn stack_state_action(&self, s: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
        let dim = s.nrows();
        let m = a.nrows();
        let b = s.ncols();
        let mut x = DMatrix::zeros(dim + m, b);
        for j in 0..b {
            for i in 0..dim {
                x[(i, j)] = s[(i, j)];
            }
            for i in 0..m {
                x[(dim + i, j)] = a[(i, j)];
            }
        }
        x
    }

    /// n-step TD targets for the transitions in `slots`: accumulated
    /// discounted rewards, bootstrapped through the EMA target critics
    /// unless the chain ends on a terminal step.
    fn batch_for(&self, slots: &[usize]) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let b = slots.len();
        let m = self.cfg.mask.num_active();
        let scale = self.cfg.reward_scale;
        let mut a = DMatrix::zeros(m, b);
        let mut acc = vec![0.0; b];
        let mut boots: Vec<(usize, f64, PolicyInput)> = Vec::new();
        let mut inputs: Vec<&PolicyInput> = Vec::with_capacity(b);
        for (col, &slot) in slots.iter().enumerate() {
            let head = self.buffer.get(slot);
            inputs.push(&head.input);
            for (i, v) in head.action.iter().enumerate() {
                a[(i, col)] = *v;
            }
            let mut cur = slot;
            let mut disc = 1.0;
            let mut steps = 0;
            loop {
                let t = self.buffer.get(cur);
                acc[col] += disc * t.reward * scale;
                disc *= self.cfg.gamma;
                steps += 1;
                if t.done {
                    break;
                }
                if steps == self.cfg.n_step {
                    boots.push((col, disc, t.next_input.clone()));
                    break;
                }
                match self.buffer.successor(cur) {
                    Some(nx) => cur = nx,
                    None => {
                        boots.push((col, disc, t.next_input.clone()));
                        break;
                    }
                }
            }
        }
        let s = self.inputs_matrix(&inputs);
        let mut y = DVector::from_vec(acc);
        if !boots.is_empty() {
            let refs: Vec<&PolicyInput> = boots.iter().map(|(_, _, p)| p).collect();
            let sb = self.inputs_matrix(&refs);
            let ab = self.actor_forward(&sb);
            let xb = self.stack_state_action(&sb, &ab);
            let q1 = self.target1.forward(&xb);
            let q2 = self.target2.forward(&xb);
            for (k, (col, disc, _)) in boots.iter().enumerate() {
                y[*col] += disc * q1[(0, k)].min(q2[(0, k)]);
            }
        }
        (s, a, y)
    }

    fn critic_step(&mut self, s: &DMatrix<f64>, a: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
        let x = self.stack_state_action(s, a);
        let (q1, c1) = self.critic1.forward_cached(&x);
        let (q2, c2) = self.critic2.forward_cached(&x);
        let b = y.len();
        let mut d1 = DMatrix::zeros(1, b);
        let mut d2 = DMatrix::zeros(1, b);
        let mut loss = 0.0;
        for j in 0..b {
            let e1 = q1[(0, j)] - y[j];
            let e2 = q2[(0, j)] - y[j];
            loss += e1 * e1 + e2 * e2;
            d1[(0, j)] = 2.0 * e1 / b as f64;
            d2[(0, j)] = 2.0 * e2 / b as f64;
        }
        let (g1, _) = self.critic1.backward(&c1, &d1);
        let (g2, _) = self.critic2.backward(&c2, &d2);
        self.critic1_opt.apply(&mut self.critic1, &g1);
        self.critic2_opt.apply(&mut self.critic2, &g2);
        loss / b as f64
    }

    fn actor_step(&mut self, s: &DMatrix<f64>) -> f64 {
        let dim = s.nrows();
        let b = s.ncols();
        let (z, ac) = self.actor.forward_cached(s);
        let mut t = z.clone();
        t.apply(|v| *v = v.tanh());
        let a = &t * self.cfg.max_residual;
        let x = self.stack_state_action(s, &a);
        let (q1, c1) = self.critic1.forward_cached(&x);
        let (q2, c2) = self.critic2.forward_cached(&x);
        let mut d1 = DMatrix::zeros(1, b);
        let mut d2 = DMatrix::zeros(1, b);
        let mut loss = 0.0;
        for j in 0..b {
            let qmin = q1[(0, j)].min(q2[(0, j)]);
            loss -= qmin / b as f64;
            if q1[(0, j)] <= q2[(0, j)] {
                d1[(0, j)] = -1.0 / b as f64;
            } else {
                d2[(0, j)] = -1.0 / b as f64;
            }
        }
        let (_, dx1) = self.critic1.backward(&c1, &d1);
        let (_, dx2) = self.critic2.backward(&c2, &d2);
        let m = a.nrows();
        let mut dz = DMatrix::zeros(m, b);
        for j in 0..b {
            for i in 0..m {
                let da = dx1[(dim + i, j)] + dx2[(dim + i, j)];
                dz[(i, j)] = da * self.cfg.max_residual * (1.0 - t[(i, j)] * t[(i, j)]);
            }
        }
        let (ga, _) = self.actor.backward(&ac, &dz);
        self.actor_opt.apply(&mut self.actor, &ga);
        loss
    }

    /// Runs `batch_count` gradient steps on freshly sampled batches,
    /// returning averaged losses, or skips when the buffer is too small.
    pub fn update(&mut self, batch_count: usize) -> UpdateOutcome {
        let need = self.cfg.batch_size;
        if self.buffer.len() < need {
            return UpdateOutcome::Skipped {
                needed: need,
                have: self.buffer.len(),
            };
        }
        let mut critic_loss = 0.0;
        let mut actor_loss = 0.0;
        for _ in 0..batch_count {
            let slots: Vec<usize> = (0..need)
                .map(|_| self.rng.gen_range(0..self.buffer.len()))
                .collect();
            let (s, a, y) = self.batch_for(&slots);
            critic_loss += self.critic_step(&s, &a, &y);
            actor_loss += self.actor_step(&s);
            self.critic1.ema_into(&mut self.target1, self.cfg.tau);
            self.critic2.ema_into(&mut self.target2, self.cfg.tau);
        }
        let n = batch_count.max(1) as f64;
        UpdateOutcome::Applied {
            critic_loss: critic_loss / n,
            actor_loss: actor_loss / n,
            batches: batch_count,
        }
    }

    /// Serialized snapshot of everything but the replay buffer; equal
    /// snapshots mean equal future behavior given equal data.
    pub fn checksum(&self) -> String {
        serde_json::to_string(self).expect("learner serializes")
    }

    #[cfg(test)]
    pub(crate) fn zero_critic_heads(&mut self) {
        for net in [
            &mut self.critic1,
            &mut self.critic2,
            &mut self.target1,
            &mut self.target2,
        ] {
            let last = net.layers.len() - 1;
            net.layers[last].w.fill(0.0);
            net.layers[last].b.fill(0.0);
        }
    }

    #[cfg(test)]
    pub(crate) fn critic_value(&self, input: &PolicyInput, action: &[f64]) -> f64 {
        let s = DMatrix::from_vec(input.dim(), 1, input.scaled_vec(&self.cfg.input_scales));
        let a = DMatrix::from_vec(action.len(), 1, action.to_vec());
        let x = self.stack_state_action(&s, &a);
        let q1 = self.critic1.forward(&x);
        let q2 = self.critic2.forward(&x);
        q1[(0, 0)].min(q2[(0, 0)])
    }

    #[cfg(test)]
    pub(crate) fn critic_loss_for_slots(&self, slots: &[usize]) -> f64 {
        let (s, a, y) = self.batch_for(slots);
        self.critic_loss_given(&s, &a, &y)
    }

    #[cfg(test)]
    pub(crate) fn critic_grads_for_slots(&self, slots: &[usize]) -> (Vec<Linear>, Vec<Linear>) {
        let (s, a, y) = self.batch_for(slots);
        let x = self.stack_state_action(&s, &a);
        let (q1, c1) = self.critic1.forward_cached(&x);
        let (q2, c2) = self.critic2.forward_cached(&x);
        let b = y.len();
        let mut d1 = DMatrix::zeros(1, b);
        let mut d2 = DMatrix::zeros(1, b);
        for j in 0..b {
            d1[(0, j)] = 2.0 * (q1[(0, j)] - y[j]) / b as f64;
            d2[(0, j)] = 2.0 * (q2[(0, j)] - y[j]) / b as f64;
        }
        let (g1, _) = self.critic1.backward(&c1, &d1);
        let (g2, _) = self.critic2.backward(&c2, &d2);
        (g1, g2)
    }

    #[cfg(test)]
    pub(crate) fn critic_params_mut(&mut self) -> Vec<&mut f64> {
        let mut v: Vec<&mut f64> = Vec::new();
        v.extend(self.critic1.param_iter_mut());
        v.extend(self.critic2.param_iter_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::super::mlp::grad_iter;
    use super::*;
    use approx::assert_relative_eq;

    fn input(seed: f64, motion_dim: usize) -> PolicyInput {
        PolicyInput {
            a_r: std::array::from_fn(|i| 0.1 * seed + 0.01 * i as f64),
            ds: std::array::from_fn(|i| 0.02 * seed - 0.005 * i as f64),
            centroid_r: [40.0 + seed, 60.0 - seed],
            motion_r: (0..motion_dim).map(|i| seed * 0.5 + i as f64).collect(),
        }
    }

    fn small_config(mask: AxisMask) -> LearnerConfig {
        let mut cfg = LearnerConfig::new(mask, 2);
        cfg.hidden = 8;
        cfg.batch_size = 8;
        cfg.buffer_capacity = 64;
        cfg.reward_scale = 1.0;
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn mask_apply_examples() {
        let all = AxisMask::all_active();
        let raw = std::array::from_fn(|i| i as f64);
        assert_eq!(mask_apply(&raw, &all), raw);

        let thumb_xy = AxisMask::from_axes(&[0, 1]).unwrap();
        let out = mask_apply(&[1.0; 12], &thumb_xy);
        assert_eq!(out.iter().filter(|v| **v != 0.0).count(), 2);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[1], 1.0);

        assert!(matches!(
            AxisMask::new([false; 12]),
            Err(ResidualError::EmptyMask)
        ));
    }

    #[test]
    fn compose_action_examples() {
        let a_r = FingertipSet::new([[0.1, 0.2, 0.3]; 4]);
        assert_eq!(compose_action(&a_r, &[0.0; 12]), a_r);

        let mut residual = [0.0; 12];
        residual[0] = 0.01;
        let shifted = compose_action(&a_r, &residual);
        assert_relative_eq!(shifted.tip(0).x, 0.11);
        assert_relative_eq!(shifted.tip(1).x, 0.1);

        let neg: [f64; 12] = std::array::from_fn(|i| -residual[i]);
        assert_eq!(compose_action(&compose_action(&a_r, &residual), &neg), a_r);
    }

    #[test]
    fn zero_init_actor_gives_pure_replay() {
        let learner = ResidualLearner::new(small_config(AxisMask::all_active())).unwrap();
        let inp = input(1.0, 2);
        let residual = learner.act(&inp, None).unwrap();
        assert_eq!(residual, [0.0; 12]);
        let a_r = FingertipSet::unflatten(&inp.a_r);
        assert_eq!(compose_action(&a_r, &residual), a_r);
    }

    #[test]
    fn residual_bounded_and_masked() {
        let mask = AxisMask::from_axes(&[0, 1, 5]).unwrap();
        let mut cfg = small_config(mask);
        cfg.seed = 11;
        let learner = ResidualLearner::new(cfg).unwrap();
        let mut noise = OuNoise::new(3, 0.15, 0.0, 5.0, 5.0, 10, 3).unwrap();
        for k in 0..50 {
            let residual = learner
                .act(&input(k as f64 * 100.0, 2), Some(&mut noise))
                .unwrap();
            for (i, v) in residual.iter().enumerate() {
                assert!(v.abs() <= 0.02 + 1e-15);
                if !(i == 0 || i == 1 || i == 5) {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn act_is_deterministic_per_seed() {
        let a = ResidualLearner::new(small_config(AxisMask::all_active())).unwrap();
        let b = ResidualLearner::new(small_config(AxisMask::all_active())).unwrap();
        let inp = input(2.5, 2);
        assert_eq!(a.act(&inp, None).unwrap(), b.act(&inp, None).unwrap());
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn act_rejects_bad_inputs() {
        let learner = ResidualLearner::new(small_config(AxisMask::all_active())).unwrap();
        let mut bad = input(0.0, 2);
        bad.ds[3] = f64::NAN;
        assert!(matches!(
            learner.act(&bad, None),
            Err(ResidualError::NonFinite(_))
        ));
        let wrong = input(0.0, 3);
        assert!(matches!(
            learner.act(&wrong, None),
            Err(ResidualError::MotionDim { .. })
        ));
    }

    fn terminal_transition(reward: f64, m: usize) -> Transition {
        Transition {
            input: input(1.0, 2),
            action: vec![0.005; m],
            reward,
            next_input: input(2.0, 2),
            done: true,
        }
    }

    #[test]
    fn update_skips_until_buffer_filled() {
        let mut learner = ResidualLearner::new(small_config(AxisMask::all_active())).unwrap();
        assert_eq!(
            learner.update(1),
            UpdateOutcome::Skipped { needed: 8, have: 0 }
        );
        for _ in 0..8 {
            learner.push_transition(terminal_transition(0.0, 12)).unwrap();
        }
        assert!(matches!(learner.update(1), UpdateOutcome::Applied { .. }));
    }

    #[test]
    fn zero_reward_terminals_with_zero_critics_give_zero_loss() {
        let mut learner = ResidualLearner::new(small_config(AxisMask::all_active())).unwrap();
        learner.zero_critic_heads();
        for _ in 0..8 {
            learner.push_transition(terminal_transition(0.0, 12)).unwrap();
        }
        match learner.update(3) {
            UpdateOutcome::Applied { critic_loss, .. } => assert_eq!(critic_loss, 0.0),
            other => panic!("unexpected outcome {other:?}"),
        }
    }

    #[test]
    fn singleton_td_converges_to_reward() {
        let mut cfg = small_config(AxisMask::all_active());
        cfg.critic_lr = 0.01;
        let mut learner = ResidualLearner::new(cfg).unwrap();
        let t = terminal_transition(-1.0, 12);
        for _ in 0..16 {
            learner.push_transition(t.clone()).unwrap();
        }
        learner.update(500);
        let q = learner.critic_value(&t.input, &t.action);
        assert!((q - (-1.0)).abs() < 0.05, "critic value {q}");
    }

    #[test]
    fn updates_are_deterministic() {
        let make = || {
            let mut learner =
                ResidualLearner::new(small_config(AxisMask::all_active())).unwrap();
            for k in 0..12 {
                learner
                    .push_transition(Transition {
                        input: input(k as f64, 2),
                        action: vec![0.001 * k as f64; 12],
                        reward: -(k as f64),
                        next_input: input(k as f64 + 1.0, 2),
                        done: k % 4 == 3,
                    })
                    .unwrap();
            }
            learner.update(2);
            learner.checksum()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let mask = AxisMask::from_axes(&[0, 1]).unwrap();
        let mut learner = ResidualLearner::new(small_config(mask)).unwrap();
        for k in 0..8 {
            learner
                .push_transition(Transition {
                    input: input(k as f64 * 0.3, 2),
                    action: vec![0.004 * (k % 3) as f64 - 0.003, 0.002],
                    reward: 0.5 - 0.2 * k as f64,
                    next_input: input(k as f64 * 0.3 + 0.1, 2),
                    done: k == 3 || k == 7,
                })
                .unwrap();
        }
        let slots: Vec<usize> = (0..8).collect();
        let (g1, g2) = learner.critic_grads_for_slots(&slots);
        let analytic: Vec<f64> = grad_iter(&g1).chain(grad_iter(&g2)).copied().collect();

        let h = 1e-5;
        let mut worst = 0.0f64;
        for k in 0..analytic.len() {
            {
                let mut params = learner.critic_params_mut();
                *params[k] += h;
            }
            let up = learner.critic_loss_for_slots(&slots);
            {
                let mut params = learner.critic_params_mut();
                *params[k] -= 2.0 * h;
            }
            let dn = learner.critic_loss_for_slots(&slots);
            {
                let mut params = learner.critic_params_mut();
                *params[k] += h;
            }
            let fd = (up - dn) / (2.0 * h);
            let rel = (analytic[k] - fd).abs() / analytic[k].abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "critic gradient mismatch {worst}");
    }

    #[test]
    fn buffer_round_trip_preserves_transitions() {
        let mut learner = ResidualLearner::new(small_config(AxisMask::all_active())).unwrap();
        let mut pushed = Vec::new();
        for k in 0..10 {
            let t = Transition {
                input: input(k as f64, 2),
                action: vec![0.013 * k as f64; 12],
                reward: 0.25 * k as f64,
                next_input: input(k as f64 + 0.5, 2),
                done: k == 9,
            };
            pushed.push(t.clone());
            learner.push_transition(t).unwrap();
        }
        for (i, expected) in pushed.iter().enumerate() {
            assert_eq!(learner.buffer.get(i), expected);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = LearnerConfig::new(AxisMask::all_active(), 2);
        cfg.motion_dim = 5;
        assert!(ResidualLearner::new(cfg).is_err());
        let mut cfg = LearnerConfig::new(AxisMask::all_active(), 2);
        cfg.buffer_capacity = 10;
        assert!(ResidualLearner::new(cfg).is_err());
    }
}
