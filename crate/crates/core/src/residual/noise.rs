//! Scheduled Ornstein-Uhlenbeck exploration noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::learner::ResidualError;

/// Discrete OU process x ← x + θ·(μ − x) + σ(step)·g with σ interpolating
/// linearly from `sigma0` to `sigma1` over `decay_steps`, then holding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OuNoise {
    state: Vec<f64>,
    theta: f64,
    mu: f64,
    sigma0: f64,
    sigma1: f64,
    decay_steps: u64,
    step: u64,
    rng: ChaCha8Rng,
}

impl OuNoise {
    pub fn new(
        dim: usize,
        theta: f64,
        mu: f64,
        sigma0: f64,
        sigma1: f64,
        decay_steps: u64,
        seed: u64,
    ) -> Result<Self, ResidualError> {
        if !(theta > 0.0) {
            return Err(ResidualError::BadConfig("theta must be positive"));
        }
        if decay_steps == 0 {
            return Err(ResidualError::BadConfig("decay_steps must be at least 1"));
        }
        if ![theta, mu, sigma0, sigma1].iter().all(|v| v.is_finite()) {
            return Err(ResidualError::NonFinite("noise parameters"));
        }
        Ok(Self {
            state: vec![mu; dim],
            theta,
            mu,
            sigma0,
            sigma1,
            decay_steps,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn dim(&self) -> usize {
        self.state.len()
    }

    /// Scale in effect for the next sample.
    pub fn sigma(&self) -> f64 {
        let f = (self.step as f64 / self.decay_steps as f64).min(1.0);
        self.sigma0 + (self.sigma1 - self.sigma0) * f
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Advances the process one step and returns the new state.
    pub fn sample(&mut self) -> Vec<f64> {
        let sigma = self.sigma();
        for x in self.state.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut self.rng);
            *x += self.theta * (self.mu - *x) + sigma * g;
        }
        self.step += 1;
        self.state.clone()
    }

    /// Returns the state to μ for a fresh episode; the schedule keeps running.
    pub fn reset(&mut self) {
        for x in self.state.iter_mut() {
            *x = self.mu;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_sigma_holds_mean_fixed_point() {
        let mut n = OuNoise::new(3, 0.3, 0.7, 0.0, 0.0, 10, 1).unwrap();
        for _ in 0..50 {
            for v in n.sample() {
                assert_eq!(v, 0.7);
            }
        }
    }

    #[test]
    fn deterministic_recursion_halves_toward_mean() {
        let mut n = OuNoise::new(1, 0.5, 0.0, 0.0, 0.0, 10, 1).unwrap();
        n.state[0] = 1.0;
        assert_relative_eq!(n.sample()[0], 0.5);
        assert_relative_eq!(n.sample()[0], 0.25);
    }

    #[test]
    fn stationary_variance_matches_ar1_formula() {
        let theta = 0.15;
        let sigma = 0.2;
        let mut n = OuNoise::new(1, theta, 0.0, sigma, sigma, 1, 42).unwrap();
        let mut samples = Vec::with_capacity(100_000);
        for _ in 0..100_000 {
            samples.push(n.sample()[0]);
        }
        let burn = 1_000;
        let tail = &samples[burn..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / tail.len() as f64;
        let expected = sigma * sigma / (2.0 * theta - theta * theta);
        assert!(
            (var - expected).abs() < 0.1 * expected,
            "var {var} vs expected {expected}"
        );
    }

    #[test]
    fn sigma_schedule_interpolates_then_holds() {
        let mut n = OuNoise::new(1, 0.15, 0.0, 0.2, 0.02, 100, 7).unwrap();
        assert_relative_eq!(n.sigma(), 0.2);
        for _ in 0..50 {
            n.sample();
        }
        assert_relative_eq!(n.sigma(), 0.11);
        for _ in 0..50 {
            n.sample();
        }
        assert_relative_eq!(n.sigma(), 0.02);
        for _ in 0..25 {
            n.sample();
        }
        assert_relative_eq!(n.sigma(), 0.02);
    }

    #[test]
    fn reset_recenters_but_keeps_schedule() {
        let mut n = OuNoise::new(2, 0.15, 0.1, 0.2, 0.02, 100, 7).unwrap();
        for _ in 0..30 {
            n.sample();
        }
        let sigma_before = n.sigma();
        n.reset();
        assert_eq!(n.state, vec![0.1, 0.1]);
        assert_eq!(n.sigma(), sigma_before);
    }

    #[test]
    fn serde_round_trip_resumes_identically() {
        let mut a = OuNoise::new(2, 0.15, 0.0, 0.2, 0.02, 100, 9).unwrap();
        for _ in 0..10 {
            a.sample();
        }
        let json = serde_json::to_string(&a).unwrap();
        let mut b: OuNoise = serde_json::from_str(&json).unwrap();
        for _ in 0..20 {
            assert_eq!(a.sample(), b.sample());
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(OuNoise::new(1, 0.0, 0.0, 0.1, 0.1, 10, 1).is_err());
        assert!(OuNoise::new(1, 0.1, 0.0, 0.1, 0.1, 0, 1).is_err());
    }
}
