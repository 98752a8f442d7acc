//! Small dense networks used by the learner: batched f64 MLPs with ReLU
//! hidden layers, explicit backprop, and Adam. Batches are stored column
//! per sample.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Linear {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Linear {
    fn init(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / n_in as f64).sqrt();
        Self {
            w: DMatrix::from_fn(n_out, n_in, |_, _| rng.gen_range(-bound..bound)),
            b: DVector::zeros(n_out),
        }
    }

    fn zeroed(n_in: usize, n_out: usize) -> Self {
        Self {
            w: DMatrix::zeros(n_out, n_in),
            b: DVector::zeros(n_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeroed(self.w.ncols(), self.w.nrows())
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.w * x;
        for j in 0..z.ncols() {
            for i in 0..z.nrows() {
                z[(i, j)] += self.b[i];
            }
        }
        z
    }
}

/// ReLU between layers, linear output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Mlp {
    pub layers: Vec<Linear>,
}

/// Layer inputs saved by a cached forward pass; `xs[l]` feeds layer `l`.
pub(crate) struct MlpCache {
    xs: Vec<DMatrix<f64>>,
}

impl Mlp {
    /// `dims` lists layer widths input-first. `zero_last` zeroes the final
    /// layer so the net starts as the constant zero function.
    pub fn new(dims: &[usize], zero_last: bool, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, d)| {
                if zero_last && l == last {
                    Linear::zeroed(d[0], d[1])
                } else {
                    Linear::init(d[0], d[1], rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if l < last {
                h.apply(|v| *v = v.max(0.0));
            }
        }
        h
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, MlpCache) {
        let mut xs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            xs.push(h.clone());
            h = layer.forward(&h);
            if l < last {
                h.apply(|v| *v = v.max(0.0));
            }
        }
        (h, MlpCache { xs })
    }

    /// Backprop from `d_out` = dLoss/dOutput. Returns per-layer parameter
    /// gradients and the gradient with respect to the network input.
    pub fn backward(&self, cache: &MlpCache, d_out: &DMatrix<f64>) -> (Vec<Linear>, DMatrix<f64>) {
        let mut grads: Vec<Linear> = self.layers.iter().map(Linear::zeros_like).collect();
        let mut d = d_out.clone();
        for l in (0..self.layers.len()).rev() {
            grads[l].w = &d * cache.xs[l].transpose();
            for j in 0..d.ncols() {
                for i in 0..d.nrows() {
                    grads[l].b[i] += d[(i, j)];
                }
            }
            let mut dx = self.layers[l].w.transpose() * &d;
            if l > 0 {
                // xs[l] is the ReLU output feeding layer l; zero where inactive.
                for j in 0..dx.ncols() {
                    for i in 0..dx.nrows() {
                        if cache.xs[l][(i, j)] <= 0.0 {
                            dx[(i, j)] = 0.0;
                        }
                    }
                }
            }
            d = dx;
        }
        (grads, d)
    }

    /// target ← (1 − tau)·target + tau·self, layerwise.
    pub fn ema_into(&self, target: &mut Mlp, tau: f64) {
        for (src, dst) in self.layers.iter().zip(target.layers.iter_mut()) {
            dst.w = &dst.w * (1.0 - tau) + &src.w * tau;
            dst.b = &dst.b * (1.0 - tau) + &src.b * tau;
        }
    }

    /// Flat view over all parameters, per layer weights first then biases,
    /// matching the order `grad_iter` walks gradients.
    #[cfg(test)]
    pub(crate) fn param_iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| {
            l.w.as_mut_slice()
                .iter_mut()
                .chain(l.b.as_mut_slice().iter_mut())
        })
    }
}

#[cfg(test)]
pub(crate) fn grad_iter(grads: &[Linear]) -> impl Iterator<Item = &f64> {
    grads
        .iter()
        .flat_map(|g| g.w.as_slice().iter().chain(g.b.as_slice().iter()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Linear>,
    v: Vec<Linear>,
}

impl Adam {
    pub fn new(lr: f64, net: &Mlp) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: net.layers.iter().map(Linear::zeros_like).collect(),
            v: net.layers.iter().map(Linear::zeros_like).collect(),
        }
    }

    pub fn apply(&mut self, net: &mut Mlp, grads: &[Linear]) {
        self.t += 1;
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = move |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (l, grad) in grads.iter().enumerate() {
            for i in 0..grad.w.len() {
                let g = grad.w.as_slice()[i];
                step(
                    &mut net.layers[l].w.as_mut_slice()[i],
                    g,
                    &mut self.m[l].w.as_mut_slice()[i],
                    &mut self.v[l].w.as_mut_slice()[i],
                );
            }
            for i in 0..grad.b.len() {
                let g = grad.b.as_slice()[i];
                step(
                    &mut net.layers[l].b.as_mut_slice()[i],
                    g,
                    &mut self.m[l].b.as_mut_slice()[i],
                    &mut self.v[l].b.as_mut_slice()[i],
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_last_layer_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[4, 8, 3], true, &mut rng);
        let x = DMatrix::from_fn(4, 5, |i, j| (i + j) as f64);
        let y = net.forward(&x);
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Mlp::new(&[3, 6, 6, 2], false, &mut rng);
        let x = DMatrix::from_fn(3, 4, |i, j| 0.3 * (i as f64) - 0.2 * (j as f64) + 0.1);
        // Loss = sum of squared outputs.
        let loss = |net: &Mlp| net.forward(&x).iter().map(|v| v * v).sum::<f64>();
        let (y, cache) = net.forward_cached(&x);
        let (grads, dx) = net.backward(&cache, &(2.0 * &y));

        let analytic: Vec<f64> = grad_iter(&grads).copied().collect();
        let h = 1e-6;
        let mut idx = 0;
        let mut worst = 0.0f64;
        let n = analytic.len();
        for k in 0..n {
            {
                let p = net.param_iter_mut().nth(k).unwrap();
                *p += h;
            }
            let up = loss(&net);
            {
                let p = net.param_iter_mut().nth(k).unwrap();
                *p -= 2.0 * h;
            }
            let dn = loss(&net);
            {
                let p = net.param_iter_mut().nth(k).unwrap();
                *p += h;
            }
            let fd = (up - dn) / (2.0 * h);
            let rel = (analytic[idx] - fd).abs() / analytic[idx].abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel);
            idx += 1;
        }
        assert!(worst < 1e-6, "param gradient mismatch {worst}");

        // Input gradient against finite differences on one entry.
        let mut xp = x.clone();
        xp[(1, 2)] += h;
        let up = net.forward(&xp).iter().map(|v| v * v).sum::<f64>();
        xp[(1, 2)] -= 2.0 * h;
        let dn = net.forward(&xp).iter().map(|v| v * v).sum::<f64>();
        let fd = (up - dn) / (2.0 * h);
        assert!((dx[(1, 2)] - fd).abs() < 1e-5);
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::new(&[2, 8, 1], false, &mut rng);
        let mut opt = Adam::new(1e-2, &net);
        let x = DMatrix::from_fn(2, 16, |i, j| ((i * 7 + j) % 5) as f64 * 0.2 - 0.4);
        let target = DMatrix::from_fn(1, 16, |_, j| (x[(0, j)] - x[(1, j)]).sin());
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..300 {
            let (y, cache) = net.forward_cached(&x);
            let diff = &y - &target;
            last = diff.iter().map(|v| v * v).sum::<f64>() / 16.0;
            first.get_or_insert(last);
            let (grads, _) = net.backward(&cache, &(2.0 / 16.0 * &diff));
            opt.apply(&mut net, &grads);
        }
        assert!(last < 0.05 * first.unwrap(), "{last} vs {first:?}");
    }
}
