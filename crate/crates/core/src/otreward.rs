//! Optimal-transport baseline rewards over trajectory frames.
//!
//! Both baselines build a frame-by-frame cost matrix, solve entropically
//! regularized OT with uniform marginals via log-domain Sinkhorn, and score
//! each robot timestep by the negative transported cost of its column.

use crate::objmotion;
use crate::trackio::TrackSet;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OtError {
    #[error("feature dimension mismatch ({a} vs {b})")]
    DimMismatch { a: usize, b: usize },
    #[error("cost matrix is {rows}x{cols} but plan is {plan_rows}x{plan_cols}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        plan_rows: usize,
        plan_cols: usize,
    },
    #[error("cosine distance undefined for zero vector at index {0}")]
    ZeroVector(usize),
    #[error("regularization must be positive, got {0}")]
    NonPositiveEps(f64),
    #[error("empty feature series")]
    Empty,
    #[error("cost matrix entries must be finite and nonnegative")]
    InvalidCost,
    #[error("frame at t={t} has no visible points")]
    DegenerateFrame { t: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

/// Alignment costs between expert frames (rows) and robot frames (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: DMatrix<f64>,
}

impl CostMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self, OtError> {
        if values.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(OtError::InvalidCost);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }
}

/// Coupling matrix with uniform marginals 1/T_e (rows) and 1/T_r (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    values: DMatrix<f64>,
}

impl TransportPlan {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Largest absolute deviation of row/column sums from the uniform
    /// marginals.
    pub fn marginal_error(&self) -> f64 {
        marginal_error(&self.values)
    }
}

fn marginal_error(p: &DMatrix<f64>) -> f64 {
    let (n, m) = p.shape();
    let row_target = 1.0 / n as f64;
    let col_target = 1.0 / m as f64;
    let mut err: f64 = 0.0;
    for i in 0..n {
        err = err.max((p.row(i).sum() - row_target).abs());
    }
    for j in 0..m {
        err = err.max((p.column(j).sum() - col_target).abs());
    }
    err
}

/// Sequence of equal-dimension embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries {
    vectors: Vec<DVector<f64>>,
}

impl FeatureSeries {
    pub fn new(vectors: Vec<DVector<f64>>) -> Result<Self, OtError> {
        if vectors.is_empty() {
            return Err(OtError::Empty);
        }
        let d = vectors[0].len();
        if let Some(bad) = vectors.iter().find(|v| v.len() != d) {
            return Err(OtError::DimMismatch { a: d, b: bad.len() });
        }
        Ok(Self { vectors })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, OtError> {
        Self::new(rows.into_iter().map(DVector::from_vec).collect())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vectors(&self) -> &[DVector<f64>] {
        &self.vectors
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureRecord {
    t: f64,
    z: Vec<f64>,
}

/// Loads a feature series from JSONL `{"t": float, "z": [floats]}`, ordered
/// by timestamp.
pub fn load_features(path: &Path) -> Result<FeatureSeries, OtError> {
    let text = fs::read_to_string(path).map_err(|source| OtError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord = serde_json::from_str(line).map_err(|source| OtError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?;
        records.push(rec);
    }
    records.sort_by(|a, b| a.t.partial_cmp(&b.t).expect("finite timestamps"));
    FeatureSeries::from_rows(records.into_iter().map(|r| r.z).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMetric {
    SquaredEuclidean,
    CosineDistance,
}

/// Pairwise frame alignment costs, rows from `a`, columns from `b`.
pub fn cost_matrix(
    a: &FeatureSeries,
    b: &FeatureSeries,
    metric: CostMetric,
) -> Result<CostMatrix, OtError> {
    if a.dim() != b.dim() {
        return Err(OtError::DimMismatch {
            a: a.dim(),
            b: b.dim(),
        });
    }
    let mut values = DMatrix::zeros(a.len(), b.len());
    match metric {
        CostMetric::SquaredEuclidean => {
            for (i, va) in a.vectors().iter().enumerate() {
                for (j, vb) in b.vectors().iter().enumerate() {
                    values[(i, j)] = (va - vb).norm_squared();
                }
            }
        }
        CostMetric::CosineDistance => {
            let norms = |s: &FeatureSeries| -> Result<Vec<f64>, OtError> {
                s.vectors()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let n = v.norm();
                        if n == 0.0 {
                            Err(OtError::ZeroVector(i))
                        } else {
                            Ok(n)
                        }
                    })
                    .collect()
            };
            let na = norms(a)?;
            let nb = norms(b)?;
            for (i, va) in a.vectors().iter().enumerate() {
                for (j, vb) in b.vectors().iter().enumerate() {
                    let cos = va.dot(vb) / (na[i] * nb[j]);
                    values[(i, j)] = (1.0 - cos).max(0.0);
                }
            }
        }
    }
    CostMatrix::new(values)
}

/// Outcome of a Sinkhorn solve. Non-convergence is a warning, not an error:
/// the plan is still returned with its achieved marginal error attached.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    pub plan: TransportPlan,
    pub converged: bool,
    pub iterations: usize,
    pub marginal_error: f64,
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic OT with uniform marginals, solved by log-domain Sinkhorn
/// iteration on the dual potentials. Deterministic for fixed inputs.
pub fn sinkhorn(
    c: &CostMatrix,
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<SinkhornResult, OtError> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(OtError::NonPositiveEps(eps));
    }
    let (n, m) = c.shape();
    let cm = c.values();
    let log_a = (1.0 / n as f64).ln();
    let log_b = (1.0 / m as f64).ln();
    let mut f = DVector::zeros(n);
    let mut g = DVector::zeros(m);
    let mut iterations = 0;
    let mut plan = DMatrix::zeros(n, m);
    let mut err = f64::INFINITY;
    while iterations < max_iters {
        for i in 0..n {
            f[i] = eps * log_a - eps * log_sum_exp((0..m).map(|j| (g[j] - cm[(i, j)]) / eps));
        }
        for j in 0..m {
            g[j] = eps * log_b - eps * log_sum_exp((0..n).map(|i| (f[i] - cm[(i, j)]) / eps));
        }
        iterations += 1;
        for i in 0..n {
            for j in 0..m {
                plan[(i, j)] = ((f[i] + g[j] - cm[(i, j)]) / eps).exp();
            }
        }
        err = marginal_error(&plan);
        if err < tol {
            break;
        }
    }
    Ok(SinkhornResult {
        plan: TransportPlan { values: plan },
        converged: err < tol,
        iterations,
        marginal_error: err,
    })
}

/// Per-robot-timestep reward: the negated transported cost of each column.
pub fn ot_rewards(c: &CostMatrix, plan: &TransportPlan) -> Result<Vec<f64>, OtError> {
    let (n, m) = c.shape();
    let (pn, pm) = plan.values().shape();
    if (n, m) != (pn, pm) {
        return Err(OtError::ShapeMismatch {
            rows: n,
            cols: m,
            plan_rows: pn,
            plan_cols: pm,
        });
    }
    let cm = c.values();
    let pv = plan.values();
    Ok((0..m)
        .map(|j| 0.0 - (0..n).map(|i| cm[(i, j)] * pv[(i, j)]).sum::<f64>())
        .collect())
}

/// Rewards plus solver status, the unit both OT baselines return.
#[derive(Debug, Clone, PartialEq)]
pub struct OtRewards {
    pub rewards: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub marginal_error: f64,
}

fn solve_rewards(
    c: &CostMatrix,
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<OtRewards, OtError> {
    let result = sinkhorn(c, eps, max_iters, tol)?;
    let rewards = ot_rewards(c, &result.plan)?;
    Ok(OtRewards {
        rewards,
        converged: result.converged,
        iterations: result.iterations,
        marginal_error: result.marginal_error,
    })
}

/// Canonically ordered visible points flattened to a fixed-width vector.
///
/// Points are sorted by angle about the frame centroid (then radius, then
/// coordinates) so that track index permutations do not change the feature;
/// missing slots are padded with the centroid. Note this ordering cannot
/// recover point correspondence between two trajectories tracked from
/// different pixel sets, which is exactly the weakness of this baseline.
fn frame_feature(
    frame: &crate::trackio::TrackFrame,
    width: usize,
) -> Result<Vec<f64>, OtError> {
    let centroid = objmotion::centroid(frame).map_err(|_| OtError::DegenerateFrame { t: frame.t })?;
    let mut pts: Vec<[f64; 2]> = frame.visible_points().collect();
    pts.sort_by(|p, q| {
        let key = |p: &[f64; 2]| {
            let dx = p[0] - centroid[0];
            let dy = p[1] - centroid[1];
            (dy.atan2(dx), dx * dx + dy * dy, p[0], p[1])
        };
        key(p).partial_cmp(&key(q)).expect("finite coordinates")
    });
    let mut out = Vec::with_capacity(2 * width);
    for k in 0..width {
        let p = pts.get(k).copied().unwrap_or(centroid);
        out.push(p[0]);
        out.push(p[1]);
    }
    Ok(out)
}

/// Point OT baseline: squared-euclidean OT over per-frame point features.
pub fn point_ot_rewards(
    robot: &TrackSet,
    human: &TrackSet,
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<OtRewards, OtError> {
    let width = robot.n_points().max(human.n_points());
    let feats = |set: &TrackSet| -> Result<FeatureSeries, OtError> {
        FeatureSeries::from_rows(
            set.frames
                .iter()
                .map(|f| frame_feature(f, width))
                .collect::<Result<Vec<_>, _>>()?,
        )
    };
    let c = cost_matrix(&feats(human)?, &feats(robot)?, CostMetric::SquaredEuclidean)?;
    solve_rewards(&c, eps, max_iters, tol)
}

/// Feature-space OT baseline: cosine-distance OT over supplied embeddings.
pub fn feature_ot_rewards(
    robot_feats: &FeatureSeries,
    human_feats: &FeatureSeries,
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<OtRewards, OtError> {
    let c = cost_matrix(human_feats, robot_feats, CostMetric::CosineDistance)?;
    solve_rewards(&c, eps, max_iters, tol)
}
