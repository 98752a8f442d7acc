//! Forward kinematics, analytic Jacobians, and gradient-descent inverse
//! kinematics for revolute-joint trees with fingertip end effectors.
//!
//! The chain is a tree rooted at the base: an arm chain feeding a hand tree
//! that branches to the fingertips. IK is Jacobian-transpose descent on the
//! summed squared fingertip position error, with per-group step sizes so
//! hand joints move faster than arm joints.

use crate::geometry::{FingertipSet, HomTransform};
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KinError {
    #[error("joint {name}: axis norm {norm} is not unit")]
    NonUnitAxis { name: String, norm: f64 },
    #[error("joint {name}: limits [{lo}, {hi}] must satisfy lo < hi")]
    BadLimits { name: String, lo: f64, hi: f64 },
    #[error("joint {name}: parent {parent} not defined before it")]
    BadParent { name: String, parent: String },
    #[error("duplicate joint name {0}")]
    DuplicateJoint(String),
    #[error("end effector {name}: unknown parent joint {parent}")]
    BadEndEffectorParent { name: String, parent: String },
    #[error("chain has no end effectors")]
    NoEndEffectors,
    #[error("chain has {got} end effectors, fingertip conversion needs 4")]
    NotFourFingers { got: usize },
    #[error("joint state has {got} values, chain has {expected} joints")]
    DofMismatch { expected: usize, got: usize },
    #[error("target has {got} positions, chain has {expected} end effectors")]
    TargetMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered at IK iteration {iter}")]
    Numeric { iter: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: malformed chain file: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointGroup {
    Arm,
    Hand,
}

/// One revolute joint: rotation about `axis` in the frame reached by
/// applying `offset` to the parent joint frame.
#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub axis: Vector3<f64>,
    pub offset: HomTransform,
    pub limits: [f64; 2],
    pub group: JointGroup,
    /// Index of the parent joint; None attaches to the base.
    pub parent: Option<usize>,
}

/// Fixed frame rigidly attached to a joint, whose position IK drives.
#[derive(Debug, Clone)]
pub struct EndEffector {
    pub name: String,
    pub parent: usize,
    pub offset: HomTransform,
}

/// Validated revolute-joint tree.
#[derive(Debug, Clone)]
pub struct KinematicChain {
    joints: Vec<Joint>,
    end_effectors: Vec<EndEffector>,
}

impl KinematicChain {
    /// Joints must be listed parents-first (indices only reference earlier
    /// entries), which guarantees the graph is a tree.
    pub fn new(joints: Vec<Joint>, end_effectors: Vec<EndEffector>) -> Result<Self, KinError> {
        for (i, j) in joints.iter().enumerate() {
            let norm = j.axis.norm();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(KinError::NonUnitAxis {
                    name: j.name.clone(),
                    norm,
                });
            }
            if !(j.limits[0] < j.limits[1]) {
                return Err(KinError::BadLimits {
                    name: j.name.clone(),
                    lo: j.limits[0],
                    hi: j.limits[1],
                });
            }
            if let Some(p) = j.parent {
                if p >= i {
                    return Err(KinError::BadParent {
                        name: j.name.clone(),
                        parent: joints
                            .get(p)
                            .map(|x| x.name.clone())
                            .unwrap_or_else(|| format!("#{p}")),
                    });
                }
            }
            if joints[..i].iter().any(|other| other.name == j.name) {
                return Err(KinError::DuplicateJoint(j.name.clone()));
            }
        }
        if end_effectors.is_empty() {
            return Err(KinError::NoEndEffectors);
        }
        for e in &end_effectors {
            if e.parent >= joints.len() {
                return Err(KinError::BadEndEffectorParent {
                    name: e.name.clone(),
                    parent: format!("#{}", e.parent),
                });
            }
        }
        Ok(Self {
            joints,
            end_effectors,
        })
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn end_effectors(&self) -> &[EndEffector] {
        &self.end_effectors
    }

    pub fn num_end_effectors(&self) -> usize {
        self.end_effectors.len()
    }

    /// Midpoint-of-limits joint state, a safe generic start.
    pub fn neutral_state(&self) -> JointState {
        JointState {
            q: DVector::from_iterator(
                self.dof(),
                self.joints.iter().map(|j| 0.5 * (j.limits[0] + j.limits[1])),
            ),
        }
    }

    /// Planar two-link test chain in the XY plane: both joints rotate about
    /// Z, link lengths `l1` and `l2`, one end effector at the tip. Limits
    /// span a full turn each way so descent is never blocked by angle wrap.
    pub fn planar_two_link(l1: f64, l2: f64) -> Self {
        let tau = 2.0 * std::f64::consts::PI;
        let joints = vec![
            Joint {
                name: "shoulder".into(),
                axis: Vector3::z(),
                offset: HomTransform::identity(),
                limits: [-tau, tau],
                group: JointGroup::Arm,
                parent: None,
            },
            Joint {
                name: "elbow".into(),
                axis: Vector3::z(),
                offset: HomTransform::translation(l1, 0.0, 0.0),
                limits: [-tau, tau],
                group: JointGroup::Arm,
                parent: Some(0),
            },
        ];
        let end_effectors = vec![EndEffector {
            name: "tip".into(),
            parent: 1,
            offset: HomTransform::translation(l2, 0.0, 0.0),
        }];
        Self::new(joints, end_effectors).expect("two-link chain is valid")
    }

    /// Bundled default: 6-DOF arm plus a four-finger hand with 4 joints per
    /// finger (22 DOF, 4 fingertip end effectors, plausible link lengths).
    pub fn default_arm_hand() -> Self {
        let pi = std::f64::consts::PI;
        let mut joints = vec![
            Joint {
                name: "arm_base_yaw".into(),
                axis: Vector3::z(),
                offset: HomTransform::translation(0.0, 0.0, 0.10),
                limits: [-pi, pi],
                group: JointGroup::Arm,
                parent: None,
            },
            Joint {
                name: "arm_shoulder_pitch".into(),
                axis: Vector3::y(),
                offset: HomTransform::translation(0.0, 0.0, 0.10),
                limits: [-2.1, 2.1],
                group: JointGroup::Arm,
                parent: Some(0),
            },
            Joint {
                name: "arm_elbow_pitch".into(),
                axis: Vector3::y(),
                offset: HomTransform::translation(0.30, 0.0, 0.0),
                limits: [-2.5, 2.5],
                group: JointGroup::Arm,
                parent: Some(1),
            },
            Joint {
                name: "arm_forearm_roll".into(),
                axis: Vector3::x(),
                offset: HomTransform::translation(0.30, 0.0, 0.0),
                limits: [-pi, pi],
                group: JointGroup::Arm,
                parent: Some(2),
            },
            Joint {
                name: "arm_wrist_pitch".into(),
                axis: Vector3::y(),
                offset: HomTransform::translation(0.10, 0.0, 0.0),
                limits: [-1.8, 1.8],
                group: JointGroup::Arm,
                parent: Some(3),
            },
            Joint {
                name: "arm_wrist_roll".into(),
                axis: Vector3::x(),
                offset: HomTransform::translation(0.05, 0.0, 0.0),
                limits: [-pi, pi],
                group: JointGroup::Arm,
                parent: Some(4),
            },
        ];
        let mut end_effectors = Vec::new();
        let wrist = 5usize;
        let fingers: [(&str, [f64; 3], f64); 4] = [
            ("thumb", [0.03, -0.05, 0.0], 1.0),
            ("index", [0.09, -0.025, 0.0], 0.35),
            ("middle", [0.09, 0.0, 0.0], 0.35),
            ("ring", [0.09, 0.025, 0.0], 0.35),
        ];
        for (finger, knuckle, spread) in fingers {
            let abduct = joints.len();
            joints.push(Joint {
                name: format!("{finger}_abduct"),
                axis: Vector3::z(),
                offset: HomTransform::translation(knuckle[0], knuckle[1], knuckle[2]),
                limits: [-spread, spread],
                group: JointGroup::Hand,
                parent: Some(wrist),
            });
            let segments = [("mcp", 0.010), ("pip", 0.045), ("dip", 0.030)];
            let mut parent = abduct;
            for (seg, length) in segments {
                let idx = joints.len();
                joints.push(Joint {
                    name: format!("{finger}_{seg}"),
                    axis: Vector3::y(),
                    offset: HomTransform::translation(length, 0.0, 0.0),
                    limits: [-0.3, 1.7],
                    group: JointGroup::Hand,
                    parent: Some(parent),
                });
                parent = idx;
            }
            end_effectors.push(EndEffector {
                name: format!("{finger}_tip"),
                parent,
                offset: HomTransform::translation(0.025, 0.0, 0.0),
            });
        }
        Self::new(joints, end_effectors).expect("default chain is valid")
    }
}

/// Joint angles for one chain, radians.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    q: DVector<f64>,
}

impl JointState {
    pub fn new(q: Vec<f64>) -> Result<Self, KinError> {
        if q.iter().any(|v| !v.is_finite()) {
            return Err(KinError::NonFinite("joint state"));
        }
        Ok(Self {
            q: DVector::from_vec(q),
        })
    }

    pub fn zeros(dof: usize) -> Self {
        Self {
            q: DVector::zeros(dof),
        }
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn as_slice(&self) -> &[f64] {
        self.q.as_slice()
    }

    /// Copy with every angle clamped to its joint's limits.
    pub fn clamped(&self, chain: &KinematicChain) -> Result<Self, KinError> {
        self.check_dof(chain)?;
        let q = DVector::from_iterator(
            self.q.len(),
            self.q
                .iter()
                .zip(chain.joints())
                .map(|(&v, j)| v.clamp(j.limits[0], j.limits[1])),
        );
        Ok(Self { q })
    }

    pub fn within_limits(&self, chain: &KinematicChain) -> bool {
        self.q
            .iter()
            .zip(chain.joints())
            .all(|(&v, j)| v >= j.limits[0] && v <= j.limits[1])
    }

    fn check_dof(&self, chain: &KinematicChain) -> Result<(), KinError> {
        if self.q.len() != chain.dof() {
            return Err(KinError::DofMismatch {
                expected: chain.dof(),
                got: self.q.len(),
            });
        }
        Ok(())
    }
}

/// World transform of every joint frame (including its own rotation), plus
/// each joint's world rotation-axis direction and origin.
struct FrameData {
    world: Vec<HomTransform>,
    axis_dir: Vec<Vector3<f64>>,
    origin: Vec<Vector3<f64>>,
}

fn compute_frames(chain: &KinematicChain, q: &JointState) -> FrameData {
    let n = chain.dof();
    let mut world = Vec::with_capacity(n);
    let mut axis_dir = Vec::with_capacity(n);
    let mut origin = Vec::with_capacity(n);
    for (i, joint) in chain.joints().iter().enumerate() {
        let parent_world = match joint.parent {
            Some(p) => world[p],
            None => HomTransform::identity(),
        };
        let pre = parent_world.compose(&joint.offset);
        axis_dir.push(pre.rotation_matrix() * joint.axis);
        origin.push(*pre.translation_vector());
        let rot = HomTransform::from_axis_angle(joint.axis, q.values()[i], Vector3::zeros());
        world.push(pre.compose(&rot));
    }
    FrameData {
        world,
        axis_dir,
        origin,
    }
}

/// Positions of all end effectors in base coordinates, chain order.
pub fn fk_positions(chain: &KinematicChain, q: &JointState) -> Result<Vec<Vector3<f64>>, KinError> {
    q.check_dof(chain)?;
    let frames = compute_frames(chain, q);
    Ok(chain
        .end_effectors()
        .iter()
        .map(|e| *frames.world[e.parent].compose(&e.offset).translation_vector())
        .collect())
}

/// Fingertip positions for a four-end-effector chain, in the
/// [thumb, index, middle, ring] order of the chain definition.
pub fn forward_kinematics(
    chain: &KinematicChain,
    q: &JointState,
) -> Result<FingertipSet, KinError> {
    if chain.num_end_effectors() != 4 {
        return Err(KinError::NotFourFingers {
            got: chain.num_end_effectors(),
        });
    }
    let p = fk_positions(chain, q)?;
    Ok(FingertipSet::from_vectors([p[0], p[1], p[2], p[3]]))
}

/// Analytic positional Jacobian, (3·num_end_effectors) × dof. Column j is
/// z_j × (p_e − p_j) for end effectors downstream of joint j, zero elsewhere.
pub fn jacobian(chain: &KinematicChain, q: &JointState) -> Result<DMatrix<f64>, KinError> {
    q.check_dof(chain)?;
    let frames = compute_frames(chain, q);
    let n = chain.dof();
    // ancestors[j] = joints on the path from the base to joint j, inclusive.
    let mut is_ancestor = vec![vec![false; n]; n];
    for (j, joint) in chain.joints().iter().enumerate() {
        let mut cur = Some(j);
        while let Some(k) = cur {
            is_ancestor[j][k] = true;
            cur = chain.joints()[k].parent;
        }
        let _ = joint;
    }
    let mut jac = DMatrix::zeros(3 * chain.num_end_effectors(), n);
    for (e, ee) in chain.end_effectors().iter().enumerate() {
        let p_e = *frames.world[ee.parent].compose(&ee.offset).translation_vector();
        for j in 0..n {
            if !is_ancestor[ee.parent][j] {
                continue;
            }
            let col = frames.axis_dir[j].cross(&(p_e - frames.origin[j]));
            jac[(3 * e, j)] = col.x;
            jac[(3 * e + 1, j)] = col.y;
            jac[(3 * e + 2, j)] = col.z;
        }
    }
    Ok(jac)
}

/// IK step sizes and stopping rules.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IkOptions {
    pub lr_arm: f64,
    pub lr_hand: f64,
    pub max_iters: usize,
    /// Stop when the stacked position error norm falls below this (meters).
    pub tol: f64,
    pub clamp_limits: bool,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            lr_arm: 0.002,
            lr_hand: 0.1,
            max_iters: 2000,
            tol: 1e-3,
            clamp_limits: true,
        }
    }
}

/// Solved state plus the achieved error norm.
#[derive(Debug, Clone)]
pub struct IkResult {
    pub q: JointState,
    pub residual: f64,
    pub iterations: usize,
}

fn stacked_error(
    chain: &KinematicChain,
    q: &JointState,
    target: &[Vector3<f64>],
) -> Result<DVector<f64>, KinError> {
    let positions = fk_positions(chain, q)?;
    let mut err = DVector::zeros(3 * target.len());
    for (e, (p, t)) in positions.iter().zip(target.iter()).enumerate() {
        let d = p - t;
        err[3 * e] = d.x;
        err[3 * e + 1] = d.y;
        err[3 * e + 2] = d.z;
    }
    Ok(err)
}

/// Jacobian-transpose descent q ← q − diag(lr per group)·Jᵀ·(FK(q) − target),
/// with per-iteration limit clamping and step backtracking so the residual
/// never increases across accepted iterations. Deterministic.
pub fn ik_solve(
    chain: &KinematicChain,
    target: &[Vector3<f64>],
    q0: &JointState,
    opts: &IkOptions,
) -> Result<IkResult, KinError> {
    if target.len() != chain.num_end_effectors() {
        return Err(KinError::TargetMismatch {
            expected: chain.num_end_effectors(),
            got: target.len(),
        });
    }
    let mut q = if opts.clamp_limits {
        q0.clamped(chain)?
    } else {
        q0.clone()
    };
    let lr = DVector::from_iterator(
        chain.dof(),
        chain.joints().iter().map(|j| match j.group {
            JointGroup::Arm => opts.lr_arm,
            JointGroup::Hand => opts.lr_hand,
        }),
    );
    let mut err = stacked_error(chain, &q, target)?;
    let mut residual = err.norm();
    let mut iterations = 0;
    while iterations < opts.max_iters && residual >= opts.tol {
        let jac = jacobian(chain, &q)?;
        let grad = jac.transpose() * &err;
        let step = lr.component_mul(&grad);
        if step.iter().any(|v| !v.is_finite()) {
            return Err(KinError::Numeric { iter: iterations });
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut q_new = JointState {
                q: q.values() - scale * &step,
            };
            if opts.clamp_limits {
                q_new = q_new.clamped(chain)?;
            }
            let err_new = stacked_error(chain, &q_new, target)?;
            let res_new = err_new.norm();
            if !res_new.is_finite() {
                return Err(KinError::Numeric { iter: iterations });
            }
            if res_new < residual {
                q = q_new;
                err = err_new;
                residual = res_new;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    Ok(IkResult {
        q,
        residual,
        iterations,
    })
}

#[derive(Serialize, Deserialize)]
struct RawJoint {
    name: String,
    axis: [f64; 3],
    offset: HomTransform,
    limits: [f64; 2],
    group: JointGroup,
    parent: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawEndEffector {
    name: String,
    parent: String,
    offset: HomTransform,
}

#[derive(Serialize, Deserialize)]
struct RawChain {
    joints: Vec<RawJoint>,
    end_effectors: Vec<RawEndEffector>,
}

/// Loads a chain description JSON file.
pub fn load_chain(path: &Path) -> Result<KinematicChain, KinError> {
    let text = fs::read_to_string(path).map_err(|source| KinError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let raw: RawChain = serde_json::from_str(&text).map_err(|source| KinError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    chain_from_raw(raw)
}

fn chain_from_raw(raw: RawChain) -> Result<KinematicChain, KinError> {
    let index_of = |name: &str, upto: usize, joints: &[RawJoint]| {
        joints[..upto].iter().position(|j| j.name == name)
    };
    let mut joints = Vec::with_capacity(raw.joints.len());
    for (i, rj) in raw.joints.iter().enumerate() {
        let parent = match &rj.parent {
            None => None,
            Some(p) => Some(index_of(p, i, &raw.joints).ok_or_else(|| KinError::BadParent {
                name: rj.name.clone(),
                parent: p.clone(),
            })?),
        };
        joints.push(Joint {
            name: rj.name.clone(),
            axis: Vector3::from(rj.axis),
            offset: rj.offset,
            limits: rj.limits,
            group: rj.group,
            parent,
        });
    }
    let mut end_effectors = Vec::with_capacity(raw.end_effectors.len());
    for re in &raw.end_effectors {
        let parent = raw
            .joints
            .iter()
            .position(|j| j.name == re.parent)
            .ok_or_else(|| KinError::BadEndEffectorParent {
                name: re.name.clone(),
                parent: re.parent.clone(),
            })?;
        end_effectors.push(EndEffector {
            name: re.name.clone(),
            parent,
            offset: re.offset,
        });
    }
    KinematicChain::new(joints, end_effectors)
}

/// Writes a chain description JSON file.
pub fn save_chain(chain: &KinematicChain, path: &Path) -> Result<(), KinError> {
    let raw = RawChain {
        joints: chain
            .joints()
            .iter()
            .map(|j| RawJoint {
                name: j.name.clone(),
                axis: j.axis.into(),
                offset: j.offset,
                limits: j.limits,
                group: j.group,
                parent: j.parent.map(|p| chain.joints()[p].name.clone()),
            })
            .collect(),
        end_effectors: chain
            .end_effectors()
            .iter()
            .map(|e| RawEndEffector {
                name: e.name.clone(),
                parent: chain.joints()[e.parent].name.clone(),
                offset: e.offset,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&raw).expect("chain serializes");
    fs::write(path, text).map_err(|source| KinError::Io {
        path: path.display().to_string(),
        source,
    })
}
