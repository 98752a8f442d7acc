//! Rigid-body transforms, calibration chains, fingertip retargeting, and
//! spatial-offset computation.
//!
//! Conventions: meters for 3D coordinates, pixels for 2D image coordinates,
//! radians for angles.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Orthonormality drift beyond this triggers re-orthonormalization.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// Default half-extent of the fingertip workspace box, per axis (meters).
pub const WORKSPACE_HALF_EXTENT: f64 = 1.5;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation matrix is not orthonormal (drift {drift:.3e})")]
    NonOrthonormalRotation { drift: f64 },
    #[error("rotation matrix has determinant {det:.6} (expected +1)")]
    ImproperRotation { det: f64 },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("focal lengths must be positive, got fx={fx}, fy={fy}")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("fingertip {tip} at {coord:.4} m exceeds the ±{half_extent} m workspace box")]
    OutsideWorkspace {
        tip: usize,
        coord: f64,
        half_extent: f64,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Rigid 4×4 homogeneous transform stored as rotation + translation.
///
/// Stored split rather than as a raw 4×4 so orthonormality can be enforced;
/// compose chains re-orthonormalize via polar decomposition once drift
/// exceeds [`ORTHONORMAL_TOL`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransform", into = "RawTransform")]
pub struct HomTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// Serialized layout: row-major 3×3 rotation plus translation vector.
#[derive(Serialize, Deserialize)]
struct RawTransform {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<HomTransform> for RawTransform {
    fn from(t: HomTransform) -> Self {
        let r = &t.rotation;
        RawTransform {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<RawTransform> for HomTransform {
    type Error = GeometryError;

    fn try_from(raw: RawTransform) -> Result<Self, Self::Error> {
        let r = raw.rotation;
        let rotation = Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        );
        let translation = Vector3::from(raw.translation);
        HomTransform::new(rotation, translation)
    }
}

impl HomTransform {
    /// Builds a transform, validating orthonormality and det = +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !rotation.iter().all(|v| v.is_finite()) || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("transform"));
        }
        let drift = orthonormal_drift(&rotation);
        if drift > ORTHONORMAL_TOL {
            return Err(GeometryError::NonOrthonormalRotation { drift });
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::ImproperRotation { det });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pure translation.
    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Rotation about the base-frame Z axis.
    pub fn rotation_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about the base-frame Y axis.
    pub fn rotation_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about the base-frame X axis.
    pub fn rotation_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
            translation: Vector3::new(0.0, 0.0, 0.0),
        }
    }

    /// Rotation about an arbitrary unit axis (Rodrigues), plus translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            angle,
        );
        Self {
            rotation: rotation.into_inner(),
            translation,
        }
    }

    pub fn rotation_matrix(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation_vector(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Matrix product `self · other`: `a.compose(&b)` maps p ↦ a(b(p)).
    pub fn compose(&self, other: &HomTransform) -> HomTransform {
        let mut rotation = self.rotation * other.rotation;
        if orthonormal_drift(&rotation) > ORTHONORMAL_TOL {
            rotation = reorthonormalize(&rotation);
        }
        HomTransform {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Inverse transform: (Rᵀ, −Rᵀt).
    pub fn invert(&self) -> HomTransform {
        let rt = self.rotation.transpose();
        HomTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Applies the transform to a point in homogeneous coordinates.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Max elementwise deviation from another transform.
    pub fn max_deviation(&self, other: &HomTransform) -> f64 {
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }
}

fn orthonormal_drift(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Nearest rotation matrix via polar decomposition (R = U·Vᵀ from the SVD).
fn reorthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd requested U");
    let v_t = svd.v_t.expect("svd requested Vᵀ");
    let mut rot = u * v_t;
    if rot.determinant() < 0.0 {
        // Flip the weakest singular direction to stay in SO(3).
        let mut u = u;
        u.column_mut(2).neg_mut();
        rot = u * v_t;
    }
    rot
}

/// Named calibration transforms, as produced by the calibration procedure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationBundle {
    #[serde(rename = "H_OW")]
    pub h_ow: HomTransform,
    #[serde(rename = "H_RW")]
    pub h_rw: HomTransform,
    #[serde(rename = "H_RC")]
    pub h_rc: HomTransform,
}

impl CalibrationBundle {
    pub fn identity() -> Self {
        Self {
            h_ow: HomTransform::identity(),
            h_rw: HomTransform::identity(),
            h_rc: HomTransform::identity(),
        }
    }
}

/// Four fingertip positions, ordered [thumb, index, middle, ring].
///
/// The flattened form is the 12-vector used as the action representation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingertipSet {
    tips: [[f64; 3]; 4],
}

impl FingertipSet {
    pub const NUM_TIPS: usize = 4;
    pub const FLAT_LEN: usize = 12;

    pub fn new(tips: [[f64; 3]; 4]) -> Self {
        Self { tips }
    }

    pub fn zeros() -> Self {
        Self {
            tips: [[0.0; 3]; 4],
        }
    }

    pub fn from_vectors(tips: [Vector3<f64>; 4]) -> Self {
        Self {
            tips: [tips[0].into(), tips[1].into(), tips[2].into(), tips[3].into()],
        }
    }

    pub fn tip(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.tips[i])
    }

    pub fn tips(&self) -> [Vector3<f64>; 4] {
        [self.tip(0), self.tip(1), self.tip(2), self.tip(3)]
    }

    /// Concatenates the four tips into the 12-vector layout
    /// [x0,y0,z0, x1,y1,z1, x2,y2,z2, x3,y3,z3].
    pub fn flatten(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for (i, tip) in self.tips.iter().enumerate() {
            out[3 * i..3 * i + 3].copy_from_slice(tip);
        }
        out
    }

    pub fn unflatten(flat: &[f64; 12]) -> Self {
        let mut tips = [[0.0; 3]; 4];
        for (i, tip) in tips.iter_mut().enumerate() {
            tip.copy_from_slice(&flat[3 * i..3 * i + 3]);
        }
        Self { tips }
    }

    /// Checks every tip against the ±`half_extent` workspace box.
    pub fn validate_workspace(&self, half_extent: f64) -> Result<(), GeometryError> {
        for (i, tip) in self.tips.iter().enumerate() {
            for &coord in tip {
                if !coord.is_finite() {
                    return Err(GeometryError::NonFinite("fingertip"));
                }
                if coord.abs() > half_extent {
                    return Err(GeometryError::OutsideWorkspace {
                        tip: i,
                        coord,
                        half_extent,
                    });
                }
            }
        }
        Ok(())
    }

    /// Elementwise sum with a flattened 12-vector.
    pub fn add_flat(&self, delta: &[f64; 12]) -> Self {
        let mut flat = self.flatten();
        for (a, d) in flat.iter_mut().zip(delta.iter()) {
            *a += d;
        }
        Self::unflatten(&flat)
    }

    /// Translates every tip by `offset`.
    pub fn translate(&self, offset: &Vector3<f64>) -> Self {
        let mut tips = self.tips;
        for tip in tips.iter_mut() {
            tip[0] += offset.x;
            tip[1] += offset.y;
            tip[2] += offset.z;
        }
        Self { tips }
    }
}

/// Pinhole camera intrinsics (no lens distortion).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }
}

/// Maps human fingertip positions into the robot base frame:
/// a_r = H_RW⁻¹ · H_OW · a_o, applied per tip.
pub fn retarget_fingertips(
    h_ow: &HomTransform,
    h_rw: &HomTransform,
    a_o: &FingertipSet,
) -> FingertipSet {
    let chain = h_rw.invert().compose(h_ow);
    let tips = a_o.tips();
    FingertipSet::from_vectors([
        chain.transform_point(&tips[0]),
        chain.transform_point(&tips[1]),
        chain.transform_point(&tips[2]),
        chain.transform_point(&tips[3]),
    ])
}

/// Reprojects a pixel detection to a 3D offset in the robot frame.
///
/// o_c = depth · ((u−cx)/fx, (v−cy)/fy, 1), o_r = H_RC⁻¹ · o_c, and the
/// returned value is o_r − ô_r.
pub fn spatial_offset(
    object_px: &Vector2<f64>,
    depth: f64,
    intrinsics: &CameraIntrinsics,
    h_rc: &HomTransform,
    o_hat_r: &Vector3<f64>,
) -> Result<Vector3<f64>, GeometryError> {
    if depth <= 0.0 || !depth.is_finite() {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    let o_c = Vector3::new(
        depth * (object_px.x - intrinsics.cx) / intrinsics.fx,
        depth * (object_px.y - intrinsics.cy) / intrinsics.fy,
        depth,
    );
    let o_r = h_rc.invert().transform_point(&o_c);
    Ok(o_r - o_hat_r)
}

/// Translates every tip of every frame by `offset`.
pub fn apply_offset(traj: &[FingertipSet], offset: &Vector3<f64>) -> Vec<FingertipSet> {
    traj.iter().map(|f| f.translate(offset)).collect()
}
