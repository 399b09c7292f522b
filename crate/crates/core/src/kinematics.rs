//! Rigid-body kinematics for visuomotor states.
//!
//! Rotations are plain 3x3 matrices. Poses compose as `a.compose(b)` meaning
//! "apply `b`, then `a`", so `a.compose(b).apply(x) == a.apply(b.apply(x))`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::numerics::linalg::svd3;
use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance used when validating orthonormality and determinant of rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Gaze direction in the head frame. The gaze ray leaves the head along the
/// third column of the head rotation.
pub const HEAD_FORWARD_AXIS: [f64; 3] = [0.0, 0.0, 1.0];

/// Default gaze ray length in meters.
pub const DEFAULT_GAZE_LENGTH: f64 = 1.0;

pub const NUM_JOINTS: usize = 6;

/// Upper-body joints in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Joint {
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
}

impl Joint {
    pub const ALL: [Joint; NUM_JOINTS] = [
        Joint::LeftShoulder,
        Joint::RightShoulder,
        Joint::LeftElbow,
        Joint::RightElbow,
        Joint::LeftWrist,
        Joint::RightWrist,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Joint::LeftShoulder => "left_shoulder",
            Joint::RightShoulder => "right_shoulder",
            Joint::LeftElbow => "left_elbow",
            Joint::RightElbow => "right_elbow",
            Joint::LeftWrist => "left_wrist",
            Joint::RightWrist => "right_wrist",
        }
    }
}

/// Rigid transform with a rotation in SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3Pose {
    position: Vec3,
    rotation: Mat3,
}

impl Default for Se3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3Pose {
    pub fn identity() -> Self {
        Self {
            position: Vec3::zeros(),
            rotation: Mat3::identity(),
        }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// determinant one (within [`ROTATION_TOLERANCE`]) or non-finite entries.
    pub fn new(position: Vec3, rotation: Mat3) -> Result<Self> {
        let pose = Self { position, rotation };
        pose.check()?;
        Ok(pose)
    }

    /// Builds a pose without checking the rotation. Used for masked-invalid
    /// samples in recorded data, which may hold arbitrary numbers.
    pub fn from_parts_unchecked(position: Vec3, rotation: Mat3) -> Self {
        Self { position, rotation }
    }

    pub fn from_rotation(rotation: Rotation3<f64>, position: Vec3) -> Self {
        Self {
            position,
            rotation: *rotation.matrix(),
        }
    }

    pub fn translation(position: Vec3) -> Self {
        Self {
            position,
            rotation: Mat3::identity(),
        }
    }

    pub fn position(&self) -> Vec3 {
        self.position
    }

    pub fn rotation(&self) -> Mat3 {
        self.rotation
    }

    pub fn check(&self) -> Result<()> {
        if !self.position.iter().chain(self.rotation.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("pose has non-finite entries"));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Mat3::identity()).norm();
        if ortho >= ROTATION_TOLERANCE {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (|R^T R - I| = {ortho:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::invalid(format!("rotation determinant {det} != 1")));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.check().is_ok()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Se3Pose) -> Se3Pose {
        Se3Pose {
            position: self.rotation * other.position + self.position,
            rotation: self.rotation * other.rotation,
        }
    }

    pub fn inverse(&self) -> Se3Pose {
        let rt = self.rotation.transpose();
        Se3Pose {
            position: -(rt * self.position),
            rotation: rt,
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.position
    }

    /// Projects the rotation back onto SO(3). Call after long composition
    /// chains or when the rotation came out of a learned model.
    pub fn orthonormalized(&self) -> Se3Pose {
        Se3Pose {
            position: self.position,
            rotation: project_to_so3(&self.rotation),
        }
    }
}

/// One timestep of head pose, gaze endpoint and upper-body joints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisuomotorState {
    pub head: Se3Pose,
    pub gaze: Vec3,
    pub joints: [Vec3; NUM_JOINTS],
}

impl VisuomotorState {
    pub fn joint(&self, joint: Joint) -> Vec3 {
        self.joints[joint.index()]
    }

    pub fn check(&self) -> Result<()> {
        self.head.check()?;
        let finite = self
            .gaze
            .iter()
            .chain(self.joints.iter().flat_map(|j| j.iter()))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("state has non-finite coordinates"));
        }
        if (self.gaze - self.head.position).norm() <= 0.0 {
            return Err(Error::invalid("gaze endpoint coincides with head position"));
        }
        Ok(())
    }

    /// Head position, gaze endpoint, then the six joints.
    pub fn points(&self) -> [Vec3; 2 + NUM_JOINTS] {
        let mut out = [Vec3::zeros(); 2 + NUM_JOINTS];
        out[0] = self.head.position;
        out[1] = self.gaze;
        out[2..].copy_from_slice(&self.joints);
        out
    }

    /// Expresses the state after moving every element by `pose`.
    pub fn transformed(&self, pose: &Se3Pose) -> VisuomotorState {
        VisuomotorState {
            head: pose.compose(&self.head),
            gaze: pose.apply(&self.gaze),
            joints: self.joints.map(|j| pose.apply(&j)),
        }
    }

    pub fn gaze_ray(&self) -> Result<GazeRay> {
        let offset = self.gaze - self.head.position;
        GazeRay::new(self.head.position, offset, offset.norm())
    }
}

/// Ray from the head along the gaze direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeRay {
    origin: Vec3,
    direction: Vec3,
    length: f64,
}

impl GazeRay {
    /// `direction` is normalized; it must be non-zero and `length` positive.
    pub fn new(origin: Vec3, direction: Vec3, length: f64) -> Result<Self> {
        let norm = direction.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::invalid("gaze direction must be non-zero and finite"));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::invalid(format!("gaze length must be positive, got {length}")));
        }
        Ok(Self {
            origin,
            direction: direction / norm,
            length,
        })
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn direction(&self) -> Vec3 {
        self.direction
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn endpoint(&self) -> Vec3 {
        self.origin + self.length * self.direction
    }
}

pub fn head_forward(head: &Se3Pose) -> Vec3 {
    head.rotation * Vec3::from(HEAD_FORWARD_AXIS)
}

/// `p_head + lambda * R_head * forward`.
pub fn gaze_endpoint(head: &Se3Pose, lambda: f64) -> Result<Vec3> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("gaze length must be positive, got {lambda}")));
    }
    Ok(head.position + lambda * head_forward(head))
}

/// Re-expresses a sequence in the head frame of `states[anchor_index]`.
///
/// The anchor head becomes the identity at the origin and every other state
/// keeps its rigid relation to it.
pub fn canonicalize_sequence(
    states: &[VisuomotorState],
    anchor_index: usize,
) -> Result<Vec<VisuomotorState>> {
    let anchor = states.get(anchor_index).ok_or_else(|| {
        Error::invalid(format!(
            "anchor index {anchor_index} out of range for {} states",
            states.len()
        ))
    })?;
    let to_anchor = anchor.head.inverse();
    Ok(states.iter().map(|s| s.transformed(&to_anchor)).collect())
}

/// Intersection of a ray with a plane, if the plane lies in front of the ray.
pub fn ray_plane_intersection(ray: &GazeRay, plane_point: &Vec3, plane_normal: &Vec3) -> Option<Vec3> {
    let denom = ray.direction.dot(plane_normal);
    if denom.abs() < 1e-9 {
        return None;
    }
    let s = (plane_point - ray.origin).dot(plane_normal) / denom;
    (s > 0.0).then(|| ray.origin + s * ray.direction)
}

/// Geodesic distance between two rotations, in degrees, in `[0, 180]`.
pub fn rotation_geodesic_angle(a: &Mat3, b: &Mat3) -> f64 {
    // atan2 of the skew and symmetric parts; equal to
    // acos((tr(a^T b) - 1) / 2) but well conditioned near 0 and 180.
    let m = a.transpose() * b;
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let skew = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let sin = (skew.norm() / 2.0).min(1.0);
    sin.atan2(cos).to_degrees()
}

/// Nearest rotation in the Frobenius sense (polar decomposition).
pub fn project_to_so3(m: &Mat3) -> Mat3 {
    let (u, _, v) = svd3(m);
    let d = (u * v.transpose()).determinant().signum();
    u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v.transpose()
}

/// First two columns, column-major: `[r00, r10, r20, r01, r11, r21]`.
pub fn rotation_to_6d(r: &Mat3) -> [f64; 6] {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

/// Gram-Schmidt on the two columns followed by a cross product. Degenerate
/// inputs fall back to the nearest well-defined frame.
pub fn rotation_from_6d(six: &[f64; 6]) -> Mat3 {
    let a1 = Vec3::new(six[0], six[1], six[2]);
    let a2 = Vec3::new(six[3], six[4], six[5]);
    let b1 = a1.try_normalize(1e-12).unwrap_or_else(Vec3::x);
    let mut b2 = a2 - b1.dot(&a2) * b1;
    if b2.norm() < 1e-12 {
        // a2 parallel to a1: pick any axis orthogonal to b1.
        let helper = if b1.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        b2 = helper - b1.dot(&helper) * b1;
    }
    let b2 = b2.normalize();
    let b3 = b1.cross(&b2);
    Mat3::from_columns(&[b1, b2, b3])
}

/// Shortest-arc spherical interpolation between two rotations.
pub fn slerp(a: &Mat3, b: &Mat3, t: f64) -> Mat3 {
    let qa = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*a));
    let mut qb = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*b));
    if qa.coords.dot(&qb.coords) < 0.0 {
        qb = UnitQuaternion::new_unchecked(-qb.into_inner());
    }
    let rel = qa.inverse() * qb;
    let q = qa * UnitQuaternion::from_scaled_axis(rel.scaled_axis() * t);
    *q.to_rotation_matrix().matrix()
}

/// Rotation about a unit axis by `degrees`.
pub fn axis_angle(axis: &Vec3, degrees: f64) -> Mat3 {
    *Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), degrees.to_radians()).matrix()
}
