//! Rigid-body math: Euler angles, poses in SE(3), and trajectory chaining.
//!
//! Rotations use the intrinsic Z-Y-X order, `R = Rz(z) * Ry(y) * Rx(x)`, with
//! angles in degrees. Translations are millimetres. A pose maps points from a
//! frame's image coordinates (x lateral, y axial, z elevational, origin at the
//! image centre) into the parent coordinate system.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tag written into every file that stores angles.
pub const EULER_CONVENTION: &str = "intrinsic-ZYX;R=Rz*Ry*Rx;degrees";

/// Tolerance on `|RᵀR - I|_F` accepted by [`matrix_to_euler`].
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Distance (degrees) from ±90° of the middle angle below which the
/// decomposition is declared singular.
pub const GIMBAL_THRESHOLD_DEG: f64 = 1e-6;

#[inline]
pub fn deg2rad(d: f64) -> f64 {
    d * PI / 180.0
}

#[inline]
pub fn rad2deg(r: f64) -> f64 {
    r * 180.0 / PI
}

/// Wraps an angle in degrees into (-180, 180].
pub fn wrap_degrees(a: f64) -> f64 {
    let r = a.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Three rotation angles `(x, y, z)` in degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EulerAngles(pub Vec3);

impl EulerAngles {
    pub const ZERO: Self = EulerAngles(Vec3::new(0.0, 0.0, 0.0));

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        EulerAngles(Vec3::new(x, y, z))
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }

    /// Same rotation with each component wrapped into (-180, 180].
    pub fn wrapped(&self) -> Self {
        EulerAngles(self.0.map(wrap_degrees))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Result of [`matrix_to_euler`]. `gimbal_lock` is set when the middle angle
/// sits at ±90°; the x angle is then pinned to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EulerDecomposition {
    pub angles: EulerAngles,
    pub gimbal_lock: bool,
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Rotation matrix of an Euler triple.
pub fn euler_to_matrix(phi: &EulerAngles) -> Mat3 {
    let r = phi.0.map(deg2rad);
    rot_z(r.z) * rot_y(r.y) * rot_x(r.x)
}

/// Partial derivatives of [`euler_to_matrix`] with respect to the x, y and z
/// angles, per degree.
pub fn euler_to_matrix_derivatives(phi: &EulerAngles) -> [Mat3; 3] {
    let r = phi.0.map(deg2rad);
    let k = PI / 180.0;
    let (rx, ry, rz) = (rot_x(r.x), rot_y(r.y), rot_z(r.z));
    [
        rz * ry * drot_x(r.x) * k,
        rz * drot_y(r.y) * rx * k,
        drot_z(r.z) * ry * rx * k,
    ]
}

/// Frobenius norm of `RᵀR - I`.
pub fn orthonormality_residual(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).norm()
}

/// Inverse of [`euler_to_matrix`] on the canonical range.
pub fn matrix_to_euler(r: &Mat3) -> Result<EulerDecomposition> {
    let residual = orthonormality_residual(r);
    if !(residual <= ROTATION_TOLERANCE) || r.determinant() <= 0.0 {
        return Err(Error::NotARotation { residual });
    }
    let cy = r[(0, 0)].hypot(r[(1, 0)]);
    let y = rad2deg((-r[(2, 0)]).atan2(cy));
    if 90.0 - y.abs() < GIMBAL_THRESHOLD_DEG {
        // Only z - x (or z + x) is observable here; x is pinned to zero.
        let z = rad2deg((-r[(0, 1)]).atan2(r[(1, 1)]));
        return Ok(EulerDecomposition {
            angles: EulerAngles::new(0.0, y, z).wrapped(),
            gimbal_lock: true,
        });
    }
    let x = rad2deg(r[(2, 1)].atan2(r[(2, 2)]));
    let z = rad2deg(r[(1, 0)].atan2(r[(0, 0)]));
    Ok(EulerDecomposition {
        angles: EulerAngles::new(x, y, z).wrapped(),
        gimbal_lock: false,
    })
}

/// Angle in degrees of the relative rotation `a * bᵀ`.
pub fn geodesic_angle_deg(a: &Mat3, b: &Mat3) -> f64 {
    let rel = a * b.transpose();
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // acos is ill-conditioned near 0; the skew part keeps small angles exact.
    let skew = Vec3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = skew.norm() / 2.0;
    rad2deg(sin.atan2(cos))
}

/// A rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Pose::new(Mat3::identity(), Vec3::new(x, y, z))
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Largest absolute element-wise difference between two poses.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let dr = (self.rotation - other.rotation).amax();
        let dt = (self.translation - other.translation).amax();
        dr.max(dt)
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(p: &Pose) -> Pose {
    p.inverse()
}

/// One relative motion step: translation (mm) and rotation (degrees).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MotionParams {
    pub t: Vec3,
    pub phi: EulerAngles,
}

impl MotionParams {
    pub fn new(t: Vec3, phi: EulerAngles) -> Self {
        MotionParams { t, phi }
    }

    pub fn to_pose(&self) -> Pose {
        Pose::new(euler_to_matrix(&self.phi), self.t)
    }

    /// Decomposes a pose. Panics only if the pose's rotation is not a rotation,
    /// which valid poses rule out.
    pub fn from_pose(p: &Pose) -> MotionParams {
        let phi = matrix_to_euler(&p.rotation)
            .expect("pose rotation must be orthonormal")
            .angles;
        MotionParams {
            t: p.translation,
            phi,
        }
    }

    /// `[tx, ty, tz, φx, φy, φz]`.
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.t.x,
            self.t.y,
            self.t.z,
            self.phi.0.x,
            self.phi.0.y,
            self.phi.0.z,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        MotionParams {
            t: Vec3::new(a[0], a[1], a[2]),
            phi: EulerAngles::new(a[3], a[4], a[5]),
        }
    }
}

/// Absolute poses of every frame of a scan.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Self {
        Trajectory { poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Frame centre positions.
    pub fn centroids(&self) -> Vec<Vec3> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    /// Relative motion between consecutive frames.
    pub fn relative_params(&self) -> Vec<MotionParams> {
        self.poses
            .windows(2)
            .map(|w| MotionParams::from_pose(&w[0].inverse().compose(&w[1])))
            .collect()
    }

    /// Applies `g` on the left of every pose.
    pub fn transformed(&self, g: &Pose) -> Trajectory {
        Trajectory::new(self.poses.iter().map(|p| g.compose(p)).collect())
    }

    /// Total centroid path length in mm.
    pub fn path_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| (w[1].translation - w[0].translation).norm())
            .sum()
    }
}

/// Accumulates relative steps into absolute poses starting at `start`.
pub fn chain_trajectory(start: &Pose, steps: &[MotionParams]) -> Trajectory {
    let mut poses = Vec::with_capacity(steps.len() + 1);
    poses.push(*start);
    let mut current = *start;
    for step in steps {
        current = current.compose(&step.to_pose());
        poses.push(current);
    }
    Trajectory::new(poses)
}
