//! Rotation and pose algebra on SO(3) x T(3), plus the planar SO(2) x T(2)
//! and SE(2) variants used by the 2D momentum demo.
//!
//! Camera convention: a [`Pose`] maps camera coordinates to world
//! coordinates. In the camera frame the camera looks down -z with x to the
//! right and y up.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec2 = Vector2<f64>;

/// Rotations are re-orthonormalized after this many multiplicative updates.
pub const RENORMALIZE_EVERY: u64 = 100;

/// Below this angle the exponential map switches to its Taylor expansion.
const SMALL_ANGLE: f64 = 1e-5;
/// Within this distance of pi the logarithm extracts the axis from the
/// symmetric part of the matrix, where the antisymmetric part vanishes.
const NEAR_PI: f64 = 1e-2;

#[rustfmt::skip]
pub fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(
         0.0, -w.z,  w.y,
         w.z,  0.0, -w.x,
        -w.y,  w.x,  0.0,
    )
}

/// Inverse of [`hat`]; reads the antisymmetric part only.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m.m32 - m.m23, m.m13 - m.m31, m.m21 - m.m12) * 0.5
}

/// An element of so(3): direction is the rotation axis, length the angle in
/// radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle(pub Vec3);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vec3::new(x, y, z))
    }

    pub fn zero() -> Self {
        Self(Vec3::zeros())
    }

    pub fn from_axis(axis: &Vec3, angle: f64) -> Self {
        Self(axis.normalize() * angle)
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn vector(&self) -> &Vec3 {
        &self.0
    }
}

/// Orthonormal 3x3 rotation matrix with determinant +1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation3 {
    matrix: Mat3,
}

impl Default for Rotation3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation3 {
    pub fn identity() -> Self {
        Self {
            matrix: Mat3::identity(),
        }
    }

    /// Accepts a matrix that is orthonormal up to `1e-6`, projecting it
    /// back onto SO(3). Matrices already orthonormal to `1e-12` are kept
    /// verbatim so that poses round-trip exactly through text.
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::MalformedPose("rotation has non-finite entries".into()));
        }
        let err = (m * m.transpose() - Mat3::identity()).abs().max();
        if err > 1e-6 || m.determinant() < 0.0 {
            return Err(Error::MalformedPose(format!(
                "matrix is not a proper rotation (orthonormality error {err:.3e})"
            )));
        }
        let r = Self { matrix: m };
        Ok(if err > 1e-12 { r.renormalized() } else { r })
    }

    pub(crate) fn from_matrix_unchecked(matrix: Mat3) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.matrix
    }

    pub fn about_axis(axis: &Vec3, angle: f64) -> Self {
        exp_so3(&AxisAngle::from_axis(axis, angle))
    }

    pub fn about_x(angle: f64) -> Self {
        Self::about_axis(&Vec3::x(), angle)
    }

    pub fn about_y(angle: f64) -> Self {
        Self::about_axis(&Vec3::y(), angle)
    }

    pub fn about_z(angle: f64) -> Self {
        Self::about_axis(&Vec3::z(), angle)
    }

    pub fn inverse(&self) -> Self {
        Self {
            matrix: self.matrix.transpose(),
        }
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Rotation3) -> Self {
        Self {
            matrix: self.matrix * other.matrix,
        }
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.matrix * v
    }

    /// Gram-Schmidt on the rows, keeping the first row's direction.
    pub fn renormalized(&self) -> Self {
        let r0 = self.matrix.row(0).transpose().normalize();
        let r1 = self.matrix.row(1).transpose();
        let r1 = (r1 - r0 * r0.dot(&r1)).normalize();
        let r2 = r0.cross(&r1);
        Self {
            matrix: Mat3::from_rows(&[r0.transpose(), r1.transpose(), r2.transpose()]),
        }
    }

    /// Max absolute entry of `R Rᵀ - I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.matrix * self.matrix.transpose() - Mat3::identity())
            .abs()
            .max()
    }

    pub fn determinant(&self) -> f64 {
        self.matrix.determinant()
    }
}

/// Rodrigues' formula.
pub fn exp_so3(w: &AxisAngle) -> Rotation3 {
    let v = w.0;
    let theta2 = v.norm_squared();
    let k = hat(&v);
    let (a, b) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation3::from_matrix_unchecked(Mat3::identity() + k * a + k * k * b)
}

/// Inverse of [`exp_so3`] with the result's angle in `[0, pi]`.
pub fn log_so3(r: &Rotation3) -> AxisAngle {
    let m = r.matrix();
    let s = vee(m);
    let sin_theta = s.norm();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < SMALL_ANGLE {
        // theta / sin(theta) ~ 1 + theta^2 / 6
        return AxisAngle(s * (1.0 + theta * theta / 6.0));
    }
    if theta < PI - NEAR_PI {
        return AxisAngle(s * (theta / sin_theta));
    }

    // Near pi: (R + Rᵀ)/2 = cos(theta) I + (1 - cos(theta)) a aᵀ.
    let sym = (m + m.transpose()) * 0.5;
    let outer = (sym - Mat3::identity() * cos_theta) / (1.0 - cos_theta);
    let i = (0..3)
        .max_by(|&a, &b| outer[(a, a)].total_cmp(&outer[(b, b)]))
        .unwrap_or(0);
    let mut axis: Vec3 = outer.column(i).into();
    axis /= outer[(i, i)].max(0.0).sqrt().max(f64::MIN_POSITIVE);
    axis.normalize_mut();
    if axis.dot(&s) < 0.0 {
        axis = -axis;
    }
    AxisAngle(axis * theta)
}

/// Geodesic angle between two rotations, in degrees, within `[0, 180]`.
///
/// Equal to `acos((tr(aᵀb) - 1) / 2)`, evaluated through `atan2` so small
/// angles keep full precision.
pub fn geodesic_rotation_error(a: &Rotation3, b: &Rotation3) -> f64 {
    let m = a.matrix().transpose() * b.matrix();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin_theta = vee(&m).norm();
    sin_theta.atan2(cos_theta).to_degrees().clamp(0.0, 180.0)
}

/// Camera-to-world rigid transform as an element of SO(3) x T(3).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation3,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Rotation3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    /// Camera at `eye` looking at `target`, with `up` roughly along camera +y.
    pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Self {
        let back = (eye - target).normalize();
        let mut right = up.cross(&back);
        if right.norm() < 1e-9 {
            right = Vec3::x().cross(&back);
        }
        let right = right.normalize();
        let cam_up = back.cross(&right);
        let m = Mat3::from_columns(&[right, cam_up, back]);
        Self::new(Rotation3::from_matrix_unchecked(m).renormalized(), *eye)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse().apply(&(p - self.translation))
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.matrix().iter().all(|v| v.is_finite())
    }

    /// Row-major rotation followed by the translation.
    pub fn to_array(&self) -> [f64; 12] {
        let m = self.rotation.matrix();
        let t = &self.translation;
        [
            m.m11, m.m12, m.m13, m.m21, m.m22, m.m23, m.m31, m.m32, m.m33, t.x, t.y, t.z,
        ]
    }

    pub fn from_array(a: &[f64; 12]) -> Result<Self> {
        if !a.iter().all(|v| v.is_finite()) {
            return Err(Error::MalformedPose("non-finite value".into()));
        }
        let m = Mat3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]);
        Ok(Self::new(
            Rotation3::from_matrix(m)?,
            Vec3::new(a[9], a[10], a[11]),
        ))
    }

    /// Parses a file of pose records, 12 whitespace-separated numbers each.
    pub fn parse_records(text: &str) -> Result<Vec<Pose>> {
        let values = text
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::MalformedPose(format!("not a number: {tok:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() % 12 != 0 {
            return Err(Error::MalformedPose(format!(
                "{} values is not a multiple of 12",
                values.len()
            )));
        }
        values
            .chunks_exact(12)
            .map(|c| {
                let arr: [f64; 12] = c.try_into().expect("chunk of 12");
                Pose::from_array(&arr)
            })
            .collect()
    }
}

/// One record in the pose text format. `Display` prints the shortest
/// representation that round-trips each value exactly.
impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.to_array();
        for (i, v) in a.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{v:?}")?;
        }
        Ok(())
    }
}

impl FromStr for Pose {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut poses = Pose::parse_records(s)?;
        if poses.len() != 1 {
            return Err(Error::MalformedPose(format!(
                "expected one record, found {}",
                poses.len()
            )));
        }
        Ok(poses.remove(0))
    }
}

pub fn translation_error(a: &Pose, b: &Pose) -> f64 {
    (a.translation - b.translation).norm()
}

/// Start-pose generation: rotate about the camera's own x, then y, then z
/// axes by independent uniform angles in `±rot_range_deg`, then shift along
/// the world axes by independent uniform offsets in `±trans_range`.
pub fn perturb_pose<R: Rng + ?Sized>(
    pose: &Pose,
    rot_range_deg: f64,
    trans_range: f64,
    rng: &mut R,
) -> Pose {
    let rot = rot_range_deg.to_radians();
    let ax = rng.random_range(-rot..=rot);
    let ay = rng.random_range(-rot..=rot);
    let az = rng.random_range(-rot..=rot);
    let t = Vec3::new(
        rng.random_range(-trans_range..=trans_range),
        rng.random_range(-trans_range..=trans_range),
        rng.random_range(-trans_range..=trans_range),
    );
    let mut rotation = pose.rotation;
    if rot > 0.0 {
        rotation = rotation
            .compose(&Rotation3::about_x(ax))
            .compose(&Rotation3::about_y(ay))
            .compose(&Rotation3::about_z(az));
    }
    Pose::new(rotation, pose.translation + t)
}

/// Uniform direction on the unit sphere.
pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Offsets `pose` by a world-frame rotation with uniform axis and angle in
/// `[0, rot_deg]` about the camera origin, and a translation uniform in the
/// `±trans` box.
pub fn jitter_pose<R: Rng + ?Sized>(pose: &Pose, rot_deg: f64, trans: f64, rng: &mut R) -> Pose {
    let axis = random_unit_vector(rng);
    let angle = rng.random_range(0.0..=rot_deg.to_radians());
    let t = Vec3::new(
        rng.random_range(-trans..=trans),
        rng.random_range(-trans..=trans),
        rng.random_range(-trans..=trans),
    );
    let rotation = if angle > 0.0 {
        exp_so3(&AxisAngle(axis * angle)).compose(&pose.rotation)
    } else {
        pose.rotation
    };
    Pose::new(rotation, pose.translation + t)
}

/// Planar rotation stored as its angle.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Rotation2 {
    pub angle: f64,
}

impl Rotation2 {
    pub fn new(angle: f64) -> Self {
        Self { angle }
    }

    pub fn matrix(&self) -> Matrix2<f64> {
        let (s, c) = self.angle.sin_cos();
        Matrix2::new(c, -s, s, c)
    }
}

/// Planar pose: SO(2) x T(2), convertible to a homogeneous 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose2 {
    pub rotation: Rotation2,
    pub translation: Vec2,
}

impl Pose2 {
    pub fn new(angle: f64, x: f64, y: f64) -> Self {
        Self {
            rotation: Rotation2::new(angle),
            translation: Vec2::new(x, y),
        }
    }

    #[rustfmt::skip]
    pub fn to_matrix(&self) -> Mat3 {
        let r = self.rotation.matrix();
        let t = self.translation;
        Mat3::new(
            r.m11, r.m12, t.x,
            r.m21, r.m22, t.y,
            0.0,   0.0,   1.0,
        )
    }

    pub fn from_matrix(m: &Mat3) -> Self {
        Self::new(m.m21.atan2(m.m11), m.m13, m.m23)
    }

    /// SE(2) exponential of the twist `(vx, vy, omega)`.
    pub fn exp_se2(twist: &Vec3) -> Self {
        let (vx, vy, w) = (twist.x, twist.y, twist.z);
        let (a, b) = if w.abs() < SMALL_ANGLE {
            (1.0 - w * w / 6.0, w / 2.0 - w * w * w / 24.0)
        } else {
            (w.sin() / w, (1.0 - w.cos()) / w)
        };
        // V = [[a, -b], [b, a]]
        Self::new(w, a * vx - b * vy, b * vx + a * vy)
    }

    /// `self` after `other`, as homogeneous matrices: `self * other`.
    pub fn compose(&self, other: &Pose2) -> Self {
        Self::from_matrix(&(self.to_matrix() * other.to_matrix()))
    }
}
