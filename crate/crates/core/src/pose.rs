//! Quaternion and pose arithmetic.
//!
//! Quaternions are stored as `(w, x, y, z)` with the scalar part first, the
//! same order used by every file format in this crate. Orientations are kept
//! unit-norm and on the `w >= 0` hemisphere so that every rotation has exactly
//! one stored representation.

use std::ops::{Mul, Neg};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero when normalizing.
pub const MIN_QUATERNION_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn dot(self, other: Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_unit(self, tol: f64) -> bool {
        (self.dot(self) - 1.0).abs() <= tol
    }

    /// Scales to unit length. Fails when the norm is at most
    /// [`MIN_QUATERNION_NORM`].
    pub fn normalize(self) -> Result<Quaternion> {
        let norm = self.norm();
        if !(norm > MIN_QUATERNION_NORM) {
            return Err(Error::ZeroNormQuaternion { norm });
        }
        Ok(Quaternion::new(
            self.w / norm,
            self.x / norm,
            self.y / norm,
            self.z / norm,
        ))
    }

    pub fn conjugate(self) -> Quaternion {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Picks the representative with `w > 0`. When `w` is exactly zero the
    /// first nonzero vector component decides the sign.
    pub fn canonicalize(self) -> Quaternion {
        let negate = if self.w != 0.0 {
            self.w < 0.0
        } else {
            [self.x, self.y, self.z]
                .into_iter()
                .find(|c| *c != 0.0)
                .is_some_and(|c| c < 0.0)
        };
        if negate {
            -self
        } else {
            self
        }
    }

    /// Row-major 3x3 rotation matrix of a unit quaternion.
    pub fn to_rotation_matrix(self) -> [[f64; 3]; 3] {
        let Quaternion { w, x, y, z } = self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Converts a proper rotation matrix to a canonical unit quaternion.
    ///
    /// Uses the largest of the four diagonal combinations as pivot, which
    /// keeps the division well conditioned for every rotation angle.
    pub fn from_rotation_matrix(m: &[[f64; 3]; 3]) -> Quaternion {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > m[0][0].max(m[1][1]).max(m[2][2]) {
            let s = (1.0 + trace).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] >= m[1][1] && m[0][0] >= m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] >= m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quaternion::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        };
        // The pivot choice guarantees a norm near one.
        let n = q.norm();
        Quaternion::new(q.w / n, q.x / n, q.y / n, q.z / n).canonicalize()
    }

    /// Unit quaternion for a rotation of `angle` radians about `axis`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Result<Quaternion> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if !(n > MIN_QUATERNION_NORM) {
            return Err(Error::ZeroNormQuaternion { norm: n });
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Ok(Quaternion::new(
            c,
            s * axis[0] / n,
            s * axis[1] / n,
            s * axis[2] / n,
        ))
    }
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;

    fn neg(self) -> Quaternion {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// Hamilton product.
impl Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

/// World-frame position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const ORIGIN: Position = Position {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

impl std::ops::Sub for Position {
    type Output = Position;

    fn sub(self, o: Position) -> Position {
        Position::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Add for Position {
    type Output = Position;

    fn add(self, o: Position) -> Position {
        Position::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

/// Camera pose: position plus a unit, canonicalized orientation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub position: Position,
    pub orientation: Quaternion,
}

impl Pose {
    /// Builds a pose, normalizing and canonicalizing the orientation.
    pub fn new(position: Position, orientation: Quaternion) -> Result<Pose> {
        Ok(Pose {
            position,
            orientation: orientation.normalize()?.canonicalize(),
        })
    }

    pub fn identity() -> Pose {
        Pose::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub position: Position,
    pub orientation: Quaternion,
}

/// Relative pose of `pose` with respect to `reference`.
///
/// The position part is the plain world-frame difference `x - x_ref`; it is
/// not rotated into the reference camera frame. The orientation part is
/// `conj(q_ref) * q`, canonicalized.
pub fn relative_pose(pose: &Pose, reference: &Pose) -> RelativePose {
    RelativePose {
        position: pose.position - reference.position,
        orientation: (reference.orientation.conjugate() * pose.orientation).canonicalize(),
    }
}

/// Geodesic angle between two orientations, in degrees within `[0, 180]`.
pub fn angular_error_deg(a: Quaternion, b: Quaternion) -> f64 {
    // Equal to 2 acos|a.b| for unit inputs, without its loss of precision near 1.
    let b = if a.dot(b) < 0.0 { -b } else { b };
    let d = [a.w - b.w, a.x - b.x, a.y - b.y, a.z - b.z];
    let s = [a.w + b.w, a.x + b.x, a.y + b.y, a.z + b.z];
    let norm = |v: [f64; 4]| v.iter().map(|c| c * c).sum::<f64>().sqrt();
    4.0 * norm(d).atan2(norm(s)).to_degrees()
}

pub fn position_error_m(a: Position, b: Position) -> f64 {
    (a - b).norm()
}
