use nalgebra::{Matrix3, Matrix4, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `RᵀR = I` and `det R = 1`.
pub const ROTATION_TOL: f64 = 1e-9;

/// Rotation in SO(3) plus a translation in metres. Maps `p` to `R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 4]; 4]", into = "[[f64; 4]; 4]")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    /// Builds a transform from a rotation known to be orthonormal (e.g. an
    /// SVD product). Callers are responsible for the invariant.
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` followed by `translation`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    /// Rotation about the z axis (yaw) followed by `translation`.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self::from_axis_angle(&Vector3::z(), yaw, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Checks the SO(3) invariants within [`ROTATION_TOL`].
    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidRotation("non-finite entry".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if err > ROTATION_TOL {
            return Err(Error::InvalidRotation(format!(
                "RᵀR deviates from identity by {err:e}"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidRotation(format!("det R = {det}")));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vec(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 4×4 homogeneous matrix, the JSON pose interchange format.
    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let m = self.to_matrix();
        let mut rows = [[0.0; 4]; 4];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        rows
    }

    pub fn from_rows(rows: &[[f64; 4]; 4]) -> Result<Self> {
        let last = rows[3];
        if last != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidRotation(format!(
                "last row of homogeneous matrix is {last:?}"
            )));
        }
        let rotation = Matrix3::from_fn(|r, c| rows[r][c]);
        let translation = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        Self::new(rotation, translation)
    }
}

impl TryFrom<[[f64; 4]; 4]> for RigidTransform {
    type Error = Error;

    fn try_from(rows: [[f64; 4]; 4]) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<RigidTransform> for [[f64; 4]; 4] {
    fn from(t: RigidTransform) -> Self {
        t.to_rows()
    }
}

/// Composition `a ∘ b` (b first). Fails if either input violates the
/// rotation invariants.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> Result<RigidTransform> {
    a.validate()?;
    b.validate()?;
    Ok(a.compose(b))
}

pub fn invert(t: &RigidTransform) -> Result<RigidTransform> {
    t.validate()?;
    Ok(t.inverse())
}
