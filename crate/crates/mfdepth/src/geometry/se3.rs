//! Minimal SE(3) arithmetic on plain fixed-size arrays.

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Rodrigues formula with a Taylor switch near the origin.
pub fn rotation_from_axis_angle(w: &Vec3) -> Mat3 {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-4 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let wx = skew(w);
    let wx2 = mat_mul(&wx, &wx);
    let mut r = IDENTITY3;
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * wx[i][j] + b * wx2[i][j];
        }
    }
    r
}

pub fn skew(w: &Vec3) -> Mat3 {
    [
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ]
}

/// Rotation angle in radians recovered from the trace.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let tr = r[0][0] + r[1][1] + r[2][2];
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Rigid body motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: IDENTITY3,
            translation: [0.0; 3],
        }
    }

    /// Validates orthonormality and determinant to 1e-6.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let rt_r = mat_mul(&transpose(&rotation), &rotation);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rt_r[i][j] - expect).abs() > 1e-6 {
                    return Err(Error::param(
                        "rotation",
                        format!("not orthonormal: (R^T R)[{i}][{j}] = {}", rt_r[i][j]),
                    ));
                }
            }
        }
        let d = det(&rotation);
        if (d - 1.0).abs() > 1e-6 {
            return Err(Error::param("rotation", format!("det = {d}, expected 1")));
        }
        for v in translation {
            if !v.is_finite() {
                return Err(Error::param("translation", "non-finite entry"));
            }
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        RigidTransform {
            rotation: rotation_from_axis_angle(&axis_angle),
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        RigidTransform {
            rotation: IDENTITY3,
            translation,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// `self.compose(other)` applies `other` first: `(self * other)(x) = self(other(x))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let rotation = mat_mul(&self.rotation, &other.rotation);
        let rt = mat_vec(&self.rotation, &other.translation);
        RigidTransform {
            rotation,
            translation: [
                rt[0] + self.translation[0],
                rt[1] + self.translation[1],
                rt[2] + self.translation[2],
            ],
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, &self.translation);
        RigidTransform {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    pub fn translation_norm(&self) -> f64 {
        let t = &self.translation;
        (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt()
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        self.rotation_angle() <= tol && self.translation_norm() <= tol
    }
}
