//! Rotation algebra and stiffness-tensor transforms for cubic crystals.
//!
//! Quaternions are stored canonical-sign (`w ≥ 0`, ties broken on the first
//! nonzero vector component) so the q/−q double cover never leaks into
//! downstream losses. Fundamental-zone reduction picks, among the 24
//! right-multiplied cubic equivalents, the one with the largest scalar
//! component (lexicographic tie-break on `(w, x, y, z)`).

use nalgebra::{Matrix3, SMatrix, Vector3};
use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 6×6 matrices in Voigt order 11, 22, 33, 23, 13, 12.
pub type Matrix6 = SMatrix<f64, 6, 6>;
/// Voigt 6-vector (engineering shear convention for strains).
pub type Vector6 = SMatrix<f64, 6, 1>;

/// Tensor index pairs backing each Voigt slot.
pub const VOIGT_PAIRS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)];

/// Voigt slot for a (symmetric) tensor index pair.
#[inline]
pub fn voigt_index(i: usize, j: usize) -> usize {
    match (i.min(j), i.max(j)) {
        (0, 0) => 0,
        (1, 1) => 1,
        (2, 2) => 2,
        (1, 2) => 3,
        (0, 2) => 4,
        (0, 1) => 5,
        _ => unreachable!("tensor index out of range"),
    }
}

#[derive(Debug, Error)]
pub enum OrientationError {
    #[error("quaternion norm deviates from 1 by {deviation:.3e} (limit {limit:.1e})")]
    NotUnit { deviation: f64, limit: f64 },
}

/// Unit quaternion `(w, x, y, z)` with canonical sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes and sign-canonicalizes the components.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self { w: w / n, x: x / n, y: y / n, z: z / n }.canonicalized()
    }

    /// Accepts only inputs already unit-norm to `tol`; canonicalizes the sign.
    pub fn try_new(w: f64, x: f64, y: f64, z: f64, tol: f64) -> Result<Self, OrientationError> {
        let dev = (w * w + x * x + y * y + z * z).sqrt() - 1.0;
        if dev.abs() > tol {
            return Err(OrientationError::NotUnit { deviation: dev.abs(), limit: tol });
        }
        Ok(Self { w, x, y, z }.canonicalized())
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize() * (angle / 2.0).sin();
        Self::new((angle / 2.0).cos(), a.x, a.y, a.z)
    }

    fn canonicalized(self) -> Self {
        let Self { w, x, y, z } = self;
        let flip = if w != 0.0 {
            w < 0.0
        } else if x != 0.0 {
            x < 0.0
        } else if y != 0.0 {
            y < 0.0
        } else {
            z < 0.0
        };
        if flip {
            Self { w: -w, x: -x, y: -y, z: -z }
        } else {
            self
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }.canonicalized()
    }

    /// Hamilton product; the result is sign-canonicalized.
    pub fn mul(&self, rhs: &UnitQuaternion) -> UnitQuaternion {
        let (w1, x1, y1, z1) = (self.w, self.x, self.y, self.z);
        let (w2, x2, y2, z2) = (rhs.w, rhs.x, rhs.y, rhs.z);
        UnitQuaternion {
            w: w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            x: w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            y: w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            z: w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        }
        .canonicalized()
    }

    /// Raw Hamilton product without sign canonicalization.
    fn mul_raw(&self, rhs: &UnitQuaternion) -> UnitQuaternion {
        let (w1, x1, y1, z1) = (self.w, self.x, self.y, self.z);
        let (w2, x2, y2, z2) = (rhs.w, rhs.x, rhs.y, rhs.z);
        UnitQuaternion {
            w: w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            x: w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            y: w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            z: w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        }
    }

    pub fn dot(&self, rhs: &UnitQuaternion) -> f64 {
        self.w * rhs.w + self.x * rhs.x + self.y * rhs.y + self.z * rhs.z
    }

    /// Rotation angle in radians, in [0, π].
    ///
    /// atan2-based: accurate near zero, where acos loses half the digits.
    pub fn angle(&self) -> f64 {
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * v.atan2(self.w.abs())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

/// Proper rotation matrix (RᵀR = I, det = +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(pub Matrix3<f64>);

impl RotationMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Orthonormality and determinant deviation, for invariant checks.
    pub fn defect(&self) -> f64 {
        let r = &self.0;
        let ortho = (r.transpose() * r - Matrix3::identity()).norm();
        let det = (r.determinant() - 1.0).abs();
        ortho.max(det)
    }
}

/// Bunge Z–X–Z Euler angles in radians: `R = Rz(α)·Rx(β)·Rz(γ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerBunge {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl EulerBunge {
    /// Wraps arbitrary angles into α, γ ∈ [0, 2π), β ∈ [0, π] without
    /// changing the rotation (β > π is folded via Rz(π) conjugation).
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        let tau = std::f64::consts::TAU;
        let mut a = alpha.rem_euclid(tau);
        let mut b = beta.rem_euclid(tau);
        let mut g = gamma.rem_euclid(tau);
        if b > std::f64::consts::PI {
            // Rz(a)·Rx(b)·Rz(g) = Rz(a+π)·Rx(2π−b)·Rz(g−π)
            b = tau - b;
            a = (a + std::f64::consts::PI).rem_euclid(tau);
            g = (g - std::f64::consts::PI).rem_euclid(tau);
        }
        Self { alpha: a, beta: b, gamma: g }
    }
}

/// Converts a unit quaternion to its rotation matrix.
///
/// Errors if the norm deviates from 1 by more than 1e-9.
pub fn quat_to_rotmat(q: &UnitQuaternion) -> Result<RotationMatrix, OrientationError> {
    let dev = (q.norm() - 1.0).abs();
    if dev > 1e-9 {
        return Err(OrientationError::NotUnit { deviation: dev, limit: 1e-9 });
    }
    Ok(RotationMatrix(rotmat_unchecked(q)))
}

pub(crate) fn rotmat_unchecked(q: &UnitQuaternion) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Quaternion for the Bunge rotation `Rz(α)·Rx(β)·Rz(γ)`.
pub fn euler_to_quat(e: &EulerBunge) -> UnitQuaternion {
    let e = EulerBunge::new(e.alpha, e.beta, e.gamma);
    let qz_a = UnitQuaternion { w: (e.alpha / 2.0).cos(), x: 0.0, y: 0.0, z: (e.alpha / 2.0).sin() };
    let qx_b = UnitQuaternion { w: (e.beta / 2.0).cos(), x: (e.beta / 2.0).sin(), y: 0.0, z: 0.0 };
    let qz_g = UnitQuaternion { w: (e.gamma / 2.0).cos(), x: 0.0, y: 0.0, z: (e.gamma / 2.0).sin() };
    qz_a.mul_raw(&qx_b).mul_raw(&qz_g).canonicalized()
}

/// The 24 rotational symmetry operators of the cubic lattice, as quaternions.
pub static CUBIC_SYMMETRY: Lazy<[UnitQuaternion; 24]> = Lazy::new(|| {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut ops = Vec::with_capacity(24);
    // identity
    ops.push([1.0, 0.0, 0.0, 0.0]);
    // 90/180/270 about each cube axis
    for axis in 0..3 {
        for &(w, v) in &[(h, h), (0.0, 1.0), (h, -h)] {
            let mut q = [w, 0.0, 0.0, 0.0];
            q[1 + axis] = v;
            ops.push(q);
        }
    }
    // ±120 about the four body diagonals
    for sx in [-0.5, 0.5] {
        for sy in [-0.5, 0.5] {
            for sz in [-0.5, 0.5] {
                ops.push([0.5, sx, sy, sz]);
            }
        }
    }
    // 180 about the six face diagonals
    for (a, b) in [(1, 2), (1, 3), (2, 3)] {
        for s in [h, -h] {
            let mut q = [0.0, 0.0, 0.0, 0.0];
            q[a] = h;
            q[b] = s;
            ops.push(q);
        }
    }
    let ops: Vec<UnitQuaternion> = ops
        .into_iter()
        .map(|[w, x, y, z]| UnitQuaternion { w, x, y, z }.canonicalized())
        .collect();
    ops.try_into().unwrap()
});

/// Reduces `q` to its cubic fundamental-zone representative.
///
/// Returns the `q·s` (s over the 24 cubic operators) with the largest scalar
/// component after sign canonicalization; exact ties are broken by taking the
/// lexicographically largest `(w, x, y, z)`.
pub fn reduce_to_fz(q: &UnitQuaternion) -> UnitQuaternion {
    let mut best = *q;
    let mut have = false;
    for s in CUBIC_SYMMETRY.iter() {
        let c = q.mul(s);
        if !have || lex_greater(&c, &best) {
            best = c;
            have = true;
        }
    }
    best
}

fn lex_greater(a: &UnitQuaternion, b: &UnitQuaternion) -> bool {
    let aa = a.as_array();
    let bb = b.as_array();
    for k in 0..4 {
        if aa[k] != bb[k] {
            return aa[k] > bb[k];
        }
    }
    false
}

/// Minimum rotation angle between `q1` and `q2` over cubic equivalents, radians.
///
/// For two cubic crystals the double symmetry sweep collapses to a single one:
/// angle(s₁·Δ·s₂) = angle(Δ·s₂·s₁), so 24 products suffice.
pub fn misorientation_angle(q1: &UnitQuaternion, q2: &UnitQuaternion) -> f64 {
    let delta = q1.conjugate().mul(q2);
    let mut best = std::f64::consts::PI;
    for s in CUBIC_SYMMETRY.iter() {
        let a = delta.mul(s).angle();
        if a < best {
            best = a;
        }
    }
    best
}

/// Symmetric 6×6 stiffness in Voigt order 11, 22, 33, 23, 13, 12 (GPa).
///
/// The matrix maps engineering strain vectors (doubled shears) to stress
/// vectors, so its entries equal the tensor components C_ijkl directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessVoigt(pub Matrix6);

impl StiffnessVoigt {
    pub fn zero() -> Self {
        Self(Matrix6::zeros())
    }

    /// Cubic crystal stiffness from its three independent constants.
    pub fn cubic(c11: f64, c12: f64, c44: f64) -> Self {
        let mut m = Matrix6::zeros();
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = if i == j { c11 } else { c12 };
            }
            m[(i + 3, i + 3)] = c44;
        }
        Self(m)
    }

    /// Isotropic stiffness from Lamé parameters.
    pub fn isotropic(lambda: f64, mu: f64) -> Self {
        Self::cubic(lambda + 2.0 * mu, lambda, mu)
    }

    pub fn matrix(&self) -> &Matrix6 {
        &self.0
    }

    pub fn symmetry_defect(&self) -> f64 {
        (self.0 - self.0.transpose()).norm()
    }

    pub fn symmetrized(&self) -> Self {
        Self((self.0 + self.0.transpose()) * 0.5)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// Full tensor component C_ijkl.
    #[inline]
    pub fn tensor(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.0[(voigt_index(i, j), voigt_index(k, l))]
    }

    /// Stress response to an engineering-Voigt strain vector.
    pub fn apply(&self, eng_strain: &Vector6) -> Vector6 {
        self.0 * eng_strain
    }

    /// Kelvin (Mandel) form `d·C·d` with `d = diag(1,1,1,√2,√2,√2)`.
    ///
    /// Its eigenvalues are the Kelvin moduli of the elasticity tensor, which
    /// are invariant under rotation (the engineering-Voigt matrix entries are
    /// not similarity-transformed, so its raw eigenvalues are not).
    pub fn kelvin_matrix(&self) -> Matrix6 {
        let s = std::f64::consts::SQRT_2;
        let mut out = self.0;
        for i in 0..6 {
            for j in 0..6 {
                let f = if i >= 3 { s } else { 1.0 } * if j >= 3 { s } else { 1.0 };
                out[(i, j)] *= f;
            }
        }
        out
    }

    /// Isotropic projection (κ, μ) of the stiffness.
    pub fn isotropic_projection(&self) -> (f64, f64) {
        let c = &self.0;
        let mut c_iijj = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                c_iijj += c[(i, j)];
            }
        }
        let c_ijij = c[(0, 0)] + c[(1, 1)] + c[(2, 2)] + 2.0 * (c[(3, 3)] + c[(4, 4)] + c[(5, 5)]);
        let kappa = c_iijj / 9.0;
        let mu = (3.0 * c_ijij - c_iijj) / 30.0;
        (kappa, mu)
    }
}

/// Bond stress-transformation matrix for a rotation `r`: σ'_V = M σ_V.
///
/// Stiffness rotates as C' = M C Mᵀ under the engineering-Voigt convention.
pub fn bond_stress_matrix(r: &Matrix3<f64>) -> Matrix6 {
    let mut m = Matrix6::zeros();
    for (row, &(i, j)) in VOIGT_PAIRS.iter().enumerate() {
        for (col, &(k, l)) in VOIGT_PAIRS.iter().enumerate() {
            let mut v = r[(i, k)] * r[(j, l)];
            if k != l {
                v += r[(i, l)] * r[(j, k)];
            }
            m[(row, col)] = v;
        }
    }
    m
}

/// Rotates a stiffness: Voigt form of C'_ijkl = R_ia R_jb R_kc R_ld C_abcd.
pub fn rotate_stiffness(c: &StiffnessVoigt, r: &RotationMatrix) -> StiffnessVoigt {
    let m = bond_stress_matrix(&r.0);
    StiffnessVoigt(m * c.0 * m.transpose())
}
