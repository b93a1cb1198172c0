//! Closed-form reference solutions used by the test suite.
//!
//! Kept separate from the solver paths on purpose: these are written from
//! the interface/equilibrium conditions directly, so the spectral and
//! network homogenizers can be checked against them rather than themselves.

use crate::orientation::{Matrix6, StiffnessVoigt, Vector6};
use nalgebra::{Matrix3, Vector3};

type Matrix6x3 = nalgebra::SMatrix<f64, 6, 3>;

/// eng-Voigt image of `sym(b ⊗ e3)` as a linear map of b.
fn jump_map() -> Matrix6x3 {
    let mut h = Matrix6x3::zeros();
    h[(2, 2)] = 1.0; // ε33 = b3
    h[(3, 1)] = 1.0; // 2ε23 = b2
    h[(4, 0)] = 1.0; // 2ε13 = b1
    h
}

/// Traction of a Voigt stress across a z-plane: (σ13, σ23, σ33)·sign layout
/// chosen to match the jump map ordering (b1, b2, b3).
fn traction(s: &Vector6) -> Vector3<f64> {
    Vector3::new(s[4], s[3], s[2])
}

/// Two-layer laminate with interface normal along z.
///
/// Phase strains share the in-plane components of the macroscopic strain;
/// the out-of-plane components jump by a rank-one term `sym(b ⊗ e3)` fixed
/// by traction continuity. Inputs and outputs use engineering Voigt.
pub fn laminate_phase_strains(
    c_a: &StiffnessVoigt,
    c_b: &StiffnessVoigt,
    v_a: f64,
    eps_macro: &Vector6,
) -> (Vector6, Vector6) {
    let h = jump_map();
    let v_b = 1.0 - v_a;
    // ε_A = ε̄ + v_b·H b, ε_B = ε̄ − v_a·H b; traction(σ_A) = traction(σ_B)
    let mut k = Matrix3::zeros();
    for col in 0..3 {
        let d = h.column(col).into_owned();
        let dt = traction(&c_a.apply(&d)) * v_b + traction(&c_b.apply(&d)) * v_a;
        k.set_column(col, &dt);
    }
    let t0 = traction(&c_a.apply(eps_macro)) - traction(&c_b.apply(eps_macro));
    let b = k.lu().solve(&(-t0)).expect("laminate traction system is regular");
    let d = h * b;
    (eps_macro + d * v_b, eps_macro - d * v_a)
}

/// Effective stiffness of the two-layer laminate (normal along z).
pub fn laminate_stiffness(c_a: &StiffnessVoigt, c_b: &StiffnessVoigt, v_a: f64) -> StiffnessVoigt {
    let mut c_bar = Matrix6::zeros();
    for k in 0..6 {
        let mut e = Vector6::zeros();
        e[k] = 1.0;
        let (eps_a, eps_b) = laminate_phase_strains(c_a, c_b, v_a, &e);
        let avg = c_a.apply(&eps_a) * v_a + c_b.apply(&eps_b) * (1.0 - v_a);
        c_bar.set_column(k, &avg);
    }
    StiffnessVoigt(c_bar).symmetrized()
}
