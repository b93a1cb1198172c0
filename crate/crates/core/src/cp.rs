//! Phenomenological FCC crystal plasticity: one material node's stress update
//! and consistent tangent.
//!
//! Multiplicative split F = F_e·F_p with the plastic velocity gradient summed
//! over the 12 {111}⟨110⟩ systems. The update is backward Euler with an
//! exponential map, solved by a monolithic Newton on the slip and resistance
//! increments with an analytic Jacobian; the tangent dP/dF comes from
//! implicit differentiation of the converged residual (never differencing).
//!
//! Frames: all per-leaf quantities (elastic stiffness, Schmid dyads) are
//! rotated from the crystal frame into the reference frame once, in
//! [`CpLocal::new`]. Units: stresses and stiffness in GPa, slip resistances
//! in MPa as printed on material cards; the two meet only in the flow and
//! hardening rules, where resolved shear converts via `GPA_TO_MPA`.

use crate::orientation::{bond_stress_matrix, Matrix6, StiffnessVoigt, Vector6};
use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const GPA_TO_MPA: f64 = 1.0e3;
pub const N_SLIP: usize = 12;

type Matrix9 = SMatrix<f64, 9, 9>;
type Matrix24 = SMatrix<f64, 24, 24>;
type Vector24 = SMatrix<f64, 24, 1>;

#[derive(Debug, Error)]
pub enum CpError {
    #[error("invalid material parameters: {0}")]
    InvalidParams(String),
    #[error("local Newton failed after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("deformation gradient is not orientation-preserving (det {0:.3e})")]
    BadDeformation(f64),
}

/// Material card: phenomenological power-law slip with Voce-like hardening.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CpParams {
    pub n_slip: usize,
    /// Reference hardening modulus, GPa.
    pub h0_gpa: f64,
    /// Saturation resistance, MPa.
    pub xi_inf_mpa: f64,
    /// Initial resistance, MPa.
    pub xi0_mpa: f64,
    /// Rate exponent.
    pub n_exp: f64,
    /// Hardening exponent.
    pub a_exp: f64,
    /// Reference slip rate, 1/s.
    pub gamma_dot0: f64,
    /// Additional interaction prefactor (printed 0 for AA6022-T4).
    pub h_int: f64,
    /// Interaction coefficients [self, coplanar, collinear, Hirth, glissile,
    /// Lomer, 7th]; the 7th is unused by the octahedral 12×12 block.
    pub h_coeffs: [f64; 7],
    pub c11_gpa: f64,
    pub c12_gpa: f64,
    pub c44_gpa: f64,
}

impl CpParams {
    /// AA6022-T4 aluminum alloy card.
    pub fn aa6022() -> Self {
        CpParams {
            n_slip: N_SLIP,
            h0_gpa: 1.02,
            xi_inf_mpa: 266.0,
            xi0_mpa: 76.0,
            n_exp: 20.0,
            a_exp: 3.7,
            gamma_dot0: 0.001,
            h_int: 0.0,
            h_coeffs: [1.0, 1.0, 5.123, 0.574, 1.123, 1.123, 1.0],
            c11_gpa: 107.3,
            c12_gpa: 60.8,
            c44_gpa: 28.3,
        }
    }

    pub fn validate(&self) -> Result<(), CpError> {
        if self.n_slip != N_SLIP {
            return Err(CpError::InvalidParams(format!("n_slip must be 12, got {}", self.n_slip)));
        }
        if self.xi0_mpa <= 0.0 || self.xi_inf_mpa <= 0.0 || self.gamma_dot0 <= 0.0 {
            return Err(CpError::InvalidParams("resistances and rate must be positive".into()));
        }
        if self.n_exp < 1.0 {
            return Err(CpError::InvalidParams("rate exponent must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn elastic(&self) -> StiffnessVoigt {
        StiffnessVoigt::cubic(self.c11_gpa, self.c12_gpa, self.c44_gpa)
    }

    /// 12×12 latent-hardening matrix from the geometric interaction classes.
    pub fn latent_matrix(&self) -> SMatrix<f64, 12, 12> {
        let classes = interaction_classes();
        SMatrix::<f64, 12, 12>::from_fn(|a, b| self.h_coeffs[classes[a][b]])
    }
}

/// The 12 {111}⟨110⟩ slip systems as unit (direction, normal) pairs.
pub fn fcc_slip_systems() -> [(Vector3<f64>, Vector3<f64>); 12] {
    let raw: [([i32; 3], [i32; 3]); 12] = [
        ([0, 1, -1], [1, 1, 1]),
        ([1, 0, -1], [1, 1, 1]),
        ([1, -1, 0], [1, 1, 1]),
        ([0, 1, -1], [-1, 1, 1]),
        ([1, 0, 1], [-1, 1, 1]),
        ([1, 1, 0], [-1, 1, 1]),
        ([0, 1, 1], [1, -1, 1]),
        ([1, 0, -1], [1, -1, 1]),
        ([1, 1, 0], [1, -1, 1]),
        ([0, 1, 1], [1, 1, -1]),
        ([1, 0, 1], [1, 1, -1]),
        ([1, -1, 0], [1, 1, -1]),
    ];
    raw.map(|(d, n)| {
        let d = Vector3::new(d[0] as f64, d[1] as f64, d[2] as f64).normalize();
        let n = Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64).normalize();
        (d, n)
    })
}

/// Geometric classification of slip-system pairs.
///
/// 0 self, 1 coplanar, 2 collinear, 3 Hirth lock (perpendicular directions),
/// 4 glissile junction (junction Burgers glides in one of the two planes),
/// 5 Lomer lock. Each row carries {1, 2, 1, 2, 4, 2} of the classes.
fn interaction_classes() -> [[usize; 12]; 12] {
    let raw: [([i32; 3], [i32; 3]); 12] = [
        ([0, 1, -1], [1, 1, 1]),
        ([1, 0, -1], [1, 1, 1]),
        ([1, -1, 0], [1, 1, 1]),
        ([0, 1, -1], [-1, 1, 1]),
        ([1, 0, 1], [-1, 1, 1]),
        ([1, 1, 0], [-1, 1, 1]),
        ([0, 1, 1], [1, -1, 1]),
        ([1, 0, -1], [1, -1, 1]),
        ([1, 1, 0], [1, -1, 1]),
        ([0, 1, 1], [1, 1, -1]),
        ([1, 0, 1], [1, 1, -1]),
        ([1, -1, 0], [1, 1, -1]),
    ];
    let dot = |a: [i32; 3], b: [i32; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let mut out = [[0usize; 12]; 12];
    for a in 0..12 {
        for b in 0..12 {
            let (da, na) = raw[a];
            let (db, nb) = raw[b];
            out[a][b] = if a == b {
                0
            } else if dot(na, nb).abs() == 3 {
                1 // same plane
            } else if dot(da, db).abs() == 2 {
                2 // same Burgers vector
            } else if dot(da, db) == 0 {
                3 // Hirth lock
            } else {
                // junction Burgers vector of ⟨110⟩ type
                let s = if dot(da, db) > 0 { -1 } else { 1 };
                let j = [da[0] + s * db[0], da[1] + s * db[1], da[2] + s * db[2]];
                if dot(j, na) == 0 || dot(j, nb) == 0 {
                    4 // glissile
                } else {
                    5 // Lomer lock
                }
            };
        }
    }
    out
}

/// Per-node history: plastic deformation gradient, resistances, accumulated slip.
#[derive(Debug, Clone, PartialEq)]
pub struct CpState {
    pub f_p: Matrix3<f64>,
    pub xi_mpa: [f64; 12],
    pub acc_gamma: [f64; 12],
}

impl CpState {
    pub fn virgin(params: &CpParams) -> Self {
        CpState {
            f_p: Matrix3::identity(),
            xi_mpa: [params.xi0_mpa; 12],
            acc_gamma: [0.0; 12],
        }
    }
}

/// Orientation-resolved constants of one material node.
#[derive(Debug, Clone)]
pub struct CpLocal {
    /// Elastic stiffness in the reference frame, GPa.
    pub c_ref: Matrix6,
    /// Schmid dyads s ⊗ n in the reference frame.
    pub schmid: [Matrix3<f64>; 12],
    latent: SMatrix<f64, 12, 12>,
}

impl CpLocal {
    /// Rotates the crystal constants by `r` (crystal → reference frame).
    pub fn new(params: &CpParams, r: &Matrix3<f64>) -> Self {
        let bond = bond_stress_matrix(r);
        let c_ref = bond * params.elastic().0 * bond.transpose();
        let systems = fcc_slip_systems();
        let mut schmid = [Matrix3::zeros(); 12];
        for (slot, (d, n)) in schmid.iter_mut().zip(systems) {
            let dr = r * d;
            let nr = r * n;
            *slot = dr * nr.transpose();
        }
        CpLocal { c_ref, schmid, latent: params.latent_matrix() }
    }
}

/// Stress, consistent tangent and updated state of one step.
#[derive(Debug, Clone)]
pub struct CpResult {
    /// First Piola–Kirchhoff stress, GPa.
    pub p: Matrix3<f64>,
    /// dP/dF, row-major 9×9 over (i·3+j), GPa.
    pub tangent: Matrix9,
    pub state: CpState,
    /// Largest resolved shear magnitude at the converged step, MPa.
    pub max_tau_mpa: f64,
}

/// St. Venant elastic law: S = C : E(F_e), all GPa, reference frame.
pub fn elastic_stress(c_ref: &Matrix6, f_e: &Matrix3<f64>) -> Matrix3<f64> {
    let e = (f_e.transpose() * f_e - Matrix3::identity()) * 0.5;
    let ev = Vector6::new(
        e[(0, 0)],
        e[(1, 1)],
        e[(2, 2)],
        2.0 * e[(1, 2)],
        2.0 * e[(0, 2)],
        2.0 * e[(0, 1)],
    );
    let sv = c_ref * ev;
    Matrix3::new(sv[0], sv[5], sv[4], sv[5], sv[1], sv[3], sv[4], sv[3], sv[2])
}

/// Slip rates and resistance rates of the flow and hardening laws.
///
/// `tau_mpa` are resolved shears in MPa; returns (γ̇ per system, ξ̇ in MPa/s).
pub fn flow_and_hardening(
    params: &CpParams,
    latent: &SMatrix<f64, 12, 12>,
    tau_mpa: &[f64; 12],
    xi_mpa: &[f64; 12],
) -> ([f64; 12], [f64; 12]) {
    let mut gamma_dot = [0.0; 12];
    for s in 0..12 {
        let ratio = tau_mpa[s] / xi_mpa[s];
        gamma_dot[s] = params.gamma_dot0 * ratio.abs().powf(params.n_exp) * ratio.signum();
    }
    let h0_mpa = params.h0_gpa * GPA_TO_MPA;
    let mut xi_dot = [0.0; 12];
    for a in 0..12 {
        let mut sum = 0.0;
        for b in 0..12 {
            let u = 1.0 - xi_mpa[b] / params.xi_inf_mpa;
            sum += gamma_dot[b].abs() * u.abs().powf(params.a_exp) * u.signum() * latent[(a, b)];
        }
        xi_dot[a] = h0_mpa * (1.0 + params.h_int) * sum;
    }
    (gamma_dot, xi_dot)
}

/// Matrix exponential of a 3×3 by scaling-and-squaring Taylor.
fn expm3(a: &Matrix3<f64>) -> Matrix3<f64> {
    let norm = a.norm();
    let s = if norm > 0.25 { (norm / 0.25).log2().ceil() as u32 } else { 0 };
    let b = a / f64::exp2(s as f64);
    let mut term = Matrix3::identity();
    let mut sum = Matrix3::identity();
    for k in 1..=14 {
        term = term * b / (k as f64);
        sum += term;
    }
    for _ in 0..s {
        sum = sum * sum;
    }
    sum
}

/// exp(A) together with its Fréchet derivative in direction E, via the
/// block trick exp([[A, E], [0, A]]) = [[exp A, L(A,E)], [0, exp A]].
fn expm3_frechet(a: &Matrix3<f64>, e: &Matrix3<f64>) -> Matrix3<f64> {
    let mut m = SMatrix::<f64, 6, 6>::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(a);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(a);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(e);
    let norm = m.norm();
    let s = if norm > 0.25 { (norm / 0.25).log2().ceil() as u32 } else { 0 };
    let b = m / f64::exp2(s as f64);
    let mut term = SMatrix::<f64, 6, 6>::identity();
    let mut sum = SMatrix::<f64, 6, 6>::identity();
    for k in 1..=14 {
        term = term * b / (k as f64);
        sum += term;
    }
    for _ in 0..s {
        sum = sum * sum;
    }
    sum.fixed_view::<3, 3>(0, 3).into_owned()
}

#[inline]
fn contract(m: &Matrix3<f64>, p: &Matrix3<f64>) -> f64 {
    m.iter().zip(p.iter()).map(|(a, b)| a * b).sum()
}

struct Kinematics {
    f_e: Matrix3<f64>,
    s_pk2: Matrix3<f64>,
    tau_mpa: [f64; 12],
}

fn kinematics(local: &CpLocal, pre: &Matrix3<f64>, e_exp: &Matrix3<f64>) -> Kinematics {
    // pre = F_next · F_p_n⁻¹; F_e = pre · exp(−Σ Δγ P)
    let f_e = pre * e_exp;
    let s_pk2 = elastic_stress(&local.c_ref, &f_e);
    let mandel = f_e.transpose() * f_e * s_pk2;
    let mut tau_mpa = [0.0; 12];
    for s in 0..12 {
        tau_mpa[s] = contract(&mandel, &local.schmid[s]) * GPA_TO_MPA;
    }
    Kinematics { f_e, s_pk2, tau_mpa }
}

/// Implicit update over one step: `state` at tₙ, `f_next` at tₙ₊₁.
pub fn integrate_local(
    local: &CpLocal,
    params: &CpParams,
    f_next: &Matrix3<f64>,
    state: &CpState,
    dt: f64,
) -> Result<CpResult, CpError> {
    if dt <= 0.0 {
        return Err(CpError::InvalidParams(format!("dt must be positive, got {dt}")));
    }
    let det = f_next.determinant();
    if det <= 0.0 {
        return Err(CpError::BadDeformation(det));
    }
    let f_p_inv_n = state
        .f_p
        .try_inverse()
        .ok_or_else(|| CpError::InvalidParams("singular plastic deformation".into()))?;
    let pre = f_next * f_p_inv_n;
    let h0_mpa = params.h0_gpa * GPA_TO_MPA * (1.0 + params.h_int);

    // unknowns x = [Δγ; Δξ(MPa)]
    let mut x = Vector24::zeros();
    let mut best_res = f64::MAX;
    let mut converged = false;

    let residual = |x: &Vector24| -> (Vector24, Kinematics, Matrix3<f64>) {
        let mut a_e = Matrix3::zeros();
        for s in 0..12 {
            a_e -= local.schmid[s] * x[s];
        }
        let e_exp = expm3(&a_e);
        let kin = kinematics(local, &pre, &e_exp);
        let mut r = Vector24::zeros();
        for s in 0..12 {
            let xi = state.xi_mpa[s] + x[12 + s];
            let ratio = kin.tau_mpa[s] / xi;
            let phi = params.gamma_dot0 * ratio.abs().powf(params.n_exp) * ratio.signum();
            r[s] = x[s] - dt * phi;
        }
        for a in 0..12 {
            let mut sum = 0.0;
            for b in 0..12 {
                let xi_b = state.xi_mpa[b] + x[12 + b];
                let u = 1.0 - xi_b / params.xi_inf_mpa;
                sum += x[b].abs() * u.abs().powf(params.a_exp) * u.signum() * local.latent[(a, b)];
            }
            r[12 + a] = x[12 + a] - h0_mpa * sum;
        }
        (r, kin, e_exp)
    };

    let scaled_norm = |r: &Vector24| -> f64 {
        let mut n = 0.0;
        for s in 0..12 {
            n += r[s] * r[s] + (r[12 + s] / params.xi0_mpa) * (r[12 + s] / params.xi0_mpa);
        }
        n.sqrt()
    };

    let (mut r, mut kin, mut e_exp) = residual(&x);
    let mut res = scaled_norm(&r);
    for _iter in 0..50 {
        if res <= 1e-10 {
            converged = true;
            break;
        }
        // analytic Jacobian at x
        let mut a_e = Matrix3::zeros();
        for s in 0..12 {
            a_e -= local.schmid[s] * x[s];
        }
        let mut dtau = SMatrix::<f64, 12, 12>::zeros(); // dτ^α/dΔγ^β, MPa
        for beta in 0..12 {
            let l = expm3_frechet(&a_e, &(-local.schmid[beta]));
            let df_e = pre * l;
            let de = (df_e.transpose() * kin.f_e + kin.f_e.transpose() * df_e) * 0.5;
            let dev = Vector6::new(
                de[(0, 0)],
                de[(1, 1)],
                de[(2, 2)],
                2.0 * de[(1, 2)],
                2.0 * de[(0, 2)],
                2.0 * de[(0, 1)],
            );
            let dsv = local.c_ref * dev;
            let ds = Matrix3::new(
                dsv[0], dsv[5], dsv[4], dsv[5], dsv[1], dsv[3], dsv[4], dsv[3], dsv[2],
            );
            let dmandel = (df_e.transpose() * kin.f_e + kin.f_e.transpose() * df_e) * kin.s_pk2
                + kin.f_e.transpose() * kin.f_e * ds;
            for alpha in 0..12 {
                dtau[(alpha, beta)] = contract(&dmandel, &local.schmid[alpha]) * GPA_TO_MPA;
            }
        }
        let mut jac = Matrix24::identity();
        for alpha in 0..12 {
            let xi = state.xi_mpa[alpha] + x[12 + alpha];
            let ratio = kin.tau_mpa[alpha] / xi;
            let dphi_dtau =
                params.gamma_dot0 * params.n_exp * ratio.abs().powf(params.n_exp - 1.0) / xi;
            for beta in 0..12 {
                jac[(alpha, beta)] -= dt * dphi_dtau * dtau[(alpha, beta)];
            }
            let phi = params.gamma_dot0 * ratio.abs().powf(params.n_exp) * ratio.signum();
            jac[(alpha, 12 + alpha)] += dt * params.n_exp * phi / xi;
        }
        for alpha in 0..12 {
            for beta in 0..12 {
                let xi_b = state.xi_mpa[beta] + x[12 + beta];
                let u = 1.0 - xi_b / params.xi_inf_mpa;
                let g = u.abs().powf(params.a_exp) * u.signum();
                let gp = -(params.a_exp / params.xi_inf_mpa) * u.abs().powf(params.a_exp - 1.0);
                // the residual carries |Δγ^β|; its derivative needs the
                // iterate's own sign (τ's sign only at exactly zero)
                let sg = if x[beta] != 0.0 { x[beta].signum() } else { kin.tau_mpa[beta].signum() };
                jac[(12 + alpha, beta)] -= h0_mpa * local.latent[(alpha, beta)] * sg * g;
                jac[(12 + alpha, 12 + beta)] -=
                    h0_mpa * local.latent[(alpha, beta)] * x[beta].abs() * gp;
            }
        }
        let delta = jac
            .lu()
            .solve(&(-r))
            .ok_or(CpError::NoConvergence { iterations: 50, residual: res })?;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..10 {
            let trial = x + delta * step;
            let (rt, kt, et) = residual(&trial);
            let rn = scaled_norm(&rt);
            if rn < res {
                x = trial;
                r = rt;
                kin = kt;
                e_exp = et;
                res = rn;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        best_res = best_res.min(res);
    }
    if res <= 1e-10 {
        converged = true;
    }
    if !converged {
        return Err(CpError::NoConvergence { iterations: 50, residual: res });
    }

    // committed state
    let mut a_p = Matrix3::zeros();
    for s in 0..12 {
        a_p += local.schmid[s] * x[s];
    }
    let f_p_next = expm3(&a_p) * state.f_p;
    let mut xi_next = [0.0; 12];
    let mut acc = state.acc_gamma;
    for s in 0..12 {
        xi_next[s] = state.xi_mpa[s] + x[12 + s];
        acc[s] += x[s].abs();
    }
    let f_p_inv_next = f_p_inv_n * e_exp;
    let p_stress = kin.f_e * kin.s_pk2 * f_p_inv_next.transpose();

    // consistent tangent by implicit differentiation
    let tangent = consistent_tangent(local, params, state, &x, &kin, &e_exp, &pre, &f_p_inv_n, dt)?;

    let max_tau_mpa = kin.tau_mpa.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    Ok(CpResult {
        p: p_stress,
        tangent,
        state: CpState { f_p: f_p_next, xi_mpa: xi_next, acc_gamma: acc },
        max_tau_mpa,
    })
}

#[allow(clippy::too_many_arguments)]
fn consistent_tangent(
    local: &CpLocal,
    params: &CpParams,
    state: &CpState,
    x: &Vector24,
    kin: &Kinematics,
    e_exp: &Matrix3<f64>,
    pre: &Matrix3<f64>,
    f_p_inv_n: &Matrix3<f64>,
    dt: f64,
) -> Result<Matrix9, CpError> {
    let h0_mpa = params.h0_gpa * GPA_TO_MPA * (1.0 + params.h_int);
    let f_p_inv_next = f_p_inv_n * e_exp;
    let g_map = f_p_inv_next; // dF_e = dF · G at fixed internal variables

    // rebuild the converged Jacobian (same expressions as in the solve)
    let mut a_e = Matrix3::zeros();
    for s in 0..12 {
        a_e -= local.schmid[s] * x[s];
    }
    let mut frechet = [Matrix3::<f64>::zeros(); 12];
    let mut dtau = SMatrix::<f64, 12, 12>::zeros();
    for beta in 0..12 {
        let l = expm3_frechet(&a_e, &(-local.schmid[beta]));
        frechet[beta] = l;
        let df_e = pre * l;
        let de = (df_e.transpose() * kin.f_e + kin.f_e.transpose() * df_e) * 0.5;
        let ds = apply_c(&local.c_ref, &de);
        let dmandel = (df_e.transpose() * kin.f_e + kin.f_e.transpose() * df_e) * kin.s_pk2
            + kin.f_e.transpose() * kin.f_e * ds;
        for alpha in 0..12 {
            dtau[(alpha, beta)] = contract(&dmandel, &local.schmid[alpha]) * GPA_TO_MPA;
        }
    }
    let mut jac = Matrix24::identity();
    for alpha in 0..12 {
        let xi = state.xi_mpa[alpha] + x[12 + alpha];
        let ratio = kin.tau_mpa[alpha] / xi;
        let dphi_dtau = params.gamma_dot0 * params.n_exp * ratio.abs().powf(params.n_exp - 1.0) / xi;
        for beta in 0..12 {
            jac[(alpha, beta)] -= dt * dphi_dtau * dtau[(alpha, beta)];
        }
        let phi = params.gamma_dot0 * ratio.abs().powf(params.n_exp) * ratio.signum();
        jac[(alpha, 12 + alpha)] += dt * params.n_exp * phi / xi;
    }
    for alpha in 0..12 {
        for beta in 0..12 {
            let xi_b = state.xi_mpa[beta] + x[12 + beta];
            let u = 1.0 - xi_b / params.xi_inf_mpa;
            let g = u.abs().powf(params.a_exp) * u.signum();
            let gp = -(params.a_exp / params.xi_inf_mpa) * u.abs().powf(params.a_exp - 1.0);
            let sg = if x[beta] != 0.0 { x[beta].signum() } else { kin.tau_mpa[beta].signum() };
            jac[(12 + alpha, beta)] -= h0_mpa * local.latent[(alpha, beta)] * sg * g;
            jac[(12 + alpha, 12 + beta)] -= h0_mpa * local.latent[(alpha, beta)] * x[beta].abs() * gp;
        }
    }
    let lu = jac.lu();

    let mut tangent = Matrix9::zeros();
    // ∂P/∂Δγ^β at fixed F (precomputed columns)
    let mut dp_dgamma = [Matrix3::<f64>::zeros(); 12];
    for beta in 0..12 {
        let df_e = pre * frechet[beta];
        let de = (df_e.transpose() * kin.f_e + kin.f_e.transpose() * df_e) * 0.5;
        let ds = apply_c(&local.c_ref, &de);
        let df_p_inv = f_p_inv_n * frechet[beta];
        dp_dgamma[beta] = df_e * kin.s_pk2 * f_p_inv_next.transpose()
            + kin.f_e * ds * f_p_inv_next.transpose()
            + kin.f_e * kin.s_pk2 * df_p_inv.transpose();
    }

    for r_idx in 0..3 {
        for s_idx in 0..3 {
            let mut df = Matrix3::zeros();
            df[(r_idx, s_idx)] = 1.0;
            let df_e = df * g_map;
            let de = (df_e.transpose() * kin.f_e + kin.f_e.transpose() * df_e) * 0.5;
            let ds = apply_c(&local.c_ref, &de);
            let dmandel = (df_e.transpose() * kin.f_e + kin.f_e.transpose() * df_e) * kin.s_pk2
                + kin.f_e.transpose() * kin.f_e * ds;
            // residual sensitivity (only the flow rows see F)
            let mut rhs = Vector24::zeros();
            for alpha in 0..12 {
                let xi = state.xi_mpa[alpha] + x[12 + alpha];
                let ratio = kin.tau_mpa[alpha] / xi;
                let dphi_dtau =
                    params.gamma_dot0 * params.n_exp * ratio.abs().powf(params.n_exp - 1.0) / xi;
                let dtau_df = contract(&dmandel, &local.schmid[alpha]) * GPA_TO_MPA;
                rhs[alpha] = dt * dphi_dtau * dtau_df; // −∂R/∂F, sign folded
            }
            let dx = lu
                .solve(&rhs)
                .ok_or(CpError::NoConvergence { iterations: 0, residual: f64::NAN })?;
            // dP = ∂P/∂F|ₓ + Σ_β ∂P/∂Δγ^β dΔγ^β
            let mut dp = df_e * kin.s_pk2 * f_p_inv_next.transpose()
                + kin.f_e * ds * f_p_inv_next.transpose();
            for beta in 0..12 {
                dp += dp_dgamma[beta] * dx[beta];
            }
            for p_i in 0..3 {
                for q_i in 0..3 {
                    tangent[(3 * p_i + q_i, 3 * r_idx + s_idx)] = dp[(p_i, q_i)];
                }
            }
        }
    }
    Ok(tangent)
}

fn apply_c(c_ref: &Matrix6, e: &Matrix3<f64>) -> Matrix3<f64> {
    let ev = Vector6::new(
        e[(0, 0)],
        e[(1, 1)],
        e[(2, 2)],
        2.0 * e[(1, 2)],
        2.0 * e[(0, 2)],
        2.0 * e[(0, 1)],
    );
    let sv = c_ref * ev;
    Matrix3::new(sv[0], sv[5], sv[4], sv[5], sv[1], sv[3], sv[4], sv[3], sv[2])
}

/// Integrates across `[0, dt]` with recursive halving on Newton failure.
pub fn integrate_substepped(
    local: &CpLocal,
    params: &CpParams,
    f_prev: &Matrix3<f64>,
    f_next: &Matrix3<f64>,
    state: &CpState,
    dt: f64,
    max_levels: usize,
) -> Result<CpResult, CpError> {
    match integrate_local(local, params, f_next, state, dt) {
        Ok(r) => Ok(r),
        Err(CpError::NoConvergence { .. }) if max_levels > 0 => {
            let f_mid = (f_prev + f_next) * 0.5;
            let first =
                integrate_substepped(local, params, f_prev, &f_mid, state, dt / 2.0, max_levels - 1)?;
            integrate_substepped(local, params, &f_mid, f_next, &first.state, dt / 2.0, max_levels - 1)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn slip_systems_are_orthonormal_and_span_deviatoric_space() {
        let systems = fcc_slip_systems();
        assert_eq!(systems.len(), 12);
        let mut rows = nalgebra::SMatrix::<f64, 12, 6>::zeros();
        for (k, (d, n)) in systems.iter().enumerate() {
            assert!(d.dot(n).abs() < 1e-15, "system {k} not orthogonal");
            assert_relative_eq!(d.norm(), 1.0, epsilon = 1e-15);
            assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-15);
            let p = (d * n.transpose() + n * d.transpose()) * 0.5;
            rows[(k, 0)] = p[(0, 0)];
            rows[(k, 1)] = p[(1, 1)];
            rows[(k, 2)] = p[(2, 2)];
            rows[(k, 3)] = 2.0 * p[(1, 2)];
            rows[(k, 4)] = 2.0 * p[(0, 2)];
            rows[(k, 5)] = 2.0 * p[(0, 1)];
        }
        assert_eq!(rows.rank(1e-10), 5, "symmetrized dyads must span deviatoric space");
    }

    #[test]
    fn interaction_classes_have_standard_multiplicities() {
        let classes = interaction_classes();
        for a in 0..12 {
            let mut count = [0usize; 6];
            for b in 0..12 {
                count[classes[a][b]] += 1;
                assert_eq!(classes[a][b], classes[b][a], "classification must be symmetric");
            }
            assert_eq!(count, [1, 2, 1, 2, 4, 2], "row {a}: {count:?}");
        }
    }

    #[test]
    fn latent_matrix_uses_card_coefficients() {
        let params = CpParams::aa6022();
        let h = params.latent_matrix();
        for a in 0..12 {
            assert_eq!(h[(a, a)], 1.0);
        }
        let all: std::collections::BTreeSet<String> =
            h.iter().map(|v| format!("{v}")).collect();
        assert!(all.contains("5.123"));
        assert!(all.contains("0.574"));
        assert!(all.contains("1.123"));
    }

    #[test]
    fn elastic_stress_examples() {
        let params = CpParams::aa6022();
        let c = params.elastic().0;
        assert_eq!(elastic_stress(&c, &Matrix3::identity()), Matrix3::zeros());
        let eps = 1e-6;
        let f = Matrix3::new(1.0 + eps, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let s = elastic_stress(&c, &f);
        assert_relative_eq!(s[(0, 0)], params.c11_gpa * eps, max_relative = 1e-5);
        assert_relative_eq!(s[(1, 1)], params.c12_gpa * eps, max_relative = 1e-5);
        // random small strain matches the direct Voigt product
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut h = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                h[(i, j)] = rng.gen_range(-1e-4..1e-4);
            }
        }
        let f = Matrix3::identity() + h;
        let s = elastic_stress(&c, &f);
        let e = (f.transpose() * f - Matrix3::identity()) * 0.5;
        let expected = apply_c(&c, &e);
        assert!((s - expected).norm() < 1e-10);
    }

    #[test]
    fn objectivity_of_the_elastic_law() {
        let params = CpParams::aa6022();
        let c = params.elastic().0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = crate::texture::uniform_fz_orientation(&mut rng);
        let rot = crate::orientation::quat_to_rotmat(&q).unwrap().0;
        let f_e = Matrix3::new(1.001, 2e-4, 0.0, 0.0, 0.9995, 1e-4, 0.0, 0.0, 1.0002);
        let s1 = elastic_stress(&c, &f_e);
        let s2 = elastic_stress(&c, &(rot * f_e));
        assert!((s1 - s2).norm() < 1e-12, "S must live on the intermediate configuration");
    }

    #[test]
    fn flow_rule_examples() {
        let params = CpParams::aa6022();
        let latent = params.latent_matrix();
        let (gd, xd) = flow_and_hardening(&params, &latent, &[0.0; 12], &[76.0; 12]);
        assert_eq!(gd, [0.0; 12]);
        assert_eq!(xd, [0.0; 12]);

        let mut tau = [0.0; 12];
        tau[0] = 38.0; // τ/ξ = 0.5
        let (gd, _) = flow_and_hardening(&params, &latent, &tau, &[76.0; 12]);
        assert_relative_eq!(gd[0], 0.001 * 0.5f64.powi(20), max_relative = 1e-12);
        assert!((gd[0] - 9.5367431640625e-10).abs() < 1e-22);

        // saturation stops hardening
        let (_, xd) = flow_and_hardening(&params, &latent, &tau, &[params.xi_inf_mpa; 12]);
        for v in xd {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn rest_state_stays_at_rest() {
        let params = CpParams::aa6022();
        let local = CpLocal::new(&params, &Matrix3::identity());
        let state = CpState::virgin(&params);
        let r = integrate_local(&local, &params, &Matrix3::identity(), &state, 0.01).unwrap();
        assert!(r.p.norm() < 1e-14);
        assert_eq!(r.state, state);
    }

    #[test]
    fn pure_elastic_step_keeps_plastic_flow_frozen() {
        let params = CpParams::aa6022();
        let local = CpLocal::new(&params, &Matrix3::identity());
        let state = CpState::virgin(&params);
        let eps = 1e-5;
        let f = Matrix3::new(1.0 + eps, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let r = integrate_local(&local, &params, &f, &state, 0.01).unwrap();
        assert!((r.state.f_p - Matrix3::identity()).norm() < 1e-12);
        // P matches the elastic pushforward with F_p = I
        let s = elastic_stress(&local.c_ref, &f);
        assert!((r.p - f * s).norm() < 1e-12);
    }

    fn uniaxial_f(eps: f64) -> Matrix3<f64> {
        Matrix3::new(1.0 + eps, 0.0, 0.0, 0.0, 1.0 - 0.3 * eps, 0.0, 0.0, 0.0, 1.0 - 0.3 * eps)
    }

    #[test]
    fn plastic_flow_preserves_plastic_volume() {
        let params = CpParams::aa6022();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = crate::texture::uniform_fz_orientation(&mut rng);
        let rot = crate::orientation::quat_to_rotmat(&q).unwrap().0;
        let local = CpLocal::new(&params, &rot);
        let mut state = CpState::virgin(&params);
        let rate = 1e-3;
        let dt = 0.05;
        let steps = 200;
        // load then unload
        for k in 0..steps {
            let t = (k + 1) as f64 * dt;
            let eps = if k < steps / 2 {
                rate * t
            } else {
                rate * (steps as f64 / 2.0 * dt) - rate * (t - steps as f64 / 2.0 * dt)
            };
            let f = uniaxial_f(eps);
            let r = integrate_local(&local, &params, &f, &state, dt).unwrap();
            state = r.state;
        }
        assert!(
            (state.f_p.determinant() - 1.0).abs() < 1e-8,
            "det F_p drifted to {}",
            state.f_p.determinant()
        );
        // some plastic slip must actually have happened
        assert!(state.acc_gamma.iter().sum::<f64>() > 1e-4);
        // resistances stay in their physical bracket
        for xi in state.xi_mpa {
            assert!(xi >= params.xi0_mpa - 1e-9 && xi <= params.xi_inf_mpa + 1e-6);
        }
    }

    #[test]
    fn consistent_tangent_matches_finite_differences() {
        let params = CpParams::aa6022();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = crate::texture::uniform_fz_orientation(&mut rng);
        let rot = crate::orientation::quat_to_rotmat(&q).unwrap().0;
        let local = CpLocal::new(&params, &rot);
        // pre-load into the plastic regime
        let mut state = CpState::virgin(&params);
        let dt = 0.1;
        for k in 1..=30 {
            let f = uniaxial_f(1e-4 * k as f64);
            state = integrate_local(&local, &params, &f, &state, dt).unwrap().state;
        }
        let f0 = uniaxial_f(3.1e-3);
        let r0 = integrate_local(&local, &params, &f0, &state, dt).unwrap();
        let h = 1e-7;
        for r_idx in 0..3 {
            for s_idx in 0..3 {
                let mut fp = f0;
                let mut fm = f0;
                fp[(r_idx, s_idx)] += h;
                fm[(r_idx, s_idx)] -= h;
                let pp = integrate_local(&local, &params, &fp, &state, dt).unwrap().p;
                let pm = integrate_local(&local, &params, &fm, &state, dt).unwrap().p;
                for p_i in 0..3 {
                    for q_i in 0..3 {
                        let fd = (pp[(p_i, q_i)] - pm[(p_i, q_i)]) / (2.0 * h);
                        let an = r0.tangent[(3 * p_i + q_i, 3 * r_idx + s_idx)];
                        let denom = an.abs().max(fd.abs()).max(1e-3);
                        assert!(
                            (an - fd).abs() / denom <= 1e-4,
                            "dP{p_i}{q_i}/dF{r_idx}{s_idx}: analytic {an} vs fd {fd}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn rate_sensitivity_is_monotonic() {
        let params = CpParams::aa6022();
        let local = CpLocal::new(&params, &Matrix3::identity());
        let taus = |rate_scale: f64| -> Vec<f64> {
            let mut state = CpState::virgin(&params);
            let dt = 0.05 / rate_scale;
            let mut out = Vec::new();
            for k in 1..=60 {
                let f = uniaxial_f(1e-4 * k as f64);
                let r = integrate_local(&local, &params, &f, &state, dt).unwrap();
                state = r.state;
                out.push(r.max_tau_mpa);
            }
            out
        };
        let slow = taus(1.0);
        let fast = taus(2.0);
        for (s, f) in slow.iter().zip(&fast) {
            assert!(f + 1e-9 >= *s, "doubling the rate reduced |τ|: {f} < {s}");
        }
    }

    #[test]
    fn substepping_rescues_a_too_large_step() {
        let params = CpParams::aa6022();
        let local = CpLocal::new(&params, &Matrix3::identity());
        let state = CpState::virgin(&params);
        // a single huge step deep into the plastic regime
        let f = uniaxial_f(0.03);
        let direct = integrate_local(&local, &params, &f, &state, 30.0);
        let sub = integrate_substepped(&local, &params, &Matrix3::identity(), &f, &state, 30.0, 20);
        assert!(sub.is_ok(), "substepping failed: {:?}", sub.err());
        if let Ok(d) = direct {
            // if the direct step converged too, both must agree loosely
            let s = sub.unwrap();
            assert!((d.p - s.p).norm() / d.p.norm().max(1e-6) < 0.2);
        }
    }
}

