//! Online nonlinear prediction: the trained network coupled to crystal
//! plasticity under a macroscopic loading program.
//!
//! Per time step, an inner Newton drives the interaction vectors until the
//! weighted traction sums vanish (the Hill–Mandel condition); an outer Newton
//! adjusts the stress-controlled components of the macroscopic deformation
//! gradient. Both use analytic tangents; the macroscopic consistent tangent
//! comes from static condensation of the interaction unknowns.
//!
//! The interaction vectors restart from zero at every step; leaf states are
//! committed only when the whole step converges.

use crate::cp::{integrate_local, CpError, CpLocal, CpParams, CpState};
use crate::odmn::{interaction_coefficients, leaf_weights, AlphaCoeffs, OdmnError, OdmnParams};
use crate::orientation::{voigt_index, Matrix6, StiffnessVoigt};
use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

type Matrix9 = SMatrix<f64, 9, 9>;

#[derive(Debug, Error)]
pub enum OnlineError {
    #[error("network error: {0}")]
    Odmn(#[from] OdmnError),
    #[error("constitutive error: {0}")]
    Cp(#[from] CpError),
    #[error("invalid load schedule: {0}")]
    InvalidSchedule(String),
    #[error("inner Newton stalled at residual {residual:.3e} after {iterations} iterations")]
    InnerStall { residual: f64, iterations: usize },
    #[error("step failed at time {time:.4e} even after {substeps} halvings")]
    StepFailure { time: f64, substeps: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Network data prepared for online evaluation.
pub struct OnlineOdmn {
    pub depth: usize,
    pub w: Vec<f64>,
    pub alpha: AlphaCoeffs,
    pub normals: Vec<Vector3<f64>>,
    pub locals: Vec<CpLocal>,
    active_nodes: Vec<usize>,
}

impl OnlineOdmn {
    /// Rotates the constitutive law into every leaf and fixes the topology.
    pub fn new(params: &OdmnParams, cp: &CpParams) -> Result<Self, OnlineError> {
        cp.validate()?;
        let w = leaf_weights(&params.z)?;
        let alpha = interaction_coefficients(&w, params.depth());
        let normals: Vec<Vector3<f64>> = (0..params.n_nodes())
            .map(|j| crate::odmn::direction_from_angles(params.theta[j], params.phi[j]))
            .collect();
        let locals: Vec<CpLocal> = params
            .euler
            .iter()
            .map(|e| {
                let q = crate::orientation::euler_to_quat(e);
                let r = crate::orientation::quat_to_rotmat(&q)
                    .map_err(|err| OnlineError::InvalidInput(err.to_string()))?;
                Ok(CpLocal::new(cp, r.matrix()))
            })
            .collect::<Result<_, OnlineError>>()?;
        let active_nodes: Vec<usize> =
            (0..params.n_nodes()).filter(|j| alpha.active[*j]).collect();
        Ok(OnlineOdmn { depth: params.depth(), w, alpha, normals, locals, active_nodes })
    }

    pub fn n_leaves(&self) -> usize {
        self.locals.len()
    }

    pub fn virgin_states(&self, cp: &CpParams) -> Vec<CpState> {
        (0..self.n_leaves()).map(|_| CpState::virgin(cp)).collect()
    }
}

/// Leaf deformation gradients from the macroscopic one and the interaction
/// vectors: `F_i = F̄ + Σ_j α_ij · a_j ⊗ N_j`.
pub fn downscale(
    odmn: &OnlineOdmn,
    f_bar: &Matrix3<f64>,
    a: &[Vector3<f64>],
) -> Vec<Matrix3<f64>> {
    (0..odmn.n_leaves())
        .map(|i| {
            let mut f = *f_bar;
            for &j in &odmn.active_nodes {
                let aij = odmn.alpha.alpha(i, j);
                if aij != 0.0 {
                    f += (a[j] * odmn.normals[j].transpose()) * aij;
                }
            }
            f
        })
        .collect()
}

/// Weighted traction sums per active node: `r_j = (Σ_i W_i P_i α_ij)·N_j`.
pub fn hill_mandel_residual(
    odmn: &OnlineOdmn,
    leaf_p: &[Matrix3<f64>],
) -> Vec<Vector3<f64>> {
    odmn.active_nodes
        .iter()
        .map(|&j| {
            let mut s = Matrix3::zeros();
            for i in 0..odmn.n_leaves() {
                let aij = odmn.alpha.alpha(i, j);
                if aij != 0.0 {
                    s += leaf_p[i] * (odmn.w[i] * aij);
                }
            }
            s * odmn.normals[j]
        })
        .collect()
}

/// Converged state of one macroscopic step.
pub struct StepSolution {
    pub a: Vec<Vector3<f64>>,
    pub p_bar: Matrix3<f64>,
    /// dP̄/dF̄, row-major 9×9 over (i·3+j), GPa.
    pub tangent: Matrix9,
    pub new_states: Vec<CpState>,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub iterations: usize,
}

/// Relative tolerance of the Hill–Mandel residual at convergence.
pub const INNER_TOL: f64 = 1e-10;
/// Stress floor (GPa) so the relative residual stays defined at zero load.
const STRESS_FLOOR: f64 = 1e-6;

/// Traction scale of the residual: the macroscopic stress passes through
/// zero on unloading while leaf stresses stay finite, so the leaf maximum is
/// the meaningful normalization.
fn stress_scale(leaf_p: &[Matrix3<f64>]) -> f64 {
    leaf_p.iter().fold(STRESS_FLOOR, |m, p| m.max(p.norm()))
}

struct LeafEval {
    p: Matrix3<f64>,
    tangent: Matrix9,
    state: CpState,
}

fn evaluate_leaves(
    odmn: &OnlineOdmn,
    cp: &CpParams,
    leaf_f: &[Matrix3<f64>],
    states: &[CpState],
    dt: f64,
) -> Result<Vec<LeafEval>, CpError> {
    let results: Vec<Result<LeafEval, CpError>> =
        crate::parallel::par_map_indexed(leaf_f.len(), |i| {
            let r = integrate_local(&odmn.locals[i], cp, &leaf_f[i], &states[i], dt)?;
            Ok(LeafEval { p: r.p, tangent: r.tangent, state: r.state })
        });
    results.into_iter().collect()
}

/// Θ(N_j, N_k) from a leaf tangent: `Θ_pq = A[(3p+r),(3q+s)] N_j[r] N_k[s]`.
fn acoustic_block(tangent: &Matrix9, nj: &Vector3<f64>, nk: &Vector3<f64>) -> Matrix3<f64> {
    let mut out = Matrix3::zeros();
    for p in 0..3 {
        for q in 0..3 {
            let mut v = 0.0;
            for r in 0..3 {
                for s in 0..3 {
                    v += tangent[(3 * p + r, 3 * q + s)] * nj[r] * nk[s];
                }
            }
            out[(p, q)] = v;
        }
    }
    out
}

/// Inner Newton over the interaction vectors at fixed macroscopic F̄.
pub fn newton_solve(
    odmn: &OnlineOdmn,
    cp: &CpParams,
    f_bar: &Matrix3<f64>,
    states: &[CpState],
    dt: f64,
    tol: f64,
) -> Result<StepSolution, OnlineError> {
    let m = odmn.active_nodes.len();
    let n_leaves = odmn.n_leaves();
    let mut a = vec![Vector3::zeros(); odmn.alpha.active.len()];

    let mut history = Vec::new();
    let mut evals;
    let mut residual;
    let mut iterations = 0;

    loop {
        let leaf_f = downscale(odmn, f_bar, &a);
        evals = evaluate_leaves(odmn, cp, &leaf_f, states, dt)?;
        let leaf_p: Vec<Matrix3<f64>> = evals.iter().map(|e| e.p).collect();
        let r = hill_mandel_residual(odmn, &leaf_p);
        let scale = stress_scale(&leaf_p);
        residual = r.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt() / scale;
        history.push(residual);
        if residual <= tol || m == 0 {
            break;
        }
        if iterations >= 50 {
            return Err(OnlineError::InnerStall { residual, iterations });
        }
        // Jacobian over active nodes
        let mut jac = DMatrix::<f64>::zeros(3 * m, 3 * m);
        for i in 0..n_leaves {
            for (sj, &j) in odmn.active_nodes.iter().enumerate() {
                let aij = odmn.alpha.alpha(i, j);
                if aij == 0.0 {
                    continue;
                }
                for (sk, &k) in odmn.active_nodes.iter().enumerate() {
                    let aik = odmn.alpha.alpha(i, k);
                    if aik == 0.0 {
                        continue;
                    }
                    let block = acoustic_block(&evals[i].tangent, &odmn.normals[j], &odmn.normals[k])
                        * (odmn.w[i] * aij * aik);
                    let mut view = jac.view_mut((3 * sj, 3 * sk), (3, 3));
                    view += block;
                }
            }
        }
        let mut rhs = DVector::<f64>::zeros(3 * m);
        for (sj, v) in r.iter().enumerate() {
            rhs[3 * sj] = -v[0];
            rhs[3 * sj + 1] = -v[1];
            rhs[3 * sj + 2] = -v[2];
        }
        let delta = jac
            .lu()
            .solve(&rhs)
            .ok_or(OnlineError::InnerStall { residual, iterations })?;
        // line search with up to 5 halvings on the residual norm
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=5 {
            let mut trial = a.clone();
            for (sj, &j) in odmn.active_nodes.iter().enumerate() {
                trial[j] += Vector3::new(delta[3 * sj], delta[3 * sj + 1], delta[3 * sj + 2])
                    * step;
            }
            let leaf_f = downscale(odmn, f_bar, &trial);
            // a failed constitutive update on an overshooting trial counts
            // as a rejected step, not a hard error
            let trial_evals = match evaluate_leaves(odmn, cp, &leaf_f, states, dt) {
                Ok(e) => e,
                Err(_) => {
                    step *= 0.5;
                    continue;
                }
            };
            let leaf_p: Vec<Matrix3<f64>> = trial_evals.iter().map(|e| e.p).collect();
            let rt = hill_mandel_residual(odmn, &leaf_p);
            let scale = stress_scale(&leaf_p);
            let rn = rt.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt() / scale;
            if rn < residual {
                a = trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(OnlineError::InnerStall { residual, iterations });
        }
        iterations += 1;
    }

    // converged: assemble P̄ and the condensed macroscopic tangent
    let leaf_p: Vec<Matrix3<f64>> = evals.iter().map(|e| e.p).collect();
    let mut p_bar = Matrix3::zeros();
    for i in 0..n_leaves {
        p_bar += leaf_p[i] * odmn.w[i];
    }

    let tangent = if m == 0 {
        let mut t = Matrix9::zeros();
        for i in 0..n_leaves {
            t += evals[i].tangent * odmn.w[i];
        }
        t
    } else {
        let mut jac = DMatrix::<f64>::zeros(3 * m, 3 * m);
        let mut rhs = DMatrix::<f64>::zeros(3 * m, 9);
        for i in 0..n_leaves {
            for (sj, &j) in odmn.active_nodes.iter().enumerate() {
                let aij = odmn.alpha.alpha(i, j);
                if aij == 0.0 {
                    continue;
                }
                for (sk, &k) in odmn.active_nodes.iter().enumerate() {
                    let aik = odmn.alpha.alpha(i, k);
                    if aik == 0.0 {
                        continue;
                    }
                    let block = acoustic_block(&evals[i].tangent, &odmn.normals[j], &odmn.normals[k])
                        * (odmn.w[i] * aij * aik);
                    let mut view = jac.view_mut((3 * sj, 3 * sk), (3, 3));
                    view += block;
                }
                // ∂r_j/∂F̄ (3×9)
                for p in 0..3 {
                    for col in 0..9 {
                        let mut v = 0.0;
                        for rr in 0..3 {
                            v += evals[i].tangent[(3 * p + rr, col)] * odmn.normals[j][rr];
                        }
                        rhs[(3 * sj + p, col)] -= odmn.w[i] * aij * v;
                    }
                }
            }
        }
        let da_df = jac
            .lu()
            .solve(&rhs)
            .ok_or(OnlineError::InnerStall { residual, iterations })?;
        // dF_i/dF̄ = I + Σ_j α_ij (da_j/dF̄ ⊗ N_j), condensed into dP̄/dF̄
        let mut t = Matrix9::zeros();
        for i in 0..n_leaves {
            let mut m_i = Matrix9::identity();
            for (sj, &j) in odmn.active_nodes.iter().enumerate() {
                let aij = odmn.alpha.alpha(i, j);
                if aij == 0.0 {
                    continue;
                }
                for p in 0..3 {
                    for rr in 0..3 {
                        for col in 0..9 {
                            m_i[(3 * p + rr, col)] +=
                                aij * odmn.normals[j][rr] * da_df[(3 * sj + p, col)];
                        }
                    }
                }
            }
            t += evals[i].tangent * m_i * odmn.w[i];
        }
        t
    };

    Ok(StepSolution {
        a,
        p_bar,
        tangent,
        new_states: evals.into_iter().map(|e| e.state).collect(),
        residual,
        residual_history: history,
        iterations,
    })
}

/// Minor-symmetrized small-strain stiffness (eng Voigt) of a 9×9 tangent.
pub fn tangent_to_voigt(t: &Matrix9) -> StiffnessVoigt {
    let mut c = Matrix6::zeros();
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    let v = 0.25
                        * (t[(3 * i + j, 3 * k + l)]
                            + t[(3 * j + i, 3 * k + l)]
                            + t[(3 * i + j, 3 * l + k)]
                            + t[(3 * j + i, 3 * l + k)]);
                    c[(voigt_index(i, j), voigt_index(k, l))] = v;
                }
            }
        }
    }
    StiffnessVoigt(c)
}

/// Per-component boundary condition of the macroscopic step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ComponentControl {
    /// The component of F̄ ramps linearly to this target.
    Deformation(f64),
    /// The component of P̄ is driven to this target (GPa).
    Stress(f64),
}

/// One loading segment: linear ramps over `steps` uniform increments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Segment {
    pub duration: f64,
    pub steps: usize,
    /// Row-major controls for the nine components of F̄ / P̄.
    pub controls: [ComponentControl; 9],
    /// Ends the segment early once P̄[component] falls to or below `value`.
    pub stop_when_stress_below: Option<(usize, f64)>,
}

/// Macroscopic loading program.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadSchedule {
    pub segments: Vec<Segment>,
}

impl LoadSchedule {
    pub fn validate(&self) -> Result<(), OnlineError> {
        if self.segments.is_empty() {
            return Err(OnlineError::InvalidSchedule("no segments".into()));
        }
        for (k, seg) in self.segments.iter().enumerate() {
            if seg.steps == 0 || seg.duration <= 0.0 {
                return Err(OnlineError::InvalidSchedule(format!(
                    "segment {k}: steps and duration must be positive"
                )));
            }
            if !seg.controls.iter().any(|c| matches!(c, ComponentControl::Deformation(_))) {
                return Err(OnlineError::InvalidSchedule(format!(
                    "segment {k}: at least one deformation-controlled component required"
                )));
            }
        }
        Ok(())
    }

    /// Uniaxial tension along 11 at `strain_rate`, ramping to `amplitude`,
    /// then unloading at the same rate until the axial stress crosses zero.
    /// All other stress components are driven to zero throughout.
    pub fn uniaxial_load_unload(amplitude: f64, strain_rate: f64, dt: f64) -> Self {
        let duration = amplitude / strain_rate;
        let steps = (duration / dt).round().max(1.0) as usize;
        let mut controls = [ComponentControl::Stress(0.0); 9];
        controls[0] = ComponentControl::Deformation(1.0 + amplitude);
        let loading = Segment { duration, steps, controls, stop_when_stress_below: None };
        let mut controls_down = controls;
        controls_down[0] = ComponentControl::Deformation(1.0 - 0.5 * amplitude);
        let unloading = Segment {
            duration: 1.5 * duration,
            steps: (1.5 * steps as f64).round() as usize,
            controls: controls_down,
            stop_when_stress_below: Some((0, 0.0)),
        };
        LoadSchedule { segments: vec![loading, unloading] }
    }
}

/// One recorded point of the macroscopic response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveStep {
    pub step: usize,
    pub time: f64,
    pub f: [f64; 9],
    pub p: [f64; 9],
}

/// Full stress–strain record of a drive.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub steps: Vec<CurveStep>,
}

impl Curve {
    /// CSV with header `step,time,F11..F33,P11..P33`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,time,F11,F12,F13,F21,F22,F23,F31,F32,F33,P11,P12,P13,P21,P22,P23,P31,P32,P33\n",
        );
        for s in &self.steps {
            out.push_str(&format!("{},{}", s.step, s.time));
            for v in s.f.iter().chain(s.p.iter()) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Axial (11) stress history.
    pub fn axial_stress(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.p[0]).collect()
    }

    /// Axial (11) strain history (F11 − 1).
    pub fn axial_strain(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.f[0] - 1.0).collect()
    }
}

fn mat_to_arr(m: &Matrix3<f64>) -> [f64; 9] {
    let mut a = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            a[3 * i + j] = m[(i, j)];
        }
    }
    a
}

const OUTER_TOL_REL: f64 = 1e-6;
const MAX_SUBSTEP_LEVELS: usize = 12;

/// Drives the network through the schedule, recording F̄ and P̄ per step.
pub fn drive(
    odmn: &OnlineOdmn,
    cp: &CpParams,
    schedule: &LoadSchedule,
    inner_tol: f64,
) -> Result<Curve, OnlineError> {
    schedule.validate()?;
    let mut states = odmn.virgin_states(cp);
    let mut f_bar = Matrix3::identity();
    let mut time = 0.0;
    let mut curve = Curve::default();
    let mut step_counter = 0usize;

    for seg in &schedule.segments {
        let f_start = f_bar;
        let dt = seg.duration / seg.steps as f64;
        let mut done = false;
        for k in 1..=seg.steps {
            if done {
                break;
            }
            let frac = k as f64 / seg.steps as f64;
            let (sol, f_new, t_new) = advance_step(
                odmn,
                cp,
                &states,
                &f_bar,
                &f_start,
                seg,
                frac,
                dt,
                time,
                inner_tol,
                0,
            )?;
            states = sol.new_states;
            f_bar = f_new;
            time = t_new;
            step_counter += 1;
            curve.steps.push(CurveStep {
                step: step_counter,
                time,
                f: mat_to_arr(&f_bar),
                p: mat_to_arr(&sol.p_bar),
            });
            if let Some((comp, threshold)) = seg.stop_when_stress_below {
                if sol.p_bar[(comp / 3, comp % 3)] <= threshold {
                    done = true;
                }
            }
        }
    }
    Ok(curve)
}

/// Advances one increment, recursively halving on failure.
#[allow(clippy::too_many_arguments)]
fn advance_step(
    odmn: &OnlineOdmn,
    cp: &CpParams,
    states: &[CpState],
    f_bar: &Matrix3<f64>,
    f_segment_start: &Matrix3<f64>,
    seg: &Segment,
    frac_target: f64,
    dt: f64,
    time: f64,
    inner_tol: f64,
    level: usize,
) -> Result<(StepSolution, Matrix3<f64>, f64), OnlineError> {
    match try_step(odmn, cp, states, f_bar, f_segment_start, seg, frac_target, dt, inner_tol) {
        Ok((sol, f_new)) => Ok((sol, f_new, time + dt)),
        Err(OnlineError::InnerStall { .. }) | Err(OnlineError::Cp(CpError::NoConvergence { .. }))
            if level < MAX_SUBSTEP_LEVELS =>
        {
            // halve: land first on the midpoint fraction, then the target
            let frac_now = frac_target
                - (dt / seg.duration * seg.steps as f64) * 0.0; // fraction step handled below
            let _ = frac_now;
            let frac_prev = frac_target - dt / (seg.duration / seg.steps as f64) / seg.steps as f64;
            let frac_mid = 0.5 * (frac_prev + frac_target);
            let (sol1, f1, t1) = advance_step(
                odmn,
                cp,
                states,
                f_bar,
                f_segment_start,
                seg,
                frac_mid,
                dt / 2.0,
                time,
                inner_tol,
                level + 1,
            )?;
            advance_step(
                odmn,
                cp,
                &sol1.new_states,
                &f1,
                f_segment_start,
                seg,
                frac_target,
                dt / 2.0,
                t1,
                inner_tol,
                level + 1,
            )
        }
        Err(e) => Err(e),
    }
}

/// One outer Newton solve at a fixed schedule fraction.
#[allow(clippy::too_many_arguments)]
fn try_step(
    odmn: &OnlineOdmn,
    cp: &CpParams,
    states: &[CpState],
    f_prev: &Matrix3<f64>,
    f_segment_start: &Matrix3<f64>,
    seg: &Segment,
    frac: f64,
    dt: f64,
    inner_tol: f64,
) -> Result<(StepSolution, Matrix3<f64>), OnlineError> {
    // deformation-controlled components are prescribed; stress-controlled
    // ones start from the previous converged F̄
    let mut f_trial = *f_prev;
    let mut stress_rows: Vec<(usize, f64)> = Vec::new();
    for c in 0..9 {
        let (i, j) = (c / 3, c % 3);
        match seg.controls[c] {
            ComponentControl::Deformation(target) => {
                let start = f_segment_start[(i, j)];
                f_trial[(i, j)] = start + (target - start) * frac;
            }
            ComponentControl::Stress(target) => {
                stress_rows.push((c, target));
            }
        }
    }
    let n_free = stress_rows.len();
    let mut sol = newton_solve(odmn, cp, &f_trial, states, dt, inner_tol)?;
    for _outer in 0..30 {
        let mut res = DVector::<f64>::zeros(n_free);
        let mut max_p: f64 = sol.p_bar.norm().max(STRESS_FLOOR);
        for (row, &(c, target)) in stress_rows.iter().enumerate() {
            res[row] = sol.p_bar[(c / 3, c % 3)] - target;
            max_p = max_p.max(target.abs());
        }
        if n_free == 0 || res.norm() <= OUTER_TOL_REL * max_p {
            return Ok((sol, f_trial));
        }
        let mut jac = DMatrix::<f64>::zeros(n_free, n_free);
        for (row, &(cr, _)) in stress_rows.iter().enumerate() {
            for (col, &(cc, _)) in stress_rows.iter().enumerate() {
                jac[(row, col)] = sol.tangent[(cr, cc)];
            }
        }
        // tiny Tikhonov damping: at the virgin state the skew modes of F̄
        // have zero stiffness and the plain solve would be singular
        let scale = jac.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for d in 0..n_free {
            jac[(d, d)] += 1e-9 * scale;
        }
        let delta = jac
            .lu()
            .solve(&(-&res))
            .ok_or(OnlineError::InnerStall { residual: res.norm(), iterations: 0 })?;
        for (col, &(c, _)) in stress_rows.iter().enumerate() {
            f_trial[(c / 3, c % 3)] += delta[col];
        }
        sol = newton_solve(odmn, cp, &f_trial, states, dt, inner_tol)?;
    }
    Err(OnlineError::InnerStall { residual: f64::NAN, iterations: 30 })
}

/// Normalized stress error metrics between equal-length scalar histories.
///
/// Returns (mean relative, max relative): deviations normalized by the
/// largest reference magnitude.
pub fn stress_error_metrics(pred: &[f64], reference: &[f64]) -> Result<(f64, f64), OnlineError> {
    if pred.len() != reference.len() || pred.is_empty() {
        return Err(OnlineError::InvalidInput(format!(
            "histories must match and be nonempty: {} vs {}",
            pred.len(),
            reference.len()
        )));
    }
    let denom = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if denom == 0.0 {
        return Err(OnlineError::InvalidInput("reference history is all zero".into()));
    }
    let mut mean = 0.0;
    let mut max: f64 = 0.0;
    for (p, r) in pred.iter().zip(reference) {
        let d = (p - r).abs();
        mean += d;
        max = max.max(d);
    }
    Ok((mean / pred.len() as f64 / denom, max / denom))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odmn::homogenize_linear;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identical_leaf_params(depth: usize, seed: u64) -> OdmnParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = OdmnParams::init_random(depth, &mut rng);
        let e = p.euler[0];
        for q in p.euler.iter_mut() {
            *q = e;
        }
        p
    }

    #[test]
    fn downscale_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = OdmnParams::init_random(2, &mut rng);
        let cp = CpParams::aa6022();
        let odmn = OnlineOdmn::new(&params, &cp).unwrap();
        let f_bar = Matrix3::new(1.01, 0.0, 0.002, 0.0, 0.996, 0.0, 0.0, 0.001, 1.0);
        // zero interaction ⇒ every leaf sees F̄
        let zeros = vec![Vector3::zeros(); params.n_nodes()];
        for f in downscale(&odmn, &f_bar, &zeros) {
            assert_eq!(f, f_bar);
        }
        // random interaction: volume average recovers F̄ exactly
        let a: Vec<Vector3<f64>> = (0..params.n_nodes())
            .map(|_| Vector3::new(rng.gen_range(-1e-3..1e-3), rng.gen_range(-1e-3..1e-3), rng.gen_range(-1e-3..1e-3)))
            .collect();
        let leaf_f = downscale(&odmn, &f_bar, &a);
        let mut avg = Matrix3::zeros();
        for (i, f) in leaf_f.iter().enumerate() {
            avg += f * odmn.w[i];
        }
        assert!((avg - f_bar).norm() < 1e-12);
    }

    #[test]
    fn downscale_direct_substitution_depth1() {
        let params = OdmnParams::from_parts(
            1,
            vec![0.5, 0.5],
            vec![crate::orientation::EulerBunge::new(0.0, 0.0, 0.0); 2],
            vec![0.0], // N = e3
            vec![0.0],
        )
        .unwrap();
        let cp = CpParams::aa6022();
        let odmn = OnlineOdmn::new(&params, &cp).unwrap();
        let f_bar = Matrix3::identity();
        let mut a = vec![Vector3::zeros(); 1];
        a[0] = Vector3::new(1.0, 0.0, 0.0);
        let leaf_f = downscale(&odmn, &f_bar, &a);
        let mut expect = Matrix3::identity();
        expect[(0, 2)] += 0.5; // +0.5·e1⊗e3
        assert!((leaf_f[0] - expect).norm() < 1e-15);
        expect[(0, 2)] -= 1.0;
        assert!((leaf_f[1] - expect).norm() < 1e-15);
    }

    #[test]
    fn identical_leaves_converge_immediately() {
        let params = identical_leaf_params(2, 3);
        let cp = CpParams::aa6022();
        let odmn = OnlineOdmn::new(&params, &cp).unwrap();
        let states = odmn.virgin_states(&cp);
        let f = Matrix3::new(1.001, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let sol = newton_solve(&odmn, &cp, &f, &states, 0.01, INNER_TOL).unwrap();
        assert_eq!(sol.iterations, 0, "identical leaves need no interaction update");
        for v in &sol.a {
            assert_eq!(v.norm(), 0.0);
        }
    }

    #[test]
    fn elastic_tangent_matches_linear_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = OdmnParams::init_random(2, &mut rng);
        let cp = CpParams::aa6022();
        let odmn = OnlineOdmn::new(&params, &cp).unwrap();
        let states = odmn.virgin_states(&cp);
        let sol =
            newton_solve(&odmn, &cp, &Matrix3::identity(), &states, 0.01, INNER_TOL).unwrap();
        let c_online = tangent_to_voigt(&sol.tangent);
        let c_offline = homogenize_linear(&params, &cp.elastic()).unwrap();
        let rel = (c_online.0 - c_offline.0).norm() / c_offline.0.norm();
        assert!(rel < 0.005, "online/offline mismatch {rel}");
    }

    #[test]
    fn residual_is_linear_in_small_interactions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = OdmnParams::init_random(2, &mut rng);
        let cp = CpParams::aa6022();
        let odmn = OnlineOdmn::new(&params, &cp).unwrap();
        let states = odmn.virgin_states(&cp);
        let f_bar = Matrix3::identity();
        let base: Vec<Vector3<f64>> = (0..params.n_nodes())
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let eval = |scale: f64| -> Vec<Vector3<f64>> {
            let a: Vec<Vector3<f64>> = base.iter().map(|v| v * scale).collect();
            let leaf_f = downscale(&odmn, &f_bar, &a);
            let evals = evaluate_leaves(&odmn, &cp, &leaf_f, &states, 0.01).unwrap();
            let leaf_p: Vec<Matrix3<f64>> = evals.iter().map(|e| e.p).collect();
            hill_mandel_residual(&odmn, &leaf_p)
        };
        // two-point checks at ‖a‖ ~ 1e-6 and 1e-5: the remainder of
        // r(2a) − 2r(a) is the quadratic geometric term, so it must be tiny
        // at 1e-6 and shrink ~100× from the larger amplitude
        let rel_at = |s: f64| -> f64 {
            let r1 = eval(s);
            let r2 = eval(2.0 * s);
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for (u, v) in r1.iter().zip(&r2) {
                num += (v - u * 2.0).norm_squared();
                den += v.norm_squared();
            }
            (num / den).sqrt()
        };
        let small = rel_at(1e-6);
        let large = rel_at(1e-5);
        assert!(small <= 1e-6, "relative nonlinearity at 1e-6: {small}");
        assert!(large / small.max(1e-12) > 3.0, "remainder not quadratic: {small} vs {large}");
    }

    #[test]
    fn newton_converges_quadratically_on_a_plastic_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = OdmnParams::init_random(4, &mut rng);
        let cp = CpParams::aa6022();
        let odmn = OnlineOdmn::new(&params, &cp).unwrap();
        // ramp to 1% axial strain in plastic-feasible increments, committing
        // states, then record the Newton history of the final step
        let mut states = odmn.virgin_states(&cp);
        let axial = |eps: f64| {
            Matrix3::new(1.0 + eps, 0.0, 0.0, 0.0, 1.0 - 0.34 * eps, 0.0, 0.0, 0.0, 1.0 - 0.34 * eps)
        };
        let dt = 1.0;
        for k in 1..=9 {
            let sol = newton_solve(&odmn, &cp, &axial(1e-3 * k as f64), &states, dt, INNER_TOL)
                .unwrap_or_else(|e| panic!("ramp step {k}: {e}"));
            states = sol.new_states;
        }
        let sol = newton_solve(&odmn, &cp, &axial(0.01), &states, dt, INNER_TOL).unwrap();
        let h = &sol.residual_history;
        assert!(h.len() >= 3, "expected a few iterations, got {h:?}");
        // once inside the basin, the residual ratio collapses
        let last_ratio = h[h.len() - 1] / h[h.len() - 2];
        let first_ratio = h[1] / h[0];
        assert!(
            last_ratio < 0.02 * first_ratio.max(1e-3) || h[h.len() - 1] < 1e-13,
            "no superlinear tail: {h:?}"
        );
    }

    #[test]
    fn zero_amplitude_schedule_gives_zero_curve() {
        let params = identical_leaf_params(1, 7);
        let cp = CpParams::aa6022();
        let odmn = OnlineOdmn::new(&params, &cp).unwrap();
        let mut controls = [ComponentControl::Stress(0.0); 9];
        controls[0] = ComponentControl::Deformation(1.0);
        let schedule = LoadSchedule {
            segments: vec![Segment {
                duration: 1.0,
                steps: 5,
                controls,
                stop_when_stress_below: None,
            }],
        };
        let curve = drive(&odmn, &cp, &schedule, INNER_TOL).unwrap();
        for s in &curve.steps {
            for v in s.p {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elastic_ramp_matches_uniaxial_modulus_from_c_bar() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = OdmnParams::init_random(2, &mut rng);
        let cp = CpParams::aa6022();
        let odmn = OnlineOdmn::new(&params, &cp).unwrap();
        let schedule = LoadSchedule::uniaxial_load_unload(1e-4, 1e-3, 2e-2);
        let curve = drive(&odmn, &cp, &schedule, INNER_TOL).unwrap();
        // modulus from the loading branch end point
        let k = curve.steps.iter().position(|s| s.f[0] >= 1.0 + 0.99e-4).unwrap();
        let s = &curve.steps[k];
        let modulus = s.p[0] / (s.f[0] - 1.0);
        let c_bar = homogenize_linear(&params, &cp.elastic()).unwrap();
        let compliance = c_bar.0.try_inverse().unwrap();
        let e_uniaxial = 1.0 / compliance[(0, 0)];
        assert_relative_eq!(modulus, e_uniaxial, max_relative = 0.01);
    }

    #[test]
    fn load_unload_cycle_behaves_elastoplastically() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = OdmnParams::init_random(2, &mut rng);
        let cp = CpParams::aa6022();
        let odmn = OnlineOdmn::new(&params, &cp).unwrap();
        // 1.2% strain; step size trades runtime against the viscous
        // transient right at the load reversal
        let schedule = LoadSchedule::uniaxial_load_unload(0.012, 1e-3, 0.05);
        let curve = drive(&odmn, &cp, &schedule, INNER_TOL).unwrap();
        let strain = curve.axial_strain();
        let stress = curve.axial_stress();
        // initial loading slope from the first step
        let slope_load = stress[0] / strain[0];
        // unloading initial slope from the two points after the turning point
        let turn = strain
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(turn + 2 < curve.steps.len(), "unloading branch missing");
        let slope_unload = (stress[turn + 1] - stress[turn + 2])
            / (strain[turn + 1] - strain[turn + 2]);
        let rel = (slope_unload - slope_load).abs() / slope_load;
        assert!(rel < 0.02, "unloading slope off by {rel}");
        // plasticity actually happened: residual strain at zero stress
        let last = curve.steps.last().unwrap();
        assert!(last.p[0] <= 0.0);
        assert!(last.f[0] - 1.0 > 0.002, "no residual strain: {}", last.f[0] - 1.0);
        // curve is deterministic
        let again = drive(&odmn, &cp, &schedule, INNER_TOL).unwrap();
        assert_eq!(curve, again);
    }

    #[test]
    fn metrics_examples() {
        assert_eq!(stress_error_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        let (mean, max) = stress_error_metrics(&[1.1, 2.1], &[1.0, 2.0]).unwrap();
        assert_relative_eq!(mean, 0.05, epsilon = 1e-12);
        assert_relative_eq!(max, 0.05, epsilon = 1e-12);
        assert!(stress_error_metrics(&[0.0], &[0.0]).is_err());
        assert!(stress_error_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }
}
