//! Linear homogenization operator of the network and its exact gradient.
//!
//! Small-strain form: leaf strains are the macroscopic strain plus rank-one
//! interface fluctuations, `ε_i = ε̄ + Σ_j α_ij·sym(a_j ⊗ N_j)`, and the
//! interaction vectors solve the weighted traction balance
//! `Σ_i W_i σ_i α_ij · N_j = 0` per active node. Everything reduces to
//! subtree-aggregated 6×6 blocks:
//!
//! - `U_n = Σ_{i∈n} W_i C_i` (subtree Voigt averages),
//! - `Ĉ_j = cL_j·U_left + cR_j·U_right` (zero-mean weighted stiffness),
//! - `K_jk = H_jᵀ D_jk H_k` with `H_j` the Voigt image of `a ⊗ N_j`,
//!
//! so `K A = −F` with `F_j = H_jᵀ Ĉ_j` yields all six load cases at once and
//! `C̄ = U_root + Σ_j Ĉ_j H_j A_j`. The reverse pass consumes the stored
//! factorization: one extra triangular solve per sample, never finite
//! differences.

use super::{node_leaf_range, OdmnError, OdmnParams};
use crate::orientation::{
    bond_stress_matrix, EulerBunge, Matrix6, StiffnessVoigt, Vector6, VOIGT_PAIRS,
};
use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};

pub type Matrix6x3 = SMatrix<f64, 6, 3>;
pub type Matrix3x6 = SMatrix<f64, 3, 6>;

/// Weight below which a node side counts as empty and the node is pruned.
pub const EPS_W: f64 = 1e-8;

/// Relative pivot ratio below which the interaction system counts as singular.
const RANK_TOL: f64 = 1e-14;

/// Interface normal from two angles (wrapped into [0, 1]).
pub fn direction_from_angles(theta: f64, phi: f64) -> Vector3<f64> {
    let t = std::f64::consts::PI * theta.rem_euclid(1.0);
    let f = std::f64::consts::TAU * phi.rem_euclid(1.0);
    Vector3::new(f.cos() * t.sin(), f.sin() * t.sin(), t.cos())
}

fn direction_partials(theta: f64, phi: f64) -> (Vector3<f64>, Vector3<f64>) {
    let pi = std::f64::consts::PI;
    let t = pi * theta.rem_euclid(1.0);
    let f = std::f64::consts::TAU * phi.rem_euclid(1.0);
    (
        Vector3::new(f.cos() * t.cos(), f.sin() * t.cos(), -t.sin()) * pi,
        Vector3::new(-f.sin() * t.sin(), f.cos() * t.sin(), 0.0) * (2.0 * pi),
    )
}

/// Rectified, normalized leaf volume fractions.
pub fn leaf_weights(z: &[f64]) -> Result<Vec<f64>, OdmnError> {
    let total: f64 = z.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return Err(OdmnError::DegenerateWeights);
    }
    Ok(z.iter().map(|v| v.max(0.0) / total).collect())
}

/// Zero-mean interaction coefficients per node.
///
/// `alpha(i, j)` is `cl[j]` for leaves under j's left child, `cr[j]` under
/// the right child, zero elsewhere; inactive nodes carry a zeroed column.
#[derive(Debug, Clone)]
pub struct AlphaCoeffs {
    pub depth: usize,
    pub sl: Vec<f64>,
    pub sr: Vec<f64>,
    pub cl: Vec<f64>,
    pub cr: Vec<f64>,
    pub active: Vec<bool>,
}

impl AlphaCoeffs {
    pub fn alpha(&self, leaf: usize, node: usize) -> f64 {
        if !self.active[node] {
            return 0.0;
        }
        let (lo, mid, hi) = node_leaf_range(node, self.depth);
        if leaf >= lo && leaf < mid {
            self.cl[node]
        } else if leaf >= mid && leaf < hi {
            self.cr[node]
        } else {
            0.0
        }
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }
}

/// Builds the interaction coefficients from leaf weights.
pub fn interaction_coefficients(w: &[f64], depth: usize) -> AlphaCoeffs {
    let leaves = 1usize << depth;
    assert_eq!(w.len(), leaves, "weight count must match the leaf count");
    let nodes = leaves - 1;
    let mut sl = vec![0.0; nodes];
    let mut sr = vec![0.0; nodes];
    let mut cl = vec![0.0; nodes];
    let mut cr = vec![0.0; nodes];
    let mut active = vec![false; nodes];
    for j in 0..nodes {
        let (lo, mid, hi) = node_leaf_range(j, depth);
        sl[j] = w[lo..mid].iter().sum();
        sr[j] = w[mid..hi].iter().sum();
        if sl[j] > EPS_W && sr[j] > EPS_W {
            let d = sl[j] + sr[j];
            cl[j] = sr[j] / d;
            cr[j] = -sl[j] / d;
            active[j] = true;
        }
    }
    AlphaCoeffs { depth, sl, sr, cl, cr, active }
}

/// Voigt image of `a ⊗ N` symmetrized, as a linear map of `a` (eng shears).
fn h_matrix(n: &Vector3<f64>) -> Matrix6x3 {
    let mut h = Matrix6x3::zeros();
    h[(0, 0)] = n[0];
    h[(1, 1)] = n[1];
    h[(2, 2)] = n[2];
    h[(3, 1)] = n[2];
    h[(3, 2)] = n[1];
    h[(4, 0)] = n[2];
    h[(4, 2)] = n[0];
    h[(5, 0)] = n[1];
    h[(5, 1)] = n[0];
    h
}

fn h_vjp(hbar: &Matrix6x3) -> Vector3<f64> {
    Vector3::new(
        hbar[(0, 0)] + hbar[(4, 2)] + hbar[(5, 1)],
        hbar[(1, 1)] + hbar[(3, 2)] + hbar[(5, 0)],
        hbar[(2, 2)] + hbar[(3, 1)] + hbar[(4, 0)],
    )
}

fn rot_z(t: f64) -> Matrix3<f64> {
    Matrix3::new(t.cos(), -t.sin(), 0.0, t.sin(), t.cos(), 0.0, 0.0, 0.0, 1.0)
}

fn rot_x(t: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, 0.0, 0.0, t.cos(), -t.sin(), 0.0, t.sin(), t.cos())
}

fn drot_z(t: f64) -> Matrix3<f64> {
    Matrix3::new(-t.sin(), -t.cos(), 0.0, t.cos(), -t.sin(), 0.0, 0.0, 0.0, 0.0)
}

fn drot_x(t: f64) -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -t.sin(), -t.cos(), 0.0, t.cos(), -t.sin())
}

/// Bunge rotation straight from raw angles (smooth in each, no folding).
fn bunge_matrix(e: &EulerBunge) -> Matrix3<f64> {
    rot_z(e.alpha) * rot_x(e.beta) * rot_z(e.gamma)
}

fn bunge_partials(e: &EulerBunge) -> [Matrix3<f64>; 3] {
    [
        drot_z(e.alpha) * rot_x(e.beta) * rot_z(e.gamma),
        rot_z(e.alpha) * drot_x(e.beta) * rot_z(e.gamma),
        rot_z(e.alpha) * rot_x(e.beta) * drot_z(e.gamma),
    ]
}

/// Reverse of the Bond stress matrix: accumulates the rotation cotangent.
fn bond_vjp(r: &Matrix3<f64>, tbar: &Matrix6) -> Matrix3<f64> {
    let mut rbar = Matrix3::zeros();
    for (row, &(i, j)) in VOIGT_PAIRS.iter().enumerate() {
        for (col, &(k, l)) in VOIGT_PAIRS.iter().enumerate() {
            let g = tbar[(row, col)];
            if g == 0.0 {
                continue;
            }
            rbar[(i, k)] += g * r[(j, l)];
            rbar[(j, l)] += g * r[(i, k)];
            if k != l {
                rbar[(i, l)] += g * r[(j, k)];
                rbar[(j, k)] += g * r[(i, l)];
            }
        }
    }
    rbar
}

#[inline]
fn fdot(a: &Matrix6, b: &Matrix6) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Leaf stiffness source for the operator.
pub enum LeafStiffness<'a> {
    /// Crystal stiffness rotated into each leaf by its Bunge angles.
    Rotated(&'a StiffnessVoigt),
    /// Explicit per-leaf stiffness (testing, laminates, mixed phases).
    Injected(&'a [StiffnessVoigt]),
}

struct RotationPath {
    c_crystal: Matrix6,
    r: Vec<Matrix3<f64>>,
    t_bond: Vec<Matrix6>,
}

/// Everything the forward pass produced, kept for the reverse pass and for
/// invariant checks.
pub struct LinearSolution {
    pub c_bar: StiffnessVoigt,
    depth: usize,
    w: Vec<f64>,
    relu_total: f64,
    alpha: AlphaCoeffs,
    normals: Vec<Vector3<f64>>,
    h: Vec<Matrix6x3>,
    c_leaf: Vec<Matrix6>,
    u: Vec<Matrix6>,
    chat: Vec<Matrix6>,
    slot: Vec<Option<usize>>,
    active_nodes: Vec<usize>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    a: DMatrix<f64>,
    rotation: Option<RotationPath>,
}

impl LinearSolution {
    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn alpha(&self) -> &AlphaCoeffs {
        &self.alpha
    }

    pub fn normal(&self, node: usize) -> Vector3<f64> {
        self.normals[node]
    }

    /// Interaction vector of `node` under unit load `k`, zero when inactive.
    pub fn interaction_vector(&self, node: usize, load: usize) -> Vector3<f64> {
        match self.slot[node] {
            Some(s) => Vector3::new(
                self.a[(3 * s, load)],
                self.a[(3 * s + 1, load)],
                self.a[(3 * s + 2, load)],
            ),
            None => Vector3::zeros(),
        }
    }

    /// Leaf strain (eng Voigt) under unit load `k`.
    pub fn leaf_strain(&self, leaf: usize, load: usize) -> Vector6 {
        let mut eps = Vector6::zeros();
        eps[load] = 1.0;
        for j in &self.active_nodes {
            let aij = self.alpha.alpha(leaf, *j);
            if aij != 0.0 {
                eps += self.h[*j] * self.interaction_vector(*j, load) * aij;
            }
        }
        eps
    }

    /// Leaf stress (Voigt) under unit load `k`.
    pub fn leaf_stress(&self, leaf: usize, load: usize) -> Vector6 {
        StiffnessVoigt(self.c_leaf[leaf]).apply(&self.leaf_strain(leaf, load))
    }
}

/// Solves the linear network for all six unit loads.
pub fn solve_linear(
    params: &OdmnParams,
    source: &LeafStiffness,
) -> Result<LinearSolution, OdmnError> {
    let depth = params.depth();
    let leaves = params.n_leaves();
    let nodes = params.n_nodes();

    let w = leaf_weights(&params.z)?;
    let relu_total: f64 = params.z.iter().map(|v| v.max(0.0)).sum();
    let alpha = interaction_coefficients(&w, depth);

    let (c_leaf, rotation): (Vec<Matrix6>, Option<RotationPath>) = match source {
        LeafStiffness::Rotated(c_crystal) => {
            let mut r_list = Vec::with_capacity(leaves);
            let mut t_list = Vec::with_capacity(leaves);
            let mut c_list = Vec::with_capacity(leaves);
            for e in &params.euler {
                let r = bunge_matrix(e);
                let t = bond_stress_matrix(&r);
                c_list.push(t * c_crystal.0 * t.transpose());
                r_list.push(r);
                t_list.push(t);
            }
            (c_list, Some(RotationPath { c_crystal: c_crystal.0, r: r_list, t_bond: t_list }))
        }
        LeafStiffness::Injected(cs) => {
            if cs.len() != leaves {
                return Err(OdmnError::InvalidInput(format!(
                    "{} leaf stiffnesses for {leaves} leaves",
                    cs.len()
                )));
            }
            (cs.iter().map(|c| c.0).collect(), None)
        }
    };

    // subtree Voigt sums over the full tree (leaf level appended)
    let mut u = vec![Matrix6::zeros(); 2 * leaves - 1];
    for i in 0..leaves {
        u[nodes + i] = c_leaf[i] * w[i];
    }
    for j in (0..nodes).rev() {
        u[j] = u[2 * j + 1] + u[2 * j + 2];
    }

    let normals: Vec<Vector3<f64>> = (0..nodes)
        .map(|j| direction_from_angles(params.theta[j], params.phi[j]))
        .collect();
    let h: Vec<Matrix6x3> = normals.iter().map(h_matrix).collect();

    let mut chat = vec![Matrix6::zeros(); nodes];
    for j in 0..nodes {
        if alpha.active[j] {
            chat[j] = u[2 * j + 1] * alpha.cl[j] + u[2 * j + 2] * alpha.cr[j];
        }
    }

    let mut slot = vec![None; nodes];
    let mut active_nodes = Vec::new();
    for j in 0..nodes {
        if alpha.active[j] {
            slot[j] = Some(active_nodes.len());
            active_nodes.push(j);
        }
    }
    let m = active_nodes.len();

    let mut c_raw = u.first().copied().unwrap_or_default();
    if depth == 0 {
        // single leaf: Voigt average is exact
        return Ok(LinearSolution {
            c_bar: StiffnessVoigt((c_raw + c_raw.transpose()) * 0.5),
            depth,
            w,
            relu_total,
            alpha,
            normals,
            h,
            c_leaf,
            u,
            chat,
            slot,
            active_nodes,
            chol: None,
            a: DMatrix::zeros(0, 6),
            rotation,
        });
    }

    let mut k = DMatrix::<f64>::zeros(3 * m, 3 * m);
    let mut f = DMatrix::<f64>::zeros(3 * m, 6);
    for (sj, &j) in active_nodes.iter().enumerate() {
        let x = u[2 * j + 1] * (alpha.cl[j] * alpha.cl[j])
            + u[2 * j + 2] * (alpha.cr[j] * alpha.cr[j]);
        let diag = h[j].transpose() * x * h[j];
        k.view_mut((3 * sj, 3 * sj), (3, 3)).copy_from(&diag);
        let fj = h[j].transpose() * chat[j];
        f.view_mut((3 * sj, 0), (3, 6)).copy_from(&fj);
        // strict descendants: constant α over the descendant's leaves
        let (lo_j, mid_j, hi_j) = node_leaf_range(j, depth);
        for (sk, &kk) in active_nodes.iter().enumerate() {
            if kk == j {
                continue;
            }
            let (lo_k, _, hi_k) = node_leaf_range(kk, depth);
            if lo_k >= lo_j && hi_k <= hi_j {
                let s = if hi_k <= mid_j { alpha.cl[j] } else { alpha.cr[j] };
                let block = h[j].transpose() * chat[kk] * h[kk] * s;
                k.view_mut((3 * sj, 3 * sk), (3, 3)).copy_from(&block);
                k.view_mut((3 * sk, 3 * sj), (3, 3)).copy_from(&block.transpose());
            }
        }
    }

    let (chol, a) = if m > 0 {
        let chol = nalgebra::Cholesky::new(k).ok_or(OdmnError::SingularSystem {
            active: m,
            inactive: nodes - m,
        })?;
        let l_diag = chol.l_dirty();
        let mut dmin = f64::MAX;
        let mut dmax: f64 = 0.0;
        for i in 0..3 * m {
            let d = l_diag[(i, i)].abs();
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
        if dmin * dmin < RANK_TOL * dmax * dmax {
            return Err(OdmnError::SingularSystem { active: m, inactive: nodes - m });
        }
        let a = chol.solve(&(-&f));
        (Some(chol), a)
    } else {
        (None, DMatrix::zeros(0, 6))
    };

    for (sj, &j) in active_nodes.iter().enumerate() {
        let aj = a.view((3 * sj, 0), (3, 6));
        c_raw += chat[j] * h[j] * aj;
    }

    Ok(LinearSolution {
        c_bar: StiffnessVoigt((c_raw + c_raw.transpose()) * 0.5),
        depth,
        w,
        relu_total,
        alpha,
        normals,
        h,
        c_leaf,
        u,
        chat,
        slot,
        active_nodes,
        chol,
        a,
        rotation,
    })
}

/// Analytic homogenization of the network around a single crystal stiffness.
pub fn homogenize_linear(
    params: &OdmnParams,
    c_crystal: &StiffnessVoigt,
) -> Result<StiffnessVoigt, OdmnError> {
    Ok(solve_linear(params, &LeafStiffness::Rotated(c_crystal))?.c_bar)
}

/// Same operator with explicit per-leaf stiffness (testing / laminates).
pub fn homogenize_linear_leafwise(
    params: &OdmnParams,
    leaf_cs: &[StiffnessVoigt],
) -> Result<StiffnessVoigt, OdmnError> {
    Ok(solve_linear(params, &LeafStiffness::Injected(leaf_cs))?.c_bar)
}

/// Relative Frobenius distance `‖c_dns − c_pred‖_F / ‖c_dns‖_F`.
pub fn loss_relative_frobenius(
    c_pred: &StiffnessVoigt,
    c_dns: &StiffnessVoigt,
) -> Result<f64, OdmnError> {
    let denom = c_dns.frobenius_norm();
    if denom == 0.0 {
        return Err(OdmnError::InvalidInput("reference stiffness has zero norm".into()));
    }
    Ok((c_dns.0 - c_pred.0).norm() / denom)
}

/// Reverse pass: parameter cotangents for a given `∂L/∂C̄`.
///
/// Layout matches [`OdmnParams::to_vec`]: `[z | (α,β,γ) | θ | φ]`.
pub fn vjp(sol: &LinearSolution, params: &OdmnParams, cbar_bar: &Matrix6) -> Vec<f64> {
    let depth = sol.depth;
    let leaves = params.n_leaves();
    let nodes = params.n_nodes();
    let m = sol.active_nodes.len();

    let raw_bar = (cbar_bar + cbar_bar.transpose()) * 0.5;

    let mut ubar = vec![Matrix6::zeros(); 2 * leaves - 1];
    let mut chatbar = vec![Matrix6::zeros(); nodes];
    let mut hbar = vec![Matrix6x3::zeros(); nodes];
    let mut clbar = vec![0.0; nodes];
    let mut crbar = vec![0.0; nodes];
    let mut wbar = vec![0.0; leaves];
    let mut cleafbar = vec![Matrix6::zeros(); leaves];

    ubar[0] += raw_bar;

    if m > 0 {
        // upscale: C̄_raw += Σ_j Ĉ_j H_j A_j
        let mut abar = DMatrix::<f64>::zeros(3 * m, 6);
        for (sj, &j) in sol.active_nodes.iter().enumerate() {
            let aj: Matrix3x6 = sol.a.fixed_view::<3, 6>(3 * sj, 0).into_owned();
            let g = sol.chat[j] * sol.h[j];
            let gbar: Matrix6x3 = raw_bar * aj.transpose();
            chatbar[j] += gbar * sol.h[j].transpose();
            hbar[j] += sol.chat[j].transpose() * gbar;
            abar.view_mut((3 * sj, 0), (3, 6)).copy_from(&(g.transpose() * raw_bar));
        }
        // linear solve K A = −F
        let lambda = sol.chol.as_ref().expect("factorization retained").solve(&abar);
        let kbar = -&lambda * sol.a.transpose(); // 3m×3m
        let fbar = -lambda; // 3m×6

        for (sj, &j) in sol.active_nodes.iter().enumerate() {
            // F_j = H_jᵀ Ĉ_j
            let fbar_j: Matrix3x6 = fbar.fixed_view::<3, 6>(3 * sj, 0).into_owned();
            hbar[j] += sol.chat[j] * fbar_j.transpose();
            chatbar[j] += sol.h[j] * fbar_j;

            // diagonal block K_jj = H_jᵀ X H_j
            let x = sol.u[2 * j + 1] * (sol.alpha.cl[j] * sol.alpha.cl[j])
                + sol.u[2 * j + 2] * (sol.alpha.cr[j] * sol.alpha.cr[j]);
            let b: Matrix3<f64> = kbar.fixed_view::<3, 3>(3 * sj, 3 * sj).into_owned();
            hbar[j] += x * sol.h[j] * b.transpose() + x.transpose() * sol.h[j] * b;
            let xbar = sol.h[j] * b * sol.h[j].transpose();
            clbar[j] += 2.0 * sol.alpha.cl[j] * fdot(&xbar, &sol.u[2 * j + 1]);
            crbar[j] += 2.0 * sol.alpha.cr[j] * fdot(&xbar, &sol.u[2 * j + 2]);
            ubar[2 * j + 1] += xbar * (sol.alpha.cl[j] * sol.alpha.cl[j]);
            ubar[2 * j + 2] += xbar * (sol.alpha.cr[j] * sol.alpha.cr[j]);

            // off-diagonal nested blocks K_jk = s·H_jᵀ Ĉ_k H_k (and K_kj)
            let (lo_j, mid_j, hi_j) = node_leaf_range(j, depth);
            for (sk, &kk) in sol.active_nodes.iter().enumerate() {
                if kk == j {
                    continue;
                }
                let (lo_k, _, hi_k) = node_leaf_range(kk, depth);
                if lo_k >= lo_j && hi_k <= hi_j {
                    let (s, sbar) = if hi_k <= mid_j {
                        (sol.alpha.cl[j], &mut clbar[j])
                    } else {
                        (sol.alpha.cr[j], &mut crbar[j])
                    };
                    let bjk: Matrix3<f64> = kbar.fixed_view::<3, 3>(3 * sj, 3 * sk).into_owned();
                    let bkj: Matrix3<f64> = kbar.fixed_view::<3, 3>(3 * sk, 3 * sj).into_owned();
                    let b = bjk + bkj.transpose();
                    let core = sol.h[j].transpose() * sol.chat[kk] * sol.h[kk];
                    *sbar += (b.transpose() * core).trace();
                    hbar[j] += sol.chat[kk] * sol.h[kk] * b.transpose() * s;
                    chatbar[kk] += sol.h[j] * b * sol.h[kk].transpose() * s;
                    hbar[kk] += sol.chat[kk].transpose() * sol.h[j] * b * s;
                }
            }
        }
    }

    // Ĉ_j = cl·U_L + cr·U_R on active nodes
    for j in 0..nodes {
        if !sol.alpha.active[j] {
            continue;
        }
        clbar[j] += fdot(&chatbar[j], &sol.u[2 * j + 1]);
        crbar[j] += fdot(&chatbar[j], &sol.u[2 * j + 2]);
        ubar[2 * j + 1] += chatbar[j] * sol.alpha.cl[j];
        ubar[2 * j + 2] += chatbar[j] * sol.alpha.cr[j];
    }

    // subtree sums: push cotangents down, then peel the leaf terms
    for j in 0..nodes {
        let push = ubar[j];
        ubar[2 * j + 1] += push;
        ubar[2 * j + 2] += push;
    }
    for i in 0..leaves {
        let ub = ubar[nodes + i];
        wbar[i] += fdot(&ub, &sol.c_leaf[i]);
        cleafbar[i] += ub * sol.w[i];
    }

    // interaction coefficients: cl = SR/D, cr = −SL/D
    for j in 0..nodes {
        if !sol.alpha.active[j] {
            continue;
        }
        let d = sol.alpha.sl[j] + sol.alpha.sr[j];
        let slbar = -(sol.alpha.sr[j] / (d * d)) * (clbar[j] + crbar[j]);
        let srbar = (sol.alpha.sl[j] / (d * d)) * (clbar[j] + crbar[j]);
        let (lo, mid, hi) = node_leaf_range(j, depth);
        for i in lo..mid {
            wbar[i] += slbar;
        }
        for i in mid..hi {
            wbar[i] += srbar;
        }
    }

    // W = relu(z)/t
    let dot_ww: f64 = wbar.iter().zip(&sol.w).map(|(g, w)| g * w).sum();
    let mut grad = vec![0.0; params.param_count()];
    for i in 0..leaves {
        if params.z[i] > 0.0 {
            grad[i] = (wbar[i] - dot_ww) / sol.relu_total;
        }
    }

    // normals
    for j in 0..nodes {
        let nbar = h_vjp(&hbar[j]);
        let (dn_dt, dn_df) = direction_partials(params.theta[j], params.phi[j]);
        grad[4 * leaves + j] = nbar.dot(&dn_dt);
        grad[4 * leaves + nodes + j] = nbar.dot(&dn_df);
    }

    // rotation path: C_i = T X Tᵀ ⇒ T̄ = C̄ᵢ T Xᵀ + C̄ᵢᵀ T X
    if let Some(rot) = &sol.rotation {
        let x = &rot.c_crystal;
        for i in 0..leaves {
            let t = &rot.t_bond[i];
            let tbar = cleafbar[i] * t * x.transpose() + cleafbar[i].transpose() * t * x;
            let rbar = bond_vjp(&rot.r[i], &tbar);
            let parts = bunge_partials(&params.euler[i]);
            for (k, dr) in parts.iter().enumerate() {
                grad[leaves + 3 * i + k] =
                    rbar.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            }
        }
    }

    grad
}

/// Loss and exact gradient over all trainable entries for one sample.
pub fn grad_params(
    params: &OdmnParams,
    c_crystal: &StiffnessVoigt,
    c_dns: &StiffnessVoigt,
) -> Result<(f64, Vec<f64>), OdmnError> {
    let sol = solve_linear(params, &LeafStiffness::Rotated(c_crystal))?;
    let denom = c_dns.frobenius_norm();
    if denom == 0.0 {
        return Err(OdmnError::InvalidInput("reference stiffness has zero norm".into()));
    }
    let diff = sol.c_bar.0 - c_dns.0;
    let dist = diff.norm();
    let loss = dist / denom;
    if dist == 0.0 {
        return Ok((0.0, vec![0.0; params.param_count()]));
    }
    let cbar_bar = diff / (dist * denom);
    Ok((loss, vjp(&sol, params, &cbar_bar)))
}
