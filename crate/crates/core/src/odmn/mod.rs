//! Orientation-aware interaction-based deep material network.
//!
//! A depth-N binary tree carries trainable parameters: every leaf owns a raw
//! volume-fraction weight `z` and a Bunge orientation, every internal node an
//! interface normal parameterized by two angles in [0, 1]. The linear
//! homogenization operator and its exact parameter gradient live in
//! [`linear`]; offline training on relative-Frobenius stiffness loss lives in
//! [`train`].
//!
//! Internal nodes are heap-ordered: node `j` sits at level `l = ⌊log2(j+1)⌋`,
//! position `p = j + 1 − 2^l`, and covers the contiguous leaf range
//! `[p·2^{N−l}, (p+1)·2^{N−l})`, split evenly between its two children.

mod linear;
mod train;

pub use linear::{
    direction_from_angles, grad_params, homogenize_linear, homogenize_linear_leafwise,
    interaction_coefficients, leaf_weights, loss_relative_frobenius, solve_linear, AlphaCoeffs,
    LeafStiffness, LinearSolution, EPS_W,
};
pub use train::{train_offline, OdmnTrainConfig, OdmnTrainReport};

use crate::orientation::EulerBunge;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OdmnError {
    #[error("degenerate leaf weights: all z entries are ≤ 0")]
    DegenerateWeights,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("interaction system is singular beyond rank tolerance; active nodes: {active}, inactive pruned: {inactive}")]
    SingularSystem { active: usize, inactive: usize },
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },
}

/// Trainable parameter set of a depth-N network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdmnParams {
    depth: usize,
    /// Raw leaf weights, rectified and normalized into volume fractions.
    pub z: Vec<f64>,
    /// Leaf orientations (Bunge angles, may be unwrapped during training).
    pub euler: Vec<EulerBunge>,
    /// Node normal polar parameter, nominally in [0, 1].
    pub theta: Vec<f64>,
    /// Node normal azimuthal parameter, nominally in [0, 1].
    pub phi: Vec<f64>,
}

impl OdmnParams {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_leaves(&self) -> usize {
        1 << self.depth
    }

    pub fn n_nodes(&self) -> usize {
        (1 << self.depth) - 1
    }

    /// Total trainable entries: 4·2^N + 2·(2^N − 1).
    pub fn param_count(&self) -> usize {
        4 * self.n_leaves() + 2 * self.n_nodes()
    }

    /// Random initialization: z ~ U(0.2, 0.8), normal angles ~ U(0, 1),
    /// orientations Haar-uniform (cos β uniform).
    pub fn init_random(depth: usize, rng: &mut impl Rng) -> Self {
        let leaves = 1usize << depth;
        let nodes = leaves - 1;
        let tau = std::f64::consts::TAU;
        OdmnParams {
            depth,
            z: (0..leaves).map(|_| rng.gen_range(0.2..0.8)).collect(),
            euler: (0..leaves)
                .map(|_| EulerBunge {
                    alpha: rng.gen_range(0.0..tau),
                    beta: rng.gen_range(-1.0f64..1.0).acos(),
                    gamma: rng.gen_range(0.0..tau),
                })
                .collect(),
            theta: (0..nodes).map(|_| rng.gen_range(0.0..1.0)).collect(),
            phi: (0..nodes).map(|_| rng.gen_range(0.0..1.0)).collect(),
        }
    }

    /// Builds params from explicit parts, validating shapes.
    pub fn from_parts(
        depth: usize,
        z: Vec<f64>,
        euler: Vec<EulerBunge>,
        theta: Vec<f64>,
        phi: Vec<f64>,
    ) -> Result<Self, OdmnError> {
        let leaves = 1usize << depth;
        let nodes = leaves - 1;
        if z.len() != leaves || euler.len() != leaves || theta.len() != nodes || phi.len() != nodes
        {
            return Err(OdmnError::InvalidInput(format!(
                "shape mismatch for depth {depth}: z {}, euler {}, theta {}, phi {}",
                z.len(),
                euler.len(),
                theta.len(),
                phi.len()
            )));
        }
        Ok(OdmnParams { depth, z, euler, theta, phi })
    }

    /// Flat layout: `[z | (α,β,γ) per leaf | θ | φ]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(&self.z);
        for e in &self.euler {
            v.extend_from_slice(&[e.alpha, e.beta, e.gamma]);
        }
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.phi);
        v
    }

    pub fn from_vec(depth: usize, v: &[f64]) -> Result<Self, OdmnError> {
        let leaves = 1usize << depth;
        let nodes = leaves - 1;
        if v.len() != 4 * leaves + 2 * nodes {
            return Err(OdmnError::InvalidInput(format!(
                "expected {} entries for depth {depth}, got {}",
                4 * leaves + 2 * nodes,
                v.len()
            )));
        }
        let z = v[..leaves].to_vec();
        let euler = v[leaves..4 * leaves]
            .chunks_exact(3)
            .map(|c| EulerBunge { alpha: c[0], beta: c[1], gamma: c[2] })
            .collect();
        let theta = v[4 * leaves..4 * leaves + nodes].to_vec();
        let phi = v[4 * leaves + nodes..].to_vec();
        Ok(OdmnParams { depth, z, euler, theta, phi })
    }

    /// Wraps angles into their nominal ranges without changing the network.
    pub fn canonicalized(&self) -> Self {
        OdmnParams {
            depth: self.depth,
            z: self.z.clone(),
            euler: self.euler.iter().map(|e| EulerBunge::new(e.alpha, e.beta, e.gamma)).collect(),
            theta: self.theta.iter().map(|t| t.rem_euclid(1.0)).collect(),
            phi: self.phi.iter().map(|p| p.rem_euclid(1.0)).collect(),
        }
    }
}

/// Level and in-level position of heap node `j`.
#[inline]
pub(crate) fn node_level_pos(j: usize) -> (usize, usize) {
    let l = usize::BITS as usize - 1 - (j + 1).leading_zeros() as usize;
    (l, j + 1 - (1 << l))
}

/// Leaf range `[lo, hi)` covered by node `j` in a depth-N tree, with the
/// midpoint separating its two children.
#[inline]
pub(crate) fn node_leaf_range(j: usize, depth: usize) -> (usize, usize, usize) {
    let (l, p) = node_level_pos(j);
    let width = 1usize << (depth - l);
    let lo = p * width;
    (lo, lo + width / 2, lo + width)
}

/// On-disk form: leaf and node records plus training metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdmnParamsFile {
    pub depth: usize,
    pub leaves: Vec<LeafRecord>,
    pub nodes: Vec<NodeRecord>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeafRecord {
    pub z: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeRecord {
    pub theta: f64,
    pub phi: f64,
}

impl OdmnParamsFile {
    pub fn from_params(p: &OdmnParams, metadata: serde_json::Value) -> Self {
        let p = p.canonicalized();
        OdmnParamsFile {
            depth: p.depth,
            leaves: p
                .z
                .iter()
                .zip(&p.euler)
                .map(|(&z, e)| LeafRecord { z, alpha: e.alpha, beta: e.beta, gamma: e.gamma })
                .collect(),
            nodes: p
                .theta
                .iter()
                .zip(&p.phi)
                .map(|(&theta, &phi)| NodeRecord { theta, phi })
                .collect(),
            metadata,
        }
    }

    pub fn into_params(self) -> Result<OdmnParams, OdmnError> {
        OdmnParams::from_parts(
            self.depth,
            self.leaves.iter().map(|l| l.z).collect(),
            self.leaves
                .iter()
                .map(|l| EulerBunge { alpha: l.alpha, beta: l.beta, gamma: l.gamma })
                .collect(),
            self.nodes.iter().map(|n| n.theta).collect(),
            self.nodes.iter().map(|n| n.phi).collect(),
        )
    }
}
