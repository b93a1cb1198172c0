//! Discrete ODFs on the cubic fundamental zone and texture-hull sampling.
//!
//! The orientation grid is built by farthest-point sampling over a
//! deterministic low-discrepancy quaternion sequence (Halton triples through
//! Shoemake's subgroup map, reduced to the fundamental zone). Each step keeps
//! the candidate farthest in symmetric misorientation from everything kept so
//! far, so the largest coverage hole shrinks first. The grid cardinality
//! scales with the cell volume, `round(618·(10°/res)³)`, anchored at 618
//! orientations for the reference 10° resolution.

use crate::orientation::{reduce_to_fz, UnitQuaternion, CUBIC_SYMMETRY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextureError {
    #[error("grid resolution {0}° outside the supported range [5°, 20°]")]
    InvalidResolution(f64),
    #[error("invalid ODF weights: {0}")]
    InvalidWeights(String),
    #[error("invalid texture spec: {0}")]
    InvalidSpec(String),
}

/// Number of candidate quaternions fed to the farthest-point selection.
const GRID_CANDIDATES: usize = 100_000;

/// Grid cardinality at a given resolution, anchored at 618 for 10°.
fn grid_cardinality(resolution_deg: f64) -> usize {
    (618.0 * (10.0 / resolution_deg).powi(3)).round() as usize
}

/// Deterministic orientation grid covering the cubic fundamental zone.
#[derive(Debug, Clone)]
pub struct FundamentalGrid {
    resolution_deg: f64,
    orientations: Vec<UnitQuaternion>,
    equivalents: Vec<[UnitQuaternion; 24]>,
}

fn halton(index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

fn shoemake(u1: f64, u2: f64, u3: f64) -> UnitQuaternion {
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    UnitQuaternion::new(
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
        b * (tau * u3).cos(),
    )
}

fn equivalents_of(q: &UnitQuaternion) -> [UnitQuaternion; 24] {
    let mut out = [UnitQuaternion::IDENTITY; 24];
    for (slot, s) in out.iter_mut().zip(CUBIC_SYMMETRY.iter()) {
        *slot = q.mul(s);
    }
    out
}

/// Builds the fundamental-zone grid for `resolution_deg` ∈ [5°, 20°].
pub fn build_fundamental_grid(resolution_deg: f64) -> Result<FundamentalGrid, TextureError> {
    if !(5.0..=20.0).contains(&resolution_deg) {
        return Err(TextureError::InvalidResolution(resolution_deg));
    }
    let count = grid_cardinality(resolution_deg);
    let candidates: Vec<UnitQuaternion> = crate::parallel::par_map_indexed(GRID_CANDIDATES, |i| {
        let i = i + 1;
        reduce_to_fz(&shoemake(halton(i, 2), halton(i, 3), halton(i, 5)))
    });

    // farthest-point selection on |dot| (monotone in misorientation)
    let mut best_dot = vec![-1.0f64; candidates.len()];
    let mut orientations: Vec<UnitQuaternion> = Vec::with_capacity(count);
    let mut equivalents: Vec<[UnitQuaternion; 24]> = Vec::with_capacity(count);
    let mut next = 0usize;
    for _ in 0..count {
        let chosen = candidates[next];
        orientations.push(chosen);
        let eqs = equivalents_of(&chosen);
        let mut farthest = 0usize;
        let mut farthest_dot = 2.0f64;
        for (ci, cand) in candidates.iter().enumerate() {
            let mut d = best_dot[ci];
            for e in &eqs {
                let v = cand.dot(e).abs();
                if v > d {
                    d = v;
                }
            }
            best_dot[ci] = d;
            if d < farthest_dot {
                farthest_dot = d;
                farthest = ci;
            }
        }
        equivalents.push(eqs);
        next = farthest;
    }
    Ok(FundamentalGrid { resolution_deg, orientations, equivalents })
}

impl FundamentalGrid {
    pub fn len(&self) -> usize {
        self.orientations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orientations.is_empty()
    }

    pub fn resolution_deg(&self) -> f64 {
        self.resolution_deg
    }

    pub fn orientations(&self) -> &[UnitQuaternion] {
        &self.orientations
    }

    pub fn orientation(&self, j: usize) -> &UnitQuaternion {
        &self.orientations[j]
    }

    /// Index of the grid orientation closest to `q` in symmetric misorientation.
    pub fn nearest_index(&self, q: &UnitQuaternion) -> usize {
        let mut best = 0;
        let mut best_dot = -1.0;
        for (j, eqs) in self.equivalents.iter().enumerate() {
            for e in eqs {
                let d = q.dot(e).abs();
                if d > best_dot {
                    best_dot = d;
                    best = j;
                }
            }
        }
        best
    }
}

/// Discrete ODF: probability weights over the grid orientations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Odf {
    weights: Vec<f64>,
}

impl Odf {
    /// Validates hull membership: weights in [0,1], summing to 1 within 1e-12.
    pub fn new(weights: Vec<f64>) -> Result<Self, TextureError> {
        if weights.is_empty() {
            return Err(TextureError::InvalidWeights("empty weight vector".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0 || **w > 1.0) {
            return Err(TextureError::InvalidWeights(format!("weight {w} outside [0, 1]")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(TextureError::InvalidWeights(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(j: usize) -> Self {
        Self { weights: vec![1.0 / j as f64; j] }
    }

    /// All mass on orientation `k`.
    pub fn delta(j: usize, k: usize) -> Self {
        let mut w = vec![0.0; j];
        w[k] = 1.0;
        Self { weights: w }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support_size(&self, eps: f64) -> usize {
        self.weights.iter().filter(|w| **w > eps).count()
    }
}

/// Hierarchical simplex sampling of the texture hull.
///
/// Per sample: the vertex count k is drawn log-uniformly from {1, …, J}, k
/// distinct vertices are chosen uniformly, and barycentric coordinates come
/// from a flat Dirichlet on that face. Low-dimensional faces (sharp textures)
/// are therefore visited as often as diffuse ones, decade by decade.
pub fn hss_sample(grid: &FundamentalGrid, count: usize, seed: u64) -> Vec<Odf> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| hss_one(grid.len(), &mut rng)).collect()
}

pub(crate) fn hss_one(j: usize, rng: &mut impl Rng) -> Odf {
    let ln_top = ((j + 1) as f64).ln();
    let k = (rng.gen_range(0.0..ln_top).exp().floor() as usize).clamp(1, j);
    // partial Fisher-Yates for k distinct vertex indices
    let mut idx: Vec<usize> = (0..j).collect();
    for i in 0..k {
        let pick = rng.gen_range(i..j);
        idx.swap(i, pick);
    }
    let mut weights = vec![0.0; j];
    let mut total = 0.0;
    let mut exps = Vec::with_capacity(k);
    for _ in 0..k {
        let e = -rng.gen_range(1e-300..1.0f64).ln();
        exps.push(e);
        total += e;
    }
    for (i, e) in exps.into_iter().enumerate() {
        weights[idx[i]] = e / total;
    }
    Odf { weights }
}

/// Uniform random orientation in the fundamental zone.
pub fn uniform_fz_orientation(rng: &mut impl Rng) -> UnitQuaternion {
    let mut g = [0.0; 4];
    for v in g.iter_mut() {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        *v = (-2.0 * u1.ln()).sqrt() * u2.cos();
    }
    reduce_to_fz(&UnitQuaternion::new(g[0], g[1], g[2], g[3]))
}

/// Random rotation of angle ≤ `max_angle_rad` (uniform in the geodesic ball)
/// applied to `q`, then reduced to the fundamental zone.
pub fn perturb_orientation(
    q: &UnitQuaternion,
    max_angle_rad: f64,
    rng: &mut impl Rng,
) -> UnitQuaternion {
    if max_angle_rad <= 0.0 {
        return reduce_to_fz(q);
    }
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    let axis = nalgebra::Vector3::new(r * phi.cos(), r * phi.sin(), z);
    let angle = max_angle_rad * rng.gen_range(0.0..1.0f64).cbrt();
    let delta = UnitQuaternion::from_axis_angle(axis, angle);
    reduce_to_fz(&delta.mul(q))
}

/// Draws one orientation from a discrete ODF: index ∝ p_j, then an in-bin
/// perturbation of at most `spread_deg`, then fundamental-zone reduction.
pub fn odf_sample_orientation(
    odf: &Odf,
    grid: &FundamentalGrid,
    spread_deg: f64,
    rng: &mut impl Rng,
) -> UnitQuaternion {
    debug_assert_eq!(odf.len(), grid.len());
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    let mut pick = odf.len() - 1;
    for (j, w) in odf.weights().iter().enumerate() {
        acc += w;
        if u < acc {
            pick = j;
            break;
        }
    }
    perturb_orientation(grid.orientation(pick), spread_deg.to_radians(), rng)
}

/// The four parametric texture families used for nonlinear-response datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextureKind {
    S1,
    S2,
    W1,
    W2,
}

impl TextureKind {
    pub const ALL: [TextureKind; 4] =
        [TextureKind::S1, TextureKind::S2, TextureKind::W1, TextureKind::W2];

    pub fn label(&self) -> &'static str {
        match self {
            TextureKind::S1 => "S1",
            TextureKind::S2 => "S2",
            TextureKind::W1 => "W1",
            TextureKind::W2 => "W2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Some(TextureKind::S1),
            "S2" => Some(TextureKind::S2),
            "W1" => Some(TextureKind::W1),
            "W2" => Some(TextureKind::W2),
            _ => None,
        }
    }

    fn dominant_count(&self) -> usize {
        match self {
            TextureKind::S1 | TextureKind::S2 => 1,
            TextureKind::W1 => 0,
            TextureKind::W2 => 2,
        }
    }

    /// (weight, sigma°) of the family definition.
    pub fn default_weight_sigma(&self) -> (f64, f64) {
        match self {
            TextureKind::S1 => (500_000.0, 1.0),
            TextureKind::S2 => (500_000.0, 8.0),
            TextureKind::W1 => (1.0, 1.0),
            TextureKind::W2 => (500_000.0, 10.0),
        }
    }
}

/// Parametric texture: zero, one or two dominant orientations mixed with a
/// uniform background over the fundamental zone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextureSpec {
    pub kind: TextureKind,
    pub dominant: Vec<UnitQuaternion>,
    pub weight: f64,
    pub sigma_deg: f64,
}

impl TextureSpec {
    pub fn new(
        kind: TextureKind,
        dominant: Vec<UnitQuaternion>,
        weight: f64,
        sigma_deg: f64,
    ) -> Result<Self, TextureError> {
        if dominant.len() != kind.dominant_count() {
            return Err(TextureError::InvalidSpec(format!(
                "{} requires {} dominant orientation(s), got {}",
                kind.label(),
                kind.dominant_count(),
                dominant.len()
            )));
        }
        if weight <= 0.0 || sigma_deg < 0.0 {
            return Err(TextureError::InvalidSpec("weight must be > 0, sigma ≥ 0".into()));
        }
        Ok(Self { kind, dominant, weight, sigma_deg })
    }

    /// Family with its standard weight/sigma and random dominant orientations.
    pub fn standard(kind: TextureKind, rng: &mut impl Rng) -> Self {
        let (weight, sigma) = kind.default_weight_sigma();
        let dominant = (0..kind.dominant_count()).map(|_| uniform_fz_orientation(rng)).collect();
        Self { kind, dominant, weight, sigma_deg: sigma }
    }
}

/// Draws one orientation from a texture family.
///
/// The family is a weighting of the grid orientations: each dominant
/// orientation carries `weight`, the remaining grid points carry 1. Dominant
/// picks are perturbed within `sigma` degrees; background picks reuse the
/// in-bin kernel of [`odf_sample_orientation`] (spread = resolution/2), so a
/// W1 stream is distributed exactly like uniform-ODF sampling.
pub fn texture_sample_orientation(
    spec: &TextureSpec,
    grid: &FundamentalGrid,
    rng: &mut impl Rng,
) -> UnitQuaternion {
    let j = grid.len();
    let n_dom = spec.dominant.len();
    let background_spread = (grid.resolution_deg() / 2.0).to_radians();
    fn background(
        grid: &FundamentalGrid,
        spread: f64,
        rng: &mut impl Rng,
    ) -> UnitQuaternion {
        let pick = rng.gen_range(0..grid.len());
        perturb_orientation(grid.orientation(pick), spread, rng)
    }
    if n_dom == 0 {
        return background(grid, background_spread, rng);
    }
    let dom_mass = spec.weight * n_dom as f64;
    let p_dom = dom_mass / (dom_mass + (j - n_dom) as f64);
    let u: f64 = rng.gen_range(0.0..1.0);
    if u < p_dom {
        let pick = ((u / p_dom * n_dom as f64) as usize).min(n_dom - 1);
        perturb_orientation(&spec.dominant[pick], spec.sigma_deg.to_radians(), rng)
    } else {
        background(grid, background_spread, rng)
    }
}

/// Texture-index estimate `J·Σ p̂²` from orientation draws binned to the grid.
pub fn texture_index_estimate(draws: &[UnitQuaternion], grid: &FundamentalGrid) -> f64 {
    let mut counts = vec![0usize; grid.len()];
    for q in draws {
        counts[grid.nearest_index(q)] += 1;
    }
    let n = draws.len() as f64;
    grid.len() as f64 * counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

/// Writes an ODF as `index,weight` CSV rows.
pub fn odf_to_csv(odf: &Odf) -> String {
    let mut out = String::from("index,weight\n");
    for (i, w) in odf.weights().iter().enumerate() {
        out.push_str(&format!("{i},{w}\n"));
    }
    out
}

/// Parses the CSV form written by [`odf_to_csv`].
pub fn odf_from_csv(text: &str) -> Result<Odf, TextureError> {
    let mut weights = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "index,weight" {
                return Err(TextureError::InvalidWeights(format!("bad CSV header: {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let idx: usize = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| TextureError::InvalidWeights(format!("bad index on line {lineno}")))?;
        if idx != weights.len() {
            return Err(TextureError::InvalidWeights(format!(
                "non-contiguous index {idx} on line {lineno}"
            )));
        }
        let w: f64 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| TextureError::InvalidWeights(format!("bad weight on line {lineno}")))?;
        weights.push(w);
    }
    Odf::new(weights)
}

/// Manifest accompanying exported ODFs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdfManifest {
    pub resolution_deg: f64,
    pub j: usize,
    pub seed: u64,
}
