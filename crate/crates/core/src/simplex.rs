//! Probability-simplex primitives shared by every other module.
//!
//! Everything downstream (preference losses, gradient flows, token models)
//! manipulates points of the standard simplex
//!
//! ```text
//!     Δ_k = { p ∈ R^k : p_i ≥ 0, Σ p_i = 1 },   k ≥ 2
//! ```
//!
//! so the invariants live here once: [`Distribution`] is a validated point of
//! Δ_k, [`project_to_simplex`] is the Euclidean projection onto it, and
//! [`softmax_scaled`] produces the temperature-style targets Softmax(s/α).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute deviation of Σp from 1 accepted without touching the entries.
pub const SUM_TOL: f64 = 1e-12;
/// Deviation up to which construction silently renormalizes; beyond it the
/// input is considered corrupt and rejected.
pub const RENORM_TOL: f64 = 1e-9;

/// A validated probability vector over at least two outcomes.
///
/// Entries are nonnegative and sum to 1 within [`SUM_TOL`] (construction
/// renormalizes deviations up to [`RENORM_TOL`] and rejects anything larger).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput);
        }
        if probs.len() < 2 {
            return Err(Error::TooFewEntries { got: probs.len() });
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonfiniteValue {
                    what: "distribution entry",
                });
            }
            if value < 0.0 {
                return Err(Error::NegativeEntry { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() <= SUM_TOL {
            return Ok(Self { probs });
        }
        if (sum - 1.0).abs() < RENORM_TOL {
            let probs = probs.iter().map(|p| p / sum).collect();
            return Ok(Self { probs });
        }
        Err(Error::NotNormalized { sum })
    }

    pub fn uniform(dim: usize) -> Result<Self> {
        Self::new(vec![1.0 / dim as f64; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of outcome `i`. Panics if out of range, like slice indexing.
    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn min_entry(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// True when every entry clears `floor`, with one part in 1e6 of relative
    /// slack: the interior-maintenance renormalization in the dynamics module
    /// can leave floored entries at floor/(1+kε), a hair below the floor.
    pub fn is_interior(&self, floor: f64) -> bool {
        let slack = floor * (1.0 - 1e-6);
        self.probs.iter().all(|&p| p >= slack)
    }
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = Error;
    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.probs
    }
}

/// Softmax of `scores / alpha`, the fixed-point target family.
///
/// `alpha = 0` is the limit case and returns the argmax indicator; a tied
/// maximum is an error rather than a split, because silent tie-breaking would
/// mask data bugs. Stabilized by subtracting the max score before
/// exponentiation, so any finite score range is safe.
pub fn softmax_scaled(scores: &[f64], alpha: f64) -> Result<Distribution> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonfiniteValue { what: "score" });
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidParameter {
            detail: format!("softmax_scaled needs alpha >= 0, got {alpha}"),
        });
    }
    let (argmax, max) = scores
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    if alpha == 0.0 {
        if let Some(second) = (0..scores.len()).find(|&i| i != argmax && scores[i] == max) {
            return Err(Error::TiedArgmax {
                first: argmax,
                second,
            });
        }
        let mut probs = vec![0.0; scores.len()];
        probs[argmax] = 1.0;
        return Distribution::new(probs);
    }
    let weights: Vec<f64> = scores.iter().map(|s| ((s - max) / alpha).exp()).collect();
    let total: f64 = weights.iter().sum();
    Distribution::new(weights.iter().map(|w| w / total).collect())
}

/// Euclidean projection onto the simplex, by sort-and-threshold.
///
/// Sort descending, find the largest ρ with u_ρ − (Σ_{i≤ρ} u_i − 1)/ρ > 0,
/// and clip at that threshold:
///
/// ```text
///     θ = (Σ_{i≤ρ} u_i − 1)/ρ,      x_i = max(v_i − θ, 0)
/// ```
///
/// Points already on the simplex are returned unchanged, which also makes the
/// projection exactly idempotent.
pub fn project_to_simplex(v: &[f64]) -> Result<Distribution> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    if v.len() < 2 {
        return Err(Error::TooFewEntries { got: v.len() });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonfiniteValue { what: "projection input" });
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() <= SUM_TOL && v.iter().all(|&x| x >= 0.0) {
        return Distribution::new(v.to_vec());
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cssv = 0.0;
    let mut rho = 0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cssv += ui;
        let t = (cssv - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            rho = i + 1;
            theta = t;
        }
    }
    debug_assert!(rho >= 1);
    Distribution::new(v.iter().map(|&vi| (vi - theta).max(0.0)).collect())
}

/// L2 distance between two vectors of equal dimension.
pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Max-absolute-difference distance between two vectors of equal dimension.
pub fn linf_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// D_KL(p ‖ q) = Σ p_i ln(p_i/q_i), with the 0·ln(0/q) = 0 convention.
///
/// p_i > 0 where q_i = 0 is a support violation, not an infinity.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            left: p.dim(),
            right: q.dim(),
        });
    }
    let mut total = 0.0;
    for (index, (&pi, &qi)) in p.probs().iter().zip(q.probs()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::SupportViolation { index });
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}
