//! Preference losses and their closed-form gradients over tabular policies.
//!
//! All losses are exact expectations over the atoms of a
//! [`PreferenceDistribution`]. The soft preference family, for a pairwise
//! distribution 𝒟 and weight μ:
//!
//! ```text
//!     L_alpha = -(1/alpha) · Σ 𝒟·μ·ln( π_w^alpha / (π_w^alpha + π_l^alpha) )    alpha > 0
//!     L_0     = -(1/2)     · Σ 𝒟·μ·ln( π_w / π_l )                              alpha = 0
//! ```
//!
//! with the best-of-n and ranking generalizations
//!
//! ```text
//!     L_n    = -(1/alpha) · Σ 𝒟·μ·ln( π_best^alpha / Σ_i π_i^alpha )
//!     L_rank = -(1/alpha) · Σ 𝒟·Σ_{k=1}^{n-1} μ_k·ln( π_{τ(k)}^alpha / Σ_{j≥k} π_{τ(j)}^alpha )
//! ```
//!
//! The per-atom gradient has the closed form
//!
//! ```text
//!     ∂L/∂π_w = -𝒟·μ·c/π_w,   ∂L/∂π_l = +𝒟·μ·c/π_l,   c = π_l^alpha/(π_w^alpha + π_l^alpha)
//! ```
//!
//! (c = 1/2 exactly at alpha = 0), and its best-of-n analogue distributes
//! `[k = best] − π_k^alpha/Σ_j π_j^alpha` over the tuple's responses.
//!
//! Every loss here is homogeneous of degree zero in each query's raw
//! probability row, so values and gradients are well defined on the raw
//! (unnormalized) parameterization that [`TabularPolicy::from_raw`] and
//! [`TabularPolicy::perturbed`] expose for finite-difference checks.
//!
//! The weight μ obeys a stop-gradient contract: it is resolved once per
//! loss or gradient call at the current policy and treated as a constant
//! thereafter, even though the sigmoid-sum form depends on the policy. The
//! `*_with_weights` variants accept the frozen weights explicitly, which is
//! what makes the contract testable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prefdata::{PairwiseTuple, PrefTuple, PreferenceDistribution, TupleKind};
use crate::simplex::{kl_divergence, Distribution};

// ==== tabular policies ====================================================

/// One probability row per query. Rows built by [`TabularPolicy::new`] are
/// normalized distributions; [`TabularPolicy::from_raw`] admits any strictly
/// positive rows (the raw parameterization used by derivative probes, on
/// which the losses are still defined by scale invariance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct TabularPolicy {
    rows: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(rows: Vec<Distribution>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(Self {
            rows: rows.into_iter().map(|d| d.into()).collect(),
        })
    }

    pub fn uniform(shape: &[usize]) -> Result<Self> {
        let rows = shape
            .iter()
            .map(|&k| Distribution::uniform(k))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    /// Strictly positive rows of arbitrary scale.
    pub fn from_raw(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput);
        }
        for row in &rows {
            if row.len() < 2 {
                return Err(Error::TooFewEntries { got: row.len() });
            }
            for &v in row {
                if !v.is_finite() {
                    return Err(Error::NonfiniteValue {
                        what: "policy entry",
                    });
                }
                if v <= 0.0 {
                    return Err(Error::InvalidParameter {
                        detail: format!("raw policy entry {v} is not strictly positive"),
                    });
                }
            }
        }
        Ok(Self { rows })
    }

    /// Copy with one raw entry shifted by `delta`, the probe move behind
    /// central finite differences. The shifted entry must stay positive.
    pub fn perturbed(&self, query: usize, response: usize, delta: f64) -> Result<Self> {
        self.check_response(query, response)?;
        let mut rows = self.rows.clone();
        let v = rows[query][response] + delta;
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::BoundaryTooClose { query, response });
        }
        rows[query][response] = v;
        Ok(Self { rows })
    }

    pub fn num_queries(&self) -> usize {
        self.rows.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.rows.iter().map(Vec::len).collect()
    }

    pub fn row(&self, query: usize) -> &[f64] {
        &self.rows[query]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Raw probability mass; panics on out-of-range indices (use
    /// `check_response` first on untrusted input).
    pub fn prob(&self, query: usize, response: usize) -> f64 {
        self.rows[query][response]
    }

    pub fn min_entry(&self) -> f64 {
        self.rows
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// All entries at or above `floor`, with a 1e-6 relative slack: flooring
    /// then renormalizing leaves floored entries at floor/(1 + k·floor),
    /// fractionally below the floor itself.
    pub fn is_interior(&self, floor: f64) -> bool {
        let slack = floor * (1.0 - 1e-6);
        self.rows.iter().flatten().all(|&v| v >= slack)
    }

    /// Per-query normalized copies (raw views are rescaled to unit mass).
    pub fn to_distributions(&self) -> Result<Vec<Distribution>> {
        self.rows
            .iter()
            .map(|row| {
                let total: f64 = row.iter().sum();
                if !(total > 0.0) {
                    return Err(Error::ZeroMass { query: 0 });
                }
                Distribution::new(row.iter().map(|v| v / total).collect())
            })
            .collect()
    }

    pub fn check_query(&self, query: usize) -> Result<()> {
        if query >= self.rows.len() {
            return Err(Error::UnknownQuery { query });
        }
        Ok(())
    }

    pub fn check_response(&self, query: usize, response: usize) -> Result<()> {
        self.check_query(query)?;
        if response >= self.rows[query].len() {
            return Err(Error::UnknownResponse { query, response });
        }
        Ok(())
    }

    fn check_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::PreconditionViolated {
                detail: format!(
                    "policy shape {:?} does not match data shape {:?}",
                    self.shape(),
                    shape
                ),
            });
        }
        Ok(())
    }

    /// Zero gradient accumulator of this policy's shape.
    pub fn zero_grad(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|row| vec![0.0; row.len()]).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for TabularPolicy {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput);
        }
        for row in &rows {
            if row.len() < 2 {
                return Err(Error::TooFewEntries { got: row.len() });
            }
            let mut total = 0.0;
            for &v in row {
                if !v.is_finite() {
                    return Err(Error::NonfiniteValue {
                        what: "policy entry",
                    });
                }
                if v < 0.0 {
                    return Err(Error::NegativeEntry {
                        index: 0,
                        value: v,
                    });
                }
                total += v;
            }
            if !(total > 0.0) {
                return Err(Error::ZeroMass { query: 0 });
            }
        }
        Ok(Self { rows })
    }
}

impl From<TabularPolicy> for Vec<Vec<f64>> {
    fn from(p: TabularPolicy) -> Self {
        p.rows
    }
}

// ==== weight functions ====================================================

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Uniform,
    SigmoidSum,
}

/// The μ weight: uniform (identically 1) or the doubled sigmoid of the
/// centered power of the tuple's probability sum,
///
/// ```text
///     μ(y1, y2 | x) = 2·σ( (π(y1)+π(y2))^gamma − Ê[(π(y1')+π(y2'))^gamma] )
/// ```
///
/// where Ê averages over the batch in sample mode and over the atom list,
/// weighted by the atom masses, in exact-expectation mode. Symmetric in the
/// responses and strictly positive; gamma = 0 gives exactly 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightFunction {
    pub kind: WeightKind,
    pub gamma: f64,
}

impl WeightFunction {
    pub fn uniform() -> Self {
        Self {
            kind: WeightKind::Uniform,
            gamma: 0.0,
        }
    }

    pub fn sigmoid_sum(gamma: f64) -> Result<Self> {
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(Error::InvalidParameter {
                detail: format!("gamma {gamma} must be finite and nonnegative"),
            });
        }
        Ok(Self {
            kind: WeightKind::SigmoidSum,
            gamma,
        })
    }

    /// One frozen weight per atom, the stop-gradient snapshot every loss and
    /// gradient call starts from.
    pub fn resolve(&self, policy: &TabularPolicy, dist: &PreferenceDistribution) -> Result<Vec<f64>> {
        match self.kind {
            WeightKind::Uniform => Ok(vec![1.0; dist.atoms().len()]),
            WeightKind::SigmoidSum => {
                let sums = dist
                    .atoms()
                    .iter()
                    .map(|atom| tuple_prob_sum(policy, &atom.tuple))
                    .collect::<Result<Vec<f64>>>()?;
                let powers: Vec<f64> = sums.iter().map(|s| s.powf(self.gamma)).collect();
                // Exact mode: the expectation is under the atom masses.
                let mean: f64 = powers
                    .iter()
                    .zip(dist.atoms())
                    .map(|(p, a)| p * a.weight)
                    .sum();
                Ok(powers.iter().map(|p| 2.0 * sigmoid(p - mean)).collect())
            }
        }
    }
}

fn tuple_prob_sum(policy: &TabularPolicy, tuple: &PrefTuple) -> Result<f64> {
    let q = tuple.query();
    policy.check_query(q)?;
    let sum = match tuple {
        PrefTuple::Pairwise(t) => {
            policy.check_response(q, t.winner)?;
            policy.check_response(q, t.loser)?;
            policy.prob(q, t.winner) + policy.prob(q, t.loser)
        }
        PrefTuple::BestOfN(t) => {
            let mut s = 0.0;
            for &y in &t.responses {
                policy.check_response(q, y)?;
                s += policy.prob(q, y);
            }
            s
        }
        PrefTuple::Ranked(t) => {
            let mut s = 0.0;
            for &y in &t.responses {
                policy.check_response(q, y)?;
                s += policy.prob(q, y);
            }
            s
        }
    };
    Ok(sum)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-tuple μ weights for a sampled batch: the centered power is taken
/// against the plain mean over the supplied batch, current tuple included.
pub fn mu_sigmoid(
    policy: &TabularPolicy,
    batch: &[PairwiseTuple],
    gamma: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::InvalidParameter {
            detail: format!("gamma {gamma} must be finite and nonnegative"),
        });
    }
    let powers = batch
        .iter()
        .map(|t| {
            tuple_prob_sum(policy, &PrefTuple::Pairwise(t.clone())).map(|s| s.powf(gamma))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean: f64 = powers.iter().sum::<f64>() / powers.len() as f64;
    Ok(powers.iter().map(|p| 2.0 * sigmoid(p - mean)).collect())
}

// ==== pairwise losses =====================================================

/// Model preference probability π(y1|x) / (π(y1|x) + π(y2|x)).
pub fn model_pref_prob(
    policy: &TabularPolicy,
    query: usize,
    y1: usize,
    y2: usize,
) -> Result<f64> {
    policy.check_response(query, y1)?;
    policy.check_response(query, y2)?;
    let a = policy.prob(query, y1);
    let b = policy.prob(query, y2);
    if a + b <= 0.0 {
        return Err(Error::ZeroMass { query });
    }
    Ok(a / (a + b))
}

fn positive_prob(policy: &TabularPolicy, query: usize, response: usize) -> Result<f64> {
    policy.check_response(query, response)?;
    let p = policy.prob(query, response);
    if p <= 0.0 {
        return Err(Error::BoundaryPolicy { query, response });
    }
    Ok(p)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::InvalidParameter {
            detail: format!("alpha {alpha} must be finite and nonnegative"),
        });
    }
    Ok(())
}

fn check_weights(dist: &PreferenceDistribution, weights: &[f64]) -> Result<()> {
    if weights.len() != dist.atoms().len() {
        return Err(Error::DimensionMismatch {
            left: weights.len(),
            right: dist.atoms().len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonfiniteValue { what: "mu weight" });
    }
    Ok(())
}

pub fn spo_pref_loss(
    policy: &TabularPolicy,
    dist: &PreferenceDistribution,
    alpha: f64,
    mu: &WeightFunction,
) -> Result<f64> {
    let weights = mu.resolve(policy, dist)?;
    spo_pref_loss_with_weights(policy, dist, alpha, &weights)
}

/// Loss with explicitly frozen per-atom μ values.
pub fn spo_pref_loss_with_weights(
    policy: &TabularPolicy,
    dist: &PreferenceDistribution,
    alpha: f64,
    weights: &[f64],
) -> Result<f64> {
    dist.expect_kind(TupleKind::Pairwise)?;
    policy.check_shape(dist.shape())?;
    check_alpha(alpha)?;
    check_weights(dist, weights)?;
    let mut loss = 0.0;
    for (atom, &mu) in dist.atoms().iter().zip(weights) {
        let t = match &atom.tuple {
            PrefTuple::Pairwise(t) => t,
            _ => unreachable!("kind checked above"),
        };
        let pw = positive_prob(policy, t.query, t.winner)?;
        let pl = positive_prob(policy, t.query, t.loser)?;
        let term = if alpha == 0.0 {
            0.5 * (pw.ln() - pl.ln())
        } else {
            // ln(pw^a / (pw^a + pl^a)) rescaled by the row max so the powers
            // stay in (0, 1].
            let m = pw.max(pl);
            (alpha * (pw / m).ln() - ((pw / m).powf(alpha) + (pl / m).powf(alpha)).ln()) / alpha
        };
        loss -= atom.weight * mu * term;
    }
    Ok(loss)
}

pub fn spo_pref_grad(
    policy: &TabularPolicy,
    dist: &PreferenceDistribution,
    alpha: f64,
    mu: &WeightFunction,
) -> Result<Vec<Vec<f64>>> {
    let weights = mu.resolve(policy, dist)?;
    spo_pref_grad_with_weights(policy, dist, alpha, &weights)
}

/// Gradient with explicitly frozen μ values, per raw probability entry.
pub fn spo_pref_grad_with_weights(
    policy: &TabularPolicy,
    dist: &PreferenceDistribution,
    alpha: f64,
    weights: &[f64],
) -> Result<Vec<Vec<f64>>> {
    dist.expect_kind(TupleKind::Pairwise)?;
    policy.check_shape(dist.shape())?;
    check_alpha(alpha)?;
    check_weights(dist, weights)?;
    let mut grad = policy.zero_grad();
    for (atom, &mu) in dist.atoms().iter().zip(weights) {
        let t = match &atom.tuple {
            PrefTuple::Pairwise(t) => t,
            _ => unreachable!("kind checked above"),
        };
        let pw = positive_prob(policy, t.query, t.winner)?;
        let pl = positive_prob(policy, t.query, t.loser)?;
        let c = if alpha == 0.0 {
            0.5
        } else {
            let m = pw.max(pl);
            let aw = (pw / m).powf(alpha);
            let al = (pl / m).powf(alpha);
            al / (aw + al)
        };
        let scale = atom.weight * mu * c;
        grad[t.query][t.winner] -= scale / pw;
        grad[t.query][t.loser] += scale / pl;
    }
    check_grad_finite(&grad)?;
    Ok(grad)
}

/// Log-likelihood route: −Σ 𝒟·ln 𝒫_π(y_w ≻ y_l) via the preference
/// probability ratio. Coincides with `spo_pref_loss` at alpha = 1, uniform μ;
/// kept as an independently coded identity witness.
pub fn cross_entropy_pref_loss(
    policy: &TabularPolicy,
    dist: &PreferenceDistribution,
) -> Result<f64> {
    dist.expect_kind(TupleKind::Pairwise)?;
    policy.check_shape(dist.shape())?;
    let mut loss = 0.0;
    for atom in dist.atoms() {
        let t = match &atom.tuple {
            PrefTuple::Pairwise(t) => t,
            _ => unreachable!("kind checked above"),
        };
        positive_prob(policy, t.query, t.winner)?;
        positive_prob(policy, t.query, t.loser)?;
        let p = model_pref_prob(policy, t.query, t.winner, t.loser)?;
        loss -= atom.weight * p.ln();
    }
    Ok(loss)
}

// ==== best-of-n and ranking ===============================================

pub fn best_of_n_loss(
    policy: &TabularPolicy,
    dist: &PreferenceDistribution,
    alpha: f64,
    mu: &WeightFunction,
) -> Result<f64> {
    let weights = mu.resolve(policy, dist)?;
    best_of_n_loss_with_weights(policy, dist, alpha, &weights)
}

pub fn best_of_n_loss_with_weights(
    policy: &TabularPolicy,
    dist: &PreferenceDistribution,
    alpha: f64,
    weights: &[f64],
) -> Result<f64> {
    dist.expect_kind(TupleKind::BestOfN)?;
    policy.check_shape(dist.shape())?;
    check_positive_alpha(alpha)?;
    check_weights(dist, weights)?;
    let mut loss = 0.0;
    for (atom, &mu) in dist.atoms().iter().zip(weights) {
        let t = match &atom.tuple {
            PrefTuple::BestOfN(t) => t,
            _ => unreachable!("kind checked above"),
        };
        let probs = tuple_probs(policy, t.query, &t.responses)?;
        loss -= atom.weight * mu * softmax_log_term(&probs, t.best, alpha);
    }
    Ok(loss)
}

pub fn best_of_n_grad(
    policy: &TabularPolicy,
    dist: &PreferenceDistribution,
    alpha: f64,
    mu: &WeightFunction,
) -> Result<Vec<Vec<f64>>> {
    let weights = mu.resolve(policy, dist)?;
    best_of_n_grad_with_weights(policy, dist, alpha, &weights)
}

pub fn best_of_n_grad_with_weights(
    policy: &TabularPolicy,
    dist: &PreferenceDistribution,
    alpha: f64,
    weights: &[f64],
) -> Result<Vec<Vec<f64>>> {
    dist.expect_kind(TupleKind::BestOfN)?;
    policy.check_shape(dist.shape())?;
    check_positive_alpha(alpha)?;
    check_weights(dist, weights)?;
    let mut grad = policy.zero_grad();
    for (atom, &mu) in dist.atoms().iter().zip(weights) {
        let t = match &atom.tuple {
            PrefTuple::BestOfN(t) => t,
            _ => unreachable!("kind checked above"),
        };
        let probs = tuple_probs(policy, t.query, &t.responses)?;
        accumulate_softmax_grad(
            &mut grad[t.query],
            &t.responses,
            &probs,
            t.best,
            alpha,
            atom.weight * mu,
        );
    }
    check_grad_finite(&grad)?;
    Ok(grad)
}

/// Ranking loss with one constant weight per rank, μ_1..μ_{n−1}. Setting
/// μ_k = 0 for k ≥ 2 reproduces the best-of-n loss with weight μ_1.
pub fn ranking_loss(
    policy: &TabularPolicy,
    dist: &PreferenceDistribution,
    alpha: f64,
    mu_sequence: &[f64],
) -> Result<f64> {
    dist.expect_kind(TupleKind::Ranked)?;
    policy.check_shape(dist.shape())?;
    check_positive_alpha(alpha)?;
    check_mu_sequence(dist, mu_sequence)?;
    let mut loss = 0.0;
    for atom in dist.atoms() {
        let t = match &atom.tuple {
            PrefTuple::Ranked(t) => t,
            _ => unreachable!("kind checked above"),
        };
        let ordered: Vec<usize> = (0..t.responses.len())
            .map(|k| t.response_at_rank(k))
            .collect();
        let probs = tuple_probs(policy, t.query, &ordered)?;
        for (k, &mu_k) in mu_sequence.iter().enumerate() {
            loss -= atom.weight * mu_k * softmax_log_term(&probs[k..], 0, alpha);
        }
    }
    Ok(loss)
}

pub fn ranking_grad(
    policy: &TabularPolicy,
    dist: &PreferenceDistribution,
    alpha: f64,
    mu_sequence: &[f64],
) -> Result<Vec<Vec<f64>>> {
    dist.expect_kind(TupleKind::Ranked)?;
    policy.check_shape(dist.shape())?;
    check_positive_alpha(alpha)?;
    check_mu_sequence(dist, mu_sequence)?;
    let mut grad = policy.zero_grad();
    for atom in dist.atoms() {
        let t = match &atom.tuple {
            PrefTuple::Ranked(t) => t,
            _ => unreachable!("kind checked above"),
        };
        let ordered: Vec<usize> = (0..t.responses.len())
            .map(|k| t.response_at_rank(k))
            .collect();
        let probs = tuple_probs(policy, t.query, &ordered)?;
        for (k, &mu_k) in mu_sequence.iter().enumerate() {
            accumulate_softmax_grad(
                &mut grad[t.query],
                &ordered[k..],
                &probs[k..],
                0,
                alpha,
                atom.weight * mu_k,
            );
        }
    }
    check_grad_finite(&grad)?;
    Ok(grad)
}

/// Per-rank weights η^k, k = 1..n−1; η = 1 gives the constant sequence.
pub fn decayed_mu_sequence(eta: f64, n: usize) -> Result<Vec<f64>> {
    if !eta.is_finite() || eta <= 0.0 {
        return Err(Error::InvalidParameter {
            detail: format!("eta {eta} must be finite and positive"),
        });
    }
    if n < 2 {
        return Err(Error::TooFewEntries { got: n });
    }
    Ok((1..n).map(|k| eta.powi(k as i32)).collect())
}

fn check_positive_alpha(alpha: f64) -> Result<()> {
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Err(Error::NonpositiveAlpha { alpha });
    }
    Ok(())
}

fn check_mu_sequence(dist: &PreferenceDistribution, mu_sequence: &[f64]) -> Result<()> {
    if mu_sequence.len() != dist.arity() - 1 {
        return Err(Error::DimensionMismatch {
            left: mu_sequence.len(),
            right: dist.arity() - 1,
        });
    }
    if mu_sequence.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(Error::InvalidParameter {
            detail: "per-rank weights must be finite and nonnegative".into(),
        });
    }
    Ok(())
}

fn tuple_probs(policy: &TabularPolicy, query: usize, responses: &[usize]) -> Result<Vec<f64>> {
    responses
        .iter()
        .map(|&y| positive_prob(policy, query, y))
        .collect()
}

/// ln( probs[best]^alpha / Σ_i probs[i]^alpha ), rescaled by the max entry.
fn softmax_log_term(probs: &[f64], best: usize, alpha: f64) -> f64 {
    let m = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = probs.iter().map(|&p| (p / m).powf(alpha)).sum();
    ((probs[best] / m).ln() * alpha - total.ln()) / alpha
}

/// Adds `scale · ([k = best] − probs[k]^alpha/Σ_j probs[j]^alpha) · (−1/probs[k])`
/// to the gradient row at each tuple response.
fn accumulate_softmax_grad(
    grad_row: &mut [f64],
    responses: &[usize],
    probs: &[f64],
    best: usize,
    alpha: f64,
    scale: f64,
) {
    let m = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let powers: Vec<f64> = probs.iter().map(|&p| (p / m).powf(alpha)).collect();
    let total: f64 = powers.iter().sum();
    for (k, (&y, &p)) in responses.iter().zip(probs).enumerate() {
        let indicator = if k == best { 1.0 } else { 0.0 };
        grad_row[y] -= scale * (indicator - powers[k] / total) / p;
    }
}

fn check_grad_finite(grad: &[Vec<f64>]) -> Result<()> {
    for (q, row) in grad.iter().enumerate() {
        for (y, &g) in row.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonfiniteGradient {
                    query: q,
                    response: y,
                });
            }
        }
    }
    Ok(())
}

// ==== DPO baseline ========================================================

/// −Σ 𝒟·ln σ(β·[ln(π(y_w)/ρ(y_w)) − ln(π(y_l)/ρ(y_l))]) with reference
/// policy ρ. Invariant to common rescaling of either policy's rows.
pub fn dpo_loss(
    policy: &TabularPolicy,
    ref_policy: &TabularPolicy,
    dist: &PreferenceDistribution,
    beta: f64,
) -> Result<f64> {
    dist.expect_kind(TupleKind::Pairwise)?;
    policy.check_shape(dist.shape())?;
    ref_policy.check_shape(dist.shape())?;
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::InvalidParameter {
            detail: format!("beta {beta} must be finite and nonnegative"),
        });
    }
    let mut loss = 0.0;
    for atom in dist.atoms() {
        let t = match &atom.tuple {
            PrefTuple::Pairwise(t) => t,
            _ => unreachable!("kind checked above"),
        };
        let pw = positive_prob(policy, t.query, t.winner)?;
        let pl = positive_prob(policy, t.query, t.loser)?;
        let rw = positive_prob(ref_policy, t.query, t.winner)?;
        let rl = positive_prob(ref_policy, t.query, t.loser)?;
        let z = beta * ((pw.ln() - rw.ln()) - (pl.ln() - rl.ln()));
        loss += atom.weight * softplus(-z);
    }
    Ok(loss)
}

/// ln(1 + e^x) without overflow; −ln σ(z) = softplus(−z).
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

// ==== combined objective and symmetry =====================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    SpoBasic,
    SpoWeighted,
    BestOfN,
    Ranking,
    Dpo,
    CrossEntropy,
}

impl LossFamily {
    pub fn label(self) -> &'static str {
        match self {
            LossFamily::SpoBasic => "spo_basic",
            LossFamily::SpoWeighted => "spo_weighted",
            LossFamily::BestOfN => "best_of_n",
            LossFamily::Ranking => "ranking",
            LossFamily::Dpo => "dpo",
            LossFamily::CrossEntropy => "cross_entropy",
        }
    }
}

/// Which loss to run and with which knobs: exponent `alpha`, μ exponent
/// `gamma` (spo_weighted only), KL / DPO temperature `beta`, per-rank decay
/// `eta` (ranking only; the rank-k weight is η^k).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub family: LossFamily,
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub eta: f64,
}

impl LossSpec {
    pub fn spo_basic(alpha: f64) -> Self {
        Self {
            family: LossFamily::SpoBasic,
            alpha,
            gamma: 0.0,
            beta: 1.0,
            eta: 1.0,
        }
    }

    pub fn spo_weighted(alpha: f64, gamma: f64) -> Self {
        Self {
            family: LossFamily::SpoWeighted,
            gamma,
            ..Self::spo_basic(alpha)
        }
    }

    pub fn best_of_n(alpha: f64) -> Self {
        Self {
            family: LossFamily::BestOfN,
            ..Self::spo_basic(alpha)
        }
    }

    pub fn ranking(alpha: f64, eta: f64) -> Self {
        Self {
            family: LossFamily::Ranking,
            eta,
            ..Self::spo_basic(alpha)
        }
    }

    pub fn dpo(beta: f64) -> Self {
        Self {
            family: LossFamily::Dpo,
            beta,
            ..Self::spo_basic(1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if matches!(self.family, LossFamily::BestOfN | LossFamily::Ranking) && self.alpha == 0.0 {
            return Err(Error::NonpositiveAlpha { alpha: self.alpha });
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::InvalidParameter {
                detail: format!("gamma {} must be finite and nonnegative", self.gamma),
            });
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::InvalidParameter {
                detail: format!("beta {} must be finite and nonnegative", self.beta),
            });
        }
        if !self.eta.is_finite() || self.eta <= 0.0 {
            return Err(Error::InvalidParameter {
                detail: format!("eta {} must be finite and positive", self.eta),
            });
        }
        Ok(())
    }

    pub fn weight_function(&self) -> Result<WeightFunction> {
        match self.family {
            LossFamily::SpoWeighted => WeightFunction::sigmoid_sum(self.gamma),
            _ => Ok(WeightFunction::uniform()),
        }
    }

    /// Expected tuple kind of the data this spec runs on.
    pub fn tuple_kind(&self) -> TupleKind {
        match self.family {
            LossFamily::BestOfN => TupleKind::BestOfN,
            LossFamily::Ranking => TupleKind::Ranked,
            _ => TupleKind::Pairwise,
        }
    }
}

/// Preference-loss dispatcher over the families that need no reference
/// policy (all but DPO).
pub fn pref_loss(
    policy: &TabularPolicy,
    dist: &PreferenceDistribution,
    spec: &LossSpec,
) -> Result<f64> {
    spec.validate()?;
    match spec.family {
        LossFamily::SpoBasic | LossFamily::SpoWeighted => {
            spo_pref_loss(policy, dist, spec.alpha, &spec.weight_function()?)
        }
        LossFamily::BestOfN => {
            best_of_n_loss(policy, dist, spec.alpha, &WeightFunction::uniform())
        }
        LossFamily::Ranking => {
            let mu = decayed_mu_sequence(spec.eta, dist.arity())?;
            ranking_loss(policy, dist, spec.alpha, &mu)
        }
        LossFamily::CrossEntropy => cross_entropy_pref_loss(policy, dist),
        LossFamily::Dpo => Err(Error::InvalidParameter {
            detail: "the DPO loss needs a reference policy; call dpo_loss directly".into(),
        }),
    }
}

/// Gradient dispatcher matching [`pref_loss`].
pub fn pref_grad(
    policy: &TabularPolicy,
    dist: &PreferenceDistribution,
    spec: &LossSpec,
) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    match spec.family {
        LossFamily::SpoBasic | LossFamily::SpoWeighted => {
            spo_pref_grad(policy, dist, spec.alpha, &spec.weight_function()?)
        }
        LossFamily::BestOfN => {
            best_of_n_grad(policy, dist, spec.alpha, &WeightFunction::uniform())
        }
        LossFamily::Ranking => {
            let mu = decayed_mu_sequence(spec.eta, dist.arity())?;
            ranking_grad(policy, dist, spec.alpha, &mu)
        }
        // The cross-entropy loss is the alpha = 1 soft loss, so its gradient
        // reuses the closed form.
        LossFamily::CrossEntropy => {
            spo_pref_grad(policy, dist, 1.0, &WeightFunction::uniform())
        }
        LossFamily::Dpo => Err(Error::InvalidParameter {
            detail: "the DPO loss needs a reference policy; call dpo_loss directly".into(),
        }),
    }
}

/// Mean over queries of KL(π(·|x) ‖ ρ(·|x)); rows are normalized first so
/// raw views are admissible.
pub fn policy_kl(policy: &TabularPolicy, ref_policy: &TabularPolicy) -> Result<f64> {
    if policy.shape() != ref_policy.shape() {
        return Err(Error::DimensionMismatch {
            left: policy.num_queries(),
            right: ref_policy.num_queries(),
        });
    }
    let p = policy.to_distributions()?;
    let r = ref_policy.to_distributions()?;
    let mut total = 0.0;
    for (pd, rd) in p.iter().zip(&r) {
        total += kl_divergence(pd, rd)?;
    }
    Ok(total / p.len() as f64)
}

/// Alignment objective: preference loss + beta·kl_value, with `kl_value`
/// supplied by whichever module measured it (exact policy KL or the
/// token-wise estimate). beta is read off `spec`; beta = 1 adds the KL term
/// unscaled.
pub fn combined_spo_objective(
    policy: &TabularPolicy,
    ref_policy: &TabularPolicy,
    dist: &PreferenceDistribution,
    spec: &LossSpec,
    kl_value: f64,
) -> Result<f64> {
    if !kl_value.is_finite() || kl_value < 0.0 {
        return Err(Error::PreconditionViolated {
            detail: format!("kl_value {kl_value} must be finite and nonnegative"),
        });
    }
    ref_policy.check_shape(dist.shape())?;
    Ok(pref_loss(policy, dist, spec)? + spec.beta * kl_value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymmetryReport {
    pub spo_invariant: bool,
    pub dpo_invariant: bool,
}

/// Swap experiment on one pairwise tuple with π(y_w|x) = π(y_l|x): exchange
/// the reference policy's mass between winner and loser and compare the SPO
/// alignment objective (preference term + beta·KL to the reference) and the
/// DPO loss before and after. The SPO objective never moves; the DPO loss
/// moves whenever the reference treats the two responses differently.
pub fn separability_symmetry_check(
    policy: &TabularPolicy,
    ref_policy: &TabularPolicy,
    tuple: &PairwiseTuple,
    alpha: f64,
    beta: f64,
) -> Result<SymmetryReport> {
    let pw = positive_prob(policy, tuple.query, tuple.winner)?;
    let pl = positive_prob(policy, tuple.query, tuple.loser)?;
    if (pw - pl).abs() > 1e-12 {
        return Err(Error::PreconditionViolated {
            detail: format!("symmetry check needs equal policy mass, got {pw} vs {pl}"),
        });
    }
    let dist = PreferenceDistribution::new(
        &shape_table(policy),
        vec![crate::prefdata::Atom {
            tuple: PrefTuple::Pairwise(tuple.clone()),
            weight: 1.0,
        }],
    )?;
    let spec = LossSpec {
        beta,
        ..LossSpec::spo_basic(alpha)
    };
    let swapped = swap_ref(ref_policy, tuple)?;

    let spo_before =
        combined_spo_objective(policy, ref_policy, &dist, &spec, policy_kl(policy, ref_policy)?)?;
    let spo_after =
        combined_spo_objective(policy, &swapped, &dist, &spec, policy_kl(policy, &swapped)?)?;
    let dpo_before = dpo_loss(policy, ref_policy, &dist, beta)?;
    let dpo_after = dpo_loss(policy, &swapped, &dist, beta)?;

    let tol = |a: f64, b: f64| (a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1.0);
    Ok(SymmetryReport {
        spo_invariant: tol(spo_before, spo_after),
        dpo_invariant: tol(dpo_before, dpo_after),
    })
}

/// Throwaway reward table matching the policy's shape, used only to build a
/// singleton distribution (atom validation needs the shape, not the values).
fn shape_table(policy: &TabularPolicy) -> crate::prefdata::RewardTable {
    let queries = (0..policy.num_queries()).map(|q| format!("q{q}")).collect();
    let rewards = policy.shape().iter().map(|&k| vec![0.0; k]).collect();
    crate::prefdata::RewardTable::new(queries, rewards).expect("shape table is well formed")
}

fn swap_ref(ref_policy: &TabularPolicy, tuple: &PairwiseTuple) -> Result<TabularPolicy> {
    ref_policy.check_response(tuple.query, tuple.winner)?;
    ref_policy.check_response(tuple.query, tuple.loser)?;
    let mut rows: Vec<Vec<f64>> = ref_policy.rows().to_vec();
    rows[tuple.query].swap(tuple.winner, tuple.loser);
    // Bypass from_raw: a legitimate reference row may hold zeros elsewhere.
    Ok(TabularPolicy::try_from(rows)?)
}
