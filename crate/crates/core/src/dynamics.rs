//! Projected gradient descent on products of simplices, with trace capture
//! and the convergence diagnostics built on top of it.
//!
//! One update step, applied independently per query row:
//!
//! ```text
//! pi_{t+1} = Floor_eps( Proj_simplex( pi_t - s * grad L(pi_t) ) )
//! ```
//!
//! `Proj_simplex` is the Euclidean projection, `Floor_eps` raises entries
//! below `epsilon` to `epsilon` and renormalizes, so iterates stay strictly
//! interior and every `1/pi` term in the gradients stays finite.
//!
//! The analytic fixed point per query is
//!
//! ```text
//! alpha > 0:  pi*(y) = exp(r(y)/alpha) / sum_y' exp(r(y')/alpha)
//! alpha = 0:  the epsilon-floored vertex at argmax_y r(y)
//! ```
//!
//! Convergence detection differs by alpha. For `alpha > 0` the raw gradient
//! vanishes at the constrained minimizer (the losses are scale invariant per
//! row, so the normal component is identically zero there), and the rule is
//!
//! ```text
//! max |pi_{t+1} - pi_t| < tol   and   ||grad L(pi_t)|| < 10 * tol
//! ```
//!
//! For `alpha = 0` the minimizer sits on the floored boundary where raw
//! gradients stay large, so the rule swaps the gradient check for closeness
//! to the vertex itself:
//!
//! ```text
//! max |pi_{t+1} - pi_t| < tol   and   ||pi_{t+1} - pi*||_2 <= tol
//! ```
//!
//! Divergence (step size too large for the local curvature) is reported as
//! an error after 50 consecutive iterations of strictly increasing loss.
//! For the mu-weighted family the monitored quantity is the loss under the
//! weights frozen at the previous iterate: the weights re-resolve at every
//! step, so raw loss values at different iterates are values of different
//! functions and their differences say nothing about descent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;

use crate::error::{Error, Result};
use crate::losses::{
    pref_grad, pref_loss, spo_pref_loss_with_weights, LossFamily, LossSpec, TabularPolicy,
};
use crate::oracle::GridSpec;
use crate::prefdata::{PreferenceDistribution, RewardTable};
use crate::simplex::{euclidean_distance, linf_distance, project_to_simplex, softmax_scaled};

/// Consecutive loss increases before a run is declared divergent.
pub const DIVERGENCE_STREAK: usize = 50;

/// Per-step tolerance when auditing monotone distance decrease.
pub const LYAPUNOV_TOL: f64 = 1e-10;

/// Default convergence tolerance; also fixes the exclusion radius
/// (10x this) used by [`stationarity_scan`].
pub const DEFAULT_CONVERGENCE_TOL: f64 = 1e-9;

/// Boundary margin for stationarity grids. Gradients grow like `1/pi`
/// toward the boundary, so the scan stays this far inside.
pub const STATIONARITY_MARGIN: f64 = 1e-4;

/// Interior margin applied to random initializations. A start with an
/// entry at distance d from the boundary sees a gradient of order 1/d;
/// for d below roughly step_size the first step overshoots clear across
/// the simplex and the run can ping-pong between vertices forever. The
/// floor keeps starts varied but outside that regime.
pub const INIT_FLOOR: f64 = 0.02;

/// Knobs for one flow run. `convergence_tol` bounds the per-step L-inf
/// change, `epsilon` is the interior floor, `inits` and `seed` drive
/// multi-start, `snapshot_every` keeps periodic policy copies in the trace
/// (0 disables snapshots).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub step_size: f64,
    pub max_iters: usize,
    pub convergence_tol: f64,
    pub epsilon: f64,
    pub inits: usize,
    pub seed: u64,
    pub snapshot_every: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            step_size: 0.01,
            max_iters: 200_000,
            convergence_tol: DEFAULT_CONVERGENCE_TOL,
            epsilon: 1e-9,
            inits: 20,
            seed: 0,
            snapshot_every: 0,
        }
    }
}

impl FlowConfig {
    /// Checks the knobs against the instance shape. The floor must leave
    /// room for a proper interior: `epsilon < 1/k` for every row width `k`.
    pub fn validate(&self, shape: &[usize]) -> Result<()> {
        if !self.step_size.is_finite() || self.step_size <= 0.0 {
            return Err(Error::InvalidParameter {
                detail: format!("step_size {} must be finite and positive", self.step_size),
            });
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter {
                detail: "max_iters must be at least 1".into(),
            });
        }
        if !self.convergence_tol.is_finite() || self.convergence_tol <= 0.0 {
            return Err(Error::InvalidParameter {
                detail: format!(
                    "convergence_tol {} must be finite and positive",
                    self.convergence_tol
                ),
            });
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::InvalidParameter {
                detail: format!("epsilon {} must be finite and positive", self.epsilon),
            });
        }
        for &k in shape {
            if self.epsilon >= 1.0 / k as f64 {
                return Err(Error::InvalidParameter {
                    detail: format!(
                        "epsilon {} leaves no interior for a row of {} responses",
                        self.epsilon, k
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Metrics recorded at the start of each iteration, before the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowRecord {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub dist_to_target: f64,
}

/// Per-iteration records plus optional periodic policy snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrace {
    pub records: Vec<FlowRecord>,
    pub snapshots: Vec<(usize, TabularPolicy)>,
}

impl FlowTrace {
    /// Writes `iter,loss,grad_norm,dist_to_target` rows. Floats use 17
    /// significant digits so the file round-trips to the same f64 bits.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "iter,loss,grad_norm,dist_to_target")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e}",
                r.iter, r.loss, r.grad_norm, r.dist_to_target
            )?;
        }
        Ok(())
    }
}

/// Where a flow run ended up. `iters` counts executed steps; the final
/// metrics are evaluated at `final_policy`, one step past the last record.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutcome {
    pub final_policy: TabularPolicy,
    pub trace: FlowTrace,
    pub converged: bool,
    pub iters: usize,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub final_distance_l2: f64,
    pub final_distance_linf: f64,
}

/// Aggregate over independent random initializations.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStartReport {
    pub all_converged: bool,
    pub max_final_distance: f64,
    pub max_final_distance_l2: f64,
    pub outcomes: Vec<FlowOutcome>,
}

/// Result of [`lyapunov_audit`]: whether the recorded distance to target
/// ever rose by more than [`LYAPUNOV_TOL`] between consecutive records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovReport {
    pub monotone: bool,
    pub first_violation: Option<usize>,
    pub max_increase: f64,
}

/// Result of [`stationarity_scan`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationarityReport {
    pub min_grad_norm: f64,
    pub points_scanned: usize,
    pub points_excluded: usize,
}

/// The analytic fixed point of the flow for reward table `rewards` at the
/// given `alpha`. For `alpha = 0` the argmax vertex is passed through the
/// same floor-and-renormalize used by [`flow_step`], so a pinned flow
/// matches it bit for bit.
pub fn target_policy(rewards: &RewardTable, alpha: f64, epsilon: f64) -> Result<TabularPolicy> {
    let mut rows = Vec::with_capacity(rewards.num_queries());
    for q in 0..rewards.num_queries() {
        let dist = softmax_scaled(rewards.rewards(q), alpha)?;
        let mut row = dist.probs().to_vec();
        if alpha == 0.0 {
            floor_and_renormalize(&mut row, epsilon);
        }
        rows.push(row);
    }
    TabularPolicy::try_from(rows)
}

/// Raises entries below `eps` to `eps` and renormalizes. Leaves the row
/// untouched when nothing is below the floor, so interior fixed points are
/// not perturbed. Returns whether anything changed.
pub fn floor_and_renormalize(row: &mut [f64], eps: f64) -> bool {
    let mut changed = false;
    for x in row.iter_mut() {
        if *x < eps {
            *x = eps;
            changed = true;
        }
    }
    if changed {
        let sum: f64 = row.iter().sum();
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    changed
}

/// One explicit Euler step: descend, project each row back onto its
/// simplex, floor. `grad` must match the policy shape entry for entry.
pub fn flow_step(
    policy: &TabularPolicy,
    grad: &[Vec<f64>],
    config: &FlowConfig,
) -> Result<TabularPolicy> {
    if grad.len() != policy.num_queries() {
        return Err(Error::DimensionMismatch {
            left: grad.len(),
            right: policy.num_queries(),
        });
    }
    let mut rows = Vec::with_capacity(policy.num_queries());
    for (q, g_row) in grad.iter().enumerate() {
        let row = policy.row(q);
        if g_row.len() != row.len() {
            return Err(Error::DimensionMismatch {
                left: g_row.len(),
                right: row.len(),
            });
        }
        let mut v = Vec::with_capacity(row.len());
        for (y, (&p, &g)) in row.iter().zip(g_row.iter()).enumerate() {
            if !g.is_finite() {
                return Err(Error::NonfiniteGradient {
                    query: q,
                    response: y,
                });
            }
            v.push(p - config.step_size * g);
        }
        let projected = project_to_simplex(&v)?;
        let mut p = projected.probs().to_vec();
        floor_and_renormalize(&mut p, config.epsilon);
        rows.push(p);
    }
    TabularPolicy::try_from(rows)
}

fn grad_norm(grad: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for row in grad {
        for &g in row {
            total += g * g;
        }
    }
    total.sqrt()
}

/// Euclidean distance between two policies over all entries.
pub fn policy_distance_l2(a: &TabularPolicy, b: &TabularPolicy) -> Result<f64> {
    if a.num_queries() != b.num_queries() {
        return Err(Error::DimensionMismatch {
            left: a.num_queries(),
            right: b.num_queries(),
        });
    }
    let mut total = 0.0;
    for q in 0..a.num_queries() {
        let d = euclidean_distance(a.row(q), b.row(q))?;
        total += d * d;
    }
    Ok(total.sqrt())
}

/// Largest absolute entry difference between two policies.
pub fn policy_distance_linf(a: &TabularPolicy, b: &TabularPolicy) -> Result<f64> {
    if a.num_queries() != b.num_queries() {
        return Err(Error::DimensionMismatch {
            left: a.num_queries(),
            right: b.num_queries(),
        });
    }
    let mut worst = 0.0f64;
    for q in 0..a.num_queries() {
        worst = worst.max(linf_distance(a.row(q), b.row(q))?);
    }
    Ok(worst)
}

fn check_init(init: &TabularPolicy, config: &FlowConfig) -> Result<()> {
    for (q, row) in init.rows().iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::PreconditionViolated {
                detail: format!("initial policy row {} sums to {}, expected 1", q, sum),
            });
        }
    }
    // Allow the post-renormalization slack of a freshly floored row.
    if !init.is_interior(config.epsilon) {
        return Err(Error::PreconditionViolated {
            detail: format!(
                "initial policy has an entry below the floor {}",
                config.epsilon
            ),
        });
    }
    Ok(())
}

/// Runs projected gradient descent from `init_policy` until the
/// alpha-dependent convergence rule fires or `max_iters` steps are taken.
/// Records one [`FlowRecord`] per executed iteration, taken before the
/// step. Fails with [`Error::DivergenceDetected`] after
/// [`DIVERGENCE_STREAK`] consecutive loss increases.
pub fn run_flow(
    init_policy: &TabularPolicy,
    loss_spec: &LossSpec,
    dist: &PreferenceDistribution,
    rewards: &RewardTable,
    config: &FlowConfig,
) -> Result<FlowOutcome> {
    loss_spec.validate()?;
    let shape = rewards.shape();
    config.validate(&shape)?;
    if dist.shape() != shape.as_slice() {
        return Err(Error::PreconditionViolated {
            detail: "preference distribution and reward table shapes differ".into(),
        });
    }
    if init_policy.shape() != shape {
        return Err(Error::PreconditionViolated {
            detail: "initial policy and reward table shapes differ".into(),
        });
    }
    check_init(init_policy, config)?;

    let target = target_policy(rewards, loss_spec.alpha, config.epsilon)?;
    let tol = config.convergence_tol;
    let stop_grad_weights = loss_spec.family == LossFamily::SpoWeighted;
    let mut policy = init_policy.clone();
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let mut prev_loss = f64::INFINITY;
    let mut prev_weights: Option<Vec<f64>> = None;
    let mut streak = 0usize;
    let mut converged = false;

    for t in 0..config.max_iters {
        let loss = pref_loss(&policy, dist, loss_spec)?;
        let grad = pref_grad(&policy, dist, loss_spec)?;
        let gnorm = grad_norm(&grad);
        let dist_to_target = policy_distance_l2(&policy, &target)?;
        records.push(FlowRecord {
            iter: t,
            loss,
            grad_norm: gnorm,
            dist_to_target,
        });
        if config.snapshot_every > 0 && t % config.snapshot_every == 0 {
            snapshots.push((t, policy.clone()));
        }

        // With stop-gradient weights, `prev_loss` holds the previous
        // iterate's loss under its own weights; the comparable value at the
        // current iterate keeps those weights fixed.
        let monitored = match &prev_weights {
            Some(w) => spo_pref_loss_with_weights(&policy, dist, loss_spec.alpha, w)?,
            None => loss,
        };
        if monitored > prev_loss {
            streak += 1;
            if streak >= DIVERGENCE_STREAK {
                return Err(Error::DivergenceDetected { iter: t, streak });
            }
        } else {
            streak = 0;
        }
        prev_loss = loss;
        if stop_grad_weights {
            prev_weights = Some(loss_spec.weight_function()?.resolve(&policy, dist)?);
        }

        let next = flow_step(&policy, &grad, config)?;
        let change = policy_distance_linf(&next, &policy)?;
        let near = if loss_spec.alpha > 0.0 {
            gnorm < 10.0 * tol
        } else {
            policy_distance_l2(&next, &target)? <= tol
        };
        policy = next;
        if change < tol && near {
            converged = true;
            break;
        }
    }

    let final_loss = pref_loss(&policy, dist, loss_spec)?;
    let final_grad = pref_grad(&policy, dist, loss_spec)?;
    Ok(FlowOutcome {
        final_loss,
        final_grad_norm: grad_norm(&final_grad),
        final_distance_l2: policy_distance_l2(&policy, &target)?,
        final_distance_linf: policy_distance_linf(&policy, &target)?,
        iters: records.len(),
        converged,
        trace: FlowTrace { records, snapshots },
        final_policy: policy,
    })
}

/// Draws a flat-Dirichlet interior policy: per row, exponential variates
/// normalized, then floored at [`INIT_FLOOR`] (scaled down for wide rows).
fn dirichlet_policy(shape: &[usize], rng: &mut ChaCha8Rng, epsilon: f64) -> Result<TabularPolicy> {
    use rand::Rng;
    let mut rows = Vec::with_capacity(shape.len());
    for &k in shape {
        let mut row = Vec::with_capacity(k);
        for _ in 0..k {
            let mut u: f64 = rng.random();
            while u == 0.0 {
                u = rng.random();
            }
            row.push(-u.ln());
        }
        let sum: f64 = row.iter().sum();
        for x in row.iter_mut() {
            *x /= sum;
        }
        let floor = INIT_FLOOR.min(0.25 / k as f64).max(epsilon);
        floor_and_renormalize(&mut row, floor);
        rows.push(row);
    }
    TabularPolicy::try_from(rows)
}

/// Runs [`run_flow`] from `config.inits` independent Dirichlet(1)
/// initializations (streams `1..=inits` of one seeded generator) and
/// aggregates final distances to the analytic target.
/// `max_final_distance` is the worst L-inf distance over runs.
pub fn multi_start_convergence(
    loss_spec: &LossSpec,
    dist: &PreferenceDistribution,
    rewards: &RewardTable,
    config: &FlowConfig,
) -> Result<MultiStartReport> {
    if config.inits < 2 {
        return Err(Error::InvalidParameter {
            detail: format!("multi-start needs at least 2 inits, got {}", config.inits),
        });
    }
    let shape = rewards.shape();
    config.validate(&shape)?;
    let mut outcomes = Vec::with_capacity(config.inits);
    for k in 0..config.inits {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1 + k as u64);
        let init = dirichlet_policy(&shape, &mut rng, config.epsilon)?;
        let outcome = run_flow(&init, loss_spec, dist, rewards, config).map_err(|e| {
            Error::InitFailed {
                init: k,
                source: Box::new(e),
            }
        })?;
        outcomes.push(outcome);
    }
    let all_converged = outcomes.iter().all(|o| o.converged);
    let max_linf = outcomes
        .iter()
        .map(|o| o.final_distance_linf)
        .fold(0.0f64, f64::max);
    let max_l2 = outcomes
        .iter()
        .map(|o| o.final_distance_l2)
        .fold(0.0f64, f64::max);
    Ok(MultiStartReport {
        all_converged,
        max_final_distance: max_linf,
        max_final_distance_l2: max_l2,
        outcomes,
    })
}

/// Checks that the recorded distance to target never increases by more
/// than [`LYAPUNOV_TOL`] between consecutive records. `first_violation`
/// holds the iteration number of the first offending record.
pub fn lyapunov_audit(trace: &FlowTrace) -> Result<LyapunovReport> {
    if trace.records.len() < 2 {
        return Err(Error::PreconditionViolated {
            detail: format!(
                "lyapunov audit needs at least 2 records, got {}",
                trace.records.len()
            ),
        });
    }
    let mut first_violation = None;
    let mut max_increase = 0.0f64;
    for pair in trace.records.windows(2) {
        let increase = pair[1].dist_to_target - pair[0].dist_to_target;
        max_increase = max_increase.max(increase);
        if increase > LYAPUNOV_TOL && first_violation.is_none() {
            first_violation = Some(pair[1].iter);
        }
    }
    Ok(LyapunovReport {
        monotone: first_violation.is_none(),
        first_violation,
        max_increase,
    })
}

/// Sweeps an interior grid and reports the smallest tangential gradient
/// norm over points farther than `10 * DEFAULT_CONVERGENCE_TOL` (L2) from
/// the analytic target. The tangential component (per-row gradient minus
/// its mean) is what projected descent actually follows; a strictly
/// positive minimum certifies there is no second stationary point on the
/// grid. Limited to at most 2 queries of at most 3 responses each.
pub fn stationarity_scan(
    loss_spec: &LossSpec,
    dist: &PreferenceDistribution,
    rewards: &RewardTable,
    alpha: f64,
    grid_resolution: usize,
) -> Result<StationarityReport> {
    loss_spec.validate()?;
    let shape = rewards.shape();
    if shape.len() > 2 || shape.iter().any(|&k| k > 3) {
        return Err(Error::GridTooLarge {
            points: u128::MAX,
            cap: crate::oracle::GRID_POINT_CAP,
        });
    }
    let grid = GridSpec::new(grid_resolution, STATIONARITY_MARGIN)?;
    let per_query: Vec<Vec<Vec<f64>>> = shape
        .iter()
        .map(|&k| grid.simplex_points(k))
        .collect::<Result<_>>()?;
    let target = target_policy(rewards, alpha, 1e-9)?;
    let radius = 10.0 * DEFAULT_CONVERGENCE_TOL;

    let mut idx = vec![0usize; shape.len()];
    let mut min_grad_norm = f64::INFINITY;
    let mut points_scanned = 0usize;
    let mut points_excluded = 0usize;
    loop {
        let rows: Vec<Vec<f64>> = idx
            .iter()
            .enumerate()
            .map(|(q, &i)| per_query[q][i].clone())
            .collect();
        let policy = TabularPolicy::try_from(rows)?;
        let dist_to_target = policy_distance_l2(&policy, &target)?;
        if dist_to_target <= radius {
            points_excluded += 1;
        } else {
            let grad = pref_grad(&policy, dist, loss_spec)?;
            let mut total = 0.0;
            for row in &grad {
                let mean: f64 = row.iter().sum::<f64>() / row.len() as f64;
                for &g in row {
                    let t = g - mean;
                    total += t * t;
                }
            }
            min_grad_norm = min_grad_norm.min(total.sqrt());
            points_scanned += 1;
        }

        let mut carry = idx.len();
        for q in (0..idx.len()).rev() {
            idx[q] += 1;
            if idx[q] < per_query[q].len() {
                carry = q;
                break;
            }
            idx[q] = 0;
        }
        if carry == idx.len() {
            break;
        }
    }
    Ok(StationarityReport {
        min_grad_norm,
        points_scanned,
        points_excluded,
    })
}
