//! Brute-force verifiers: central finite differences, interior grid
//! minimization, exhaustive expectations.
//!
//! Everything here treats the quantity under test as a black-box evaluator,
//! so agreement with the closed-form gradients and softmax targets elsewhere
//! in the crate is evidence rather than tautology. Differentiation happens in
//! the raw (unprojected) coordinates exposed by
//! [`TabularPolicy::perturbed`]: each probe moves one raw entry and leaves
//! the rest alone, which is exactly the parameterization the closed-form
//! gradients are stated in.

use crate::error::{Error, Result};
use crate::losses::TabularPolicy;
use crate::prefdata::{PrefTuple, PreferenceDistribution};

/// Enumeration cap for [`grid_minimize`]: total policy grid points.
pub const GRID_POINT_CAP: u128 = 2_000_000;

/// Interior lattice on a product of simplices: per simplex, all compositions
/// c of `resolution` into `dim` parts, mapped to p = c/resolution and
/// filtered to entries ≥ `margin`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub resolution: usize,
    pub margin: f64,
}

impl GridSpec {
    pub fn new(resolution: usize, margin: f64) -> Result<Self> {
        if resolution < 3 {
            return Err(Error::InvalidParameter {
                detail: format!("grid resolution {resolution} must be at least 3"),
            });
        }
        if !margin.is_finite() || margin <= 0.0 {
            return Err(Error::InvalidParameter {
                detail: format!("grid margin {margin} must be positive"),
            });
        }
        Ok(Self { resolution, margin })
    }

    /// All interior lattice points of the (dim−1)-simplex.
    pub fn simplex_points(&self, dim: usize) -> Result<Vec<Vec<f64>>> {
        if dim < 2 {
            return Err(Error::TooFewEntries { got: dim });
        }
        let r = self.resolution;
        let mut out = Vec::new();
        let mut counts = vec![0usize; dim];
        fill_compositions(r, 0, &mut counts, &mut |c| {
            let p: Vec<f64> = c.iter().map(|&k| k as f64 / r as f64).collect();
            if p.iter().all(|&x| x >= self.margin) {
                out.push(p);
            }
        });
        Ok(out)
    }
}

fn fill_compositions(
    remaining: usize,
    index: usize,
    counts: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]),
) {
    if index + 1 == counts.len() {
        counts[index] = remaining;
        visit(counts);
        return;
    }
    for k in 0..=remaining {
        counts[index] = k;
        fill_compositions(remaining - k, index + 1, counts, visit);
    }
}

/// Central differences (f(π + h·e) − f(π − h·e)) / 2h per raw entry.
///
/// Every entry must exceed `h` so both probes stay strictly positive.
pub fn finite_difference_grad<F>(
    eval: F,
    policy: &TabularPolicy,
    h: f64,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&TabularPolicy) -> Result<f64>,
{
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::InvalidParameter {
            detail: format!("finite-difference step {h} must be positive"),
        });
    }
    let mut grad = policy.zero_grad();
    for q in 0..policy.num_queries() {
        for y in 0..policy.row(q).len() {
            if policy.prob(q, y) <= h {
                return Err(Error::BoundaryTooClose {
                    query: q,
                    response: y,
                });
            }
            let up = eval(&policy.perturbed(q, y, h)?)?;
            let dn = eval(&policy.perturbed(q, y, -h)?)?;
            grad[q][y] = (up - dn) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Largest per-coordinate relative deviation, with denominator
/// max(1, |analytic|) so tiny gradients are compared absolutely.
pub fn max_rel_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (ra, rn) in analytic.iter().zip(numeric) {
        for (a, n) in ra.iter().zip(rn) {
            worst = worst.max((a - n).abs() / a.abs().max(1.0));
        }
    }
    worst
}

#[derive(Debug, Clone)]
pub struct GridMinimum {
    pub argmin: TabularPolicy,
    pub value: f64,
}

/// Exhaustive evaluation over the interior lattice of the product simplex;
/// ties keep the first point in lattice order. Desk-scale only: at most two
/// queries of at most three responses each.
pub fn grid_minimize<F>(eval: F, shape: &[usize], grid: &GridSpec) -> Result<GridMinimum>
where
    F: Fn(&TabularPolicy) -> Result<f64>,
{
    if shape.is_empty() {
        return Err(Error::EmptyInput);
    }
    if shape.len() > 2 || shape.iter().any(|&k| k > 3) {
        return Err(Error::GridTooLarge {
            points: u128::MAX,
            cap: GRID_POINT_CAP,
        });
    }
    let per_query: Vec<Vec<Vec<f64>>> = shape
        .iter()
        .map(|&k| grid.simplex_points(k))
        .collect::<Result<_>>()?;
    let total: u128 = per_query.iter().map(|p| p.len() as u128).product();
    if total > GRID_POINT_CAP {
        return Err(Error::GridTooLarge {
            points: total,
            cap: GRID_POINT_CAP,
        });
    }
    if total == 0 {
        return Err(Error::InvalidParameter {
            detail: "grid margin excludes every lattice point".into(),
        });
    }
    let mut best: Option<GridMinimum> = None;
    let mut indices = vec![0usize; shape.len()];
    loop {
        let rows: Vec<Vec<f64>> = indices
            .iter()
            .enumerate()
            .map(|(q, &i)| per_query[q][i].clone())
            .collect();
        let policy = TabularPolicy::from_raw(rows)?;
        let value = eval(&policy)?;
        if best.as_ref().is_none_or(|b| value < b.value) {
            best = Some(GridMinimum {
                argmin: policy,
                value,
            });
        }
        // Odometer increment over the per-query point lists.
        let mut q = indices.len();
        loop {
            if q == 0 {
                return Ok(best.expect("at least one grid point was evaluated"));
            }
            q -= 1;
            indices[q] += 1;
            if indices[q] < per_query[q].len() {
                break;
            }
            indices[q] = 0;
        }
    }
}

/// Σ weight·eval(tuple) over the atom list, the reference realization of
/// every data expectation in the loss definitions.
pub fn exhaustive_expectation<F>(eval: F, dist: &PreferenceDistribution) -> Result<f64>
where
    F: Fn(&PrefTuple) -> Result<f64>,
{
    let mut total = 0.0;
    for atom in dist.atoms() {
        total += atom.weight * eval(&atom.tuple)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{spo_pref_grad, spo_pref_loss, WeightFunction};
    use crate::prefdata::{
        make_bt_consistent_pairwise, Atom, PairwiseTuple, RewardTable, TupleMarginal,
    };
    use crate::simplex::{euclidean_distance, softmax_scaled};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn fd_recovers_linear_coefficients() {
        let c = [0.7, -1.3, 2.1];
        let eval = |p: &TabularPolicy| {
            Ok(p.row(0).iter().zip(&c).map(|(x, ci)| x * ci).sum::<f64>())
        };
        let p = TabularPolicy::from_raw(vec![vec![0.2, 0.3, 0.5]]).unwrap();
        let g = finite_difference_grad(eval, &p, 1e-6).unwrap();
        for (gi, ci) in g[0].iter().zip(&c) {
            assert!(close(*gi, *ci, 1e-9), "{gi} vs {ci}");
        }
    }

    #[test]
    fn fd_matches_spo_closed_form() {
        let t = RewardTable::new(vec!["q0".into()], vec![vec![0.0, 0.0]]).unwrap();
        let d = crate::prefdata::PreferenceDistribution::new(
            &t,
            vec![Atom {
                tuple: crate::prefdata::PrefTuple::Pairwise(PairwiseTuple {
                    query: 0,
                    winner: 0,
                    loser: 1,
                }),
                weight: 1.0,
            }],
        )
        .unwrap();
        let p = TabularPolicy::from_raw(vec![vec![0.5, 0.5]]).unwrap();
        let u = WeightFunction::uniform();
        let analytic = spo_pref_grad(&p, &d, 1.0, &u).unwrap();
        let numeric =
            finite_difference_grad(|pp| spo_pref_loss(pp, &d, 1.0, &u), &p, 1e-6).unwrap();
        assert!(max_rel_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn fd_rejects_bad_steps_and_boundaries() {
        let p = TabularPolicy::from_raw(vec![vec![0.5, 0.5]]).unwrap();
        let eval = |_: &TabularPolicy| Ok(0.0);
        assert!(matches!(
            finite_difference_grad(eval, &p, 0.0),
            Err(Error::InvalidParameter { .. })
        ));
        let near = TabularPolicy::from_raw(vec![vec![1e-8, 1.0]]).unwrap();
        assert!(matches!(
            finite_difference_grad(eval, &near, 1e-6),
            Err(Error::BoundaryTooClose {
                query: 0,
                response: 0
            })
        ));
    }

    #[test]
    fn grid_points_match_expected_interior_count() {
        // Resolution 1000 on the 1-simplex: 1001 lattice points, 999 interior
        // once the two vertices fall below the margin.
        let grid = GridSpec::new(1000, 1e-4).unwrap();
        let pts = grid.simplex_points(2).unwrap();
        assert_eq!(pts.len(), 999);
        for p in &pts {
            assert!(close(p.iter().sum::<f64>(), 1.0, 1e-12));
            assert!(p.iter().all(|&x| x >= 1e-4));
        }
    }

    fn bt_instance(rewards: Vec<f64>) -> (RewardTable, crate::prefdata::PreferenceDistribution) {
        let t = RewardTable::new(vec!["q0".into()], vec![rewards]).unwrap();
        let m = TupleMarginal::uniform_pairs(&t).unwrap();
        let d = make_bt_consistent_pairwise(&t, &m).unwrap();
        (t, d)
    }

    #[test]
    fn grid_minimize_finds_softmax_target() {
        let (t, d) = bt_instance(vec![2.0f64.ln(), 0.0]);
        let u = WeightFunction::uniform();
        let grid = GridSpec::new(2001, 1e-4).unwrap();
        for (alpha, expect) in [(1.0, vec![2.0 / 3.0, 1.0 / 3.0]), (0.5, vec![0.8, 0.2])] {
            let m = grid_minimize(
                |p| spo_pref_loss(p, &d, alpha, &u),
                &t.shape(),
                &grid,
            )
            .unwrap();
            let dist = euclidean_distance(m.argmin.row(0), &expect).unwrap();
            assert!(dist < 1e-3, "alpha {alpha}: distance {dist}");
        }
    }

    #[test]
    fn grid_minimize_symmetric_instance_is_uniform() {
        let (t, d) = bt_instance(vec![0.5, 0.5]);
        let u = WeightFunction::uniform();
        let grid = GridSpec::new(101, 1e-3).unwrap();
        let m = grid_minimize(|p| spo_pref_loss(p, &d, 1.0, &u), &t.shape(), &grid).unwrap();
        for &x in m.argmin.row(0) {
            assert!(close(x, 0.5, 1.0 / 101.0));
        }
    }

    #[test]
    fn grid_minimize_argmin_sharpens_with_resolution() {
        let (t, d) = bt_instance(vec![2.0f64.ln(), 0.0]);
        let u = WeightFunction::uniform();
        let target = softmax_scaled(t.rewards(0), 1.0).unwrap();
        let mut distances = Vec::new();
        for resolution in [11, 101, 1001] {
            let grid = GridSpec::new(resolution, 1e-5).unwrap();
            let m =
                grid_minimize(|p| spo_pref_loss(p, &d, 1.0, &u), &t.shape(), &grid).unwrap();
            distances.push(euclidean_distance(m.argmin.row(0), target.probs()).unwrap());
        }
        assert!(distances[0] > distances[1] && distances[1] > distances[2]);
    }

    #[test]
    fn grid_minimize_rejects_large_spaces() {
        let eval = |_: &TabularPolicy| Ok(0.0);
        assert!(matches!(
            grid_minimize(eval, &[4], &GridSpec::new(10, 1e-3).unwrap()),
            Err(Error::GridTooLarge { .. })
        ));
        assert!(matches!(
            grid_minimize(eval, &[2, 2, 2], &GridSpec::new(10, 1e-3).unwrap()),
            Err(Error::GridTooLarge { .. })
        ));
    }

    #[test]
    fn exhaustive_expectation_hand_values() {
        let t = RewardTable::new(vec!["q0".into()], vec![vec![0.0, 0.0]]).unwrap();
        let atoms = vec![
            Atom {
                tuple: crate::prefdata::PrefTuple::Pairwise(PairwiseTuple {
                    query: 0,
                    winner: 0,
                    loser: 1,
                }),
                weight: 0.25,
            },
            Atom {
                tuple: crate::prefdata::PrefTuple::Pairwise(PairwiseTuple {
                    query: 0,
                    winner: 1,
                    loser: 0,
                }),
                weight: 0.75,
            },
        ];
        let d = crate::prefdata::PreferenceDistribution::new(&t, atoms).unwrap();
        assert!(close(
            exhaustive_expectation(|_| Ok(1.0), &d).unwrap(),
            1.0,
            1e-15
        ));
        let v = exhaustive_expectation(
            |t| match t {
                crate::prefdata::PrefTuple::Pairwise(p) if p.winner == 0 => Ok(4.0),
                _ => Ok(0.0),
            },
            &d,
        )
        .unwrap();
        assert!(close(v, 1.0, 1e-15));
    }
}
