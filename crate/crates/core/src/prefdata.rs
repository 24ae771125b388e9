//! Ground-truth rewards and exactly consistent preference data.
//!
//! A [`RewardTable`] fixes latent rewards r(y|x) on a finite query/response
//! grid. Preference data is a [`PreferenceDistribution`]: a finite list of
//! weighted atoms over one of three tuple shapes (pairwise winner/loser,
//! best-of-n, full ranking). The `make_*` constructors split a caller-supplied
//! marginal over unordered response sets so that the resulting ordered-tuple
//! mass ratios satisfy the Bradley-Terry or Plackett-Luce identities exactly:
//!
//! ```text
//!     pairwise:  D(x; y1, y2) / D(x; y2, y1)     = exp(r(y1) - r(y2))
//!     n-ary:     D(x; y_1..y_n; i) / D(..; j)    = exp(r(y_i) - r(y_j))
//!     ranked:    D(x; y_1..y_n; tau) proportional to the PL ranking probability
//! ```
//!
//! Consistency is enforced by construction, not by sampling: the convergence
//! theory concerns the asymptotic data distribution, so experiments use the
//! exact atom weights and [`sample_dataset`] exists only as a finite-sample
//! mode.
//!
//! Queries and responses are referenced by index everywhere; query names are
//! carried for display and serialization. Both equal pairs (y1 = y2) and
//! repeated responses within a tuple are excluded: a "best response" among
//! repeats is ill-posed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::{RENORM_TOL, SUM_TOL};

// ==== reward tables =======================================================

/// Latent rewards r(y|x): one finite real per (query, response).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RewardTableDoc", into = "RewardTableDoc")]
pub struct RewardTable {
    queries: Vec<String>,
    rewards: Vec<Vec<f64>>,
}

impl RewardTable {
    /// Query names must be nonempty, whitespace-free and unique (they key the
    /// line-oriented text format); every query needs at least 2 responses.
    pub fn new(queries: Vec<String>, rewards: Vec<Vec<f64>>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::EmptyInput);
        }
        if queries.len() != rewards.len() {
            return Err(Error::DimensionMismatch {
                left: queries.len(),
                right: rewards.len(),
            });
        }
        for (q, name) in queries.iter().enumerate() {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::InvalidParameter {
                    detail: format!("query name {name:?} is empty or contains whitespace"),
                });
            }
            if queries[..q].contains(name) {
                return Err(Error::InvalidParameter {
                    detail: format!("duplicate query name {name:?}"),
                });
            }
        }
        for (q, row) in rewards.iter().enumerate() {
            if row.len() < 2 {
                return Err(Error::TooFewEntries { got: row.len() });
            }
            if row.iter().any(|r| !r.is_finite()) {
                return Err(Error::NonfiniteValue { what: "reward" });
            }
            let _ = q;
        }
        Ok(Self { queries, rewards })
    }

    /// Rewards drawn uniformly from `[lo, hi)`, one query per entry of
    /// `sizes`, named q0, q1, ...
    pub fn random(sizes: &[usize], lo: f64, hi: f64, seed: u64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidParameter {
                detail: format!("bad reward range [{lo}, {hi})"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let queries = (0..sizes.len()).map(|q| format!("q{q}")).collect();
        let rewards = sizes
            .iter()
            .map(|&k| (0..k).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect())
            .collect();
        Self::new(queries, rewards)
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn num_responses(&self, query: usize) -> usize {
        self.rewards[query].len()
    }

    pub fn query_name(&self, query: usize) -> &str {
        &self.queries[query]
    }

    pub fn rewards(&self, query: usize) -> &[f64] {
        &self.rewards[query]
    }

    /// Response counts per query, the shape every policy must match.
    pub fn shape(&self) -> Vec<usize> {
        self.rewards.iter().map(Vec::len).collect()
    }

    pub fn check_query(&self, query: usize) -> Result<()> {
        if query >= self.queries.len() {
            return Err(Error::UnknownQuery { query });
        }
        Ok(())
    }

    pub fn check_response(&self, query: usize, response: usize) -> Result<()> {
        self.check_query(query)?;
        if response >= self.rewards[query].len() {
            return Err(Error::UnknownResponse { query, response });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RewardTableDoc {
    queries: Vec<String>,
    rewards: Vec<Vec<f64>>,
}

impl TryFrom<RewardTableDoc> for RewardTable {
    type Error = Error;
    fn try_from(doc: RewardTableDoc) -> Result<Self> {
        RewardTable::new(doc.queries, doc.rewards)
    }
}

impl From<RewardTable> for RewardTableDoc {
    fn from(t: RewardTable) -> Self {
        RewardTableDoc {
            queries: t.queries,
            rewards: t.rewards,
        }
    }
}

// ==== preference tuples ===================================================

/// One pairwise comparison: `winner` was preferred over `loser`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseTuple {
    pub query: usize,
    pub winner: usize,
    pub loser: usize,
}

/// n distinct responses with one marked best. `best` indexes into
/// `responses` (0-based position, not a response id).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BestOfNTuple {
    pub query: usize,
    pub responses: Vec<usize>,
    pub best: usize,
}

/// n distinct responses with a full ranking. `ranking[k]` is the position in
/// `responses` of the rank-k response (rank 0 = most preferred).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedTuple {
    pub query: usize,
    pub responses: Vec<usize>,
    pub ranking: Vec<usize>,
}

impl RankedTuple {
    /// Response id at rank `k`.
    pub fn response_at_rank(&self, k: usize) -> usize {
        self.responses[self.ranking[k]]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrefTuple {
    Pairwise(PairwiseTuple),
    BestOfN(BestOfNTuple),
    Ranked(RankedTuple),
}

impl PrefTuple {
    pub fn kind(&self) -> TupleKind {
        match self {
            PrefTuple::Pairwise(_) => TupleKind::Pairwise,
            PrefTuple::BestOfN(_) => TupleKind::BestOfN,
            PrefTuple::Ranked(_) => TupleKind::Ranked,
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            PrefTuple::Pairwise(_) => 2,
            PrefTuple::BestOfN(t) => t.responses.len(),
            PrefTuple::Ranked(t) => t.responses.len(),
        }
    }

    pub fn query(&self) -> usize {
        match self {
            PrefTuple::Pairwise(t) => t.query,
            PrefTuple::BestOfN(t) => t.query,
            PrefTuple::Ranked(t) => t.query,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TupleKind {
    Pairwise,
    BestOfN,
    Ranked,
}

impl TupleKind {
    pub fn label(self) -> &'static str {
        match self {
            TupleKind::Pairwise => "pairwise",
            TupleKind::BestOfN => "bestofn",
            TupleKind::Ranked => "ranked",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub tuple: PrefTuple,
    pub weight: f64,
}

// ==== preference distributions ============================================

/// A finite preference data distribution: weighted atoms of one tuple kind
/// and one arity, with weights strictly positive and summing to 1.
///
/// `shape` records the response count per query so the value is
/// self-validating after deserialization. `full_support` is set by the
/// `make_*` constructors, which cover every unordered set of their tuple
/// space; hand-assembled distributions carry `false`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PrefDistDoc", into = "PrefDistDoc")]
pub struct PreferenceDistribution {
    kind: TupleKind,
    n: usize,
    shape: Vec<usize>,
    full_support: bool,
    atoms: Vec<Atom>,
}

impl PreferenceDistribution {
    pub fn new(table: &RewardTable, atoms: Vec<Atom>) -> Result<Self> {
        Self::from_parts(table.shape(), atoms, false)
    }

    fn from_parts(shape: Vec<usize>, atoms: Vec<Atom>, full_support: bool) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptyInput);
        }
        let kind = atoms[0].tuple.kind();
        let n = atoms[0].tuple.arity();
        let mut sum = 0.0;
        for atom in &atoms {
            if atom.tuple.kind() != kind || atom.tuple.arity() != n {
                return Err(Error::InvalidParameter {
                    detail: "atoms mix tuple kinds or arities".into(),
                });
            }
            if !atom.weight.is_finite() || atom.weight <= 0.0 {
                return Err(Error::InvalidParameter {
                    detail: format!("atom weight {} is not strictly positive", atom.weight),
                });
            }
            sum += atom.weight;
            validate_tuple(&atom.tuple, &shape)?;
        }
        let mut atoms = atoms;
        if (sum - 1.0).abs() > SUM_TOL {
            if (sum - 1.0).abs() >= RENORM_TOL {
                return Err(Error::NotNormalized { sum });
            }
            for atom in &mut atoms {
                atom.weight /= sum;
            }
        }
        Ok(Self {
            kind,
            n,
            shape,
            full_support,
            atoms,
        })
    }

    pub fn kind(&self) -> TupleKind {
        self.kind
    }

    /// Tuple arity n (2 for pairwise).
    pub fn arity(&self) -> usize {
        self.n
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn full_support(&self) -> bool {
        self.full_support
    }

    pub fn expect_kind(&self, kind: TupleKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::PreconditionViolated {
                detail: format!(
                    "expected a {} distribution, got {}",
                    kind.label(),
                    self.kind.label()
                ),
            });
        }
        Ok(())
    }

    /// Marginal of a ranked distribution from rank `rank_from` down: each
    /// ranked atom contributes its weight to the best-of-(n - rank_from) atom
    /// whose responses are the suffix of the ranking and whose best is the
    /// rank-`rank_from` response. Duplicate images are merged, so the result
    /// is again a unit-mass distribution.
    ///
    /// This is the marginalization under which a ranking loss with constant
    /// per-rank weights decomposes into a weighted sum of best-of-k losses;
    /// see the losses module tests.
    pub fn suffix_marginal(&self, rank_from: usize) -> Result<PreferenceDistribution> {
        self.expect_kind(TupleKind::Ranked)?;
        if rank_from + 2 > self.n {
            return Err(Error::InvalidParameter {
                detail: format!(
                    "rank_from {rank_from} leaves fewer than 2 of {} responses",
                    self.n
                ),
            });
        }
        // Canonical image: responses sorted ascending, best re-indexed, so
        // atoms that differ only in suffix order merge.
        let mut merged: BTreeMap<(usize, Vec<usize>, usize), f64> = BTreeMap::new();
        for atom in &self.atoms {
            let t = match &atom.tuple {
                PrefTuple::Ranked(t) => t,
                _ => unreachable!("kind checked above"),
            };
            let mut suffix: Vec<usize> =
                (rank_from..self.n).map(|k| t.response_at_rank(k)).collect();
            let best_id = suffix[0];
            suffix.sort_unstable();
            let best = suffix.iter().position(|&y| y == best_id).unwrap();
            *merged.entry((t.query, suffix, best)).or_insert(0.0) += atom.weight;
        }
        let atoms = merged
            .into_iter()
            .map(|((query, responses, best), weight)| Atom {
                tuple: PrefTuple::BestOfN(BestOfNTuple {
                    query,
                    responses,
                    best,
                }),
                weight,
            })
            .collect();
        Self::from_parts(self.shape.clone(), atoms, false)
    }
}

fn validate_tuple(tuple: &PrefTuple, shape: &[usize]) -> Result<()> {
    let check = |query: usize, response: usize| -> Result<()> {
        if query >= shape.len() {
            return Err(Error::UnknownQuery { query });
        }
        if response >= shape[query] {
            return Err(Error::UnknownResponse { query, response });
        }
        Ok(())
    };
    match tuple {
        PrefTuple::Pairwise(t) => {
            check(t.query, t.winner)?;
            check(t.query, t.loser)?;
            if t.winner == t.loser {
                return Err(Error::SameResponse {
                    query: t.query,
                    response: t.winner,
                });
            }
        }
        PrefTuple::BestOfN(t) => {
            validate_response_list(t.query, &t.responses, shape, check)?;
            if t.best >= t.responses.len() {
                return Err(Error::InvalidParameter {
                    detail: format!(
                        "best index {} out of range for {} responses",
                        t.best,
                        t.responses.len()
                    ),
                });
            }
        }
        PrefTuple::Ranked(t) => {
            validate_response_list(t.query, &t.responses, shape, check)?;
            let n = t.responses.len();
            if t.ranking.len() != n || {
                let mut seen = vec![false; n];
                t.ranking.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
            } {
                return Err(Error::InvalidParameter {
                    detail: format!("ranking {:?} is not a permutation of 0..{n}", t.ranking),
                });
            }
        }
    }
    Ok(())
}

fn validate_response_list(
    query: usize,
    responses: &[usize],
    _shape: &[usize],
    check: impl Fn(usize, usize) -> Result<()>,
) -> Result<()> {
    if responses.len() < 2 {
        return Err(Error::TooFewEntries {
            got: responses.len(),
        });
    }
    for (i, &y) in responses.iter().enumerate() {
        check(query, y)?;
        if responses[..i].contains(&y) {
            return Err(Error::DuplicateResponse { query, response: y });
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PrefDistDoc {
    kind: TupleKind,
    n: usize,
    shape: Vec<usize>,
    full_support: bool,
    atoms: Vec<Atom>,
}

impl TryFrom<PrefDistDoc> for PreferenceDistribution {
    type Error = Error;
    fn try_from(doc: PrefDistDoc) -> Result<Self> {
        let dist = PreferenceDistribution::from_parts(doc.shape, doc.atoms, doc.full_support)?;
        if dist.kind != doc.kind || dist.n != doc.n {
            return Err(Error::InvalidParameter {
                detail: "declared kind/arity disagree with atoms".into(),
            });
        }
        Ok(dist)
    }
}

impl From<PreferenceDistribution> for PrefDistDoc {
    fn from(d: PreferenceDistribution) -> Self {
        PrefDistDoc {
            kind: d.kind,
            n: d.n,
            shape: d.shape,
            full_support: d.full_support,
            atoms: d.atoms,
        }
    }
}

// ==== model probabilities =================================================

/// Bradley-Terry preference probability σ(r(y1|x) − r(y2|x)).
///
/// Computed from the higher-reward side so that the two orderings sum to
/// exactly 1 (the complement 1 − p is exact for p ≥ 1/2).
pub fn bt_preference_prob(table: &RewardTable, query: usize, y1: usize, y2: usize) -> Result<f64> {
    table.check_response(query, y1)?;
    table.check_response(query, y2)?;
    if y1 == y2 {
        return Err(Error::SameResponse {
            query,
            response: y1,
        });
    }
    let r1 = table.rewards(query)[y1];
    let r2 = table.rewards(query)[y2];
    if r1 == r2 {
        return Ok(0.5);
    }
    if r1 > r2 {
        Ok(1.0 / (1.0 + (r2 - r1).exp()))
    } else {
        Ok(1.0 - 1.0 / (1.0 + (r1 - r2).exp()))
    }
}

/// Plackett-Luce probability of observing `order` (most preferred first):
/// the telescoping product Π_k exp(r_k) / Σ_{i≥k} exp(r_i), stabilized by a
/// common reward shift. Sums to 1 over all orders of a fixed set.
pub fn pl_ranking_prob(table: &RewardTable, query: usize, order: &[usize]) -> Result<f64> {
    if order.len() < 2 {
        return Err(Error::TooFewEntries { got: order.len() });
    }
    for (i, &y) in order.iter().enumerate() {
        table.check_response(query, y)?;
        if order[..i].contains(&y) {
            return Err(Error::DuplicateResponse { query, response: y });
        }
    }
    let r = table.rewards(query);
    let shift = order.iter().map(|&y| r[y]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = order.iter().map(|&y| (r[y] - shift).exp()).collect();
    let mut prob = 1.0;
    let mut tail: f64 = weights.iter().sum();
    for (k, &w) in weights.iter().enumerate() {
        if k + 1 == order.len() {
            break;
        }
        prob *= w / tail;
        tail -= w;
    }
    Ok(prob)
}

// ==== marginals over response sets ========================================

/// A strictly positive weighting of unordered response sets (one fixed set
/// size), the degree of freedom the consistency constructions leave open.
/// Weights are normalized to total mass 1 at construction.
#[derive(Debug, Clone)]
pub struct TupleMarginal {
    set_size: usize,
    entries: Vec<(usize, Vec<usize>, f64)>,
}

impl TupleMarginal {
    /// `entries` are (query, response set, weight); sets may be given in any
    /// order but must not repeat a response or a (query, set) pair.
    pub fn new(table: &RewardTable, entries: Vec<(usize, Vec<usize>, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput);
        }
        let set_size = entries[0].1.len();
        if set_size < 2 {
            return Err(Error::TooFewEntries { got: set_size });
        }
        let mut seen: BTreeMap<(usize, Vec<usize>), ()> = BTreeMap::new();
        let mut total = 0.0;
        let mut normalized = Vec::with_capacity(entries.len());
        for (query, set, weight) in entries {
            if set.len() != set_size {
                return Err(Error::InvalidParameter {
                    detail: format!("set sizes mix {set_size} and {}", set.len()),
                });
            }
            let mut set = set;
            set.sort_unstable();
            for (i, &y) in set.iter().enumerate() {
                table.check_response(query, y)?;
                if i > 0 && set[i - 1] == y {
                    return Err(Error::DuplicateResponse { query, response: y });
                }
            }
            if !(weight > 0.0) || !weight.is_finite() {
                return Err(Error::ZeroMarginal {
                    detail: format!("set {set:?} of query {query} has weight {weight}"),
                });
            }
            if seen.insert((query, set.clone()), ()).is_some() {
                return Err(Error::InvalidParameter {
                    detail: format!("set {set:?} of query {query} listed twice"),
                });
            }
            total += weight;
            normalized.push((query, set, weight));
        }
        for entry in &mut normalized {
            entry.2 /= total;
        }
        Ok(Self {
            set_size,
            entries: normalized,
        })
    }

    /// Uniform weight on every unordered pair of every query.
    pub fn uniform_pairs(table: &RewardTable) -> Result<Self> {
        Self::uniform_sets(table, 2)
    }

    /// Uniform weight on every unordered size-`n` response set of every query.
    pub fn uniform_sets(table: &RewardTable, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::TooFewEntries { got: n });
        }
        let mut entries = Vec::new();
        for q in 0..table.num_queries() {
            let k = table.num_responses(q);
            if k < n {
                return Err(Error::InvalidParameter {
                    detail: format!("query {q} has {k} responses, fewer than n = {n}"),
                });
            }
            for set in combinations(k, n) {
                entries.push((q, set, 1.0));
            }
        }
        Self::new(table, entries)
    }

    pub fn set_size(&self) -> usize {
        self.set_size
    }

    pub fn entries(&self) -> &[(usize, Vec<usize>, f64)] {
        &self.entries
    }

    /// Every size-`set_size` response set of every query must appear. The
    /// consistency theorems need full support, so the constructors reject
    /// marginals with holes.
    fn check_covers(&self, table: &RewardTable) -> Result<()> {
        let mut have: BTreeMap<(usize, &[usize]), ()> = BTreeMap::new();
        for (q, set, _) in &self.entries {
            have.insert((*q, set.as_slice()), ());
        }
        for q in 0..table.num_queries() {
            for set in combinations(table.num_responses(q), self.set_size) {
                if !have.contains_key(&(q, set.as_slice())) {
                    return Err(Error::ZeroMarginal {
                        detail: format!("set {set:?} of query {q} is missing"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// All sorted k-of-n index combinations, in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..n {
            current.push(i);
            rec(i + 1, n, k, current, out);
            current.pop();
        }
    }
    rec(0, n, k, &mut current, &mut out);
    out
}

/// All permutations of 0..n, in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..n).collect();
    fn rec(items: &mut Vec<usize>, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if items.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..items.len() {
            let item = items.remove(i);
            prefix.push(item);
            rec(items, prefix, out);
            prefix.pop();
            items.insert(i, item);
        }
    }
    rec(&mut items, &mut Vec::new(), &mut out);
    out
}

// ==== consistent constructions ============================================

/// Split each pair's marginal mass between the two orderings by the BT
/// probability, so ordered-pair mass ratios equal exp(r(y1) − r(y2)).
pub fn make_bt_consistent_pairwise(
    table: &RewardTable,
    marginal: &TupleMarginal,
) -> Result<PreferenceDistribution> {
    if marginal.set_size() != 2 {
        return Err(Error::InvalidParameter {
            detail: format!("pairwise needs sets of size 2, got {}", marginal.set_size()),
        });
    }
    marginal.check_covers(table)?;
    let mut atoms = Vec::with_capacity(2 * marginal.entries().len());
    for (query, set, mass) in marginal.entries() {
        let (a, b) = (set[0], set[1]);
        let p = bt_preference_prob(table, *query, a, b)?;
        atoms.push(Atom {
            tuple: PrefTuple::Pairwise(PairwiseTuple {
                query: *query,
                winner: a,
                loser: b,
            }),
            weight: mass * p,
        });
        atoms.push(Atom {
            tuple: PrefTuple::Pairwise(PairwiseTuple {
                query: *query,
                winner: b,
                loser: a,
            }),
            weight: mass * (1.0 - p),
        });
    }
    PreferenceDistribution::from_parts(table.shape(), atoms, true)
}

/// Distribute each n-set's mass over best choices proportionally to
/// exp(r(y_i)), the n-ary BT split.
pub fn make_nary_bt_consistent(
    table: &RewardTable,
    marginal: &TupleMarginal,
    n: usize,
) -> Result<PreferenceDistribution> {
    if marginal.set_size() != n || n < 2 {
        return Err(Error::InvalidParameter {
            detail: format!("marginal set size {} but n = {n}", marginal.set_size()),
        });
    }
    marginal.check_covers(table)?;
    let mut atoms = Vec::with_capacity(n * marginal.entries().len());
    for (query, set, mass) in marginal.entries() {
        let r = table.rewards(*query);
        let shift = set.iter().map(|&y| r[y]).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = set.iter().map(|&y| (r[y] - shift).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (best, w) in weights.iter().enumerate() {
            atoms.push(Atom {
                tuple: PrefTuple::BestOfN(BestOfNTuple {
                    query: *query,
                    responses: set.clone(),
                    best,
                }),
                weight: mass * w / total,
            });
        }
    }
    PreferenceDistribution::from_parts(table.shape(), atoms, true)
}

/// Distribute each n-set's mass over all n! rankings proportionally to the
/// PL ranking probability (which already sums to 1 per set).
pub fn make_pl_consistent_ranked(
    table: &RewardTable,
    marginal: &TupleMarginal,
    n: usize,
) -> Result<PreferenceDistribution> {
    if marginal.set_size() != n || n < 2 {
        return Err(Error::InvalidParameter {
            detail: format!("marginal set size {} but n = {n}", marginal.set_size()),
        });
    }
    marginal.check_covers(table)?;
    let perms = permutations(n);
    let mut atoms = Vec::with_capacity(perms.len() * marginal.entries().len());
    for (query, set, mass) in marginal.entries() {
        for perm in &perms {
            let order: Vec<usize> = perm.iter().map(|&p| set[p]).collect();
            let prob = pl_ranking_prob(table, *query, &order)?;
            atoms.push(Atom {
                tuple: PrefTuple::Ranked(RankedTuple {
                    query: *query,
                    responses: set.clone(),
                    ranking: perm.clone(),
                }),
                weight: mass * prob,
            });
        }
    }
    PreferenceDistribution::from_parts(table.shape(), atoms, true)
}

/// `count` i.i.d. categorical draws from the atom weights.
pub fn sample_dataset(dist: &PreferenceDistribution, count: usize, seed: u64) -> Result<Vec<PrefTuple>> {
    if count == 0 {
        return Err(Error::InvalidParameter {
            detail: "sample count must be at least 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u: f64 = rng.random();
        let mut chosen = dist.atoms().len() - 1;
        for (i, atom) in dist.atoms().iter().enumerate() {
            u -= atom.weight;
            if u < 0.0 {
                chosen = i;
                break;
            }
        }
        out.push(dist.atoms()[chosen].tuple.clone());
    }
    Ok(out)
}

// ==== text format =========================================================
//
// Line-oriented companions to the JSON documents; see README for the schema.
// Floats are printed with Rust's shortest round-trip formatting, so
// serialize/deserialize is lossless for all finite values.

impl RewardTable {
    pub fn to_text(&self) -> String {
        let mut s = String::from("rewardtable v1\n");
        for (q, name) in self.queries.iter().enumerate() {
            s.push_str(&format!("query {name} :"));
            for r in &self.rewards[q] {
                s.push_str(&format!(" {r}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = numbered_lines(text);
        expect_header(&mut lines, "rewardtable v1")?;
        let mut queries = Vec::new();
        let mut rewards = Vec::new();
        for (no, line) in lines {
            let mut tok = line.split_whitespace();
            match tok.next() {
                Some("query") => {
                    let name = tok
                        .next()
                        .ok_or_else(|| parse_err(no, "missing query name"))?;
                    if tok.next() != Some(":") {
                        return Err(parse_err(no, "expected ':' after query name"));
                    }
                    let row = tok
                        .map(|t| parse_f64(no, t))
                        .collect::<Result<Vec<f64>>>()?;
                    queries.push(name.to_string());
                    rewards.push(row);
                }
                Some(other) => return Err(parse_err(no, &format!("unexpected token {other:?}"))),
                None => unreachable!("blank lines are filtered"),
            }
        }
        Self::new(queries, rewards)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("reward table serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl PreferenceDistribution {
    pub fn to_text(&self) -> String {
        let mut s = String::from("prefdist v1\n");
        s.push_str(&format!("kind {}\n", self.kind.label()));
        s.push_str(&format!("n {}\n", self.n));
        s.push_str(&format!("full_support {}\n", self.full_support));
        s.push_str("shape");
        for k in &self.shape {
            s.push_str(&format!(" {k}"));
        }
        s.push('\n');
        for atom in &self.atoms {
            let w = atom.weight;
            match &atom.tuple {
                PrefTuple::Pairwise(t) => {
                    s.push_str(&format!(
                        "atom {} {w} win {} lose {}\n",
                        t.query, t.winner, t.loser
                    ));
                }
                PrefTuple::BestOfN(t) => {
                    s.push_str(&format!("atom {} {w} best {} of", t.query, t.best));
                    for y in &t.responses {
                        s.push_str(&format!(" {y}"));
                    }
                    s.push('\n');
                }
                PrefTuple::Ranked(t) => {
                    s.push_str(&format!("atom {} {w} rank", t.query));
                    for p in &t.ranking {
                        s.push_str(&format!(" {p}"));
                    }
                    s.push_str(" of");
                    for y in &t.responses {
                        s.push_str(&format!(" {y}"));
                    }
                    s.push('\n');
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = numbered_lines(text);
        expect_header(&mut lines, "prefdist v1")?;
        let mut kind: Option<TupleKind> = None;
        let mut n: Option<usize> = None;
        let mut full_support = false;
        let mut shape: Option<Vec<usize>> = None;
        let mut atoms = Vec::new();
        for (no, line) in lines {
            let mut tok = line.split_whitespace();
            match tok.next() {
                Some("kind") => {
                    kind = Some(match tok.next() {
                        Some("pairwise") => TupleKind::Pairwise,
                        Some("bestofn") => TupleKind::BestOfN,
                        Some("ranked") => TupleKind::Ranked,
                        other => return Err(parse_err(no, &format!("bad kind {other:?}"))),
                    });
                }
                Some("n") => n = Some(parse_usize(no, tok.next())?),
                Some("full_support") => {
                    full_support = match tok.next() {
                        Some("true") => true,
                        Some("false") => false,
                        other => return Err(parse_err(no, &format!("bad flag {other:?}"))),
                    };
                }
                Some("shape") => {
                    shape = Some(
                        tok.map(|t| parse_usize(no, Some(t)))
                            .collect::<Result<Vec<usize>>>()?,
                    );
                }
                Some("atom") => {
                    let query = parse_usize(no, tok.next())?;
                    let weight = parse_f64(no, tok.next().unwrap_or(""))?;
                    let rest: Vec<&str> = tok.collect();
                    let tuple = parse_atom_tail(no, query, &rest)?;
                    atoms.push(Atom { tuple, weight });
                }
                Some(other) => return Err(parse_err(no, &format!("unexpected token {other:?}"))),
                None => unreachable!("blank lines are filtered"),
            }
        }
        let shape = shape.ok_or_else(|| parse_err(0, "missing shape line"))?;
        let dist = Self::from_parts(shape, atoms, full_support)?;
        if kind.is_some_and(|k| k != dist.kind) || n.is_some_and(|n| n != dist.n) {
            return Err(Error::InvalidParameter {
                detail: "declared kind/arity disagree with atoms".into(),
            });
        }
        Ok(dist)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("preference distribution serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn parse_atom_tail(no: usize, query: usize, rest: &[&str]) -> Result<PrefTuple> {
    match rest.first() {
        Some(&"win") => {
            if rest.len() != 4 || rest[2] != "lose" {
                return Err(parse_err(no, "pairwise atom must read 'win W lose L'"));
            }
            Ok(PrefTuple::Pairwise(PairwiseTuple {
                query,
                winner: parse_usize(no, Some(rest[1]))?,
                loser: parse_usize(no, Some(rest[3]))?,
            }))
        }
        Some(&"best") => {
            let best = parse_usize(no, rest.get(1).copied())?;
            if rest.get(2) != Some(&"of") {
                return Err(parse_err(no, "best-of atom must read 'best B of Y...'"));
            }
            let responses = rest[3..]
                .iter()
                .map(|t| parse_usize(no, Some(t)))
                .collect::<Result<Vec<usize>>>()?;
            Ok(PrefTuple::BestOfN(BestOfNTuple {
                query,
                responses,
                best,
            }))
        }
        Some(&"rank") => {
            let of = rest
                .iter()
                .position(|&t| t == "of")
                .ok_or_else(|| parse_err(no, "ranked atom must read 'rank P... of Y...'"))?;
            let ranking = rest[1..of]
                .iter()
                .map(|t| parse_usize(no, Some(t)))
                .collect::<Result<Vec<usize>>>()?;
            let responses = rest[of + 1..]
                .iter()
                .map(|t| parse_usize(no, Some(t)))
                .collect::<Result<Vec<usize>>>()?;
            Ok(PrefTuple::Ranked(RankedTuple {
                query,
                responses,
                ranking,
            }))
        }
        other => Err(parse_err(no, &format!("unknown atom form {other:?}"))),
    }
}

pub(crate) fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub(crate) fn expect_header<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    header: &str,
) -> Result<()> {
    match lines.next() {
        Some((_, line)) if line == header => Ok(()),
        Some((no, line)) => Err(parse_err(
            no,
            &format!("expected header {header:?}, got {line:?}"),
        )),
        None => Err(parse_err(0, "empty document")),
    }
}

pub(crate) fn parse_err(line: usize, detail: &str) -> Error {
    Error::Parse {
        line,
        detail: detail.to_string(),
    }
}

pub(crate) fn parse_f64(no: usize, token: &str) -> Result<f64> {
    token
        .parse::<f64>()
        .map_err(|_| parse_err(no, &format!("bad float {token:?}")))
}

pub(crate) fn parse_usize(no: usize, token: Option<&str>) -> Result<usize> {
    let token = token.ok_or_else(|| parse_err(no, "missing integer"))?;
    token
        .parse::<usize>()
        .map_err(|_| parse_err(no, &format!("bad integer {token:?}")))
}
