//! Randomized invariants over the simplex, data, and loss layers.

use proptest::prelude::*;

use softpref::losses::{
    best_of_n_loss, cross_entropy_pref_loss, pref_grad, pref_loss, ranking_loss, LossSpec,
    TabularPolicy, WeightFunction,
};
use softpref::oracle::{finite_difference_grad, max_rel_error};
use softpref::prefdata::{
    bt_preference_prob, make_bt_consistent_pairwise, make_nary_bt_consistent,
    make_pl_consistent_ranked, permutations, pl_ranking_prob, Atom, PairwiseTuple, PrefTuple,
    PreferenceDistribution, RankedTuple, RewardTable, TupleMarginal,
};
use softpref::simplex::{
    euclidean_distance, kl_divergence, project_to_simplex, softmax_scaled, Distribution,
};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

prop_compose! {
    fn raw_vector(dim: usize)(entries in prop::collection::vec(-5.0f64..5.0, dim)) -> Vec<f64> {
        entries
    }
}

prop_compose! {
    fn positive_row(dim: usize)(entries in prop::collection::vec(0.01f64..10.0, dim)) -> Vec<f64> {
        entries
    }
}

prop_compose! {
    fn reward_row(dim: usize)(entries in prop::collection::vec(-2.0f64..2.0, dim)) -> Vec<f64> {
        entries
    }
}

fn interior_dist(row: Vec<f64>) -> Distribution {
    let sum: f64 = row.iter().sum();
    Distribution::new(row.into_iter().map(|x| x / sum).collect()).unwrap()
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_optimal(
        v in raw_vector(4),
        candidate in positive_row(4),
    ) {
        let p = project_to_simplex(&v).unwrap();
        let again = project_to_simplex(p.probs()).unwrap();
        for (a, b) in p.probs().iter().zip(again.probs()) {
            prop_assert!(close(*a, *b, 1e-12));
        }
        let q = interior_dist(candidate);
        let dp = euclidean_distance(p.probs(), &v).unwrap();
        let dq = euclidean_distance(q.probs(), &v).unwrap();
        prop_assert!(dp <= dq + 1e-9);
    }

    #[test]
    fn softmax_is_shift_invariant(r in reward_row(4), c in -3.0f64..3.0, alpha in 0.25f64..4.0) {
        let base = softmax_scaled(&r, alpha).unwrap();
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        let moved = softmax_scaled(&shifted, alpha).unwrap();
        for (a, b) in base.probs().iter().zip(moved.probs()) {
            prop_assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equality(p in positive_row(4), q in positive_row(4)) {
        let p = interior_dist(p);
        let q = interior_dist(q);
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn bt_complements_sum_to_exactly_one(r in reward_row(3)) {
        let table = RewardTable::new(vec!["q".into()], vec![r]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j { continue; }
                let a = bt_preference_prob(&table, 0, i, j).unwrap();
                let b = bt_preference_prob(&table, 0, j, i).unwrap();
                prop_assert_eq!(a + b, 1.0);
            }
        }
    }

    #[test]
    fn pl_ranking_probabilities_sum_to_one(r in reward_row(3)) {
        let table = RewardTable::new(vec!["q".into()], vec![r]).unwrap();
        let mut total = 0.0;
        for perm in permutations(3) {
            total += pl_ranking_prob(&table, 0, &perm).unwrap();
        }
        prop_assert!(close(total, 1.0, 1e-12));
    }

    #[test]
    fn spo_losses_ignore_per_query_scaling(
        row_a in positive_row(3),
        row_b in positive_row(3),
        r_a in reward_row(3),
        r_b in reward_row(3),
        scale_a in 0.1f64..10.0,
        scale_b in 0.1f64..10.0,
        alpha in prop::sample::select(vec![0.0, 0.5, 1.0, 4.0]),
    ) {
        let table = RewardTable::new(vec!["q0".into(), "q1".into()], vec![r_a, r_b]).unwrap();
        let marginal = TupleMarginal::uniform_pairs(&table).unwrap();
        let dist = make_bt_consistent_pairwise(&table, &marginal).unwrap();
        let policy = TabularPolicy::from_raw(vec![row_a.clone(), row_b.clone()]).unwrap();
        let scaled = TabularPolicy::from_raw(vec![
            row_a.iter().map(|x| x * scale_a).collect(),
            row_b.iter().map(|x| x * scale_b).collect(),
        ]).unwrap();
        let spec = LossSpec::spo_basic(alpha);
        let l1 = pref_loss(&policy, &dist, &spec).unwrap();
        let l2 = pref_loss(&scaled, &dist, &spec).unwrap();
        prop_assert!(rel_close(l1, l2, 1e-12));
    }

    #[test]
    fn closed_form_gradients_match_finite_differences(
        rows in prop::collection::vec(positive_row(3), 2),
        rewards in prop::collection::vec(reward_row(3), 2),
        alpha in prop::sample::select(vec![0.0, 0.25, 1.0, 2.0]),
    ) {
        let table = RewardTable::new(
            vec!["q0".into(), "q1".into()],
            rewards,
        ).unwrap();
        let marginal = TupleMarginal::uniform_pairs(&table).unwrap();
        let dist = make_bt_consistent_pairwise(&table, &marginal).unwrap();
        let policy = TabularPolicy::from_raw(rows).unwrap();
        let spec = LossSpec::spo_basic(alpha);
        let analytic = pref_grad(&policy, &dist, &spec).unwrap();
        let numeric = finite_difference_grad(
            |p| pref_loss(p, &dist, &spec),
            &policy,
            1e-6,
        ).unwrap();
        prop_assert!(max_rel_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn best_of_two_data_reduce_to_pairwise(
        row in positive_row(3),
        r in reward_row(3),
        alpha in 0.25f64..4.0,
    ) {
        let table = RewardTable::new(vec!["q".into()], vec![r]).unwrap();
        let marginal = TupleMarginal::uniform_sets(&table, 2).unwrap();
        let nary = make_nary_bt_consistent(&table, &marginal, 2).unwrap();
        let pair_atoms: Vec<Atom> = nary.atoms().iter().map(|atom| {
            let t = match &atom.tuple {
                PrefTuple::BestOfN(t) => t,
                _ => unreachable!(),
            };
            let winner = t.responses[t.best];
            let loser = t.responses[1 - t.best];
            Atom {
                tuple: PrefTuple::Pairwise(PairwiseTuple {
                    query: t.query,
                    winner,
                    loser,
                }),
                weight: atom.weight,
            }
        }).collect();
        let pairwise = PreferenceDistribution::new(&table, pair_atoms).unwrap();
        let policy = TabularPolicy::from_raw(vec![row]).unwrap();
        let uniform = WeightFunction::uniform();
        let a = best_of_n_loss(&policy, &nary, alpha, &uniform).unwrap();
        let b = pref_loss(&policy, &pairwise, &LossSpec::spo_basic(alpha)).unwrap();
        prop_assert!(rel_close(a, b, 1e-12));
    }

    #[test]
    fn ranking_loss_is_invariant_under_response_relabeling(
        row in positive_row(4),
        r in reward_row(4),
        alpha in 0.25f64..4.0,
        eta in 0.2f64..1.0,
    ) {
        let table = RewardTable::new(vec!["q".into()], vec![r.clone()]).unwrap();
        let marginal = TupleMarginal::uniform_sets(&table, 3).unwrap();
        let dist = make_pl_consistent_ranked(&table, &marginal, 3).unwrap();
        let policy = TabularPolicy::from_raw(vec![row.clone()]).unwrap();
        let mu = softpref::losses::decayed_mu_sequence(eta, 3).unwrap();
        let base = ranking_loss(&policy, &dist, alpha, &mu).unwrap();

        // Relabel responses with the cycle 0 -> 1 -> 2 -> 3 -> 0.
        let perm = [1usize, 2, 3, 0];
        let mut r_p = vec![0.0; 4];
        let mut row_p = vec![0.0; 4];
        for y in 0..4 {
            r_p[perm[y]] = r[y];
            row_p[perm[y]] = row[y];
        }
        let atoms_p: Vec<Atom> = dist.atoms().iter().map(|atom| {
            let t = match &atom.tuple {
                PrefTuple::Ranked(t) => t,
                _ => unreachable!(),
            };
            let responses: Vec<usize> = t.responses.iter().map(|&y| perm[y]).collect();
            Atom {
                tuple: PrefTuple::Ranked(RankedTuple {
                    query: t.query,
                    responses,
                    ranking: t.ranking.clone(),
                }),
                weight: atom.weight,
            }
        }).collect();
        let table_p = RewardTable::new(vec!["q".into()], vec![r_p]).unwrap();
        let dist_p = PreferenceDistribution::new(&table_p, atoms_p).unwrap();
        let policy_p = TabularPolicy::from_raw(vec![row_p]).unwrap();
        let relabeled = ranking_loss(&policy_p, &dist_p, alpha, &mu).unwrap();
        prop_assert!(rel_close(base, relabeled, 1e-12));
    }

    #[test]
    fn ranking_loss_decomposes_into_best_of_k_terms(
        row in positive_row(4),
        r in reward_row(4),
        alpha in 0.25f64..4.0,
        w1 in 0.05f64..2.0,
        w2 in 0.05f64..2.0,
    ) {
        let table = RewardTable::new(vec!["q".into()], vec![r]).unwrap();
        let marginal = TupleMarginal::uniform_sets(&table, 3).unwrap();
        let dist = make_pl_consistent_ranked(&table, &marginal, 3).unwrap();
        let policy = TabularPolicy::from_raw(vec![row]).unwrap();
        let mu = vec![w1, w2];
        let whole = ranking_loss(&policy, &dist, alpha, &mu).unwrap();
        let uniform = WeightFunction::uniform();
        let mut parts = 0.0;
        for (k, &weight) in mu.iter().enumerate() {
            let suffix = dist.suffix_marginal(k).unwrap();
            parts += weight * best_of_n_loss(&policy, &suffix, alpha, &uniform).unwrap();
        }
        prop_assert!(close(whole, parts, 1e-10));
    }

    #[test]
    fn alpha_one_loss_equals_cross_entropy_route(
        rows in prop::collection::vec(positive_row(3), 2),
        rewards in prop::collection::vec(reward_row(3), 2),
    ) {
        let table = RewardTable::new(vec!["q0".into(), "q1".into()], rewards).unwrap();
        let marginal = TupleMarginal::uniform_pairs(&table).unwrap();
        let dist = make_bt_consistent_pairwise(&table, &marginal).unwrap();
        let policy = TabularPolicy::from_raw(rows).unwrap();
        let a = pref_loss(&policy, &dist, &LossSpec::spo_basic(1.0)).unwrap();
        let b = cross_entropy_pref_loss(&policy, &dist).unwrap();
        prop_assert!(rel_close(a, b, 1e-12));
    }

    #[test]
    fn reward_tables_round_trip_through_both_formats(
        rewards in prop::collection::vec(reward_row(3), 2),
    ) {
        let table = RewardTable::new(vec!["alpha".into(), "beta".into()], rewards).unwrap();
        let text = table.to_text();
        prop_assert_eq!(&RewardTable::from_text(&text).unwrap(), &table);
        let json = table.to_json_string();
        prop_assert_eq!(&RewardTable::from_json_str(&json).unwrap(), &table);
    }

    #[test]
    fn preference_distributions_round_trip_through_both_formats(
        r in reward_row(3),
        seed in 0u64..1000,
    ) {
        let table = RewardTable::new(vec!["q".into()], vec![r]).unwrap();
        let marginal = TupleMarginal::uniform_sets(&table, 3).unwrap();
        let dist = make_pl_consistent_ranked(&table, &marginal, 3).unwrap();
        let _ = seed;
        let text = dist.to_text();
        prop_assert_eq!(&PreferenceDistribution::from_text(&text).unwrap(), &dist);
        let json = dist.to_json_string();
        prop_assert_eq!(&PreferenceDistribution::from_json_str(&json).unwrap(), &dist);
    }

    #[test]
    fn weighted_gradients_treat_mu_as_frozen(
        row in positive_row(3),
        r in reward_row(3),
        alpha in 0.25f64..2.0,
        gamma in 0.5f64..2.0,
    ) {
        use softpref::losses::{spo_pref_grad_with_weights, spo_pref_loss_with_weights};
        let table = RewardTable::new(vec!["q".into()], vec![r]).unwrap();
        let marginal = TupleMarginal::uniform_pairs(&table).unwrap();
        let dist = make_bt_consistent_pairwise(&table, &marginal).unwrap();
        let policy = TabularPolicy::from_raw(vec![row]).unwrap();
        let weights = WeightFunction::sigmoid_sum(gamma).unwrap()
            .resolve(&policy, &dist).unwrap();
        let analytic = spo_pref_grad_with_weights(&policy, &dist, alpha, &weights).unwrap();
        let numeric = finite_difference_grad(
            |p| spo_pref_loss_with_weights(p, &dist, alpha, &weights),
            &policy,
            1e-6,
        ).unwrap();
        prop_assert!(max_rel_error(&analytic, &numeric) < 1e-5);
    }
}
