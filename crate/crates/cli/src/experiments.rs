//! The registered experiments. Each one builds a seeded instance, runs the
//! relevant flows or estimators, checks its own bounds, and returns an
//! [`ExperimentReport`] whose assertions double as the pass/fail record.
//!
//! Flow experiments verify the analytic fixed point per query:
//!
//! ```text
//! alpha > 0:  pi*(y) = exp(r(y)/alpha) / sum_y' exp(r(y')/alpha)
//! alpha = 0:  the epsilon-floored vertex at argmax_y r(y)
//! ```
//!
//! Estimator experiments verify the token-wise KL identities and the
//! gradient oracles. `instance_seed` pins every drawn instance; `seed`
//! drives initializations and sampling, so reruns with one seed are
//! byte-identical and a new seed keeps the instance fixed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Instant, SystemTime};

use anyhow::{anyhow, Context};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use softpref::dynamics::{lyapunov_audit, multi_start_convergence, MultiStartReport};
use softpref::losses::{
    combined_spo_objective, pref_grad, pref_loss, separability_symmetry_check,
    spo_pref_grad_with_weights, spo_pref_loss_with_weights, LossFamily, LossSpec, TabularPolicy,
};
use softpref::oracle::{finite_difference_grad, max_rel_error};
use softpref::prefdata::{
    make_bt_consistent_pairwise, make_nary_bt_consistent, make_pl_consistent_ranked,
    PairwiseTuple, PreferenceDistribution, RewardTable, TupleMarginal,
};
use softpref::seqkl::{
    exact_sequence_kl, exact_tokenwise_kl, naive_kl_estimate, sample_sequences,
    staleness_bias_probe, tokenwise_kl_estimate, BatchMode, SampleBatch, TokenModel,
};
use softpref::simplex::Distribution;

use crate::config::ExperimentConfig;
use crate::report::{write_run_artifacts, AssertionRecord, ExperimentReport, RunRow};

/// Reward seed for the |Y| = 5 pairwise instance: the drawn rewards span
/// 0.79 with a 0.51 gap below the unique maximum, so every default flow
/// (alpha in {0.25, 1, 4} and the alpha = 0 vertex clause, 20 inits each)
/// converges at step 0.01 well inside the iteration budget.
pub const THM1_INSTANCE_SEED: u64 = 1476;

/// Reward seed for the |Y| = 4 set instance used by the n = 3 experiments;
/// range 0.57, all four default flows converge at step 0.01.
pub const THM34_INSTANCE_SEED: u64 = 18;

pub type RunFn = fn(&ExperimentConfig) -> anyhow::Result<ExperimentReport>;

pub struct ExperimentDef {
    pub name: &'static str,
    pub about: &'static str,
    pub run: RunFn,
}

pub const EXPERIMENTS: &[ExperimentDef] = &[
    ExperimentDef {
        name: "thm1-pairwise",
        about: "pairwise flows reach softmax(r/alpha); alpha=0 reaches the floored argmax vertex",
        run: run_thm1_pairwise,
    },
    ExperimentDef {
        name: "thm2-weighted",
        about: "mu-weighted flows land on the unweighted finals",
        run: run_thm2_weighted,
    },
    ExperimentDef {
        name: "thm3-bestofn",
        about: "best-of-n flows on n-ary data reach softmax(r/alpha)",
        run: run_thm3_bestofn,
    },
    ExperimentDef {
        name: "thm4-ranking",
        about: "ranking flows on ranked data reach softmax(r/alpha) for constant and decayed weights",
        run: run_thm4_ranking,
    },
    ExperimentDef {
        name: "grad-check",
        about: "closed-form gradients against central finite differences",
        run: run_grad_check,
    },
    ExperimentDef {
        name: "kl-chainrule",
        about: "token-wise KL equals sequence KL; fresh-batch estimator unbiased, lower variance",
        run: run_kl_chainrule,
    },
    ExperimentDef {
        name: "kl-staleness",
        about: "batch-refresh schedule: stale-batch gap measured, zero at refresh steps",
        run: run_kl_staleness,
    },
    ExperimentDef {
        name: "alg1-toy",
        about: "combined objective descends on a toy token model with periodic batch refresh",
        run: run_alg1_toy,
    },
    ExperimentDef {
        name: "dpo-symmetry",
        about: "reference swap: combined objective invariant, DPO loss not",
        run: run_dpo_symmetry,
    },
];

pub fn find(name: &str) -> Option<&'static ExperimentDef> {
    EXPERIMENTS.iter().find(|def| def.name == name)
}

/// Per-experiment default knobs; unlisted names are unknown.
pub fn default_config(name: &str) -> Option<ExperimentConfig> {
    let base = ExperimentConfig {
        experiment: name.to_string(),
        ..ExperimentConfig::default()
    };
    let config = match name {
        "thm1-pairwise" => ExperimentConfig {
            instance_seed: THM1_INSTANCE_SEED,
            responses: 5,
            alphas: vec![0.25, 1.0, 4.0, 0.0],
            ..base
        },
        "thm2-weighted" => ExperimentConfig {
            instance_seed: THM1_INSTANCE_SEED,
            responses: 5,
            alphas: vec![0.25, 1.0, 4.0],
            gamma: 0.01,
            ..base
        },
        "thm3-bestofn" => ExperimentConfig {
            instance_seed: THM34_INSTANCE_SEED,
            responses: 4,
            set_size: 3,
            alphas: vec![0.5, 1.0],
            flow: crate::config::FlowParams {
                inits: 10,
                ..Default::default()
            },
            ..base
        },
        "thm4-ranking" => ExperimentConfig {
            instance_seed: THM34_INSTANCE_SEED,
            responses: 4,
            set_size: 3,
            alphas: vec![1.0],
            etas: vec![1.0, 0.5],
            flow: crate::config::FlowParams {
                inits: 10,
                ..Default::default()
            },
            ..base
        },
        "grad-check" => ExperimentConfig {
            trials: 200,
            gamma: 0.5,
            ..base
        },
        "kl-chainrule" => ExperimentConfig {
            instance_seed: 100,
            trials: 50,
            alphabet: 3,
            max_len: 4,
            batches: 1000,
            batch_size: 16,
            ..base
        },
        "kl-staleness" => ExperimentConfig {
            instance_seed: 200,
            alphabet: 3,
            max_len: 3,
            steps: 24,
            refresh_period: 8,
            batch_size: 64,
            ..base
        },
        "alg1-toy" => ExperimentConfig {
            instance_seed: 300,
            alphabet: 3,
            max_len: 3,
            steps: 300,
            refresh_period: 8,
            batch_size: 32,
            beta: 0.05,
            reward_lo: -1.0,
            reward_hi: 1.0,
            ..base
        },
        "dpo-symmetry" => ExperimentConfig {
            trials: 20,
            responses: 5,
            beta: 0.1,
            ..base
        },
        _ => return None,
    };
    Some(config)
}

/// Runs one experiment and writes its three artifact files.
pub fn execute(def: &ExperimentDef, config: &ExperimentConfig) -> anyhow::Result<ExperimentReport> {
    let started_wall = SystemTime::now();
    let started = Instant::now();
    let report = (def.run)(config)?;
    let dir = config.run_dir();
    write_run_artifacts(&dir, &report, started_wall, started)
        .with_context(|| format!("writing artifacts under {}", dir.display()))?;
    Ok(report)
}

// ==== shared instance plumbing ==========================================

/// Inline rewards win, then the text-format file, then the seeded draw.
fn resolve_reward_table(config: &ExperimentConfig) -> anyhow::Result<RewardTable> {
    if let Some(rows) = &config.rewards {
        let queries = (0..rows.len()).map(|q| format!("q{q}")).collect();
        return Ok(RewardTable::new(queries, rows.clone())?);
    }
    if let Some(path) = &config.rewards_file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading rewards file {}", path.display()))?;
        return Ok(RewardTable::from_text(&text)?);
    }
    Ok(RewardTable::random(
        &[config.responses],
        config.reward_lo,
        config.reward_hi,
        config.instance_seed,
    )?)
}

fn pairwise_instance(
    config: &ExperimentConfig,
) -> anyhow::Result<(RewardTable, PreferenceDistribution)> {
    let table = resolve_reward_table(config)?;
    let marginal = TupleMarginal::uniform_pairs(&table)?;
    let dist = make_bt_consistent_pairwise(&table, &marginal)?;
    Ok((table, dist))
}

fn flow_trace_csv(report: &MultiStartReport) -> String {
    let mut buf = Vec::new();
    report.outcomes[0]
        .trace
        .write_csv(&mut buf)
        .expect("write to vec");
    String::from_utf8(buf).expect("csv is utf8")
}

/// Worst per-step increase of distance-to-target over all runs in the
/// report; 0.0 for perfectly monotone traces.
fn worst_lyapunov_increase(report: &MultiStartReport) -> anyhow::Result<f64> {
    let mut worst = 0.0f64;
    for outcome in &report.outcomes {
        let audit = lyapunov_audit(&outcome.trace)?;
        worst = worst.max(audit.max_increase);
    }
    Ok(worst)
}

fn max_iters(report: &MultiStartReport) -> usize {
    report.outcomes.iter().map(|o| o.iters).max().unwrap_or(0)
}

fn alpha_tag(alpha: f64) -> String {
    format!("{alpha}").replace('.', "p")
}

// ==== thm1 / thm2: pairwise flows =======================================

fn run_thm1_pairwise(config: &ExperimentConfig) -> anyhow::Result<ExperimentReport> {
    let (table, dist) = pairwise_instance(config)?;
    let flow = config.flow.to_flow_config(config.seed);
    let mut report = ExperimentReport::new(&config.experiment, config.seed);
    let mut max_dist_linf = 0.0f64;
    let mut total_iters = 0usize;

    for &alpha in &config.alphas {
        let spec = LossSpec::spo_basic(alpha);
        let multi = multi_start_convergence(&spec, &dist, &table, &flow)?;
        if report.trace_csv.is_empty() {
            report.trace_csv = flow_trace_csv(&multi);
        }
        let tag = alpha_tag(alpha);
        let iters = max_iters(&multi);
        total_iters += multi.outcomes.iter().map(|o| o.iters).sum::<usize>();
        report.check(AssertionRecord::flag(
            &format!("alpha_{tag}_all_converged"),
            "every init converges",
            multi.all_converged,
        ));
        let row_passed;
        if alpha > 0.0 {
            let record = AssertionRecord::upper(
                &format!("alpha_{tag}_max_final_distance_linf"),
                1e-6,
                multi.max_final_distance,
            );
            row_passed = record.passed && multi.all_converged;
            max_dist_linf = max_dist_linf.max(multi.max_final_distance);
            report.check(record);
            report.runs.push(RunRow {
                alpha: Some(alpha),
                seed: config.seed,
                final_distance: multi.max_final_distance,
                iters,
                passed: row_passed,
            });
        } else {
            let record = AssertionRecord::upper(
                "alpha_0_max_vertex_distance_l2",
                1e-4,
                multi.max_final_distance_l2,
            );
            row_passed = record.passed && multi.all_converged;
            report.check(record);
            report.runs.push(RunRow {
                alpha: Some(alpha),
                seed: config.seed,
                final_distance: multi.max_final_distance_l2,
                iters,
                passed: row_passed,
            });
        }
        report.check(AssertionRecord::upper(
            &format!("alpha_{tag}_lyapunov_max_increase"),
            softpref::dynamics::LYAPUNOV_TOL,
            worst_lyapunov_increase(&multi)?,
        ));
    }

    report.metric("max_final_distance", max_dist_linf);
    report.metric("total_flow_iters", total_iters as f64);
    Ok(report)
}

fn run_thm2_weighted(config: &ExperimentConfig) -> anyhow::Result<ExperimentReport> {
    let (table, dist) = pairwise_instance(config)?;
    let flow = config.flow.to_flow_config(config.seed);
    let mut report = ExperimentReport::new(&config.experiment, config.seed);
    let mut max_gap = 0.0f64;

    for &alpha in &config.alphas {
        if alpha <= 0.0 {
            return Err(anyhow!("the weighted family needs alpha > 0, got {alpha}"));
        }
        let weighted = multi_start_convergence(
            &LossSpec::spo_weighted(alpha, config.gamma),
            &dist,
            &table,
            &flow,
        )?;
        let plain =
            multi_start_convergence(&LossSpec::spo_basic(alpha), &dist, &table, &flow)?;
        if report.trace_csv.is_empty() {
            report.trace_csv = flow_trace_csv(&weighted);
        }
        let mut gap = 0.0f64;
        for (w, p) in weighted.outcomes.iter().zip(&plain.outcomes) {
            for (rw, rp) in w.final_policy.rows().iter().zip(p.final_policy.rows()) {
                for (a, b) in rw.iter().zip(rp) {
                    gap = gap.max((a - b).abs());
                }
            }
        }
        max_gap = max_gap.max(gap);
        let tag = alpha_tag(alpha);
        report.check(AssertionRecord::flag(
            &format!("alpha_{tag}_all_converged"),
            "every weighted and unweighted init converges",
            weighted.all_converged && plain.all_converged,
        ));
        let record = AssertionRecord::upper(
            &format!("alpha_{tag}_weighted_vs_unweighted_linf"),
            1e-5,
            gap,
        );
        let row_passed = record.passed && weighted.all_converged && plain.all_converged;
        report.check(record);
        report.check(AssertionRecord::upper(
            &format!("alpha_{tag}_lyapunov_max_increase"),
            softpref::dynamics::LYAPUNOV_TOL,
            worst_lyapunov_increase(&weighted)?.max(worst_lyapunov_increase(&plain)?),
        ));
        report.runs.push(RunRow {
            alpha: Some(alpha),
            seed: config.seed,
            final_distance: gap,
            iters: max_iters(&weighted),
            passed: row_passed,
        });
    }

    report.metric("max_weighted_gap", max_gap);
    Ok(report)
}

// ==== thm3 / thm4: set and ranking flows ================================

fn run_thm3_bestofn(config: &ExperimentConfig) -> anyhow::Result<ExperimentReport> {
    let table = resolve_reward_table(config)?;
    let marginal = TupleMarginal::uniform_sets(&table, config.set_size)?;
    let dist = make_nary_bt_consistent(&table, &marginal, config.set_size)?;
    let flow = config.flow.to_flow_config(config.seed);
    let mut report = ExperimentReport::new(&config.experiment, config.seed);
    let mut max_dist = 0.0f64;

    for &alpha in &config.alphas {
        let multi =
            multi_start_convergence(&LossSpec::best_of_n(alpha), &dist, &table, &flow)?;
        if report.trace_csv.is_empty() {
            report.trace_csv = flow_trace_csv(&multi);
        }
        max_dist = max_dist.max(multi.max_final_distance);
        let tag = alpha_tag(alpha);
        report.check(AssertionRecord::flag(
            &format!("alpha_{tag}_all_converged"),
            "every init converges",
            multi.all_converged,
        ));
        let record = AssertionRecord::upper(
            &format!("alpha_{tag}_max_final_distance_linf"),
            1e-6,
            multi.max_final_distance,
        );
        let row_passed = record.passed && multi.all_converged;
        report.check(record);
        report.check(AssertionRecord::upper(
            &format!("alpha_{tag}_lyapunov_max_increase"),
            softpref::dynamics::LYAPUNOV_TOL,
            worst_lyapunov_increase(&multi)?,
        ));
        report.runs.push(RunRow {
            alpha: Some(alpha),
            seed: config.seed,
            final_distance: multi.max_final_distance,
            iters: max_iters(&multi),
            passed: row_passed,
        });
    }

    report.metric("max_final_distance", max_dist);
    Ok(report)
}

fn run_thm4_ranking(config: &ExperimentConfig) -> anyhow::Result<ExperimentReport> {
    let table = resolve_reward_table(config)?;
    let marginal = TupleMarginal::uniform_sets(&table, config.set_size)?;
    let dist = make_pl_consistent_ranked(&table, &marginal, config.set_size)?;
    let flow = config.flow.to_flow_config(config.seed);
    let alpha = config.alphas[0];
    let mut report = ExperimentReport::new(&config.experiment, config.seed);
    let mut max_dist = 0.0f64;
    let mut worst_iters = 0usize;
    let mut all_passed = true;

    for &eta in &config.etas {
        let multi =
            multi_start_convergence(&LossSpec::ranking(alpha, eta), &dist, &table, &flow)?;
        if report.trace_csv.is_empty() {
            report.trace_csv = flow_trace_csv(&multi);
        }
        max_dist = max_dist.max(multi.max_final_distance);
        worst_iters = worst_iters.max(max_iters(&multi));
        let tag = format!("eta_{}", alpha_tag(eta));
        report.check(AssertionRecord::flag(
            &format!("{tag}_all_converged"),
            "every init converges",
            multi.all_converged,
        ));
        let record = AssertionRecord::upper(
            &format!("{tag}_max_final_distance_linf"),
            1e-6,
            multi.max_final_distance,
        );
        all_passed &= record.passed && multi.all_converged;
        report.check(record);
        report.check(AssertionRecord::upper(
            &format!("{tag}_lyapunov_max_increase"),
            softpref::dynamics::LYAPUNOV_TOL,
            worst_lyapunov_increase(&multi)?,
        ));
    }

    report.runs.push(RunRow {
        alpha: Some(alpha),
        seed: config.seed,
        final_distance: max_dist,
        iters: worst_iters,
        passed: all_passed,
    });
    report.metric("max_final_distance", max_dist);
    Ok(report)
}

// ==== grad-check ========================================================

const GRAD_CHECK_ALPHAS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

fn random_interior_policy(shape: &[usize], rng: &mut ChaCha8Rng) -> anyhow::Result<TabularPolicy> {
    let mut rows = Vec::with_capacity(shape.len());
    for &k in shape {
        // Exponential variates normalized, floored at 0.05 so central
        // differences at h = 1e-6 stay far from the boundary.
        let mut row: Vec<f64> = (0..k)
            .map(|_| -(rng.random::<f64>().max(f64::MIN_POSITIVE)).ln())
            .collect();
        let sum: f64 = row.iter().sum();
        for x in row.iter_mut() {
            *x = (*x / sum).max(0.05);
        }
        let sum: f64 = row.iter().sum();
        for x in row.iter_mut() {
            *x /= sum;
        }
        rows.push(row);
    }
    Ok(TabularPolicy::from_raw(rows)?)
}

fn run_grad_check(config: &ExperimentConfig) -> anyhow::Result<ExperimentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = ExperimentReport::new(&config.experiment, config.seed);
    let mut trace = String::from("trial,family,alpha,rel_error\n");
    let h = 1e-6;
    let mut worst = 0.0f64;

    for trial in 0..config.trials {
        let family = match trial % 4 {
            0 => LossFamily::SpoBasic,
            1 => LossFamily::SpoWeighted,
            2 => LossFamily::BestOfN,
            _ => LossFamily::Ranking,
        };
        let queries = rng.random_range(1..=2usize);
        let shape: Vec<usize> = (0..queries).map(|_| rng.random_range(3..=4usize)).collect();
        let table = RewardTable::random(&shape, -2.0, 2.0, rng.random::<u64>())?;
        let alpha = GRAD_CHECK_ALPHAS[rng.random_range(0..GRAD_CHECK_ALPHAS.len())];
        let policy = random_interior_policy(&shape, &mut rng)?;

        let (spec, dist) = match family {
            LossFamily::SpoBasic => {
                let marginal = TupleMarginal::uniform_pairs(&table)?;
                (
                    LossSpec::spo_basic(alpha),
                    make_bt_consistent_pairwise(&table, &marginal)?,
                )
            }
            LossFamily::SpoWeighted => {
                let marginal = TupleMarginal::uniform_pairs(&table)?;
                (
                    LossSpec::spo_weighted(alpha, config.gamma),
                    make_bt_consistent_pairwise(&table, &marginal)?,
                )
            }
            LossFamily::BestOfN => {
                let marginal = TupleMarginal::uniform_sets(&table, 3)?;
                (
                    LossSpec::best_of_n(alpha),
                    make_nary_bt_consistent(&table, &marginal, 3)?,
                )
            }
            _ => {
                let marginal = TupleMarginal::uniform_sets(&table, 3)?;
                (
                    LossSpec::ranking(alpha, 0.5),
                    make_pl_consistent_ranked(&table, &marginal, 3)?,
                )
            }
        };

        // The weighted family differentiates with the weights held fixed,
        // so the finite difference must freeze them too.
        let rel = if spec.family == LossFamily::SpoWeighted {
            let weights = spec.weight_function()?.resolve(&policy, &dist)?;
            let analytic = spo_pref_grad_with_weights(&policy, &dist, spec.alpha, &weights)?;
            let numeric = finite_difference_grad(
                |p| spo_pref_loss_with_weights(p, &dist, spec.alpha, &weights),
                &policy,
                h,
            )?;
            max_rel_error(&analytic, &numeric)
        } else {
            let analytic = pref_grad(&policy, &dist, &spec)?;
            let numeric = finite_difference_grad(|p| pref_loss(p, &dist, &spec), &policy, h)?;
            max_rel_error(&analytic, &numeric)
        };
        worst = worst.max(rel);
        let _ = writeln!(trace, "{trial},{},{alpha},{rel:.16e}", spec.family.label());
    }

    // alpha -> 0 continuity of the pairwise gradient.
    let mut worst_limit = 0.0f64;
    for trial in 0..50 {
        let shape = vec![rng.random_range(3..=5usize)];
        let table = RewardTable::random(&shape, -2.0, 2.0, rng.random::<u64>())?;
        let marginal = TupleMarginal::uniform_pairs(&table)?;
        let dist = make_bt_consistent_pairwise(&table, &marginal)?;
        let policy = random_interior_policy(&shape, &mut rng)?;
        let near = pref_grad(&policy, &dist, &LossSpec::spo_basic(1e-6))?;
        let zero = pref_grad(&policy, &dist, &LossSpec::spo_basic(0.0))?;
        let rel = max_rel_error(&zero, &near);
        worst_limit = worst_limit.max(rel);
        let _ = writeln!(
            trace,
            "{},zero-limit,1e-6,{rel:.16e}",
            config.trials + trial
        );
    }

    report.trace_csv = trace;
    report.check(AssertionRecord::upper("max_rel_error", 1e-5, worst));
    report.check(AssertionRecord::upper(
        "zero_limit_max_rel_gap",
        1e-4,
        worst_limit,
    ));
    report.metric("max_rel_error", worst);
    report.metric("zero_limit_max_rel_gap", worst_limit);
    report.runs.push(RunRow {
        alpha: None,
        seed: config.seed,
        final_distance: worst,
        iters: config.trials,
        passed: report.passed,
    });
    Ok(report)
}

// ==== kl-chainrule ======================================================

fn run_kl_chainrule(config: &ExperimentConfig) -> anyhow::Result<ExperimentReport> {
    let mut report = ExperimentReport::new(&config.experiment, config.seed);
    let mut trace = String::from("pair,max_len,tokenwise,sequence,gap\n");
    let mut max_gap = 0.0f64;

    for pair in 0..config.trials {
        let max_len = 1 + pair % config.max_len;
        let theta = TokenModel::random(
            1,
            config.alphabet,
            max_len,
            config.instance_seed.wrapping_add(2 * pair as u64),
        )?;
        let reference = TokenModel::random(
            1,
            config.alphabet,
            max_len,
            config.instance_seed.wrapping_add(2 * pair as u64 + 1),
        )?;
        let tokenwise = exact_tokenwise_kl(&theta, &reference, 0)?;
        let sequence = exact_sequence_kl(&theta, &reference, 0)?;
        let gap = (tokenwise - sequence).abs();
        max_gap = max_gap.max(gap);
        let _ = writeln!(
            trace,
            "{pair},{max_len},{tokenwise:.16e},{sequence:.16e},{gap:.16e}"
        );
    }
    report.check(AssertionRecord::upper("max_chain_rule_gap", 1e-10, max_gap));

    // Fresh-batch unbiasedness and variance on a designated length-3 pair.
    let theta = TokenModel::random(1, config.alphabet, 3, config.instance_seed.wrapping_add(900))?;
    let reference =
        TokenModel::random(1, config.alphabet, 3, config.instance_seed.wrapping_add(901))?;
    let exact = exact_tokenwise_kl(&theta, &reference, 0)?;
    let mut tokenwise_estimates = Vec::with_capacity(config.batches);
    let mut naive_estimates = Vec::with_capacity(config.batches);
    for b in 0..config.batches {
        let batch = sample_sequences(
            &theta,
            0,
            config.batch_size,
            config.seed.wrapping_add(10_000 + b as u64),
        )?;
        tokenwise_estimates.push(tokenwise_kl_estimate(&theta, &reference, &batch)?);
        naive_estimates.push(naive_kl_estimate(&theta, &reference, &batch)?);
    }
    let n = config.batches as f64;
    let mean: f64 = tokenwise_estimates.iter().sum::<f64>() / n;
    let var = |xs: &[f64]| {
        let m: f64 = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
    };
    let var_tokenwise = var(&tokenwise_estimates);
    let var_naive = var(&naive_estimates);
    let se = (var_tokenwise / n).sqrt();
    let z = (mean - exact).abs() / se;
    report.check(AssertionRecord::upper("unbiasedness_z_score", 3.0, z));
    report.check(AssertionRecord::flag(
        "variance_reduction",
        "var(tokenwise) < var(naive)",
        var_tokenwise < var_naive,
    ));

    report.metric("max_chain_rule_gap", max_gap);
    report.metric("exact_kl", exact);
    report.metric("estimate_mean", mean);
    report.metric("unbiasedness_z_score", z);
    report.metric("var_tokenwise", var_tokenwise);
    report.metric("var_naive", var_naive);
    report.trace_csv = trace;
    report.runs.push(RunRow {
        alpha: None,
        seed: config.seed,
        final_distance: max_gap,
        iters: config.trials,
        passed: report.passed,
    });
    Ok(report)
}

// ==== kl-staleness ======================================================

/// Pointwise convex blend of two same-shape models; each conditional row is
/// (1 - lambda) a + lambda b.
fn blend_models(a: &TokenModel, b: &TokenModel, lambda: f64) -> anyhow::Result<TokenModel> {
    a.check_same_shape(b)?;
    let mut tables = Vec::with_capacity(a.num_queries());
    for q in 0..a.num_queries() {
        let mut rows: BTreeMap<Vec<usize>, Distribution> = BTreeMap::new();
        for (prefix, dist_a) in a.table(q)? {
            let dist_b = b.next_token_dist(q, prefix)?;
            let probs: Vec<f64> = dist_a
                .probs()
                .iter()
                .zip(dist_b.probs())
                .map(|(pa, pb)| (1.0 - lambda) * pa + lambda * pb)
                .collect();
            rows.insert(prefix.clone(), Distribution::new(probs)?);
        }
        tables.push(rows);
    }
    Ok(TokenModel::new(a.alphabet(), a.max_len(), tables)?)
}

fn run_kl_staleness(config: &ExperimentConfig) -> anyhow::Result<ExperimentReport> {
    let from = TokenModel::random(1, config.alphabet, config.max_len, config.instance_seed)?;
    let to = TokenModel::random(
        1,
        config.alphabet,
        config.max_len,
        config.instance_seed.wrapping_add(1),
    )?;
    let reference = TokenModel::random(
        1,
        config.alphabet,
        config.max_len,
        config.instance_seed.wrapping_add(2),
    )?;
    let trajectory: Vec<TokenModel> = (0..config.steps)
        .map(|t| blend_models(&from, &to, t as f64 / (config.steps - 1) as f64))
        .collect::<anyhow::Result<_>>()?;

    let exhaustive = staleness_bias_probe(
        &trajectory,
        &reference,
        config.refresh_period,
        BatchMode::Exhaustive,
        config.seed,
    )?;
    let sampled = staleness_bias_probe(
        &trajectory,
        &reference,
        config.refresh_period,
        BatchMode::Sampled(config.batch_size),
        config.seed,
    )?;

    let mut trace = String::from("mode,step,refreshed,estimate,exact_current_kl,gap\n");
    for (mode, records) in [("exhaustive", &exhaustive), ("sampled", &sampled)] {
        for r in records {
            let _ = writeln!(
                trace,
                "{mode},{},{},{:.16e},{:.16e},{:.16e}",
                r.step, r.refreshed, r.estimate, r.exact_current_kl, r.gap
            );
        }
    }

    let refresh_gap = exhaustive
        .iter()
        .filter(|r| r.refreshed)
        .map(|r| r.gap.abs())
        .fold(0.0f64, f64::max);
    let worst_stale_gap = exhaustive
        .iter()
        .map(|r| r.gap.abs())
        .fold(0.0f64, f64::max);
    let worst_sampled_gap = sampled.iter().map(|r| r.gap.abs()).fold(0.0f64, f64::max);

    let mut report = ExperimentReport::new(&config.experiment, config.seed);
    report.trace_csv = trace;
    report.check(AssertionRecord::upper(
        "exhaustive_refresh_step_gap",
        0.0,
        refresh_gap,
    ));
    report.check(AssertionRecord::flag(
        "stale_steps_present",
        "schedule leaves at least one stale step",
        exhaustive.iter().any(|r| !r.refreshed),
    ));
    report.metric("worst_stale_gap_exhaustive", worst_stale_gap);
    report.metric("worst_gap_sampled", worst_sampled_gap);
    report.runs.push(RunRow {
        alpha: None,
        seed: config.seed,
        final_distance: worst_stale_gap,
        iters: config.steps,
        passed: report.passed,
    });
    Ok(report)
}

// ==== alg1-toy ==========================================================

/// Rows of the conditional tables in table order, as one policy over
/// simplices; the row order is the sorted prefix order of query 0.
fn model_rows(model: &TokenModel) -> anyhow::Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (_, dist) in model.table(0)? {
        rows.push(dist.probs().to_vec());
    }
    Ok(rows)
}

fn model_from_rows(
    template: &TokenModel,
    rows: &[Vec<f64>],
) -> anyhow::Result<TokenModel> {
    let mut table: BTreeMap<Vec<usize>, Distribution> = BTreeMap::new();
    for ((prefix, _), row) in template.table(0)?.iter().zip(rows) {
        table.insert(prefix.clone(), Distribution::new(row.clone())?);
    }
    Ok(TokenModel::new(template.alphabet(), template.max_len(), vec![table])?)
}

fn run_alg1_toy(config: &ExperimentConfig) -> anyhow::Result<ExperimentReport> {
    let mut model = TokenModel::random(1, config.alphabet, config.max_len, config.instance_seed)?;
    let reference = TokenModel::random(
        1,
        config.alphabet,
        config.max_len,
        config.instance_seed.wrapping_add(1),
    )?;

    // The response set is the complete sequence set of the prefix tree; its
    // sorted order is shared by every model of this shape.
    let sequences: Vec<Vec<usize>> = model
        .enumerate_sequences(0)?
        .into_iter()
        .map(|(seq, _)| seq)
        .collect();
    let num_seqs = sequences.len();
    let rewards = RewardTable::random(
        &[num_seqs],
        config.reward_lo,
        config.reward_hi,
        config.instance_seed.wrapping_add(2),
    )?;
    let marginal = TupleMarginal::uniform_pairs(&rewards)?;
    let dist = make_bt_consistent_pairwise(&rewards, &marginal)?;
    let mut spec = LossSpec::spo_basic(config.alphas[0]);
    spec.beta = config.beta;

    let ref_seq_policy = TabularPolicy::from_raw(vec![reference
        .enumerate_sequences(0)?
        .into_iter()
        .map(|(_, p)| p)
        .collect()])?;

    let flow = config.flow.to_flow_config(config.seed);
    let mut trace =
        String::from("iter,objective,pref_loss,kl_estimate,exact_kl,grad_norm\n");
    let mut batch: Option<SampleBatch> = None;
    let mut refresh_count = 0u64;
    let mut first_objective = None;
    let mut last_objective = 0.0f64;
    let mut first_pref = None;
    let mut last_pref = 0.0f64;

    for t in 0..config.steps {
        if t % config.refresh_period == 0 {
            batch = Some(sample_sequences(
                &model,
                0,
                config.batch_size,
                config.seed.wrapping_add(refresh_count),
            )?);
            refresh_count += 1;
        }
        let batch_ref = batch.as_ref().expect("refreshed at step 0");

        let seq_probs: Vec<f64> = model
            .enumerate_sequences(0)?
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        let seq_policy = TabularPolicy::from_raw(vec![seq_probs.clone()])?;
        let pref = pref_loss(&seq_policy, &dist, &spec)?;
        let kl_estimate = tokenwise_kl_estimate(&model, &reference, batch_ref)?;
        let exact_kl = exact_tokenwise_kl(&model, &reference, 0)?;
        let objective =
            combined_spo_objective(&seq_policy, &ref_seq_policy, &dist, &spec, exact_kl)?;
        let seq_grad = pref_grad(&seq_policy, &dist, &spec)?;

        // Chain rule through pi(seq) = prod_t theta(s_t | prefix_t): the
        // conditional-entry gradient collects pi(seq)/theta(s|p) from every
        // sequence that passes through (p, s).
        let mut grad_rows: BTreeMap<Vec<usize>, Vec<f64>> = model
            .table(0)?
            .keys()
            .map(|prefix| (prefix.clone(), vec![0.0; config.alphabet]))
            .collect();
        for (i, seq) in sequences.iter().enumerate() {
            let g = seq_grad[0][i];
            if g == 0.0 {
                continue;
            }
            for (pos, &token) in seq.iter().enumerate() {
                let prefix = &seq[..pos];
                let theta = model.next_token_dist(0, prefix)?.prob(token);
                let row = grad_rows
                    .get_mut(prefix)
                    .expect("prefix of an enumerated sequence");
                row[token] += g * seq_probs[i] / theta;
            }
        }
        // Stale-batch estimator gradient: each visit of prefix p adds
        // beta/|B| * (ln(theta/ref) + 1) on that row.
        for (_, seq) in &batch_ref.pairs {
            for pos in 0..seq.len() {
                let prefix = &seq[..pos];
                let row = grad_rows
                    .get_mut(prefix)
                    .expect("prefix of a sampled sequence");
                let theta_dist = model.next_token_dist(0, prefix)?;
                let ref_dist = reference.next_token_dist(0, prefix)?;
                for s in 0..config.alphabet {
                    row[s] += spec.beta / batch_ref.pairs.len() as f64
                        * ((theta_dist.prob(s) / ref_dist.prob(s)).ln() + 1.0);
                }
            }
        }

        let policy = TabularPolicy::from_raw(model_rows(&model)?)?;
        let grad: Vec<Vec<f64>> = grad_rows.into_values().collect();
        let grad_norm: f64 = grad
            .iter()
            .flat_map(|row| row.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let next = softpref::dynamics::flow_step(&policy, &grad, &flow)?;
        model = model_from_rows(&model, next.rows())?;

        let _ = writeln!(
            trace,
            "{t},{objective:.16e},{pref:.16e},{kl_estimate:.16e},{exact_kl:.16e},{grad_norm:.16e}"
        );
        if first_objective.is_none() {
            first_objective = Some(objective);
            first_pref = Some(pref);
        }
        last_objective = objective;
        last_pref = pref;
    }

    let first_objective = first_objective.expect("steps >= 2");
    let first_pref = first_pref.expect("steps >= 2");
    let mut report = ExperimentReport::new(&config.experiment, config.seed);
    report.trace_csv = trace;
    report.check(AssertionRecord::flag(
        "objective_descended",
        "final combined objective below initial",
        last_objective < first_objective,
    ));
    report.check(AssertionRecord::flag(
        "pref_loss_descended",
        "final preference loss below initial",
        last_pref < first_pref,
    ));
    report.check(AssertionRecord::flag(
        "final_objective_finite",
        "no overflow or NaN along the run",
        last_objective.is_finite(),
    ));
    report.metric("initial_objective", first_objective);
    report.metric("final_objective", last_objective);
    report.metric("initial_pref_loss", first_pref);
    report.metric("final_pref_loss", last_pref);
    report.metric("sequences", num_seqs as f64);
    report.runs.push(RunRow {
        alpha: Some(spec.alpha),
        seed: config.seed,
        final_distance: last_objective,
        iters: config.steps,
        passed: report.passed,
    });
    Ok(report)
}

// ==== dpo-symmetry ======================================================

fn dirichlet_row(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut row: Vec<f64> = (0..k)
        .map(|_| -(rng.random::<f64>().max(f64::MIN_POSITIVE)).ln())
        .collect();
    let sum: f64 = row.iter().sum();
    for x in row.iter_mut() {
        *x = (*x / sum).max(0.02);
    }
    let sum: f64 = row.iter().sum();
    for x in row.iter_mut() {
        *x /= sum;
    }
    row
}

fn run_dpo_symmetry(config: &ExperimentConfig) -> anyhow::Result<ExperimentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = String::from("instance,responses,winner,loser,spo_invariant,dpo_invariant\n");
    let mut all_spo = true;
    let mut all_dpo_moved = true;

    for instance in 0..config.trials {
        let k = rng.random_range(3..=config.responses.max(3));
        let winner = rng.random_range(0..k);
        let loser = (winner + 1 + rng.random_range(0..k - 1)) % k;

        // Policy with equal mass on winner and loser: average the two
        // entries, which keeps the row normalized.
        let mut policy_row = dirichlet_row(k, &mut rng);
        let mean = 0.5 * (policy_row[winner] + policy_row[loser]);
        policy_row[winner] = mean;
        policy_row[loser] = mean;
        let policy = TabularPolicy::from_raw(vec![policy_row])?;

        // Reference that treats the pair unevenly; redraw until the split
        // is wide enough for the swap to bite.
        let ref_row = loop {
            let row = dirichlet_row(k, &mut rng);
            if (row[winner] - row[loser]).abs() >= 0.05 {
                break row;
            }
        };
        let reference = TabularPolicy::from_raw(vec![ref_row])?;

        let tuple = PairwiseTuple {
            query: 0,
            winner,
            loser,
        };
        let outcome =
            separability_symmetry_check(&policy, &reference, &tuple, config.alphas[0], config.beta)?;
        all_spo &= outcome.spo_invariant;
        all_dpo_moved &= !outcome.dpo_invariant;
        let _ = writeln!(
            trace,
            "{instance},{k},{winner},{loser},{},{}",
            outcome.spo_invariant, outcome.dpo_invariant
        );
    }

    let mut report = ExperimentReport::new(&config.experiment, config.seed);
    report.trace_csv = trace;
    report.check(AssertionRecord::flag(
        "spo_objective_invariant",
        "combined objective unchanged by the reference swap on every instance",
        all_spo,
    ));
    report.check(AssertionRecord::flag(
        "dpo_loss_moved",
        "DPO loss changed by the reference swap on every instance",
        all_dpo_moved,
    ));
    report.metric("instances", config.trials as f64);
    report.runs.push(RunRow {
        alpha: Some(config.alphas[0]),
        seed: config.seed,
        final_distance: 0.0,
        iters: config.trials,
        passed: report.passed,
    });
    Ok(report)
}

// ==== tests =============================================================
