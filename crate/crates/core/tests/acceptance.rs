//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with
//! a nonzero status if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use sppo_core::exact_solver::{best_of_n_win_rate, exponential_update_policy, partition_function, run_mwu, SolverConfig};
use sppo_core::games::{random_bt_game, random_matrix_game};
use sppo_core::losses::{
    descend_log_ratios, dpo_loss, fit_iteration, gradient_check, ipo_loss, kto_loss,
    policy_gradient_equivalence, regularized_objective, sppo_objective, sppo_pairwise_loss,
    OptimizerSettings, PairwiseLoss, PreferenceTriplet, RegressionTarget,
};
use sppo_core::partition_lab::{
    disordered_moments, disordered_trials, ordered_limit, ordered_log_partition, DisorderedInstance,
    OrderedInstance,
};
use sppo_core::preference::WinRateEstimate;
use sppo_core::rng::seeded;
use sppo_core::selfplay::{
    run_selfplay, DatasetEntry, PreferenceDataset, RunConfig, RunSettings, SelectionStrategy,
    SplitPlan,
};
use sppo_core::token_mdp::{
    optimal_token_policy, sequence_equivalence, soft_backup, sppo_token_loss,
    verify_value_identity, TokenMdp,
};
use sppo_core::policy::UnconstrainedLogRatio;
use sppo_core::{PromptId, PromptWeights, SoftmaxPolicy, TabularPolicy};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal_rows(rng: &mut impl Rng, counts: &[usize], scale: f64) -> Vec<Vec<f64>> {
    counts
        .iter()
        .map(|&n| (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

fn mwu_bound() -> Outcome {
    let start = Instant::now();
    let mut worst_residual = f64::INFINITY;
    let mut improved = 0;
    for seed in 0..50 {
        let game = random_matrix_game(10, 8, seed);
        let pi_1 = TabularPolicy::uniform(&game.oracle.counts()).unwrap();
        let long = run_mwu(&pi_1, &game.oracle, &game.weights, &SolverConfig::inv_sqrt(1.0, 1000)).unwrap();
        let short = run_mwu(&pi_1, &game.oracle, &game.weights, &SolverConfig::inv_sqrt(1.0, 10)).unwrap();
        worst_residual = worst_residual.min(long.trace.min_residual());
        if long.trace.final_gap().unwrap() <= short.trace.final_gap().unwrap() {
            improved += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst_residual >= -1e-9 && improved >= 48 && elapsed < Duration::from_secs(120),
        format!(
            "min regret residual {worst_residual:.3e}, gap(T=1000) <= gap(T=10) on {improved}/50, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn realizable_regression() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut rng = seeded(2024);
    let eta = 1.0;
    for seed in 0..20 {
        let n = 2 + (seed as usize % 7);
        let game = random_matrix_game(3, n, 100 + seed);
        let pi_t = TabularPolicy::from_log_weights(normal_rows(&mut rng, &game.oracle.counts(), 1.0)).unwrap();
        let mut entries = Vec::new();
        let mut log_z = Vec::new();
        for x in 0..3 {
            let w = game.oracle.win_rates(PromptId(x), &pi_t).unwrap();
            for (y, &p) in w.iter().enumerate() {
                entries.push(DatasetEntry {
                    prompt: PromptId(x),
                    response: y,
                    win_rate: WinRateEstimate {
                        value: p,
                        k: n,
                        sample_ids: (0..n).collect(),
                    },
                });
            }
            log_z.push(partition_function(&pi_t, &game.oracle, eta, PromptId(x)).unwrap());
        }
        let data = PreferenceDataset::new(entries, 1, SelectionStrategy::AllK).unwrap();
        let target = RegressionTarget::exact_log_z(eta, log_z).unwrap();
        let fit = fit_iteration(&pi_t, &data, &target, &OptimizerSettings::default()).unwrap();
        let fitted = fit.policy.realize();
        let exact = exponential_update_policy(&pi_t, &game.oracle, eta).unwrap();
        for x in 0..3 {
            for (a, b) in fitted.row(x).iter().zip(exact.row(x)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("max |π_fit − π_exact| = {worst:.3e} over 20 games, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn enumerate_k3(eta: f64) -> (f64, f64, f64) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for bits in 0..8u8 {
        let upper: Vec<i8> = (0..3).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect();
        let x = DisorderedInstance::from_upper(3, eta, &upper).unwrap().x_values();
        a.push((eta * x[0]).exp());
        b.push((eta * x[1]).exp());
    }
    let ma = a.iter().sum::<f64>() / 8.0;
    let mb = b.iter().sum::<f64>() / 8.0;
    let var = a.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / 8.0;
    let cov = a.iter().zip(&b).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>() / 8.0;
    (ma, var, cov)
}

fn disordered_limit() -> Outcome {
    let eta = 1.0;
    let z = disordered_trials(1000, eta, 200).unwrap();
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let dev = (mean * (-eta / 2.0f64).exp() - 1.0).abs();
    let mut moment_err: f64 = 0.0;
    for eta in [0.5, 1.0, 2.0] {
        let m = disordered_moments(3, eta).unwrap();
        let (mean, var, cov) = enumerate_k3(eta);
        moment_err = moment_err
            .max((m.mean - mean).abs())
            .max((m.variance - var).abs())
            .max((m.covariance - cov).abs());
    }
    outcome(
        dev < 0.05 && moment_err < 1e-12,
        format!("|mean(Z)e^(-η/2) − 1| = {dev:.3e}; K=3 moment error {moment_err:.1e}"),
    )
}

fn ordered_limit_check() -> Outcome {
    let log_z = ordered_log_partition(&OrderedInstance::new(10_000, 1.0).unwrap());
    let target = (1f64.exp() - 1.0).ln();
    let dev = (log_z - target).abs();
    let rounded = (ordered_limit(1.0) * 100.0).round() / 100.0;
    outcome(
        dev < 1e-3 && rounded == 0.54,
        format!("log Z(K=1e4) = {log_z:.6}, |Δ| = {dev:.2e}, limit rounds to {rounded:.2}"),
    )
}

fn gradient_checks() -> Outcome {
    const EPS: f64 = 1e-5;
    let mut rng = seeded(7);
    let mut worst = [0.0f64; 6];
    for trial in 0..100 {
        let n = 2 + trial % 5;
        let counts = [n, n + 1];
        let pi_t = TabularPolicy::from_log_weights(normal_rows(&mut rng, &counts, 1.0)).unwrap();
        let entries: Vec<DatasetEntry> = (0..6)
            .map(|i| {
                let x = i % 2;
                DatasetEntry {
                    prompt: PromptId(x),
                    response: rng.random_range(0..counts[x]),
                    win_rate: WinRateEstimate {
                        value: rng.random(),
                        k: 1,
                        sample_ids: vec![0],
                    },
                }
            })
            .collect();
        let data = PreferenceDataset::new(entries, 1, SelectionStrategy::AllK).unwrap();
        let target = RegressionTarget::constant(rng.random_range(0.2..3.0)).unwrap();
        let init: Vec<f64> = normal_rows(&mut rng, &counts, 1.0).concat();
        let err = gradient_check(
            |p| {
                let theta = SoftmaxPolicy::new(vec![p[..n].to_vec(), p[n..].to_vec()]).unwrap();
                let r = sppo_objective(&theta, &pi_t, &data, &target).unwrap();
                (r.loss, r.grad.concat())
            },
            &init,
            EPS,
        )
        .unwrap();
        worst[0] = worst[0].max(err);

        let ab = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let p: f64 = rng.random();
        let c = rng.random_range(-2.0..2.0);
        let scalar = |f: &dyn Fn(&[f64]) -> (f64, Vec<f64>), at: &[f64]| gradient_check(f, at, EPS).unwrap();
        worst[1] = worst[1].max(scalar(
            &|v| {
                let l = sppo_pairwise_loss(v[0], v[1], p);
                (l.value, l.grad.to_vec())
            },
            &ab,
        ));
        worst[2] = worst[2].max(scalar(
            &|v| {
                let l = dpo_loss(v[0], v[1]);
                (l.value, l.grad.to_vec())
            },
            &ab,
        ));
        worst[3] = worst[3].max(scalar(
            &|v| {
                let l = ipo_loss(v[0], v[1]);
                (l.value, l.grad.to_vec())
            },
            &ab,
        ));
        worst[4] = worst[4].max(scalar(
            &|v| {
                let l = kto_loss(v[0], v[1], v[2]);
                (l.value, l.grad.to_vec())
            },
            &[ab[0], ab[1], c],
        ));

        let mdp = TokenMdp::random(2 + trial % 2, 2 + trial % 2, rng.random_range(0.3..2.0), trial as u64).unwrap();
        let star = optimal_token_policy(&mdp, &soft_backup(&mdp));
        let logits: Vec<f64> = (0..star.log_probs().len())
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        worst[5] = worst[5].max(
            gradient_check(
                |v| {
                    let r = sppo_token_loss(v, &mdp, &star).unwrap();
                    (r.loss, r.grad)
                },
                &logits,
                EPS,
            )
            .unwrap(),
        );
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    outcome(
        max < 1e-5,
        format!(
            "max rel. error: sppo {:.1e}, pair-sppo {:.1e}, dpo {:.1e}, ipo {:.1e}, kto {:.1e}, token {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4], worst[5]
        ),
    )
}

fn fixed_points() -> Outcome {
    let table = UnconstrainedLogRatio::zeros(&[2]);
    let triplets = [PreferenceTriplet::hard(PromptId(0), 0, 1)];
    let (fit, d) = descend_log_ratios(table, &triplets, PairwiseLoss::Sppo, &OptimizerSettings::default()).unwrap();
    let (a, b) = (fit.get(0, 0), fit.get(0, 1));
    let sppo_ok = d.converged && (a - 0.5).abs() < 1e-3 && (b + 0.5).abs() < 1e-3;

    let mut prev = f64::INFINITY;
    let mut decreasing = true;
    let mut min_grad = f64::INFINITY;
    for i in 0..=2000 {
        let m = 20.0 * i as f64 / 2000.0;
        let l = dpo_loss(m / 2.0, -m / 2.0);
        decreasing &= l.value < prev;
        prev = l.value;
        min_grad = min_grad.min(l.grad[0].hypot(l.grad[1]));
    }
    outcome(
        sppo_ok && decreasing && min_grad > 0.0,
        format!(
            "pairwise SPPO → ({a:.6}, {b:.6}); DPO strictly decreasing on [0,20]: {decreasing}, min |∇| = {min_grad:.2e}"
        ),
    )
}

fn token_identities() -> Outcome {
    let mut value_dev: f64 = 0.0;
    let mut seq_dev: f64 = 0.0;
    let mut shift_dev: f64 = 0.0;
    let mut cases = 0;
    for vocab in 2..=4 {
        for horizon in 1..=5 {
            for seed in 0..3 {
                let mdp = TokenMdp::random(vocab, horizon, 0.5 + seed as f64, 31 * seed + vocab as u64).unwrap();
                let t = soft_backup(&mdp);
                value_dev = value_dev.max(verify_value_identity(&mdp, &t));
                let star = optimal_token_policy(&mdp, &t);
                seq_dev = seq_dev.max(sequence_equivalence(&mdp, &star).unwrap());
                let shifted = mdp.with_reward_shift(3.7 - seed as f64);
                let star2 = optimal_token_policy(&shifted, &soft_backup(&shifted));
                for (a, b) in star.log_probs().iter().zip(star2.log_probs()) {
                    shift_dev = shift_dev.max((a.exp() - b.exp()).abs());
                }
                cases += 1;
            }
        }
    }
    outcome(
        value_dev < 1e-10 && seq_dev < 1e-10 && shift_dev < 1e-12,
        format!(
            "{cases} instances up to V=4, H=5: value {value_dev:.1e}, factorization {seq_dev:.1e}, shift {shift_dev:.1e}"
        ),
    )
}

fn policy_gradient() -> Outcome {
    let mut rng = seeded(99);
    let mut worst: f64 = 0.0;
    let mut fd_worst: f64 = 0.0;
    for trial in 0..40 {
        let n = 2 + trial % 7;
        let counts = [n, 9 - n.min(7)];
        let theta = SoftmaxPolicy::new(normal_rows(&mut rng, &counts, 1.0)).unwrap();
        let pi_ref = TabularPolicy::from_log_weights(normal_rows(&mut rng, &counts, 1.0)).unwrap();
        let reward: Vec<Vec<f64>> = counts.iter().map(|&m| (0..m).map(|_| rng.random()).collect()).collect();
        let baseline = [rng.random(), rng.random()];
        let eta = rng.random_range(0.3..3.0);
        let weights = PromptWeights::new(vec![rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)]).unwrap();
        let eq = policy_gradient_equivalence(&theta, &pi_ref, &reward, &baseline, eta, &weights).unwrap();
        worst = worst.max(eq.max_deviation);
        let flat = theta.logits().concat();
        let lhs = eq.lhs.concat();
        fd_worst = fd_worst.max(
            gradient_check(
                |p| {
                    let t = SoftmaxPolicy::new(vec![p[..counts[0]].to_vec(), p[counts[0]..].to_vec()]).unwrap();
                    (regularized_objective(&t, &pi_ref, &reward, eta, &weights).unwrap(), lhs.clone())
                },
                &flat,
                1e-5,
            )
            .unwrap(),
        );
    }
    outcome(
        worst < 1e-9,
        format!("max |lhs − rhs| = {worst:.2e} over 40 instances (lhs vs finite-difference ∇J: {fd_worst:.1e})"),
    )
}

fn selfplay_improvement() -> Outcome {
    let mut ok = 0;
    let mut failures = Vec::new();
    for seed in 0..20 {
        let game = random_bt_game(4, 6, 1.0, 500 + seed);
        let mut s = RunSettings::new(8, 1.0, 3);
        s.split = SplitPlan::None;
        s.seed = seed;
        let run = run_selfplay(&RunConfig::new(game, s).unwrap()).unwrap();
        let w: Vec<f64> = run.reports.iter().map(|r| r.win_rate_vs_first).collect();
        if w[0] < w[1] && w[1] < w[2] {
            ok += 1;
        } else {
            failures.push(seed);
        }
    }
    outcome(
        ok >= 18,
        format!("win rate vs π_1 strictly increasing on {ok}/20 seeds (failing: {failures:?})"),
    )
}

fn k_ablation_robustness() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let game = random_matrix_game(4, 6, 900 + seed);
        let mut s = RunSettings::new(5, 1.0, 3);
        s.split = SplitPlan::None;
        s.seed = seed;
        let config = RunConfig::new(game, s).unwrap();
        let runs = sppo_core::selfplay::k_ablation(&config, &[2, 5]).unwrap();
        let gap = |i: usize| runs[i].1.reports.last().unwrap().gap_mixture;
        worst = worst.max((gap(0) - gap(1)).abs());
    }
    outcome(
        worst < 0.05,
        format!("max |gap(k=2) − gap(k=5)| = {worst:.4} over 20 games"),
    )
}

fn best_of_n() -> Outcome {
    let mut ok = true;
    let mut summary = Vec::new();
    for seed in 0..3 {
        let game = random_bt_game(5, 8, 1.0, 70 + seed);
        let scorer = game.oracle.to_relative_reward().unwrap();
        let pi = TabularPolicy::uniform(&game.oracle.counts()).unwrap();
        let est: Vec<_> = [1, 4, 16]
            .iter()
            .map(|&n| best_of_n_win_rate(&pi, &scorer, &game.oracle, &game.weights, n, 10_000, seed).unwrap())
            .collect();
        for w in est.windows(2) {
            let slack = 2.0 * w[0].std_error.hypot(w[1].std_error);
            ok &= w[1].mean >= w[0].mean - slack;
        }
        summary.push(format!("{:.3}/{:.3}/{:.3}", est[0].mean, est[1].mean, est[2].mean));
    }
    outcome(ok, format!("win rate vs base for n=1/4/16: {}", summary.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("regret bound and duality gap of exact self-play", mwu_bound),
        ("realizable square-loss fit recovers the exact update", realizable_regression),
        ("disordered normalizer limit and moments", disordered_limit),
        ("ordered normalizer limit", ordered_limit_check),
        ("loss gradients match finite differences", gradient_checks),
        ("pairwise fixed points", fixed_points),
        ("token-level identities", token_identities),
        ("policy-gradient equivalence", policy_gradient),
        ("self-play improvement on Bradley-Terry games", selfplay_improvement),
        ("estimation batch robustness", k_ablation_robustness),
        ("best-of-n monotonicity", best_of_n),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {:>2} {name}: {}", i + 1, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
