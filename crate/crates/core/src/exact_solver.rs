//! Exact multiplicative-weight self-play on enumerable games.
//!
//! The update `π_{t+1}(y|x) ∝ π_t(y|x) · exp(η P(y ≻ π_t | x))` is carried out
//! in log-space. Alongside the iterates this module computes duality gaps of
//! the running mixture, the Freund–Schapire regret inequality at every prefix,
//! and best-of-n reranking.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{input_err, Result, SppoError};
use crate::numeric::{log_sum_exp, stable_sum, NeumaierSum};
use crate::policy::{MixturePolicy, TabularPolicy};
use crate::preference::{select_winner_loser, OracleKind, PreferenceOracle, PromptId, PromptWeights};
use crate::rng::DrawKey;

/// How the learning rate is chosen for a run of length `t_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EtaSchedule {
    /// Use `SolverConfig::eta` as given.
    Fixed,
    /// `η = c / √T`.
    ThetaInvSqrtT { c: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverConfig {
    pub eta: f64,
    pub t_max: usize,
    pub schedule: EtaSchedule,
}

impl SolverConfig {
    pub fn fixed(eta: f64, t_max: usize) -> Self {
        Self {
            eta,
            t_max,
            schedule: EtaSchedule::Fixed,
        }
    }

    pub fn inv_sqrt(c: f64, t_max: usize) -> Self {
        Self {
            eta: c / (t_max as f64).sqrt(),
            t_max,
            schedule: EtaSchedule::ThetaInvSqrtT { c },
        }
    }

    /// The learning rate actually used.
    pub fn effective_eta(&self) -> f64 {
        match self.schedule {
            EtaSchedule::Fixed => self.eta,
            EtaSchedule::ThetaInvSqrtT { c } => c / (self.t_max as f64).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let eta = self.effective_eta();
        if !(eta.is_finite() && eta > 0.0) {
            return input_err(format!("eta must be positive and finite, got {eta}"));
        }
        if self.t_max == 0 {
            return input_err("t_max must be at least 1");
        }
        Ok(())
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta.is_finite() && eta >= 0.0) {
        return input_err(format!("eta must be finite and non-negative, got {eta}"));
    }
    Ok(())
}

fn check_inputs(pi: &TabularPolicy, oracle: &PreferenceOracle, x: PromptId) -> Result<()> {
    oracle.check_prompt(x)?;
    oracle.check_policy(pi)
}

/// `log Z_{π_t}(x) = log Σ_y π_t(y|x) exp(η P(y ≻ π_t | x))`.
pub fn partition_function(
    pi: &TabularPolicy,
    oracle: &PreferenceOracle,
    eta: f64,
    x: PromptId,
) -> Result<f64> {
    check_eta(eta)?;
    check_inputs(pi, oracle, x)?;
    let w = oracle.win_rates_unchecked(x.0, &pi.row(x.0));
    Ok(log_partition_from(pi.log_row(x.0), &w, eta))
}

fn log_partition_from(log_pi: &[f64], win_rates: &[f64], eta: f64) -> f64 {
    let terms: Vec<f64> = log_pi
        .iter()
        .zip(win_rates)
        .map(|(lp, w)| lp + eta * w)
        .collect();
    log_sum_exp(&terms)
}

fn update_row(log_pi: &[f64], win_rates: &[f64], eta: f64) -> Vec<f64> {
    let log_z = log_partition_from(log_pi, win_rates, eta);
    log_pi
        .iter()
        .zip(win_rates)
        .map(|(lp, w)| {
            if *lp == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                lp + eta * w - log_z
            }
        })
        .collect()
}

/// One multiplicative-weight step for prompt `x`; returns the new
/// log-probability row.
pub fn exponential_update(
    pi: &TabularPolicy,
    oracle: &PreferenceOracle,
    eta: f64,
    x: PromptId,
) -> Result<Vec<f64>> {
    check_eta(eta)?;
    check_inputs(pi, oracle, x)?;
    let w = oracle.win_rates_unchecked(x.0, &pi.row(x.0));
    Ok(update_row(pi.log_row(x.0), &w, eta))
}

/// [`exponential_update`] applied to every prompt.
pub fn exponential_update_policy(
    pi: &TabularPolicy,
    oracle: &PreferenceOracle,
    eta: f64,
) -> Result<TabularPolicy> {
    check_eta(eta)?;
    oracle.check_policy(pi)?;
    let rows = (0..pi.num_prompts())
        .map(|x| {
            let w = oracle.win_rates_unchecked(x, &pi.row(x));
            update_row(pi.log_row(x), &w, eta)
        })
        .collect();
    Ok(TabularPolicy::from_log_probs_unchecked(rows))
}

/// The two halves of the duality gap, averaged over prompts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapParts {
    /// `max_π P(π ≻ π̄)`.
    pub best_attack: f64,
    /// `min_π P(π ≺ π̄)`.
    pub worst_defense: f64,
}

impl GapParts {
    pub fn gap(&self) -> f64 {
        self.best_attack - self.worst_defense
    }
}

/// Per-prompt best attack and worst defense against the row `opponent`,
/// both over pure responses.
fn gap_parts_at(oracle: &PreferenceOracle, x: usize, opponent: &[f64]) -> (f64, f64) {
    let n = opponent.len();
    let mut best_attack = f64::NEG_INFINITY;
    let mut worst_defense = f64::INFINITY;
    for y in 0..n {
        best_attack = best_attack.max(oracle.win_rate_unchecked(x, y, opponent));
        // P(δ_y ≺ π) = Σ_{y'} π(y') P(y' ≻ y)
        let defense = stable_sum(
            opponent
                .iter()
                .enumerate()
                .filter(|(_, &q)| q > 0.0)
                .map(|(y2, &q)| q * oracle.prob(x, y2, y)),
        );
        worst_defense = worst_defense.min(defense);
    }
    (best_attack, worst_defense)
}

pub fn duality_gap_parts(
    pi: &TabularPolicy,
    oracle: &PreferenceOracle,
    weights: &PromptWeights,
) -> Result<GapParts> {
    oracle.check_policy(pi)?;
    weights.check_len(oracle.num_prompts())?;
    let parts: Vec<(f64, f64)> = (0..pi.num_prompts())
        .map(|x| gap_parts_at(oracle, x, &pi.row(x)))
        .collect();
    Ok(GapParts {
        best_attack: weights.expect(|x| parts[x].0),
        worst_defense: weights.expect(|x| parts[x].1),
    })
}

/// `max_π P(π ≻ π̄) − min_π P(π ≺ π̄)`, evaluated per prompt over pure
/// responses and averaged over the prompt distribution. Zero exactly at a
/// symmetric Nash equilibrium.
pub fn duality_gap(
    pi: &TabularPolicy,
    oracle: &PreferenceOracle,
    weights: &PromptWeights,
) -> Result<f64> {
    Ok(duality_gap_parts(pi, oracle, weights)?.gap().max(0.0))
}

/// Duality gap of the materialized averaged distribution.
pub fn mixture_duality_gap(
    m: &MixturePolicy,
    oracle: &PreferenceOracle,
    weights: &PromptWeights,
) -> Result<f64> {
    duality_gap(&m.materialize(), oracle, weights)
}

/// One row of a [`GapTrace`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapRecord {
    pub t: usize,
    /// Duality gap of `π̄_t`.
    pub gap: f64,
    /// Prompt-averaged `KL(π_{t+1} ‖ π_t)`.
    pub kl_step: f64,
    /// Freund–Schapire residual (RHS − LHS) at prefix `t`, with the exact
    /// minimum over mixed comparators.
    pub fs_residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GapTrace {
    pub records: Vec<GapRecord>,
}

impl GapTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,gap,kl_step,fs_residual\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.t, r.gap, r.kl_step, r.fs_residual);
        }
        out
    }

    pub fn min_residual(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.fs_residual)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn final_gap(&self) -> Option<f64> {
        self.records.last().map(|r| r.gap)
    }
}

/// Result of [`run_mwu`].
#[derive(Debug, Clone)]
pub struct MwuRun {
    pub eta: f64,
    /// `π_1, …, π_T`.
    pub policies: Vec<TabularPolicy>,
    /// `π_{T+1}`, the iterate after the last update.
    pub next: TabularPolicy,
    /// `π̄_T = (1/T) Σ_{t=1}^T π_t`.
    pub mixture: MixturePolicy,
    pub trace: GapTrace,
}

/// Freund–Schapire bookkeeping shared by [`run_mwu`] and
/// [`freund_schapire_check`].
struct RegretLedger {
    eta: f64,
    log_pi0: Vec<Vec<f64>>,
    cum_loss: Vec<Vec<NeumaierSum>>,
    lhs: Vec<NeumaierSum>,
}

impl RegretLedger {
    fn new(pi0: &TabularPolicy, eta: f64) -> Self {
        Self {
            eta,
            log_pi0: pi0.log_rows().to_vec(),
            cum_loss: pi0
                .counts()
                .iter()
                .map(|&n| vec![NeumaierSum::default(); n])
                .collect(),
            lhs: vec![NeumaierSum::default(); pi0.num_prompts()],
        }
    }

    /// Adds one round with learner row `pi_t` facing losses `1 − win_rates`.
    fn record(&mut self, x: usize, pi_t: &[f64], win_rates: &[f64]) {
        let mut learner_loss = NeumaierSum::default();
        for (y, (&p, &w)) in pi_t.iter().zip(win_rates).enumerate() {
            let loss = 1.0 - w;
            self.cum_loss[x][y].add(loss);
            if p > 0.0 {
                learner_loss.add(p * loss);
            }
        }
        self.lhs[x].add(learner_loss.value());
    }

    /// `(lhs, rhs_pure, rhs_exact)` for prompt `x` at the current prefix.
    fn sides(&self, x: usize) -> (f64, f64, f64) {
        let eta = self.eta;
        let denom = -(-eta).exp_m1();
        let scale = eta / denom;
        let mut rhs_pure = f64::INFINITY;
        let mut exponents = Vec::with_capacity(self.log_pi0[x].len());
        for (lp0, l) in self.log_pi0[x].iter().zip(&self.cum_loss[x]) {
            if *lp0 == f64::NEG_INFINITY {
                continue;
            }
            let loss = l.value();
            // KL(δ_y ‖ π_0) = −log π_0(y)
            rhs_pure = rhs_pure.min(scale * loss - lp0 / denom);
            exponents.push(lp0 - eta * loss);
        }
        // min_π [η Σ P(π ≺ μ_t) + KL(π‖π_0)] = −log Σ_y π_0(y) e^{−η L(y)}
        let rhs_exact = -log_sum_exp(&exponents) / denom;
        (self.lhs[x].value(), rhs_pure, rhs_exact)
    }
}

/// Runs `t_max` rounds of exact self-play from `pi_1`, recording the gap of
/// the running mixture, the step KL and the regret residual at every `t`.
pub fn run_mwu(
    pi_1: &TabularPolicy,
    oracle: &PreferenceOracle,
    weights: &PromptWeights,
    config: &SolverConfig,
) -> Result<MwuRun> {
    config.validate()?;
    oracle.check_policy(pi_1)?;
    weights.check_len(oracle.num_prompts())?;
    if pi_1.log_rows().iter().flatten().any(|l| !l.is_finite()) {
        return Err(SppoError::Domain("π_1 must be fully supported".into()));
    }
    let eta = config.effective_eta();
    let n_prompts = pi_1.num_prompts();
    let matrices: Vec<Vec<f64>> = (0..n_prompts)
        .map(|x| oracle.preference_matrix(PromptId(x)))
        .collect::<Result<_>>()?;

    let mut cum_win: Vec<Vec<NeumaierSum>> = pi_1
        .counts()
        .iter()
        .map(|&n| vec![NeumaierSum::default(); n])
        .collect();
    let mut ledger = RegretLedger::new(pi_1, eta);
    let mut policies = Vec::with_capacity(config.t_max);
    let mut trace = GapTrace::default();
    let mut current = pi_1.clone();

    for t in 1..=config.t_max {
        let mut next_rows = Vec::with_capacity(n_prompts);
        let mut kl = Vec::with_capacity(n_prompts);
        for x in 0..n_prompts {
            let row = current.row(x);
            let n = row.len();
            let m = &matrices[x];
            let w: Vec<f64> = (0..n)
                .map(|y| {
                    stable_sum(
                        row.iter()
                            .enumerate()
                            .filter(|(_, &q)| q > 0.0)
                            .map(|(y2, &q)| q * m[y * n + y2]),
                    )
                })
                .collect();
            for (acc, wy) in cum_win[x].iter_mut().zip(&w) {
                acc.add(*wy);
            }
            ledger.record(x, &row, &w);
            let next = update_row(current.log_row(x), &w, eta);
            kl.push(crate::policy::kl_divergence_log(&next, current.log_row(x))?);
            next_rows.push(next);
        }
        // gap of π̄_t: the win rate against a mixture is the mean win rate
        let gap = weights.expect(|x| {
            let best = cum_win[x]
                .iter()
                .map(|s| s.value() / t as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            2.0 * best - 1.0
        });
        let fs_residual = weights.expect(|x| {
            let (lhs, _, rhs) = ledger.sides(x);
            rhs - lhs
        });
        trace.records.push(GapRecord {
            t,
            gap: gap.max(0.0),
            kl_step: weights.expect(|x| kl[x]),
            fs_residual,
        });
        policies.push(std::mem::replace(
            &mut current,
            TabularPolicy::from_log_probs_unchecked(next_rows),
        ));
    }

    let mixture = MixturePolicy::new(policies.clone())?;
    Ok(MwuRun {
        eta,
        policies,
        next: current,
        mixture,
        trace,
    })
}

/// One prefix of the Freund–Schapire inequality
/// `Σ_t P(π_t ≺ π_t) ≤ min_π [η/(1−e^{−η}) Σ_t P(π ≺ π_t) + KL(π‖π_1)/(1−e^{−η})]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FsRecord {
    pub t: usize,
    pub lhs: f64,
    /// Right-hand side minimized over pure comparators.
    pub rhs_pure: f64,
    /// Right-hand side minimized over all mixed comparators (Gibbs variational form).
    pub rhs_exact: f64,
}

impl FsRecord {
    pub fn residual_pure(&self) -> f64 {
        self.rhs_pure - self.lhs
    }

    pub fn residual_exact(&self) -> f64 {
        self.rhs_exact - self.lhs
    }
}

/// Evaluates the regret inequality at every prefix of a self-play sequence
/// (`μ_t = π_t`), with `policies[0]` as the reference `π_0`. Values are
/// averaged over the prompt distribution.
pub fn freund_schapire_check(
    policies: &[TabularPolicy],
    oracle: &PreferenceOracle,
    weights: &PromptWeights,
    eta: f64,
) -> Result<Vec<FsRecord>> {
    let Some(first) = policies.first() else {
        return input_err("need at least one policy");
    };
    if !(eta.is_finite() && eta > 0.0) {
        return input_err(format!("eta must be positive and finite, got {eta}"));
    }
    weights.check_len(oracle.num_prompts())?;
    let mut ledger = RegretLedger::new(first, eta);
    let mut out = Vec::with_capacity(policies.len());
    for (i, pi) in policies.iter().enumerate() {
        oracle.check_policy(pi)?;
        for x in 0..pi.num_prompts() {
            let row = pi.row(x);
            let w = oracle.win_rates_unchecked(x, &row);
            ledger.record(x, &row, &w);
        }
        let sides: Vec<(f64, f64, f64)> = (0..pi.num_prompts()).map(|x| ledger.sides(x)).collect();
        out.push(FsRecord {
            t: i + 1,
            lhs: weights.expect(|x| sides[x].0),
            rhs_pure: weights.expect(|x| sides[x].1),
            rhs_exact: weights.expect(|x| sides[x].2),
        });
    }
    Ok(out)
}

/// Draws `n` responses from `π(·|x)` and returns the one with the highest
/// mean relative score against the drawn batch (lowest index on ties).
pub fn best_of_n_rerank(
    pi: &TabularPolicy,
    oracle: &PreferenceOracle,
    x: PromptId,
    n: usize,
    key: DrawKey,
) -> Result<usize> {
    if oracle.kind() != OracleKind::RelativeReward {
        return Err(SppoError::Unsupported(
            "best-of-n reranking needs a relative-reward oracle".into(),
        ));
    }
    if n == 0 {
        return input_err("best-of-n needs n ≥ 1");
    }
    check_inputs(pi, oracle, x)?;
    let batch = pi.sample_responses(x.0, n, key)?;
    if n == 1 {
        return Ok(batch[0]);
    }
    let scores = batch
        .iter()
        .map(|&y| oracle.pairrm_score(x, y, &batch))
        .collect::<Result<Vec<_>>>()?;
    // all-equal scores give winner 0, i.e. the first draw
    let (winner, _) = select_winner_loser(&scores)?;
    Ok(batch[winner])
}

/// Mean and standard error of a Monte-Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

/// Monte-Carlo win rate of the best-of-n policy against `pi` itself.
///
/// Each trial reranks with `scorer` (a relative-reward oracle) and scores the
/// pick by its exact win rate against `pi` under `judge`. Trials are spread
/// over prompts in proportion to `weights`.
pub fn best_of_n_win_rate(
    pi: &TabularPolicy,
    scorer: &PreferenceOracle,
    judge: &PreferenceOracle,
    weights: &PromptWeights,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    if trials < 2 {
        return input_err("need at least two trials");
    }
    judge.check_policy(pi)?;
    weights.check_len(judge.num_prompts())?;
    let mut values = Vec::with_capacity(trials);
    let cdf: Vec<f64> = weights
        .as_slice()
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    for trial in 0..trials as u64 {
        let u = DrawKey::new(seed, trial, u64::MAX, 0).uniform();
        let x = cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1);
        let y = best_of_n_rerank(pi, scorer, PromptId(x), n, DrawKey::new(seed, trial, x as u64, 0))?;
        values.push(judge.win_rate_unchecked(x, y, &pi.row(x)));
    }
    let mean = stable_sum(values.iter().copied()) / trials as f64;
    let var = stable_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (trials - 1) as f64;
    Ok(MonteCarloEstimate {
        mean,
        std_error: (var / trials as f64).sqrt(),
        trials,
    })
}
