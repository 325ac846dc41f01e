//! Iterative self-play on synthetic games: sample K responses per prompt from
//! `π_t`, annotate them with the oracle, select and estimate win rates, fit
//! `π_{t+1}` with the square loss, and evaluate. Also the cross-method
//! comparison table and the estimation-batch ablation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result, SppoError};
use crate::exact_solver::{duality_gap, exponential_update, partition_function};
use crate::losses::{
    fit_iteration, fit_pairwise_policy, FitOutcome, OptimizerSettings, PairwiseLoss,
    PreferenceTriplet, RegressionTarget, TargetMode,
};
use crate::numeric::{log_sum_exp, stable_sum};
use crate::policy::{MixturePolicy, TabularPolicy};
use crate::preference::{
    select_winner_loser, GameSpec, OracleKind, PreferenceOracle, PromptId, WinRateEstimate,
};
use crate::rng::DrawKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Keep every sample with its row-mean win rate.
    #[default]
    AllK,
    /// Keep only the highest- and lowest-scoring samples.
    BestAndWorst,
}

/// One `(x, y, P̂(y ≻ π_t|x))` triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub prompt: PromptId,
    pub response: usize,
    pub win_rate: WinRateEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub entries: Vec<DatasetEntry>,
    pub iteration: usize,
    pub strategy: SelectionStrategy,
}

impl PreferenceDataset {
    pub fn new(
        entries: Vec<DatasetEntry>,
        iteration: usize,
        strategy: SelectionStrategy,
    ) -> Result<Self> {
        if let Some(e) = entries
            .iter()
            .find(|e| !(0.0..=1.0).contains(&e.win_rate.value))
        {
            return input_err(format!(
                "win-rate estimate {} outside [0,1]",
                e.win_rate.value
            ));
        }
        Ok(Self {
            entries,
            iteration,
            strategy,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `W[k][k'] = P(y_k ≻ y_k' | x)`, built from the upper triangle so that
/// `W + Wᵀ` is exactly the all-ones matrix.
pub fn annotate(oracle: &PreferenceOracle, x: PromptId, samples: &[usize]) -> Result<Vec<Vec<f64>>> {
    if samples.is_empty() {
        return input_err("annotation needs at least one sample");
    }
    oracle.check_prompt(x)?;
    let n = oracle.num_responses(x);
    if let Some(&y) = samples.iter().find(|&&y| y >= n) {
        return input_err(format!("response {y} out of range for prompt {}", x.0));
    }
    let k = samples.len();
    let mut w = vec![vec![0.5; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let p = if samples[i] == samples[j] {
                0.5
            } else {
                oracle.prob(x.0, samples[i], samples[j])
            };
            w[i][j] = p;
            w[j][i] = 1.0 - p;
        }
    }
    Ok(w)
}

/// Replaces each off-diagonal probability with a Bernoulli outcome, keeping
/// antisymmetry. Ties between identical responses stay at 1/2.
fn binarize(win: &mut [Vec<f64>], samples: &[usize], key: DrawKey) {
    let k = samples.len();
    let mut draw = key.draw;
    for i in 0..k {
        for j in i + 1..k {
            if samples[i] == samples[j] {
                continue;
            }
            let outcome = if key.with_draw(draw).uniform() < win[i][j] {
                1.0
            } else {
                0.0
            };
            draw += 1;
            win[i][j] = outcome;
            win[j][i] = 1.0 - outcome;
        }
    }
}

/// Which samples are kept and how many opponents enter each estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionRule {
    pub strategy: SelectionStrategy,
    pub estimation_batch: usize,
}

/// Opponent batch for sample `i`: itself, then `partner` if given, then the
/// remaining samples in order, truncated to `size`.
fn batch_for(i: usize, partner: Option<usize>, k: usize, size: usize) -> Vec<usize> {
    let mut out = vec![i];
    if let Some(p) = partner.filter(|&p| p != i) {
        out.push(p);
    }
    out.extend((0..k).filter(|&j| j != i && Some(j) != partner));
    out.truncate(size);
    out
}

fn estimate(win: &[Vec<f64>], samples: &[usize], i: usize, batch: &[usize]) -> WinRateEstimate {
    let total = stable_sum(batch.iter().map(|&j| win[i][j]));
    WinRateEstimate {
        value: (total / batch.len() as f64).clamp(0.0, 1.0),
        k: batch.len(),
        sample_ids: batch.iter().map(|&j| samples[j]).collect(),
    }
}

/// Turns one prompt's samples and win matrix into dataset entries.
///
/// `all_k` keeps every sample; `best_and_worst` keeps the winner and loser by
/// `scores`, which are then required.
pub fn build_dataset(
    x: PromptId,
    samples: &[usize],
    win: &[Vec<f64>],
    rule: SelectionRule,
    scores: Option<&[f64]>,
    iteration: usize,
) -> Result<PreferenceDataset> {
    let k = samples.len();
    if k == 0 {
        return input_err("no samples");
    }
    if win.len() != k || win.iter().any(|r| r.len() != k) {
        return input_err(format!("win matrix must be {k}×{k}"));
    }
    if rule.estimation_batch == 0 || rule.estimation_batch > k {
        return input_err(format!(
            "estimation batch {} must lie in 1..={k}",
            rule.estimation_batch
        ));
    }
    let entries = match rule.strategy {
        SelectionStrategy::AllK => (0..k)
            .map(|i| DatasetEntry {
                prompt: x,
                response: samples[i],
                win_rate: estimate(win, samples, i, &batch_for(i, None, k, rule.estimation_batch)),
            })
            .collect(),
        SelectionStrategy::BestAndWorst => {
            let Some(scores) = scores else {
                return input_err("best_and_worst selection needs scores");
            };
            if scores.len() != k {
                return input_err(format!("{} scores for {k} samples", scores.len()));
            }
            let (w, l) = select_winner_loser(scores)?;
            [(w, l), (l, w)]
                .into_iter()
                .map(|(i, other)| DatasetEntry {
                    prompt: x,
                    response: samples[i],
                    win_rate: estimate(
                        win,
                        samples,
                        i,
                        &batch_for(i, Some(other), k, rule.estimation_batch),
                    ),
                })
                .collect()
        }
    };
    PreferenceDataset::new(entries, iteration, rule.strategy)
}

/// Scores used to rank samples: the oracle's mean relative score when it has
/// one, otherwise the row means of the win matrix.
fn sample_scores(
    oracle: &PreferenceOracle,
    x: PromptId,
    samples: &[usize],
    win: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if oracle.kind() == OracleKind::RelativeReward {
        samples
            .iter()
            .map(|&y| oracle.pairrm_score(x, y, samples))
            .collect()
    } else {
        Ok(win
            .iter()
            .map(|r| stable_sum(r.iter().copied()) / r.len() as f64)
            .collect())
    }
}

/// How win rates are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimation {
    /// Sample K responses and estimate from the annotated batch.
    #[default]
    Sampled,
    /// Use every response in the support of `π_t` with its exact win rate.
    Exact,
}

/// What the annotator reports for a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    #[default]
    Probability,
    /// A single sampled 0/1 outcome per pair.
    Bernoulli,
}

/// Which prompts are trained on at each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPlan {
    /// Prompt `x` is used at iteration `t` iff `x ≡ t − 1 (mod iterations)`.
    #[default]
    RoundRobin,
    /// Every prompt at every iteration.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetSettings {
    pub mode: Option<TargetMode>,
    /// Overrides the η/2 constant baseline.
    pub baseline: Option<f64>,
}

/// Run parameters other than the game itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    /// Samples per prompt.
    pub k: usize,
    #[serde(default)]
    pub selection: SelectionStrategy,
    /// Opponents per win-rate estimate; defaults to `k`.
    #[serde(default)]
    pub estimation_batch: Option<usize>,
    pub eta: f64,
    pub iterations: usize,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default)]
    pub target: TargetSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split: SplitPlan,
    #[serde(default)]
    pub estimation: Estimation,
    #[serde(default)]
    pub feedback: Feedback,
    /// Pick the optimizer checkpoint with the best exact win rate against
    /// `π_t` instead of the converged fit.
    #[serde(default)]
    pub holdout_selection: bool,
    /// Fail the run when a fit does not converge.
    #[serde(default)]
    pub require_convergence: bool,
}

impl RunSettings {
    pub fn new(k: usize, eta: f64, iterations: usize) -> Self {
        Self {
            k,
            selection: SelectionStrategy::AllK,
            estimation_batch: None,
            eta,
            iterations,
            optimizer: OptimizerSettings::default(),
            target: TargetSettings::default(),
            seed: 0,
            split: SplitPlan::RoundRobin,
            estimation: Estimation::Sampled,
            feedback: Feedback::Probability,
            holdout_selection: false,
            require_convergence: false,
        }
    }

    pub fn batch(&self) -> usize {
        self.estimation_batch.unwrap_or(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return input_err(format!("eta must be positive and finite, got {}", self.eta));
        }
        if self.iterations == 0 {
            return input_err("iterations must be at least 1");
        }
        if self.k == 0 {
            return input_err("k must be at least 1");
        }
        let b = self.batch();
        if b == 0 || b > self.k {
            return input_err(format!("estimation batch {b} must lie in 1..={}", self.k));
        }
        if self.selection == SelectionStrategy::BestAndWorst && self.k < 2 {
            return input_err("best_and_worst needs k ≥ 2");
        }
        if let Some(b) = self.target.baseline {
            if !b.is_finite() {
                return input_err("baseline override must be finite");
            }
        }
        Ok(())
    }

    fn target_mode(&self) -> TargetMode {
        self.target.mode.unwrap_or(TargetMode::ConstantBaseline)
    }

    fn active(&self, x: usize, t: usize) -> bool {
        match self.split {
            SplitPlan::None => true,
            SplitPlan::RoundRobin => x % self.iterations == (t - 1) % self.iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub game: GameSpec,
    pub settings: RunSettings,
}

#[derive(Deserialize)]
struct RunFile {
    /// A path to a game file, relative to the config, or an inline game.
    game: serde_json::Value,
    #[serde(flatten)]
    settings: RunSettings,
}

impl RunConfig {
    pub fn new(game: GameSpec, settings: RunSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Self { game, settings })
    }

    /// Parses a run file; a string `game` is resolved against `base_dir`.
    pub fn from_json_str(text: &str, base_dir: &Path) -> Result<Self> {
        let file: RunFile = serde_json::from_str(text)?;
        let game = match &file.game {
            serde_json::Value::String(p) => GameSpec::load(base_dir.join(p))?,
            v @ serde_json::Value::Object(_) => GameSpec::from_json_str(&v.to_string())?,
            _ => return input_err("game must be a path or an inline object"),
        };
        Self::new(game, file.settings)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Per-iteration evaluation. Win rates and gaps are exact expectations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationReport {
    pub t: usize,
    pub active_prompts: usize,
    pub dataset_size: usize,
    /// `P(π_{t+1} ≻ π_t)`.
    pub win_rate_vs_prev: f64,
    /// `P(π_{t+1} ≻ π_1)`.
    pub win_rate_vs_first: f64,
    /// Duality gap of `π_{t+1}`.
    pub gap_last: f64,
    /// Duality gap of the average of `π_1, …, π_{t+1}`.
    pub gap_mixture: f64,
    /// Prompt-averaged `KL(π_{t+1} ‖ π_t)`.
    pub kl_step: f64,
    pub fit_loss: f64,
    pub grad_norm: f64,
    pub steps: usize,
    pub converged: bool,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SelfplayRun {
    pub reports: Vec<IterationReport>,
    /// `π_1, …, π_{T+1}`.
    pub policies: Vec<TabularPolicy>,
}

impl SelfplayRun {
    pub fn final_policy(&self) -> &TabularPolicy {
        self.policies.last().expect("a run holds at least π_1")
    }
}

pub fn reports_to_csv(reports: &[IterationReport]) -> String {
    let mut out = String::from(
        "t,active_prompts,dataset_size,win_rate_vs_prev,win_rate_vs_first,gap_last,gap_mixture,kl_step,fit_loss,grad_norm,steps,converged\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.active_prompts,
            r.dataset_size,
            r.win_rate_vs_prev,
            r.win_rate_vs_first,
            r.gap_last,
            r.gap_mixture,
            r.kl_step,
            r.fit_loss,
            r.grad_norm,
            r.steps,
            r.converged
        );
    }
    out
}

/// Samples, annotates and selects for every active prompt at iteration `t`.
/// Also returns the sampled-mode log-partition estimate per prompt.
fn collect_dataset(
    config: &RunConfig,
    pi_t: &TabularPolicy,
    t: usize,
) -> Result<(PreferenceDataset, Vec<f64>)> {
    let s = &config.settings;
    let oracle = &config.game.oracle;
    let mut entries = Vec::new();
    let mut log_z = Vec::with_capacity(pi_t.num_prompts());
    for x in 0..pi_t.num_prompts() {
        if !s.active(x, t) {
            log_z.push(s.eta / 2.0);
            continue;
        }
        let px = PromptId(x);
        match s.estimation {
            Estimation::Exact => {
                let rates = oracle.win_rates(px, pi_t)?;
                let support: Vec<usize> =
                    (0..rates.len()).filter(|&y| pi_t.prob(x, y) > 0.0).collect();
                for &y in &support {
                    entries.push(DatasetEntry {
                        prompt: px,
                        response: y,
                        win_rate: WinRateEstimate {
                            value: rates[y].clamp(0.0, 1.0),
                            k: support.len(),
                            sample_ids: support.clone(),
                        },
                    });
                }
                log_z.push(partition_function(pi_t, oracle, s.eta, px)?);
            }
            Estimation::Sampled => {
                let key = DrawKey::new(s.seed, t as u64, x as u64, 0);
                let samples = pi_t.sample_responses(x, s.k, key)?;
                let mut win = annotate(oracle, px, &samples)?;
                if s.feedback == Feedback::Bernoulli {
                    binarize(&mut win, &samples, key.with_draw(s.k as u64));
                }
                let scores = match s.selection {
                    SelectionStrategy::AllK => None,
                    SelectionStrategy::BestAndWorst => {
                        Some(sample_scores(oracle, px, &samples, &win)?)
                    }
                };
                let rule = SelectionRule {
                    strategy: s.selection,
                    estimation_batch: s.batch(),
                };
                let part = build_dataset(px, &samples, &win, rule, scores.as_deref(), t)?;
                entries.extend(part.entries);
                // log Σ_y π_t(y) exp(η P(y ≻ π̂^K)) with π̂^K the sample distribution
                let empirical = {
                    let mut e = vec![0.0; pi_t.num_responses(x)];
                    for &y in &samples {
                        e[y] += 1.0 / samples.len() as f64;
                    }
                    e
                };
                let terms: Vec<f64> = pi_t
                    .log_row(x)
                    .iter()
                    .enumerate()
                    .map(|(y, lp)| lp + s.eta * oracle.win_rate_unchecked(x, y, &empirical))
                    .collect();
                log_z.push(log_sum_exp(&terms));
            }
        }
    }
    let strategy = match s.estimation {
        Estimation::Exact => SelectionStrategy::AllK,
        Estimation::Sampled => s.selection,
    };
    Ok((PreferenceDataset::new(entries, t, strategy)?, log_z))
}

fn regression_target(s: &RunSettings, log_z: Vec<f64>) -> Result<RegressionTarget> {
    match s.target_mode() {
        TargetMode::ExactLogZ => RegressionTarget::exact_log_z(s.eta, log_z),
        TargetMode::ConstantBaseline => {
            RegressionTarget::constant_with(s.eta, s.target.baseline.unwrap_or(s.eta / 2.0))
        }
    }
}

/// Fits with checkpoints after 1, 2, 4, … steps and keeps the one with the
/// highest exact win rate against `π_t`; later checkpoints win ties.
fn holdout_fit(
    config: &RunConfig,
    pi_t: &TabularPolicy,
    dataset: &PreferenceDataset,
    target: &RegressionTarget,
) -> Result<FitOutcome> {
    let base = config.settings.optimizer;
    let mut budgets = Vec::new();
    let mut b = 1;
    while b < base.max_steps {
        budgets.push(b);
        b *= 2;
    }
    budgets.push(base.max_steps);
    let mut best: Option<(f64, FitOutcome)> = None;
    for max_steps in budgets {
        let fit = fit_iteration(pi_t, dataset, target, &OptimizerSettings { max_steps, ..base })?;
        let score = config.game.oracle.policy_vs_policy(
            &fit.policy.realize(),
            pi_t,
            &config.game.weights,
        )?;
        if best.as_ref().is_none_or(|(s, _)| score >= *s) {
            best = Some((score, fit));
        }
        if best.as_ref().is_some_and(|(_, f)| f.converged) {
            break;
        }
    }
    Ok(best.expect("at least one budget").1)
}

fn evaluate(
    config: &RunConfig,
    policies: &[TabularPolicy],
    fit: &FitOutcome,
    t: usize,
    active: usize,
    dataset_size: usize,
) -> Result<IterationReport> {
    let oracle = &config.game.oracle;
    let weights = &config.game.weights;
    let next = &policies[policies.len() - 1];
    let prev = &policies[policies.len() - 2];
    let mut kl = Vec::with_capacity(next.num_prompts());
    for x in 0..next.num_prompts() {
        kl.push(next.kl_to(prev, x)?);
    }
    let mixture = MixturePolicy::new(policies.to_vec())?.materialize();
    Ok(IterationReport {
        t,
        active_prompts: active,
        dataset_size,
        win_rate_vs_prev: oracle.policy_vs_policy(next, prev, weights)?,
        win_rate_vs_first: oracle.policy_vs_policy(next, &policies[0], weights)?,
        gap_last: duality_gap(next, oracle, weights)?,
        gap_mixture: duality_gap(&mixture, oracle, weights)?,
        kl_step: weights.expect(|x| kl[x]),
        fit_loss: fit.loss,
        grad_norm: fit.grad_norm,
        steps: fit.steps,
        converged: fit.converged,
        loss_trace: fit.loss_trace.clone(),
    })
}

/// Self-play from the uniform policy.
pub fn run_selfplay(config: &RunConfig) -> Result<SelfplayRun> {
    let pi_1 = TabularPolicy::uniform(&config.game.oracle.counts())?;
    run_selfplay_from(config, pi_1)
}

/// Runs `iterations` rounds of sample, annotate, select, fit, evaluate.
/// Draws are keyed by `(seed, t, x, k)`, so identical configs give identical
/// runs.
pub fn run_selfplay_from(config: &RunConfig, pi_1: TabularPolicy) -> Result<SelfplayRun> {
    let s = &config.settings;
    s.validate()?;
    config.game.oracle.check_policy(&pi_1)?;
    let mut policies = vec![pi_1];
    let mut reports = Vec::with_capacity(s.iterations);
    for t in 1..=s.iterations {
        let pi_t = policies[t - 1].clone();
        let active = (0..pi_t.num_prompts()).filter(|&x| s.active(x, t)).count();
        let (dataset, log_z) = collect_dataset(config, &pi_t, t)?;
        let fit = if dataset.is_empty() {
            FitOutcome::identity(&pi_t)?
        } else {
            let target = regression_target(s, log_z)?;
            if s.holdout_selection {
                holdout_fit(config, &pi_t, &dataset, &target)?
            } else {
                fit_iteration(&pi_t, &dataset, &target, &s.optimizer)?
            }
        };
        if s.require_convergence && !fit.converged {
            return Err(SppoError::NotConverged {
                steps: fit.steps,
                grad_norm: fit.grad_norm,
                loss: fit.loss,
            });
        }
        policies.push(fit.policy.realize());
        reports.push(evaluate(config, &policies, &fit, t, active, dataset.len())?);
    }
    Ok(SelfplayRun { reports, policies })
}

/// Methods that can appear in a comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sppo,
    DpoIter,
    IpoIter,
    /// The exact multiplicative-weight update on the same split.
    ExactMwu,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Sppo => "sppo",
            Method::DpoIter => "dpo_iter",
            Method::IpoIter => "ipo_iter",
            Method::ExactMwu => "exact_mwu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "sppo" => Ok(Method::Sppo),
            "dpo" | "dpo_iter" => Ok(Method::DpoIter),
            "ipo" | "ipo_iter" => Ok(Method::IpoIter),
            "exact" | "mwu" | "exact_mwu" => Ok(Method::ExactMwu),
            other => input_err(format!("unknown method `{other}`")),
        }
    }
}

/// Iterative DPO/IPO: each round samples from `π_t`, keeps the best/worst
/// pair as a hard label and fits with `π_ref = π_t`.
fn run_pairwise_iter(config: &RunConfig, loss: PairwiseLoss) -> Result<Vec<TabularPolicy>> {
    let s = &config.settings;
    if s.k < 2 {
        return input_err("pairwise methods need k ≥ 2");
    }
    let oracle = &config.game.oracle;
    let mut policies = vec![TabularPolicy::uniform(&oracle.counts())?];
    for t in 1..=s.iterations {
        let pi_t = policies[t - 1].clone();
        let mut triplets = Vec::new();
        for x in (0..pi_t.num_prompts()).filter(|&x| s.active(x, t)) {
            let px = PromptId(x);
            let samples = pi_t.sample_responses(x, s.k, DrawKey::new(s.seed, t as u64, x as u64, 0))?;
            let win = annotate(oracle, px, &samples)?;
            let scores = sample_scores(oracle, px, &samples, &win)?;
            let (w, l) = select_winner_loser(&scores)?;
            if samples[w] != samples[l] {
                triplets.push(PreferenceTriplet::hard(px, samples[w], samples[l]));
            }
        }
        let next = if triplets.is_empty() {
            pi_t
        } else {
            fit_pairwise_policy(&pi_t, &triplets, loss, s.eta, &s.optimizer)?
                .policy
                .realize()
        };
        policies.push(next);
    }
    Ok(policies)
}

fn run_exact_split(config: &RunConfig) -> Result<Vec<TabularPolicy>> {
    let s = &config.settings;
    let oracle = &config.game.oracle;
    let mut policies = vec![TabularPolicy::uniform(&oracle.counts())?];
    for t in 1..=s.iterations {
        let pi_t = &policies[t - 1];
        let rows = (0..pi_t.num_prompts())
            .map(|x| {
                if s.active(x, t) {
                    exponential_update(pi_t, oracle, s.eta, PromptId(x))
                } else {
                    Ok(pi_t.log_row(x).to_vec())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        policies.push(TabularPolicy::from_log_probs(rows)?);
    }
    Ok(policies)
}

/// Produces `π_1, …, π_{T+1}` for one method.
pub fn run_method(config: &RunConfig, method: Method) -> Result<Vec<TabularPolicy>> {
    config.settings.validate()?;
    match method {
        Method::Sppo => Ok(run_selfplay(config)?.policies),
        Method::DpoIter => run_pairwise_iter(config, PairwiseLoss::Dpo),
        Method::IpoIter => run_pairwise_iter(config, PairwiseLoss::Ipo),
        Method::ExactMwu => run_exact_split(config),
    }
}

/// Pairwise win-rate table. Row `i`, column `j` holds `P(policy_i ≻ policy_j)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    /// `("base", 0)` followed by `(method, t)` for every produced `π_{t+1}`.
    pub labels: Vec<(String, usize)>,
    pub win_rates: Vec<Vec<f64>>,
}

impl ComparisonTable {
    /// Largest `|entry(i,j) + entry(j,i) − 1|`.
    pub fn antisymmetry_error(&self) -> f64 {
        let n = self.labels.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((self.win_rates[i][j] + self.win_rates[j][i] - 1.0).abs());
            }
        }
        worst
    }

    pub fn to_csv(&self) -> String {
        let names: Vec<String> = self.labels.iter().map(|(m, t)| format!("{m}@{t}")).collect();
        let mut out = format!("policy,{}\n", names.join(","));
        for (name, row) in names.iter().zip(&self.win_rates) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{name},{}", cells.join(","));
        }
        out
    }
}

/// Runs every method on the same game, seeds and split, and compares all
/// produced policies pairwise. Rows are ordered by (method, iteration).
pub fn compare_methods(config: &RunConfig, methods: &[Method]) -> Result<ComparisonTable> {
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    let mut labels = Vec::new();
    let mut policies = Vec::new();
    for m in methods {
        let run = run_method(config, m)?;
        if policies.is_empty() {
            labels.push(("base".to_string(), 0));
            policies.push(run[0].clone());
        }
        for (t, p) in run.into_iter().enumerate().skip(1) {
            labels.push((m.name().to_string(), t));
            policies.push(p);
        }
    }
    let oracle = &config.game.oracle;
    let weights = &config.game.weights;
    let n = policies.len();
    let mut win_rates = vec![vec![0.5; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let p = oracle.policy_vs_policy(&policies[i], &policies[j], weights)?;
            win_rates[i][j] = p;
            win_rates[j][i] = 1.0 - p;
        }
    }
    Ok(ComparisonTable { labels, win_rates })
}

/// Reruns self-play once per estimation batch size, all else equal.
pub fn k_ablation(config: &RunConfig, ks: &[usize]) -> Result<Vec<(usize, SelfplayRun)>> {
    ks.iter()
        .map(|&k| {
            if k == 0 || k > config.settings.k {
                return input_err(format!(
                    "estimation batch {k} must lie in 1..={}",
                    config.settings.k
                ));
            }
            let mut c = config.clone();
            c.settings.estimation_batch = Some(k);
            Ok((k, run_selfplay(&c)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact_solver::{run_mwu, SolverConfig};
    use crate::games::{all_tie, random_bt_game, random_matrix_game};

    fn bt_config(rewards: Vec<Vec<f64>>, settings: RunSettings) -> RunConfig {
        let game = GameSpec::new(PreferenceOracle::bradley_terry(rewards).unwrap());
        RunConfig::new(game, settings).unwrap()
    }

    #[test]
    fn annotate_single_sample() {
        let o = PreferenceOracle::bradley_terry(vec![vec![1.0, 0.0]]).unwrap();
        assert_eq!(annotate(&o, PromptId(0), &[1]).unwrap(), vec![vec![0.5]]);
    }

    #[test]
    fn annotate_duplicates_tie() {
        let o = PreferenceOracle::bradley_terry(vec![vec![3.0, 0.0]]).unwrap();
        let w = annotate(&o, PromptId(0), &[0, 0, 1]).unwrap();
        assert_eq!(w[0][1], 0.5);
        assert_eq!(w[1][0], 0.5);
    }

    #[test]
    fn annotate_matches_oracle_and_is_antisymmetric() {
        let o = PreferenceOracle::bradley_terry(vec![vec![0.3, -1.0, 2.0, 0.7]]).unwrap();
        let s = [2, 0, 3];
        let w = annotate(&o, PromptId(0), &s).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(w[i][j] + w[j][i], 1.0);
                if i != j {
                    let p = o.pref_prob(PromptId(0), s[i], s[j]).unwrap();
                    assert!((w[i][j] - p).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn annotate_rejects_bad_input() {
        let o = PreferenceOracle::bradley_terry(vec![vec![0.0, 1.0]]).unwrap();
        assert!(annotate(&o, PromptId(0), &[]).is_err());
        assert!(annotate(&o, PromptId(0), &[2]).is_err());
        assert!(annotate(&o, PromptId(1), &[0]).is_err());
    }

    fn all_k(batch: usize) -> SelectionRule {
        SelectionRule {
            strategy: SelectionStrategy::AllK,
            estimation_batch: batch,
        }
    }

    #[test]
    fn all_k_row_means() {
        let w = vec![vec![0.5, 1.0], vec![0.0, 0.5]];
        let d = build_dataset(PromptId(0), &[0, 1], &w, all_k(2), None, 1).unwrap();
        let v: Vec<f64> = d.entries.iter().map(|e| e.win_rate.value).collect();
        assert_eq!(v, vec![0.75, 0.25]);
    }

    #[test]
    fn best_and_worst_two_sample_estimate() {
        let o = PreferenceOracle::bradley_terry(vec![vec![1.2, 0.0, -0.4, 0.3]]).unwrap();
        let s = [3, 0, 2, 1];
        let w = annotate(&o, PromptId(0), &s).unwrap();
        let scores = sample_scores(&o, PromptId(0), &s, &w).unwrap();
        let rule = SelectionRule {
            strategy: SelectionStrategy::BestAndWorst,
            estimation_batch: 2,
        };
        let d = build_dataset(PromptId(0), &s, &w, rule, Some(&scores), 1).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.entries[0].response, 0);
        assert_eq!(d.entries[1].response, 2);
        let p = o.pref_prob(PromptId(0), 0, 2).unwrap();
        assert!((d.entries[0].win_rate.value - (0.5 + p) / 2.0).abs() < 1e-15);
        assert!((d.entries[1].win_rate.value - (0.5 + 1.0 - p) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn best_and_worst_needs_scores() {
        let w = vec![vec![0.5, 1.0], vec![0.0, 0.5]];
        let rule = SelectionRule {
            strategy: SelectionStrategy::BestAndWorst,
            estimation_batch: 2,
        };
        assert!(matches!(
            build_dataset(PromptId(0), &[0, 1], &w, rule, None, 1),
            Err(SppoError::Input(_))
        ));
    }

    #[test]
    fn identical_samples_give_half() {
        let o = PreferenceOracle::bradley_terry(vec![vec![5.0, 0.0]]).unwrap();
        let s = [1, 1, 1, 1];
        let w = annotate(&o, PromptId(0), &s).unwrap();
        let d = build_dataset(PromptId(0), &s, &w, all_k(4), None, 1).unwrap();
        assert!(d.entries.iter().all(|e| e.win_rate.value == 0.5));
    }

    #[test]
    fn batch_of_one_is_a_self_tie() {
        let o = PreferenceOracle::bradley_terry(vec![vec![5.0, 0.0, 1.0]]).unwrap();
        let s = [0, 1, 2];
        let w = annotate(&o, PromptId(0), &s).unwrap();
        let d = build_dataset(PromptId(0), &s, &w, all_k(1), None, 1).unwrap();
        assert!(d.entries.iter().all(|e| e.win_rate.value == 0.5));
        assert!(build_dataset(PromptId(0), &s, &w, all_k(4), None, 1).is_err());
        assert!(build_dataset(PromptId(0), &s, &w, all_k(0), None, 1).is_err());
    }

    #[test]
    fn all_k_mean_is_one_half() {
        let game = random_matrix_game(1, 6, 4);
        let pi = TabularPolicy::uniform(&game.oracle.counts()).unwrap();
        for seed in 0..20 {
            let s = pi.sample_responses(0, 7, DrawKey::new(seed, 1, 0, 0)).unwrap();
            let w = annotate(&game.oracle, PromptId(0), &s).unwrap();
            let d = build_dataset(PromptId(0), &s, &w, all_k(7), None, 1).unwrap();
            let mean = stable_sum(d.entries.iter().map(|e| e.win_rate.value)) / 7.0;
            assert!((mean - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn dataset_rejects_out_of_range_estimates() {
        let e = DatasetEntry {
            prompt: PromptId(0),
            response: 0,
            win_rate: WinRateEstimate {
                value: 1.5,
                k: 1,
                sample_ids: vec![0],
            },
        };
        assert!(PreferenceDataset::new(vec![e], 1, SelectionStrategy::AllK).is_err());
    }

    #[test]
    fn bernoulli_feedback_stays_antisymmetric() {
        let o = PreferenceOracle::bradley_terry(vec![vec![0.0, 1.0, 2.0]]).unwrap();
        let s = [0, 1, 2, 2, 0];
        let mut w = annotate(&o, PromptId(0), &s).unwrap();
        binarize(&mut w, &s, DrawKey::new(1, 1, 0, 5));
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(w[i][j] + w[j][i], 1.0);
                if s[i] != s[j] {
                    assert!(w[i][j] == 0.0 || w[i][j] == 1.0);
                }
            }
        }
    }

    #[test]
    fn all_tie_oracle_leaves_policy_fixed() {
        let game = GameSpec::new(all_tie(&[4, 3]));
        let mut s = RunSettings::new(4, 1.0, 1);
        s.split = SplitPlan::None;
        let run = run_selfplay(&RunConfig::new(game, s).unwrap()).unwrap();
        assert!(run.policies[1].max_total_variation(&run.policies[0]) < 1e-6);
        assert!((run.reports[0].win_rate_vs_first - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bt_selfplay_improves_each_iteration() {
        let mut s = RunSettings::new(8, 1.0, 3);
        s.split = SplitPlan::None;
        s.seed = 3;
        let run = run_selfplay(&bt_config(vec![vec![1.0, 0.0]], s)).unwrap();
        let w: Vec<f64> = run.reports.iter().map(|r| r.win_rate_vs_first).collect();
        assert!(w[0] > 0.5 && w[0] < w[1] && w[1] < w[2], "{w:?}");
    }

    #[test]
    fn runs_are_deterministic() {
        let game = random_bt_game(4, 5, 1.0, 8);
        let mut s = RunSettings::new(6, 1.0, 3);
        s.seed = 42;
        s.feedback = Feedback::Bernoulli;
        let c = RunConfig::new(game, s).unwrap();
        let a = run_selfplay(&c).unwrap();
        let b = run_selfplay(&c).unwrap();
        assert_eq!(a.reports, b.reports);
        for (p, q) in a.policies.iter().zip(&b.policies) {
            assert_eq!(p.to_snapshot_string(), q.to_snapshot_string());
        }
    }

    #[test]
    fn exact_mode_tracks_mwu() {
        let game = random_matrix_game(3, 5, 11);
        let mut s = RunSettings::new(1, 0.8, 4);
        s.split = SplitPlan::None;
        s.estimation = Estimation::Exact;
        s.target.mode = Some(TargetMode::ExactLogZ);
        let c = RunConfig::new(game.clone(), s).unwrap();
        let run = run_selfplay(&c).unwrap();
        let pi_1 = TabularPolicy::uniform(&game.oracle.counts()).unwrap();
        let mwu = run_mwu(&pi_1, &game.oracle, &game.weights, &SolverConfig::fixed(0.8, 4)).unwrap();
        for (t, p) in mwu.policies.iter().chain([&mwu.next]).enumerate() {
            assert!(run.policies[t].max_total_variation(p) < 1e-3, "t={t}");
        }
    }

    #[test]
    fn round_robin_split_touches_one_portion() {
        let game = random_bt_game(6, 4, 1.0, 2);
        let s = RunSettings::new(4, 1.0, 3);
        let run = run_selfplay(&RunConfig::new(game, s).unwrap()).unwrap();
        for (t, r) in run.reports.iter().enumerate() {
            assert_eq!(r.active_prompts, 2);
            for x in 0..6 {
                if x % 3 != t {
                    assert_eq!(run.policies[t + 1].log_row(x), run.policies[t].log_row(x));
                }
            }
        }
    }

    #[test]
    fn holdout_selection_runs() {
        let game = random_bt_game(2, 4, 1.0, 5);
        let mut s = RunSettings::new(4, 1.0, 2);
        s.split = SplitPlan::None;
        s.holdout_selection = true;
        let run = run_selfplay(&RunConfig::new(game, s).unwrap()).unwrap();
        assert!(run.reports.iter().all(|r| r.win_rate_vs_prev >= 0.5 - 1e-12));
    }

    #[test]
    fn comparison_table_properties() {
        let game = random_matrix_game(2, 4, 9);
        let mut s = RunSettings::new(4, 1.0, 2);
        s.split = SplitPlan::None;
        s.estimation = Estimation::Exact;
        s.target.mode = Some(TargetMode::ExactLogZ);
        s.optimizer.max_steps = 2000;
        let c = RunConfig::new(game, s).unwrap();
        let table = compare_methods(
            &c,
            &[Method::ExactMwu, Method::Sppo, Method::DpoIter, Method::IpoIter],
        )
        .unwrap();
        assert_eq!(table.labels.len(), 9);
        assert_eq!(table.labels[1], ("sppo".to_string(), 1));
        assert!(table.antisymmetry_error() < 1e-15);
        for i in 0..9 {
            assert_eq!(table.win_rates[i][i], 0.5);
        }
        // sppo@t against exact_mwu@t
        for t in 1..=2 {
            let i = table.labels.iter().position(|l| *l == ("sppo".into(), t)).unwrap();
            let j = table.labels.iter().position(|l| *l == ("exact_mwu".into(), t)).unwrap();
            assert!((table.win_rates[i][j] - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn ablation_full_batch_matches_base() {
        let game = random_matrix_game(3, 4, 1);
        let mut s = RunSettings::new(5, 1.0, 2);
        s.split = SplitPlan::None;
        let c = RunConfig::new(game, s).unwrap();
        let base = run_selfplay(&c).unwrap();
        let runs = k_ablation(&c, &[5, 1]).unwrap();
        assert_eq!(runs[0].1.reports, base.reports);
        let frozen = &runs[1].1;
        assert!(frozen.policies.last().unwrap().max_total_variation(&frozen.policies[0]) < 1e-6);
        assert!(k_ablation(&c, &[6]).is_err());
    }

    #[test]
    fn config_round_trip_from_json() {
        let dir = tempdir();
        let game = random_bt_game(2, 3, 1.0, 0);
        game.save(dir.join("game.json")).unwrap();
        let text = r#"{"game": "game.json", "k": 3, "eta": 1.0, "iterations": 2,
            "split": "none", "selection": "best_and_worst", "estimation_batch": 2,
            "optimizer": {"max_steps": 500}}"#;
        let c = RunConfig::from_json_str(text, &dir).unwrap();
        assert_eq!(c.game, game);
        assert_eq!(c.settings.batch(), 2);
        assert_eq!(c.settings.optimizer.max_steps, 500);
        assert_eq!(c.settings.optimizer.grad_tol, OptimizerSettings::default().grad_tol);
        let inline = format!(
            r#"{{"game": {}, "k": 3, "eta": 1.0, "iterations": 1}}"#,
            game.to_json_string().unwrap()
        );
        assert_eq!(RunConfig::from_json_str(&inline, &dir).unwrap().game, game);
        let bad = r#"{"game": "game.json", "k": 2, "estimation_batch": 3, "eta": 1.0, "iterations": 1}"#;
        assert!(RunConfig::from_json_str(bad, &dir).is_err());
        std::fs::remove_dir_all(dir).unwrap();
    }

    fn tempdir() -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("sppo-selfplay-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn csv_has_one_row_per_iteration() {
        let game = random_bt_game(2, 3, 1.0, 0);
        let c = RunConfig::new(game, RunSettings::new(3, 1.0, 2)).unwrap();
        let run = run_selfplay(&c).unwrap();
        let csv = reports_to_csv(&run.reports);
        assert_eq!(csv.lines().count(), 3);
    }
}
