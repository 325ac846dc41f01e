//! The loss family: the SPPO square-loss regression on softmax policies, the
//! pairwise SPPO/DPO/IPO/KTO losses on scaled log-ratios, a deterministic
//! gradient-descent fitter, finite-difference gradient checks, and the
//! policy-gradient equivalence of the square loss.
//!
//! Pairwise losses take `a = β log(π_θ(y_w)/π_ref(y_w))` and
//! `b = β log(π_θ(y_l)/π_ref(y_l))` with `β = 1/η`.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result, SppoError};
use crate::numeric::{sigmoid, softplus, stable_sum};
use crate::policy::{SoftmaxPolicy, TabularPolicy, UnconstrainedLogRatio};
use crate::preference::{PromptId, PromptWeights};
use crate::selfplay::PreferenceDataset;

/// How the regression target is centred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Subtract the per-prompt log partition function.
    ExactLogZ,
    /// Subtract a constant (η/2 unless overridden).
    ConstantBaseline,
}

#[derive(Debug, Clone, PartialEq)]
enum Baseline {
    Constant(f64),
    PerPrompt(Vec<f64>),
}

/// Regression target `η P̂(y ≻ π_t|x) − baseline(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTarget {
    mode: TargetMode,
    eta: f64,
    baseline: Baseline,
}

impl RegressionTarget {
    /// Constant baseline `η/2`.
    pub fn constant(eta: f64) -> Result<Self> {
        Self::constant_with(eta, eta / 2.0)
    }

    /// Constant baseline with an explicit value, e.g. the ordered-regime
    /// constant `log((e^η − 1)/η)`.
    pub fn constant_with(eta: f64, baseline: f64) -> Result<Self> {
        check_finite_eta(eta)?;
        if !baseline.is_finite() {
            return input_err("baseline must be finite");
        }
        Ok(Self {
            mode: TargetMode::ConstantBaseline,
            eta,
            baseline: Baseline::Constant(baseline),
        })
    }

    /// Per-prompt `log Z(x)` baselines.
    pub fn exact_log_z(eta: f64, log_z: Vec<f64>) -> Result<Self> {
        check_finite_eta(eta)?;
        if log_z.iter().any(|v| !v.is_finite()) {
            return input_err("log partition values must be finite");
        }
        Ok(Self {
            mode: TargetMode::ExactLogZ,
            eta,
            baseline: Baseline::PerPrompt(log_z),
        })
    }

    pub fn mode(&self) -> TargetMode {
        self.mode
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn baseline(&self, x: usize) -> f64 {
        match &self.baseline {
            Baseline::Constant(b) => *b,
            Baseline::PerPrompt(v) => v[x],
        }
    }

    pub fn value(&self, x: usize, p_hat: f64) -> f64 {
        self.eta * p_hat - self.baseline(x)
    }
}

fn check_finite_eta(eta: f64) -> Result<()> {
    if !(eta.is_finite() && eta >= 0.0) {
        return input_err(format!("eta must be finite and non-negative, got {eta}"));
    }
    Ok(())
}

/// `(x, y_w, y_l, P(y_w ≻ y_l | x))`; a hard label is `p_win = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub prompt: PromptId,
    pub winner: usize,
    pub loser: usize,
    pub p_win: f64,
}

impl PreferenceTriplet {
    pub fn new(prompt: PromptId, winner: usize, loser: usize, p_win: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_win) {
            return input_err(format!("p_win must lie in [0,1], got {p_win}"));
        }
        Ok(Self {
            prompt,
            winner,
            loser,
            p_win,
        })
    }

    pub fn hard(prompt: PromptId, winner: usize, loser: usize) -> Self {
        Self {
            prompt,
            winner,
            loser,
            p_win: 1.0,
        }
    }
}

/// Loss value, gradient with respect to the parameter table, and
/// per-example residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub grad: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
}

impl LossReport {
    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn softmax_rows(theta: &SoftmaxPolicy) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let log_probs: Vec<Vec<f64>> = (0..theta.num_prompts()).map(|x| theta.log_probs(x)).collect();
    let probs = log_probs
        .iter()
        .map(|r| r.iter().map(|l| l.exp()).collect())
        .collect();
    (log_probs, probs)
}

/// Mean over the dataset of
/// `(log(π_θ(y|x)/π_t(y|x)) − (η P̂(y ≻ π_t|x) − baseline(x)))²`
/// with its analytic gradient through the softmax.
pub fn sppo_objective(
    theta: &SoftmaxPolicy,
    pi_t: &TabularPolicy,
    dataset: &PreferenceDataset,
    target: &RegressionTarget,
) -> Result<LossReport> {
    if theta.counts() != pi_t.counts() {
        return input_err("θ and π_t span different universes");
    }
    if dataset.entries.is_empty() {
        return input_err("empty dataset");
    }
    let (log_probs, probs) = softmax_rows(theta);
    let n = dataset.entries.len() as f64;
    let mut residuals = Vec::with_capacity(dataset.entries.len());
    let mut per_response: Vec<Vec<f64>> = theta.counts().iter().map(|&m| vec![0.0; m]).collect();
    let mut per_prompt = vec![0.0; theta.num_prompts()];
    for e in &dataset.entries {
        let (x, y) = (e.prompt.0, e.response);
        if x >= pi_t.num_prompts() || y >= pi_t.num_responses(x) {
            return input_err(format!("dataset entry ({x}, {y}) out of range"));
        }
        let anchor = pi_t.log_prob(x, y);
        if !anchor.is_finite() {
            return Err(SppoError::Domain(format!(
                "response {y} of prompt {x} lies outside the support of π_t"
            )));
        }
        let r = (log_probs[x][y] - anchor) - target.value(x, e.win_rate.value);
        residuals.push(r);
        per_response[x][y] += r;
        per_prompt[x] += r;
    }
    let loss = stable_sum(residuals.iter().map(|r| r * r)) / n;
    let grad = per_response
        .iter()
        .zip(&probs)
        .zip(&per_prompt)
        .map(|((rs, ps), s)| {
            rs.iter()
                .zip(ps)
                .map(|(r, p)| 2.0 * (r - s * p) / n)
                .collect()
        })
        .collect();
    Ok(LossReport {
        loss,
        grad,
        residuals,
    })
}

/// Value and gradient of a scalar loss in `N` arguments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossGrad<const N: usize> {
    pub value: f64,
    pub grad: [f64; N],
}

/// Pairwise SPPO loss in scaled coordinates:
/// `(a − (P − 1/2))² + (b − ((1 − P) − 1/2))²`.
///
/// Equals the log-ratio form divided by `η²`; under a hard label it is
/// `(a − 1/2)² + (b + 1/2)²`.
pub fn sppo_pairwise_loss(a: f64, b: f64, p_win: f64) -> LossGrad<2> {
    let ra = a - (p_win - 0.5);
    let rb = b - (0.5 - p_win);
    LossGrad {
        value: ra * ra + rb * rb,
        grad: [2.0 * ra, 2.0 * rb],
    }
}

/// Pairwise SPPO loss on raw log-ratios `log(π_θ/π_ref)`:
/// `(lw − η(P − 1/2))² + (ll − η((1 − P) − 1/2))²`.
pub fn sppo_pairwise_loss_log_ratio(
    log_ratio_w: f64,
    log_ratio_l: f64,
    p_win: f64,
    eta: f64,
) -> LossGrad<2> {
    let ra = log_ratio_w - eta * (p_win - 0.5);
    let rb = log_ratio_l - eta * (0.5 - p_win);
    LossGrad {
        value: ra * ra + rb * rb,
        grad: [2.0 * ra, 2.0 * rb],
    }
}

/// `−log σ(a − b)`.
pub fn dpo_loss(a: f64, b: f64) -> LossGrad<2> {
    let z = a - b;
    let d = sigmoid(-z);
    LossGrad {
        value: softplus(-z),
        grad: [-d, d],
    }
}

/// `((a − b) − 1)²`.
pub fn ipo_loss(a: f64, b: f64) -> LossGrad<2> {
    let r = (a - b) - 1.0;
    LossGrad {
        value: r * r,
        grad: [2.0 * r, -2.0 * r],
    }
}

/// Simplified KTO loss `σ(−a + c) + σ(b − c)`; gradient with respect to
/// `(a, b, c)`.
pub fn kto_loss(a: f64, b: f64, c: f64) -> LossGrad<3> {
    let s1 = sigmoid(c - a);
    let s2 = sigmoid(b - c);
    let d1 = s1 * (1.0 - s1);
    let d2 = s2 * (1.0 - s2);
    LossGrad {
        value: s1 + s2,
        grad: [-d1, d2, d1 - d2],
    }
}

/// Selects a pairwise loss for the triplet-based fitters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PairwiseLoss {
    Sppo,
    Dpo,
    Ipo,
    /// KTO with a fixed reference point `c`.
    Kto { c: f64 },
}

impl PairwiseLoss {
    pub fn eval(&self, a: f64, b: f64, p_win: f64) -> LossGrad<2> {
        match *self {
            PairwiseLoss::Sppo => sppo_pairwise_loss(a, b, p_win),
            PairwiseLoss::Dpo => dpo_loss(a, b),
            PairwiseLoss::Ipo => ipo_loss(a, b),
            PairwiseLoss::Kto { c } => {
                let k = kto_loss(a, b, c);
                LossGrad {
                    value: k.value,
                    grad: [k.grad[0], k.grad[1]],
                }
            }
        }
    }
}

/// Mean pairwise loss over triplets with `a`, `b` read from an unconstrained
/// log-ratio table.
pub fn pairwise_table_objective(
    table: &UnconstrainedLogRatio,
    triplets: &[PreferenceTriplet],
    loss: PairwiseLoss,
) -> Result<LossReport> {
    if triplets.is_empty() {
        return input_err("no triplets");
    }
    let n = triplets.len() as f64;
    let mut grad: Vec<Vec<f64>> = table.values().iter().map(|r| vec![0.0; r.len()]).collect();
    let mut values = Vec::with_capacity(triplets.len());
    for t in triplets {
        let x = t.prompt.0;
        if x >= grad.len() || t.winner >= grad[x].len() || t.loser >= grad[x].len() {
            return input_err("triplet out of range");
        }
        let lg = loss.eval(table.get(x, t.winner), table.get(x, t.loser), t.p_win);
        values.push(lg.value);
        grad[x][t.winner] += lg.grad[0] / n;
        grad[x][t.loser] += lg.grad[1] / n;
    }
    Ok(LossReport {
        loss: stable_sum(values.iter().copied()) / n,
        grad,
        residuals: values,
    })
}

/// Mean pairwise loss on a softmax policy against a reference, with
/// `a = (1/η) log(π_θ(y_w)/π_ref(y_w))` and likewise for `b`.
pub fn pairwise_policy_objective(
    theta: &SoftmaxPolicy,
    pi_ref: &TabularPolicy,
    triplets: &[PreferenceTriplet],
    loss: PairwiseLoss,
    eta: f64,
) -> Result<LossReport> {
    if !(eta.is_finite() && eta > 0.0) {
        return input_err("eta must be positive");
    }
    if theta.counts() != pi_ref.counts() {
        return input_err("θ and π_ref span different universes");
    }
    if triplets.is_empty() {
        return input_err("no triplets");
    }
    let beta = 1.0 / eta;
    let (log_probs, probs) = softmax_rows(theta);
    let n = triplets.len() as f64;
    let mut grad: Vec<Vec<f64>> = theta.counts().iter().map(|&m| vec![0.0; m]).collect();
    let mut values = Vec::with_capacity(triplets.len());
    for t in triplets {
        let x = t.prompt.0;
        if x >= grad.len() || t.winner >= grad[x].len() || t.loser >= grad[x].len() {
            return input_err("triplet out of range");
        }
        let (rw, rl) = (pi_ref.log_prob(x, t.winner), pi_ref.log_prob(x, t.loser));
        if !rw.is_finite() || !rl.is_finite() {
            return Err(SppoError::Domain("triplet outside the support of π_ref".into()));
        }
        let a = beta * (log_probs[x][t.winner] - rw);
        let b = beta * (log_probs[x][t.loser] - rl);
        let lg = loss.eval(a, b, t.p_win);
        values.push(lg.value);
        // ∂a/∂θ_j = β (1[j = y_w] − π_j)
        let (ga, gb) = (lg.grad[0] * beta / n, lg.grad[1] * beta / n);
        for (j, g) in grad[x].iter_mut().enumerate() {
            *g -= (ga + gb) * probs[x][j];
        }
        grad[x][t.winner] += ga;
        grad[x][t.loser] += gb;
    }
    Ok(LossReport {
        loss: stable_sum(values.iter().copied()) / n,
        grad,
        residuals: values,
    })
}

/// Settings for the deterministic gradient-descent fitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub step_size: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
    /// Armijo backtracking with step growth after accepted steps.
    pub backtracking: bool,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            max_steps: 20_000,
            grad_tol: 1e-10,
            backtracking: true,
        }
    }
}

/// Outcome of a descent run over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Descent {
    pub params: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub steps: usize,
    pub converged: bool,
    pub loss_trace: Vec<f64>,
}

const MAX_STEP: f64 = 1e8;
const MIN_STEP: f64 = 1e-300;

/// Plain gradient descent, optionally with Armijo backtracking. Stops when
/// the gradient norm drops below `grad_tol` or after `max_steps`.
pub fn gradient_descent<F>(init: Vec<f64>, mut f: F, settings: &OptimizerSettings) -> Result<Descent>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(settings.step_size.is_finite() && settings.step_size >= 0.0) {
        return input_err("step size must be finite and non-negative");
    }
    let mut params = init;
    let (mut loss, mut grad) = f(&params)?;
    let mut step = settings.step_size;
    let mut trace = vec![loss];
    let mut steps = 0;
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut grad_norm = norm(&grad);
    while steps < settings.max_steps && grad_norm >= settings.grad_tol && step > 0.0 {
        let candidate: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - step * g).collect();
        let (c_loss, c_grad) = f(&candidate)?;
        if settings.backtracking {
            if c_loss <= loss - 1e-4 * step * grad_norm * grad_norm {
                step = (step * 2.0).min(MAX_STEP);
            } else {
                step *= 0.5;
                if step < MIN_STEP {
                    break;
                }
                continue;
            }
        }
        params = candidate;
        loss = c_loss;
        grad = c_grad;
        grad_norm = norm(&grad);
        steps += 1;
        trace.push(loss);
    }
    Ok(Descent {
        params,
        loss,
        grad_norm,
        steps,
        converged: grad_norm < settings.grad_tol,
        loss_trace: trace,
    })
}

fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn unflatten(flat: &[f64], counts: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(counts.len());
    let mut offset = 0;
    for &n in counts {
        out.push(flat[offset..offset + n].to_vec());
        offset += n;
    }
    out
}

/// A fitted softmax policy with optimizer diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub policy: SoftmaxPolicy,
    pub loss: f64,
    pub grad_norm: f64,
    pub steps: usize,
    pub converged: bool,
    pub loss_trace: Vec<f64>,
}

impl FitOutcome {
    /// Turns a non-converged fit into [`SppoError::NotConverged`].
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(SppoError::NotConverged {
                steps: self.steps,
                grad_norm: self.grad_norm,
                loss: self.loss,
            })
        }
    }

    /// A zero-step fit that returns `pi` unchanged.
    pub fn identity(pi: &TabularPolicy) -> Result<Self> {
        Ok(Self {
            policy: SoftmaxPolicy::from_tabular(pi)?,
            loss: 0.0,
            grad_norm: 0.0,
            steps: 0,
            converged: true,
            loss_trace: Vec::new(),
        })
    }

    fn from_descent(d: Descent, counts: &[usize]) -> Result<Self> {
        Ok(Self {
            policy: SoftmaxPolicy::new(unflatten(&d.params, counts))?,
            loss: d.loss,
            grad_norm: d.grad_norm,
            steps: d.steps,
            converged: d.converged,
            loss_trace: d.loss_trace,
        })
    }
}

/// Fits `π_{t+1}` by gradient descent on [`sppo_objective`], starting from
/// the logits of `π_t`. Non-convergence is reported through
/// [`FitOutcome::converged`] and the final gradient norm.
pub fn fit_iteration(
    pi_t: &TabularPolicy,
    dataset: &PreferenceDataset,
    target: &RegressionTarget,
    settings: &OptimizerSettings,
) -> Result<FitOutcome> {
    let init = SoftmaxPolicy::from_tabular(pi_t)?;
    let counts = init.counts();
    let d = gradient_descent(
        flatten(init.logits()),
        |p| {
            let theta = SoftmaxPolicy::new(unflatten(p, &counts))?;
            let r = sppo_objective(&theta, pi_t, dataset, target)?;
            Ok((r.loss, flatten(&r.grad)))
        },
        settings,
    )?;
    FitOutcome::from_descent(d, &counts)
}

/// Fits a softmax policy to pairwise triplets (iterative DPO/IPO/SPPO-pair)
/// with `π_ref` as both the anchor and the starting point.
pub fn fit_pairwise_policy(
    pi_ref: &TabularPolicy,
    triplets: &[PreferenceTriplet],
    loss: PairwiseLoss,
    eta: f64,
    settings: &OptimizerSettings,
) -> Result<FitOutcome> {
    let init = SoftmaxPolicy::from_tabular(pi_ref)?;
    let counts = init.counts();
    let d = gradient_descent(
        flatten(init.logits()),
        |p| {
            let theta = SoftmaxPolicy::new(unflatten(p, &counts))?;
            let r = pairwise_policy_objective(&theta, pi_ref, triplets, loss, eta)?;
            Ok((r.loss, flatten(&r.grad)))
        },
        settings,
    )?;
    FitOutcome::from_descent(d, &counts)
}

/// Gradient descent on an unconstrained log-ratio table.
pub fn descend_log_ratios(
    init: UnconstrainedLogRatio,
    triplets: &[PreferenceTriplet],
    loss: PairwiseLoss,
    settings: &OptimizerSettings,
) -> Result<(UnconstrainedLogRatio, Descent)> {
    let counts: Vec<usize> = init.values().iter().map(Vec::len).collect();
    let mut table = init.clone();
    let d = gradient_descent(
        flatten(init.values()),
        |p| {
            let t = UnconstrainedLogRatio::new(unflatten(p, &counts))?;
            let r = pairwise_table_objective(&t, triplets, loss)?;
            Ok((r.loss, flatten(&r.grad)))
        },
        settings,
    )?;
    for (dst, src) in table
        .values_mut()
        .iter_mut()
        .zip(unflatten(&d.params, &counts))
    {
        *dst = src;
    }
    Ok((table, d))
}

/// Largest relative error between an analytic gradient and central finite
/// differences, with relative error `|g − g_fd| / max(|g|, |g_fd|, 1e-8)`.
pub fn gradient_check<F>(f: F, params: &[f64], epsilon: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return input_err(format!("epsilon must lie in (0, 1e-3], got {epsilon}"));
    }
    let (_, analytic) = f(params);
    if analytic.len() != params.len() {
        return input_err("gradient length does not match parameter length");
    }
    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for i in 0..params.len() {
        probe[i] = params[i] + epsilon;
        let up = f(&probe).0;
        probe[i] = params[i] - epsilon;
        let down = f(&probe).0;
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * epsilon);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Both sides of the policy-gradient / square-loss identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradientEquivalence {
    /// `E[(r − η⁻¹ log(π_θ/π_ref) − b) ∇log π_θ]`.
    pub lhs: Vec<Vec<f64>>,
    /// `(η/2) E[−∇(r − η⁻¹ log(π_θ/π_ref) − b)²]` with the sampling
    /// distribution held fixed.
    pub rhs: Vec<Vec<f64>>,
    pub max_deviation: f64,
}

/// Shared advantage `A(y;x) = r − η⁻¹ log(π_θ/π_ref) − b` for every entry.
fn advantages(
    log_probs: &[Vec<f64>],
    pi_ref: &TabularPolicy,
    reward: &[Vec<f64>],
    baseline: &[f64],
    eta: f64,
) -> Vec<Vec<f64>> {
    log_probs
        .iter()
        .enumerate()
        .map(|(x, row)| {
            row.iter()
                .enumerate()
                .map(|(y, lp)| reward[x][y] - (lp - pi_ref.log_prob(x, y)) / eta - baseline[x])
                .collect()
        })
        .collect()
}

fn check_pg_inputs(
    theta: &SoftmaxPolicy,
    pi_ref: &TabularPolicy,
    reward: &[Vec<f64>],
    baseline: &[f64],
    eta: f64,
    weights: &PromptWeights,
) -> Result<()> {
    if !(eta.is_finite() && eta > 0.0) {
        return input_err("eta must be positive");
    }
    let counts = theta.counts();
    if pi_ref.counts() != counts
        || reward.len() != counts.len()
        || reward.iter().zip(&counts).any(|(r, &n)| r.len() != n)
        || baseline.len() != counts.len()
    {
        return input_err("θ, π_ref, reward and baseline must share a universe");
    }
    if pi_ref.log_rows().iter().flatten().any(|l| !l.is_finite()) {
        return Err(SppoError::Domain("π_ref must be fully supported".into()));
    }
    weights.check_len(counts.len())
}

/// The regularized objective `J(θ) = E_x E_{y∼π_θ}[r − η⁻¹ log(π_θ/π_ref)]`.
pub fn regularized_objective(
    theta: &SoftmaxPolicy,
    pi_ref: &TabularPolicy,
    reward: &[Vec<f64>],
    eta: f64,
    weights: &PromptWeights,
) -> Result<f64> {
    let zeros = vec![0.0; theta.num_prompts()];
    check_pg_inputs(theta, pi_ref, reward, &zeros, eta, weights)?;
    let (log_probs, probs) = softmax_rows(theta);
    let adv = advantages(&log_probs, pi_ref, reward, &zeros, eta);
    Ok(weights.expect(|x| stable_sum(probs[x].iter().zip(&adv[x]).map(|(p, a)| p * a))))
}

/// Stop-gradient square loss `S(θ) = E_x Σ_y w(y|x) A(y;x)²`, where the
/// weights `w` are the current `π_θ` treated as constants. Returns the value
/// and `∇S`.
pub fn stop_gradient_square_loss(
    theta: &SoftmaxPolicy,
    sampling: &TabularPolicy,
    pi_ref: &TabularPolicy,
    reward: &[Vec<f64>],
    baseline: &[f64],
    eta: f64,
    weights: &PromptWeights,
) -> Result<LossReport> {
    check_pg_inputs(theta, pi_ref, reward, baseline, eta, weights)?;
    if sampling.counts() != theta.counts() {
        return input_err("sampling policy spans a different universe");
    }
    let (log_probs, probs) = softmax_rows(theta);
    let adv = advantages(&log_probs, pi_ref, reward, baseline, eta);
    let loss = weights.expect(|x| {
        stable_sum(
            sampling
                .row(x)
                .iter()
                .zip(&adv[x])
                .map(|(w, a)| w * a * a),
        )
    });
    // ∂A_y/∂θ_j = −η⁻¹ (1[j = y] − π_j)
    let grad = (0..theta.num_prompts())
        .map(|x| {
            let w = sampling.row(x);
            let px = weights.get(x);
            let coeff: Vec<f64> = w.iter().zip(&adv[x]).map(|(w, a)| 2.0 * w * a).collect();
            let total = stable_sum(coeff.iter().copied());
            (0..coeff.len())
                .map(|j| -px * (coeff[j] - total * probs[x][j]) / eta)
                .collect()
        })
        .collect();
    Ok(LossReport {
        loss,
        grad,
        residuals: adv.into_iter().flatten().collect(),
    })
}

/// Enumerates the score-function gradient of `J` (left side) and the
/// constant-corrected square-loss gradient `(η/2)·(−∇S)` (right side).
pub fn policy_gradient_equivalence(
    theta: &SoftmaxPolicy,
    pi_ref: &TabularPolicy,
    reward: &[Vec<f64>],
    baseline: &[f64],
    eta: f64,
    weights: &PromptWeights,
) -> Result<PolicyGradientEquivalence> {
    check_pg_inputs(theta, pi_ref, reward, baseline, eta, weights)?;
    let (log_probs, probs) = softmax_rows(theta);
    let adv = advantages(&log_probs, pi_ref, reward, baseline, eta);
    // score function: ∇_θj log π(y) = 1[j = y] − π_j
    let lhs: Vec<Vec<f64>> = (0..theta.num_prompts())
        .map(|x| {
            let n = probs[x].len();
            (0..n)
                .map(|j| {
                    weights.get(x)
                        * stable_sum((0..n).map(|y| {
                            let score = if y == j { 1.0 } else { 0.0 } - probs[x][j];
                            probs[x][y] * adv[x][y] * score
                        }))
                })
                .collect()
        })
        .collect();
    let sampling = theta.realize();
    let square = stop_gradient_square_loss(theta, &sampling, pi_ref, reward, baseline, eta, weights)?;
    let rhs: Vec<Vec<f64>> = square
        .grad
        .iter()
        .map(|row| row.iter().map(|g| -0.5 * eta * g).collect())
        .collect();
    let max_deviation = lhs
        .iter()
        .flatten()
        .zip(rhs.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(PolicyGradientEquivalence {
        lhs,
        rhs,
        max_deviation,
    })
}
