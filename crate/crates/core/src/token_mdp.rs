//! Fixed-horizon token MDP with deterministic transitions: soft backup of
//! `Q*`/`V*`, the optimal token policy, and enumeration checks of the value,
//! sequence-factorization and Bradley–Terry identities.
//!
//! States are prefixes. A prefix of length `h` over a vocabulary of size `V`
//! is numbered by reading its tokens as a big-endian base-`V` integer, so the
//! child of `(h, s)` under token `a` is `(h + 1, s·V + a)` and complete
//! sequences are numbered `0..V^H`.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result, SppoError};
use crate::numeric::{log_sum_exp, sigmoid, stable_sum};
use crate::policy::log_softmax;
use crate::rng::seeded;

pub const DEFAULT_TREE_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenMdp {
    vocab: usize,
    horizon: usize,
    eta: f64,
    /// Row-major `log π_ref(a | s)` over internal states in level order.
    log_ref: Vec<f64>,
    /// Terminal reward per complete sequence.
    rewards: Vec<f64>,
    offsets: Vec<usize>,
}

/// Reference policy as given in a specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RefSpec {
    Named(String),
    /// One probability row per internal state, in level order.
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RewardSpec {
    Table(Vec<f64>),
    /// Standard normal rewards drawn from this seed.
    Generated { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMdpFile {
    pub vocab: usize,
    pub horizon: usize,
    pub eta: f64,
    pub pi_ref: RefSpec,
    pub reward: RewardSpec,
    #[serde(default)]
    pub cap: Option<usize>,
}

fn checked_size(vocab: usize, horizon: usize, cap: usize) -> Result<usize> {
    if vocab == 0 || horizon == 0 {
        return input_err("vocab and horizon must be at least 1");
    }
    match u32::try_from(horizon).ok().and_then(|h| vocab.checked_pow(h)) {
        Some(n) if n <= cap => Ok(n),
        _ => Err(SppoError::Resource(format!(
            "prefix tree with {vocab}^{horizon} leaves exceeds the cap of {cap}"
        ))),
    }
}

impl TokenMdp {
    /// Builds an MDP from explicit log-reference rows. The tree size is
    /// checked against [`DEFAULT_TREE_CAP`].
    pub fn new(
        vocab: usize,
        horizon: usize,
        eta: f64,
        ref_rows: Vec<Vec<f64>>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        Self::with_cap(vocab, horizon, eta, Some(ref_rows), rewards, DEFAULT_TREE_CAP)
    }

    /// Uniform `π_ref`.
    pub fn uniform(vocab: usize, horizon: usize, eta: f64, rewards: Vec<f64>) -> Result<Self> {
        Self::with_cap(vocab, horizon, eta, None, rewards, DEFAULT_TREE_CAP)
    }

    /// `ref_rows` are probability rows, one per internal state; `None` means
    /// uniform.
    pub fn with_cap(
        vocab: usize,
        horizon: usize,
        eta: f64,
        ref_rows: Option<Vec<Vec<f64>>>,
        rewards: Vec<f64>,
        cap: usize,
    ) -> Result<Self> {
        let leaves = checked_size(vocab, horizon, cap)?;
        if !(eta.is_finite() && eta > 0.0) {
            return input_err(format!("eta must be positive and finite, got {eta}"));
        }
        if rewards.len() != leaves {
            return input_err(format!("{} rewards for {leaves} sequences", rewards.len()));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return input_err("rewards must be finite");
        }
        let mut offsets = Vec::with_capacity(horizon + 1);
        let mut total = 0;
        let mut width = 1;
        for _ in 0..=horizon {
            offsets.push(total);
            total += width;
            width *= vocab;
        }
        let internal = offsets[horizon];
        let log_ref = match ref_rows {
            None => vec![-(vocab as f64).ln(); internal * vocab],
            Some(rows) => {
                if rows.len() != internal {
                    return input_err(format!(
                        "{} reference rows for {internal} states",
                        rows.len()
                    ));
                }
                let mut flat = Vec::with_capacity(internal * vocab);
                for (i, row) in rows.iter().enumerate() {
                    if row.len() != vocab {
                        return input_err(format!("reference row {i} has {} entries", row.len()));
                    }
                    if row.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
                        return input_err(format!("reference row {i} lacks full support"));
                    }
                    let sum = stable_sum(row.iter().copied());
                    if (sum - 1.0).abs() > 1e-12 {
                        return input_err(format!("reference row {i} sums to {sum}"));
                    }
                    flat.extend(row.iter().map(|p| p.ln()));
                }
                flat
            }
        };
        Ok(Self {
            vocab,
            horizon,
            eta,
            log_ref,
            rewards,
            offsets,
        })
    }

    /// Random instance: reference rows are softmaxes of standard normal
    /// logits, rewards are standard normal.
    pub fn random(vocab: usize, horizon: usize, eta: f64, seed: u64) -> Result<Self> {
        let leaves = checked_size(vocab, horizon, DEFAULT_TREE_CAP)?;
        let internal: usize = (0..horizon).map(|h| vocab.pow(h as u32)).sum();
        let mut rng = seeded(seed);
        let rows = (0..internal)
            .map(|_| {
                let logits: Vec<f64> = (0..vocab).map(|_| rng.sample(StandardNormal)).collect();
                log_softmax(&logits).into_iter().map(f64::exp).collect()
            })
            .collect();
        let rewards = (0..leaves).map(|_| rng.sample(StandardNormal)).collect();
        Self::new(vocab, horizon, eta, rows, rewards)
    }

    pub fn from_file(file: &TokenMdpFile) -> Result<Self> {
        let cap = file.cap.unwrap_or(DEFAULT_TREE_CAP);
        let leaves = checked_size(file.vocab, file.horizon, cap)?;
        let rows = match &file.pi_ref {
            RefSpec::Named(n) if n == "uniform" => None,
            RefSpec::Named(n) => return input_err(format!("unknown reference policy `{n}`")),
            RefSpec::Rows(r) => Some(r.clone()),
        };
        let rewards = match &file.reward {
            RewardSpec::Table(r) => r.clone(),
            RewardSpec::Generated { seed } => {
                let mut rng = seeded(*seed);
                (0..leaves).map(|_| rng.sample(StandardNormal)).collect()
            }
        };
        Self::with_cap(file.vocab, file.horizon, file.eta, rows, rewards, cap)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn num_sequences(&self) -> usize {
        self.rewards.len()
    }

    pub fn num_internal_states(&self) -> usize {
        self.offsets[self.horizon]
    }

    /// Same tree and reference policy with every reward shifted by `c`.
    pub fn with_reward_shift(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.rewards.iter_mut().for_each(|r| *r += c);
        out
    }

    /// Same tree with a different `η`.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        if !(eta.is_finite() && eta > 0.0) {
            return input_err(format!("eta must be positive and finite, got {eta}"));
        }
        Ok(Self { eta, ..self.clone() })
    }

    fn state(&self, h: usize, s: usize) -> usize {
        self.offsets[h] + s
    }

    pub fn log_ref(&self, h: usize, s: usize) -> &[f64] {
        let i = self.state(h, s) * self.vocab;
        &self.log_ref[i..i + self.vocab]
    }

    /// Tokens of sequence number `idx`.
    pub fn decode(&self, idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.horizon];
        let mut rest = idx;
        for slot in out.iter_mut().rev() {
            *slot = rest % self.vocab;
            rest /= self.vocab;
        }
        out
    }

    pub fn encode(&self, seq: &[usize]) -> Result<usize> {
        if seq.len() != self.horizon {
            return input_err(format!(
                "sequence of length {} for horizon {}",
                seq.len(),
                self.horizon
            ));
        }
        if let Some(a) = seq.iter().find(|&&a| a >= self.vocab) {
            return input_err(format!("token {a} outside vocabulary of size {}", self.vocab));
        }
        Ok(seq.iter().fold(0, |acc, &a| acc * self.vocab + a))
    }

    /// `log π_ref(y | x)` for sequence number `idx`.
    pub fn sequence_log_ref(&self, idx: usize) -> f64 {
        path_sum(self, idx, |h, s, a| self.log_ref(h, s)[a])
    }

    /// Sequence-level Gibbs distribution `π_ref(y) e^{η r(y)} / Z` in log-space.
    pub fn gibbs_log_probs(&self) -> Vec<f64> {
        let terms: Vec<f64> = (0..self.num_sequences())
            .map(|i| self.sequence_log_ref(i) + self.eta * self.rewards[i])
            .collect();
        let log_z = log_sum_exp(&terms);
        terms.into_iter().map(|t| t - log_z).collect()
    }
}

/// `Σ_h f(h, s_h, a_h)` along the path of sequence `idx`.
fn path_sum(mdp: &TokenMdp, idx: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> f64 {
    let seq = mdp.decode(idx);
    let mut s = 0;
    let mut acc = 0.0;
    for (h, &a) in seq.iter().enumerate() {
        acc += f(h, s, a);
        s = s * mdp.vocab + a;
    }
    acc
}

/// `Q*` per internal state and token, `V*` per state including leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftValueTables {
    vocab: usize,
    offsets: Vec<usize>,
    q: Vec<f64>,
    v: Vec<f64>,
}

impl SoftValueTables {
    pub fn q(&self, h: usize, s: usize) -> &[f64] {
        let i = (self.offsets[h] + s) * self.vocab;
        &self.q[i..i + self.vocab]
    }

    /// `V*(s)` for a prefix of length `h ≤ H`.
    pub fn v(&self, h: usize, s: usize) -> f64 {
        self.v[self.offsets[h] + s]
    }

    /// `V*(s_1)`.
    pub fn v_root(&self) -> f64 {
        self.v[0]
    }
}

/// Backward induction
/// `Q*(s_h, a) = η⁻¹ log π_ref(a|s_h) + V*(s_{h+1})`,
/// `V*(s_h) = η⁻¹ log Σ_a exp(η Q*(s_h, a))`, `V*(s_{H+1}) = r`.
pub fn soft_backup(mdp: &TokenMdp) -> SoftValueTables {
    let (vocab, horizon, eta) = (mdp.vocab, mdp.horizon, mdp.eta);
    let total = mdp.offsets[horizon] + mdp.num_sequences();
    let mut v = vec![0.0; total];
    v[mdp.offsets[horizon]..].copy_from_slice(&mdp.rewards);
    let mut q = vec![0.0; mdp.offsets[horizon] * vocab];
    let mut terms = vec![0.0; vocab];
    for h in (0..horizon).rev() {
        let width = mdp.offsets[h + 1] - mdp.offsets[h];
        for s in 0..width {
            let state = mdp.offsets[h] + s;
            let log_ref = mdp.log_ref(h, s);
            for a in 0..vocab {
                let child = v[mdp.offsets[h + 1] + s * vocab + a];
                q[state * vocab + a] = log_ref[a] / eta + child;
                // η Q*, formed without the large η⁻¹ log π_ref term when η is small
                terms[a] = log_ref[a] + eta * child;
            }
            v[state] = log_sum_exp(&terms) / eta;
        }
    }
    SoftValueTables {
        vocab,
        offsets: mdp.offsets.clone(),
        q,
        v,
    }
}

/// Largest `|V*(s) − η⁻¹ lse(η Q*(s, ·))|` over internal states.
pub fn backup_consistency(mdp: &TokenMdp, tables: &SoftValueTables) -> f64 {
    let eta = mdp.eta;
    let mut worst: f64 = 0.0;
    for h in 0..mdp.horizon {
        for s in 0..mdp.offsets[h + 1] - mdp.offsets[h] {
            let scaled: Vec<f64> = tables.q(h, s).iter().map(|q| eta * q).collect();
            worst = worst.max((tables.v(h, s) - log_sum_exp(&scaled) / eta).abs());
        }
    }
    worst
}

/// Relative deviation between `exp(η V*(s_1))` and
/// `Σ_y π_ref(y|x) exp(η r(y;x))`, the latter by full enumeration.
pub fn verify_value_identity(mdp: &TokenMdp, tables: &SoftValueTables) -> f64 {
    let terms: Vec<f64> = (0..mdp.num_sequences())
        .map(|i| mdp.sequence_log_ref(i) + mdp.eta * mdp.rewards[i])
        .collect();
    let log_sum = log_sum_exp(&terms);
    (mdp.eta * tables.v_root() - log_sum).exp_m1().abs()
}

/// A token-level policy on the prefix tree of a [`TokenMdp`].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPolicy {
    vocab: usize,
    horizon: usize,
    offsets: Vec<usize>,
    log_probs: Vec<f64>,
}

impl TokenPolicy {
    /// Softmax of per-state logits laid out like the MDP's reference rows.
    pub fn from_logits(mdp: &TokenMdp, logits: &[f64]) -> Result<Self> {
        let n = mdp.num_internal_states() * mdp.vocab;
        if logits.len() != n {
            return input_err(format!("{} logits for {n} state-token pairs", logits.len()));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return input_err("logits must be finite");
        }
        let log_probs = logits.chunks(mdp.vocab).flat_map(log_softmax).collect();
        Ok(Self {
            vocab: mdp.vocab,
            horizon: mdp.horizon,
            offsets: mdp.offsets.clone(),
            log_probs,
        })
    }

    /// The reference policy of `mdp`.
    pub fn reference(mdp: &TokenMdp) -> Self {
        Self {
            vocab: mdp.vocab,
            horizon: mdp.horizon,
            offsets: mdp.offsets.clone(),
            log_probs: mdp.log_ref.clone(),
        }
    }

    pub fn log_row(&self, h: usize, s: usize) -> &[f64] {
        let i = (self.offsets[h] + s) * self.vocab;
        &self.log_probs[i..i + self.vocab]
    }

    /// Flat log-probabilities, usable as logits.
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    /// `Σ_h log π(a_h | s_h)` along sequence number `idx`.
    pub fn sequence_log_prob(&self, mdp: &TokenMdp, idx: usize) -> f64 {
        path_sum(mdp, idx, |h, s, a| self.log_row(h, s)[a])
    }

    /// Largest `|Σ_a π(a|s) − 1|` over states.
    pub fn max_row_error(&self) -> f64 {
        self.log_probs
            .chunks(self.vocab)
            .map(|r| (stable_sum(r.iter().map(|l| l.exp())) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    fn check_shape(&self, mdp: &TokenMdp) -> Result<()> {
        if self.vocab != mdp.vocab || self.horizon != mdp.horizon {
            return input_err("token policy and MDP have different shapes");
        }
        Ok(())
    }
}

/// `log π*(a|s) = η (Q*(s, a) − V*(s))`, formed as
/// `log π_ref(a|s) + η V*(s') − lse_a(…)` so rows normalize exactly.
pub fn optimal_token_policy(mdp: &TokenMdp, tables: &SoftValueTables) -> TokenPolicy {
    let vocab = mdp.vocab;
    let mut log_probs = Vec::with_capacity(mdp.log_ref.len());
    for h in 0..mdp.horizon {
        for s in 0..mdp.offsets[h + 1] - mdp.offsets[h] {
            let terms: Vec<f64> = mdp
                .log_ref(h, s)
                .iter()
                .enumerate()
                .map(|(a, lr)| lr + mdp.eta * tables.v(h + 1, s * vocab + a))
                .collect();
            log_probs.extend(log_softmax(&terms));
        }
    }
    TokenPolicy {
        vocab,
        horizon: mdp.horizon,
        offsets: mdp.offsets.clone(),
        log_probs,
    }
}

/// Largest `|∏_h π(a_h|s_h) − π_ref(y) e^{η r(y)} / Z|` over all sequences.
pub fn sequence_equivalence(mdp: &TokenMdp, policy: &TokenPolicy) -> Result<f64> {
    policy.check_shape(mdp)?;
    Ok(mdp
        .gibbs_log_probs()
        .iter()
        .enumerate()
        .map(|(i, g)| (policy.sequence_log_prob(mdp, i).exp() - g.exp()).abs())
        .fold(0.0, f64::max))
}

/// `σ(β Σ_h log(π*/π_ref)(y_w) − β Σ_h log(π*/π_ref)(y_l))` with `β = 1/η`.
pub fn token_bt_preference(
    mdp: &TokenMdp,
    tables: &SoftValueTables,
    y_w: &[usize],
    y_l: &[usize],
) -> Result<f64> {
    let (w, l) = (mdp.encode(y_w)?, mdp.encode(y_l)?);
    let star = optimal_token_policy(mdp, tables);
    let ratio = |idx| {
        path_sum(mdp, idx, |h, s, a| star.log_row(h, s)[a] - mdp.log_ref(h, s)[a]) / mdp.eta
    };
    Ok(sigmoid(ratio(w) - ratio(l)))
}

/// Value and gradient with respect to the flat token logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLossReport {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `E_{y∼π_t}(Σ_h log(π_θ(a_h|s_h)/π*(a_h|s_h)))²` by enumeration, where the
/// MDP's reference policy plays `π_t` and its rewards are win rates.
pub fn sppo_token_loss(
    theta_logits: &[f64],
    mdp: &TokenMdp,
    pi_star: &TokenPolicy,
) -> Result<TokenLossReport> {
    pi_star.check_shape(mdp)?;
    let theta = TokenPolicy::from_logits(mdp, theta_logits)?;
    let vocab = mdp.vocab;
    let mut losses = Vec::with_capacity(mdp.num_sequences());
    let mut grad = vec![0.0; theta_logits.len()];
    for idx in 0..mdp.num_sequences() {
        let weight = mdp.sequence_log_ref(idx).exp();
        let r = path_sum(mdp, idx, |h, s, a| theta.log_row(h, s)[a] - pi_star.log_row(h, s)[a]);
        losses.push(weight * r * r);
        // ∂/∂logit(s, b) of Σ_h log π_θ(a_h|s_h) is 1[b = a_h] − π_θ(b|s_h)
        let scale = 2.0 * weight * r;
        let seq = mdp.decode(idx);
        let mut s = 0;
        for (h, &a) in seq.iter().enumerate() {
            let base = (mdp.offsets[h] + s) * vocab;
            for (b, lp) in theta.log_row(h, s).iter().enumerate() {
                grad[base + b] -= scale * lp.exp();
            }
            grad[base + a] += scale;
            s = s * vocab + a;
        }
    }
    Ok(TokenLossReport {
        loss: stable_sum(losses),
        grad,
    })
}

/// The sequence-level square loss
/// `E_{y∼π_t}(log(π_θ(y)/π_t(y)) − (η r(y) − log Z))²` with exact `log Z`.
pub fn sequence_sppo_loss(theta_logits: &[f64], mdp: &TokenMdp) -> Result<f64> {
    let theta = TokenPolicy::from_logits(mdp, theta_logits)?;
    let terms: Vec<f64> = (0..mdp.num_sequences())
        .map(|i| mdp.sequence_log_ref(i) + mdp.eta * mdp.rewards[i])
        .collect();
    let log_z = log_sum_exp(&terms);
    Ok(stable_sum((0..mdp.num_sequences()).map(|i| {
        let lt = mdp.sequence_log_ref(i);
        let r = theta.sequence_log_prob(mdp, i) - lt - (mdp.eta * mdp.rewards[i] - log_z);
        lt.exp() * r * r
    })))
}

/// `KL(π_θ ‖ π*)` over complete sequences.
pub fn sequence_kl(theta_logits: &[f64], mdp: &TokenMdp, pi_star: &TokenPolicy) -> Result<f64> {
    pi_star.check_shape(mdp)?;
    let theta = TokenPolicy::from_logits(mdp, theta_logits)?;
    Ok(stable_sum((0..mdp.num_sequences()).map(|i| {
        let lp = theta.sequence_log_prob(mdp, i);
        lp.exp() * (lp - pi_star.sequence_log_prob(mdp, i))
    })))
}

/// The two policy-gradient forms of `∇_θ KL(π_θ ‖ π*)`, both with
/// expectations under `π_θ` held fixed:
/// `score = E[R ∇ log π_θ(y)]` and `square = E[∇ R²]`, where
/// `R = Σ_h log(π_θ/π*)`. The true gradient equals `score`, which is
/// `square / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct KlGradientForms {
    pub score: Vec<f64>,
    pub square: Vec<f64>,
}

pub fn kl_gradient_forms(
    theta_logits: &[f64],
    mdp: &TokenMdp,
    pi_star: &TokenPolicy,
) -> Result<KlGradientForms> {
    pi_star.check_shape(mdp)?;
    let theta = TokenPolicy::from_logits(mdp, theta_logits)?;
    let vocab = mdp.vocab;
    let mut score = vec![0.0; theta_logits.len()];
    let mut square = vec![0.0; theta_logits.len()];
    for idx in 0..mdp.num_sequences() {
        let lp = theta.sequence_log_prob(mdp, idx);
        let weight = lp.exp();
        let r = lp - pi_star.sequence_log_prob(mdp, idx);
        let seq = mdp.decode(idx);
        let mut s = 0;
        for (h, &a) in seq.iter().enumerate() {
            let base = (mdp.offsets[h] + s) * vocab;
            for (b, l) in theta.log_row(h, s).iter().enumerate() {
                let d = f64::from(u8::from(b == a)) - l.exp();
                score[base + b] += weight * r * d;
                square[base + b] += weight * 2.0 * r * d;
            }
            s = s * vocab + a;
        }
    }
    Ok(KlGradientForms { score, square })
}
