//! Preference oracles and win-rate quantities.
//!
//! An oracle answers `P(y ≻ y' | x)` for responses of a prompt. Three variants
//! are supported: an explicit (possibly intransitive) probability matrix, a
//! Bradley–Terry reward table, and an antisymmetric relative-reward table
//! whose sigmoid gives the probability.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result, SppoError};
use crate::numeric::{sigmoid, stable_sum};
use crate::policy::TabularPolicy;

/// Antisymmetry tolerance applied when a matrix is loaded.
pub const ANTISYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PromptId(pub usize);

/// Number of responses per prompt, optionally with a token sequence per
/// response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseUniverse {
    counts: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<Vec<Vec<usize>>>>,
}

impl ResponseUniverse {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return input_err("every prompt needs at least one response");
        }
        Ok(Self {
            counts,
            tokens: None,
        })
    }

    pub fn with_tokens(mut self, tokens: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        if tokens.len() != self.counts.len()
            || tokens.iter().zip(&self.counts).any(|(t, &n)| t.len() != n)
        {
            return input_err("token table must list one sequence per response");
        }
        self.tokens = Some(tokens);
        Ok(self)
    }

    pub fn num_prompts(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, x: PromptId) -> usize {
        self.counts[x.0]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn tokens(&self, x: PromptId, y: usize) -> Option<&[usize]> {
        self.tokens.as_ref().map(|t| t[x.0][y].as_slice())
    }
}

/// Which family an oracle belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    GeneralMatrix,
    BradleyTerry,
    RelativeReward,
}

#[derive(Debug, Clone, PartialEq)]
struct Square {
    n: usize,
    data: Vec<f64>,
}

impl Square {
    fn from_rows(rows: &[Vec<f64>], x: usize) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return input_err(format!("prompt {x}: empty matrix"));
        }
        if rows.iter().any(|r| r.len() != n) {
            return input_err(format!("prompt {x}: matrix is not square"));
        }
        Ok(Self {
            n,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum OracleData {
    Matrix(Vec<Square>),
    BradleyTerry(Vec<Vec<f64>>),
    Relative(Vec<Square>),
}

/// Source of `P(y ≻ y' | x)`. Construction validates every invariant, so a
/// value of this type is always consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceOracle {
    data: OracleData,
}

impl PreferenceOracle {
    /// Per-prompt matrices with `M[i][j] = P(y_i ≻ y_j)`. Rejects entries
    /// outside `[0,1]`, diagonals other than 1/2, and
    /// `|M[i][j] + M[j][i] − 1| > 1e-12`.
    pub fn general_matrix(matrices: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if matrices.is_empty() {
            return input_err("oracle needs at least one prompt");
        }
        let mut out = Vec::with_capacity(matrices.len());
        for (x, rows) in matrices.iter().enumerate() {
            let m = Square::from_rows(rows, x)?;
            for i in 0..m.n {
                if (m.get(i, i) - 0.5).abs() > ANTISYMMETRY_TOL {
                    return input_err(format!("prompt {x}: M[{i}][{i}] = {} ≠ 1/2", m.get(i, i)));
                }
                for j in 0..m.n {
                    let v = m.get(i, j);
                    if !(0.0..=1.0).contains(&v) {
                        return input_err(format!("prompt {x}: M[{i}][{j}] = {v} outside [0,1]"));
                    }
                    let s = v + m.get(j, i);
                    if (s - 1.0).abs() > ANTISYMMETRY_TOL {
                        return input_err(format!(
                            "prompt {x}: M[{i}][{j}] + M[{j}][{i}] = {s} ≠ 1"
                        ));
                    }
                }
            }
            out.push(m);
        }
        Ok(Self {
            data: OracleData::Matrix(out),
        })
    }

    /// Per-prompt reward tables; `P(y ≻ y') = σ(r(y) − r(y'))`.
    pub fn bradley_terry(rewards: Vec<Vec<f64>>) -> Result<Self> {
        if rewards.is_empty() || rewards.iter().any(Vec::is_empty) {
            return input_err("every prompt needs at least one reward");
        }
        if rewards.iter().flatten().any(|r| !r.is_finite()) {
            return input_err("rewards must be finite");
        }
        Ok(Self {
            data: OracleData::BradleyTerry(rewards),
        })
    }

    /// Per-prompt antisymmetric score tables; `P(y ≻ y') = σ(s(y, y'))`.
    pub fn relative_reward(scores: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if scores.is_empty() {
            return input_err("oracle needs at least one prompt");
        }
        let mut out = Vec::with_capacity(scores.len());
        for (x, rows) in scores.iter().enumerate() {
            let m = Square::from_rows(rows, x)?;
            for i in 0..m.n {
                if m.get(i, i) != 0.0 {
                    return input_err(format!("prompt {x}: s({i},{i}) must be 0"));
                }
                for j in 0..m.n {
                    let v = m.get(i, j);
                    if !v.is_finite() {
                        return input_err(format!("prompt {x}: s({i},{j}) is not finite"));
                    }
                    if (v + m.get(j, i)).abs() > ANTISYMMETRY_TOL {
                        return input_err(format!("prompt {x}: s({i},{j}) ≠ −s({j},{i})"));
                    }
                }
            }
            out.push(m);
        }
        Ok(Self {
            data: OracleData::Relative(out),
        })
    }

    pub fn kind(&self) -> OracleKind {
        match self.data {
            OracleData::Matrix(_) => OracleKind::GeneralMatrix,
            OracleData::BradleyTerry(_) => OracleKind::BradleyTerry,
            OracleData::Relative(_) => OracleKind::RelativeReward,
        }
    }

    pub fn num_prompts(&self) -> usize {
        match &self.data {
            OracleData::Matrix(m) | OracleData::Relative(m) => m.len(),
            OracleData::BradleyTerry(r) => r.len(),
        }
    }

    pub fn num_responses(&self, x: PromptId) -> usize {
        match &self.data {
            OracleData::Matrix(m) | OracleData::Relative(m) => m[x.0].n,
            OracleData::BradleyTerry(r) => r[x.0].len(),
        }
    }

    pub fn counts(&self) -> Vec<usize> {
        (0..self.num_prompts())
            .map(|x| self.num_responses(PromptId(x)))
            .collect()
    }

    pub fn universe(&self) -> ResponseUniverse {
        ResponseUniverse {
            counts: self.counts(),
            tokens: None,
        }
    }

    pub fn check_prompt(&self, x: PromptId) -> Result<()> {
        if x.0 >= self.num_prompts() {
            return input_err(format!(
                "prompt {} out of range ({} prompts)",
                x.0,
                self.num_prompts()
            ));
        }
        Ok(())
    }

    fn check_response(&self, x: PromptId, y: usize) -> Result<()> {
        let n = self.num_responses(x);
        if y >= n {
            return input_err(format!("prompt {}: response {y} out of range (n = {n})", x.0));
        }
        Ok(())
    }

    /// Checks that a policy covers exactly this oracle's universe.
    pub fn check_policy(&self, pi: &TabularPolicy) -> Result<()> {
        if pi.counts() != self.counts() {
            return input_err("policy and oracle have different response universes");
        }
        Ok(())
    }

    /// Unchecked `P(a ≻ b | x)`.
    #[inline]
    pub(crate) fn prob(&self, x: usize, a: usize, b: usize) -> f64 {
        match &self.data {
            OracleData::Matrix(m) => m[x].get(a, b),
            OracleData::BradleyTerry(r) => sigmoid(r[x][a] - r[x][b]),
            OracleData::Relative(s) => sigmoid(s[x].get(a, b)),
        }
    }

    /// `P(y ≻ y2 | x)`.
    pub fn pref_prob(&self, x: PromptId, y: usize, y2: usize) -> Result<f64> {
        self.check_prompt(x)?;
        self.check_response(x, y)?;
        self.check_response(x, y2)?;
        Ok(self.prob(x.0, y, y2))
    }

    /// Full `n × n` preference matrix for prompt `x`, row-major.
    pub fn preference_matrix(&self, x: PromptId) -> Result<Vec<f64>> {
        self.check_prompt(x)?;
        let n = self.num_responses(x);
        Ok((0..n)
            .flat_map(|a| (0..n).map(move |b| (a, b)))
            .map(|(a, b)| self.prob(x.0, a, b))
            .collect())
    }

    /// Relative score `s(y, y2; x)`; only defined for the relative-reward variant.
    pub fn relative_score(&self, x: PromptId, y: usize, y2: usize) -> Result<f64> {
        self.check_prompt(x)?;
        self.check_response(x, y)?;
        self.check_response(x, y2)?;
        match &self.data {
            OracleData::Relative(s) => Ok(s[x.0].get(y, y2)),
            _ => Err(SppoError::Unsupported(
                "relative scores require a relative-reward oracle".into(),
            )),
        }
    }

    /// Reward table of a Bradley–Terry oracle.
    pub fn rewards(&self, x: PromptId) -> Result<&[f64]> {
        self.check_prompt(x)?;
        match &self.data {
            OracleData::BradleyTerry(r) => Ok(&r[x.0]),
            _ => Err(SppoError::Unsupported(
                "rewards are only defined for Bradley–Terry oracles".into(),
            )),
        }
    }

    /// Equivalent relative-reward oracle: `s = r(y) − r(y')` for Bradley–Terry,
    /// `s = logit M[y][y']` for interior matrices. Matrices with 0/1 entries
    /// have no finite score and are rejected.
    pub fn to_relative_reward(&self) -> Result<Self> {
        let scores = match &self.data {
            OracleData::Relative(_) => return Ok(self.clone()),
            OracleData::BradleyTerry(r) => r
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|a| row.iter().map(|b| a - b).collect())
                        .collect()
                })
                .collect(),
            OracleData::Matrix(ms) => {
                let mut out = Vec::with_capacity(ms.len());
                for (x, m) in ms.iter().enumerate() {
                    if m.data.iter().any(|&p| p <= 0.0 || p >= 1.0) {
                        return Err(SppoError::Domain(format!(
                            "prompt {x}: deterministic preferences have no finite relative score"
                        )));
                    }
                    let rows = m.rows();
                    let mut s: Vec<Vec<f64>> = rows
                        .iter()
                        .map(|row| row.iter().map(|p| (p / (1.0 - p)).ln()).collect())
                        .collect();
                    // enforce exact antisymmetry of the derived table
                    for i in 0..m.n {
                        s[i][i] = 0.0;
                        for j in 0..i {
                            s[i][j] = -s[j][i];
                        }
                    }
                    out.push(s);
                }
                out
            }
        };
        Self::relative_reward(scores)
    }

    /// `P(y ≻ π | x) = Σ_{y'} π(y'|x) P(y ≻ y' | x)`.
    pub fn win_rate_vs_policy(&self, x: PromptId, y: usize, pi: &TabularPolicy) -> Result<f64> {
        self.check_prompt(x)?;
        self.check_response(x, y)?;
        self.check_policy(pi)?;
        Ok(self.win_rate_unchecked(x.0, y, &pi.row(x.0)))
    }

    #[inline]
    pub(crate) fn win_rate_unchecked(&self, x: usize, y: usize, opponent: &[f64]) -> f64 {
        stable_sum(
            opponent
                .iter()
                .enumerate()
                .filter(|(_, &q)| q > 0.0)
                .map(|(y2, &q)| q * self.prob(x, y, y2)),
        )
    }

    /// Win rate of every response of prompt `x` against the distribution
    /// `opponent` (a probability row).
    pub(crate) fn win_rates_unchecked(&self, x: usize, opponent: &[f64]) -> Vec<f64> {
        (0..opponent.len())
            .map(|y| self.win_rate_unchecked(x, y, opponent))
            .collect()
    }

    /// `[P(y ≻ π | x)]_y` for every response of prompt `x`.
    pub fn win_rates(&self, x: PromptId, pi: &TabularPolicy) -> Result<Vec<f64>> {
        self.check_prompt(x)?;
        self.check_policy(pi)?;
        Ok(self.win_rates_unchecked(x.0, &pi.row(x.0)))
    }

    /// `P(π ≻ π2 | x)`.
    pub fn policy_vs_policy_at(
        &self,
        x: PromptId,
        pi: &TabularPolicy,
        pi2: &TabularPolicy,
    ) -> Result<f64> {
        self.check_prompt(x)?;
        self.check_policy(pi)?;
        self.check_policy(pi2)?;
        Ok(self.policy_vs_policy_unchecked(x.0, &pi.row(x.0), &pi2.row(x.0)))
    }

    pub(crate) fn policy_vs_policy_unchecked(&self, x: usize, p: &[f64], q: &[f64]) -> f64 {
        stable_sum(
            p.iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(y, &w)| w * self.win_rate_unchecked(x, y, q)),
        )
    }

    /// `P(π ≻ π2) = E_{x∼𝒳}[P(π ≻ π2 | x)]`.
    pub fn policy_vs_policy(
        &self,
        pi: &TabularPolicy,
        pi2: &TabularPolicy,
        weights: &PromptWeights,
    ) -> Result<f64> {
        self.check_policy(pi)?;
        self.check_policy(pi2)?;
        weights.check_len(self.num_prompts())?;
        Ok(weights.expect(|x| self.policy_vs_policy_unchecked(x, &pi.row(x), &pi2.row(x))))
    }

    /// `(1/K) Σ_k P(y ≻ y_k | x)`; a sample equal to `y` contributes 1/2.
    pub fn empirical_win_rate(
        &self,
        x: PromptId,
        y: usize,
        samples: &[usize],
    ) -> Result<WinRateEstimate> {
        if samples.is_empty() {
            return input_err("empirical win rate needs at least one sample");
        }
        self.check_prompt(x)?;
        self.check_response(x, y)?;
        for &s in samples {
            self.check_response(x, s)?;
        }
        let total = stable_sum(samples.iter().map(|&s| self.prob(x.0, y, s)));
        Ok(WinRateEstimate {
            value: (total / samples.len() as f64).clamp(0.0, 1.0),
            k: samples.len(),
            sample_ids: samples.to_vec(),
        })
    }

    /// Mean relative score `(1/K) Σ_k s(y, y_k; x)` of `y` against a batch.
    pub fn pairrm_score(&self, x: PromptId, y: usize, samples: &[usize]) -> Result<f64> {
        let OracleData::Relative(s) = &self.data else {
            return Err(SppoError::Unsupported(
                "pairrm_score requires a relative-reward oracle".into(),
            ));
        };
        if samples.is_empty() {
            return input_err("score needs at least one sample");
        }
        self.check_prompt(x)?;
        self.check_response(x, y)?;
        for &k in samples {
            self.check_response(x, k)?;
        }
        let m = &s[x.0];
        Ok(stable_sum(samples.iter().map(|&k| m.get(y, k))) / samples.len() as f64)
    }
}

/// `σ(s)`, the probability implied by a relative score.
pub fn relative_reward_prob(s: f64) -> Result<f64> {
    if !s.is_finite() {
        return input_err(format!("relative score must be finite, got {s}"));
    }
    Ok(sigmoid(s))
}

/// Winner and loser indices by highest and lowest score. Ties go to the lowest
/// index; when every score is equal the pair is `(0, 1)`.
pub fn select_winner_loser(scores: &[f64]) -> Result<(usize, usize)> {
    if scores.len() < 2 {
        return input_err("winner/loser selection needs at least two scores");
    }
    if scores.iter().any(|s| s.is_nan()) {
        return input_err("scores must not be NaN");
    }
    let mut best = 0;
    let mut worst = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
        if s < scores[worst] {
            worst = i;
        }
    }
    if best == worst {
        return Ok((0, 1));
    }
    Ok((best, worst))
}

/// Estimated win rate `P̂(y ≻ π_t | x)` together with the batch it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateEstimate {
    pub value: f64,
    pub k: usize,
    pub sample_ids: Vec<usize>,
}

/// Distribution over prompts; uniform unless configured.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptWeights {
    weights: Vec<f64>,
}

impl PromptWeights {
    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// Normalizes non-negative weights with a positive total.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return input_err("prompt weights must be finite and non-negative");
        }
        let total = stable_sum(weights.iter().copied());
        if total <= 0.0 {
            return input_err("prompt weights must have positive total");
        }
        Ok(Self {
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, x: usize) -> f64 {
        self.weights[x]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn check_len(&self, n: usize) -> Result<()> {
        if self.weights.len() != n {
            return input_err(format!(
                "{} prompt weights for {n} prompts",
                self.weights.len()
            ));
        }
        Ok(())
    }

    /// `Σ_x w(x) f(x)` with compensated summation; zero-weight prompts are skipped.
    pub fn expect(&self, mut f: impl FnMut(usize) -> f64) -> f64 {
        stable_sum(
            self.weights
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(x, &w)| w * f(x)),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "snake_case")]
enum OracleFileData {
    Matrix(Vec<Vec<Vec<f64>>>),
    BradleyTerry(Vec<Vec<f64>>),
    RelativeReward(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Serialize, Deserialize)]
struct GameFile {
    prompts: usize,
    responses_per_prompt: Vec<usize>,
    oracle: OracleFileData,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<Vec<Vec<usize>>>>,
}

/// A preference game: oracle, prompt distribution and response universe, as
/// stored in an oracle specification file.
#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub oracle: PreferenceOracle,
    pub weights: PromptWeights,
    pub universe: ResponseUniverse,
}

impl GameSpec {
    pub fn new(oracle: PreferenceOracle) -> Self {
        let weights = PromptWeights::uniform(oracle.num_prompts());
        let universe = oracle.universe();
        Self {
            oracle,
            weights,
            universe,
        }
    }

    pub fn with_weights(mut self, weights: PromptWeights) -> Result<Self> {
        weights.check_len(self.oracle.num_prompts())?;
        self.weights = weights;
        Ok(self)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: GameFile = serde_json::from_str(text)?;
        let oracle = match file.oracle {
            OracleFileData::Matrix(m) => PreferenceOracle::general_matrix(m)?,
            OracleFileData::BradleyTerry(r) => PreferenceOracle::bradley_terry(r)?,
            OracleFileData::RelativeReward(s) => PreferenceOracle::relative_reward(s)?,
        };
        if oracle.num_prompts() != file.prompts {
            return input_err(format!(
                "header declares {} prompts, oracle data has {}",
                file.prompts,
                oracle.num_prompts()
            ));
        }
        if oracle.counts() != file.responses_per_prompt {
            return input_err("responses_per_prompt does not match oracle data");
        }
        let mut universe = ResponseUniverse::new(file.responses_per_prompt)?;
        if let Some(tokens) = file.tokens {
            universe = universe.with_tokens(tokens)?;
        }
        let weights = match file.prompt_weights {
            Some(w) => PromptWeights::new(w)?,
            None => PromptWeights::uniform(oracle.num_prompts()),
        };
        weights.check_len(oracle.num_prompts())?;
        Ok(Self {
            oracle,
            weights,
            universe,
        })
    }

    pub fn to_json_string(&self) -> Result<String> {
        let oracle = match &self.oracle.data {
            OracleData::Matrix(m) => OracleFileData::Matrix(m.iter().map(Square::rows).collect()),
            OracleData::BradleyTerry(r) => OracleFileData::BradleyTerry(r.clone()),
            OracleData::Relative(s) => {
                OracleFileData::RelativeReward(s.iter().map(Square::rows).collect())
            }
        };
        let n = self.oracle.num_prompts();
        let uniform = self.weights == PromptWeights::uniform(n);
        let file = GameFile {
            prompts: n,
            responses_per_prompt: self.oracle.counts(),
            oracle,
            prompt_weights: (!uniform).then(|| self.weights.as_slice().to_vec()),
            tokens: self.universe.tokens.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}
