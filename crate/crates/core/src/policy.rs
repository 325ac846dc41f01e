//! Policy representations: exact tabular distributions (held in log-space),
//! softmax-parameterized policies, uniform mixtures of snapshots and
//! unconstrained log-ratio tables.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{input_err, Result, SppoError};
use crate::numeric::{log_mean_exp, log_sum_exp, stable_sum};
use crate::rng::DrawKey;

/// Rows must normalize to within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Per-prompt probability rows over a finite response universe.
///
/// Rows are stored as log-probabilities so that mass far below the `f64`
/// underflow threshold is never truncated. Zero-probability responses are
/// stored as `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    log_probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    /// Build from probability rows. Entries must be non-negative and every
    /// row must sum to one within [`ROW_SUM_TOL`].
    pub fn from_probs(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return input_err("policy needs at least one prompt");
        }
        let mut log_probs = Vec::with_capacity(rows.len());
        for (x, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return input_err(format!("prompt {x}: empty response row"));
            }
            if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
                return input_err(format!("prompt {x}: invalid probability {p}"));
            }
            let total = stable_sum(row.iter().copied());
            if (total - 1.0).abs() > ROW_SUM_TOL {
                return input_err(format!("prompt {x}: row sums to {total}, not 1"));
            }
            log_probs.push(row.iter().map(|p| p.ln()).collect());
        }
        Ok(Self { log_probs })
    }

    /// Build from log-probability rows; each row's log-sum-exp must be 0
    /// within [`ROW_SUM_TOL`].
    pub fn from_log_probs(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return input_err("policy needs at least one prompt");
        }
        for (x, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return input_err(format!("prompt {x}: empty response row"));
            }
            if row.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
                return input_err(format!("prompt {x}: log-probabilities must be < +inf"));
            }
            let lse = log_sum_exp(row);
            if lse.abs() > ROW_SUM_TOL {
                return input_err(format!("prompt {x}: log row normalizes to {lse}, not 0"));
            }
        }
        Ok(Self { log_probs: rows })
    }

    /// Normalizes each row of unnormalized log-weights.
    pub fn from_log_weights(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut out = Vec::with_capacity(rows.len());
        for (x, row) in rows.into_iter().enumerate() {
            let lse = log_sum_exp(&row);
            if !lse.is_finite() || row.iter().any(|l| l.is_nan()) {
                return input_err(format!("prompt {x}: log-weights cannot be normalized"));
            }
            out.push(row.into_iter().map(|l| l - lse).collect());
        }
        Self::from_log_probs(out)
    }

    pub(crate) fn from_log_probs_unchecked(rows: Vec<Vec<f64>>) -> Self {
        Self { log_probs: rows }
    }

    pub fn uniform(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return input_err("every prompt needs at least one response");
        }
        Ok(Self {
            log_probs: counts
                .iter()
                .map(|&n| vec![-(n as f64).ln(); n])
                .collect(),
        })
    }

    /// Point mass on `ids[x]` for every prompt `x`.
    pub fn point_mass(counts: &[usize], ids: &[usize]) -> Result<Self> {
        if counts.len() != ids.len() {
            return input_err("one response id per prompt required");
        }
        let mut rows = Vec::with_capacity(counts.len());
        for (x, (&n, &id)) in counts.iter().zip(ids).enumerate() {
            if id >= n {
                return input_err(format!("prompt {x}: response {id} out of range (n = {n})"));
            }
            let mut row = vec![f64::NEG_INFINITY; n];
            row[id] = 0.0;
            rows.push(row);
        }
        Ok(Self { log_probs: rows })
    }

    pub fn num_prompts(&self) -> usize {
        self.log_probs.len()
    }

    pub fn num_responses(&self, x: usize) -> usize {
        self.log_probs[x].len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.log_probs.iter().map(Vec::len).collect()
    }

    pub fn same_universe(&self, other: &TabularPolicy) -> bool {
        self.log_probs.len() == other.log_probs.len()
            && self
                .log_probs
                .iter()
                .zip(&other.log_probs)
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn log_row(&self, x: usize) -> &[f64] {
        &self.log_probs[x]
    }

    pub fn log_rows(&self) -> &[Vec<f64>] {
        &self.log_probs
    }

    /// Materialized probability row.
    pub fn row(&self, x: usize) -> Vec<f64> {
        self.log_probs[x].iter().map(|l| l.exp()).collect()
    }

    pub fn prob(&self, x: usize, y: usize) -> f64 {
        self.log_probs[x][y].exp()
    }

    pub fn log_prob(&self, x: usize, y: usize) -> f64 {
        self.log_probs[x][y]
    }

    pub(crate) fn check_prompt(&self, x: usize) -> Result<()> {
        if x >= self.num_prompts() {
            return input_err(format!(
                "prompt {x} out of range ({} prompts)",
                self.num_prompts()
            ));
        }
        Ok(())
    }

    /// Total-variation distance between the rows of two policies at prompt `x`.
    pub fn total_variation(&self, other: &TabularPolicy, x: usize) -> f64 {
        0.5 * stable_sum(
            self.row(x)
                .iter()
                .zip(other.row(x))
                .map(|(p, q)| (p - q).abs()),
        )
    }

    /// Largest per-prompt total-variation distance.
    pub fn max_total_variation(&self, other: &TabularPolicy) -> f64 {
        (0..self.num_prompts())
            .map(|x| self.total_variation(other, x))
            .fold(0.0, f64::max)
    }

    /// `KL(self(·|x) ‖ other(·|x))`, computed in log-space.
    pub fn kl_to(&self, other: &TabularPolicy, x: usize) -> Result<f64> {
        kl_divergence_log(&self.log_probs[x], &other.log_probs[x])
    }

    /// Draws `k` i.i.d. responses for prompt `x` by inverse CDF. Draw `i` uses
    /// the address `key.with_draw(key.draw + i)`.
    pub fn sample_responses(&self, x: usize, k: usize, key: DrawKey) -> Result<Vec<usize>> {
        if k == 0 {
            return input_err("sample count must be at least 1");
        }
        self.check_prompt(x)?;
        let row = self.row(x);
        let total: f64 = row.iter().sum();
        Ok((0..k as u64)
            .map(|i| inverse_cdf(&row, total, key.with_draw(key.draw + i).uniform()))
            .collect())
    }

    /// Serializes as a plain-text snapshot with 17 significant digits per
    /// log-probability, which round-trips exactly.
    pub fn to_snapshot_string(&self) -> String {
        let mut out = String::from("sppo-policy-snapshot v1\n");
        let _ = writeln!(out, "prompts {}", self.num_prompts());
        for (x, row) in self.log_probs.iter().enumerate() {
            let _ = write!(out, "{x} {}", row.len());
            for l in row {
                if *l == f64::NEG_INFINITY {
                    out.push_str(" -inf");
                } else {
                    let _ = write!(out, " {l:.16e}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_snapshot_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == "sppo-policy-snapshot v1" => {}
            other => return Err(SppoError::Parse(format!("bad snapshot header {other:?}"))),
        }
        let n_prompts: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("prompts "))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| SppoError::Parse("missing `prompts N` line".into()))?;
        let mut rows = Vec::with_capacity(n_prompts);
        for (expected, line) in lines.enumerate() {
            let mut fields = line.split_whitespace();
            let parse_usize = |f: Option<&str>| -> Result<usize> {
                f.and_then(|v| v.parse().ok())
                    .ok_or_else(|| SppoError::Parse(format!("bad row header in {line:?}")))
            };
            let x = parse_usize(fields.next())?;
            let n = parse_usize(fields.next())?;
            if x != expected {
                return Err(SppoError::Parse(format!("rows out of order at prompt {x}")));
            }
            let row = fields
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| SppoError::Parse(format!("{v:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != n {
                return Err(SppoError::Parse(format!(
                    "prompt {x}: expected {n} entries, found {}",
                    row.len()
                )));
            }
            rows.push(row);
        }
        if rows.len() != n_prompts {
            return Err(SppoError::Parse(format!(
                "expected {n_prompts} prompt rows, found {}",
                rows.len()
            )));
        }
        Self::from_log_probs(rows)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_snapshot_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_snapshot_str(&std::fs::read_to_string(path)?)
    }
}

fn inverse_cdf(row: &[f64], total: f64, u: f64) -> usize {
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}

/// `KL(p ‖ q)` for probability rows. A support violation (`p > 0` where
/// `q = 0`) is reported as a domain error rather than returned as infinity.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return input_err("KL between rows of different length");
    }
    let mut terms = Vec::with_capacity(p.len());
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi < 0.0 || qi < 0.0 || !pi.is_finite() || !qi.is_finite() {
            return input_err(format!("entry {i}: invalid probabilities ({pi}, {qi})"));
        }
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(SppoError::Domain(format!(
                "KL is infinite: p({i}) = {pi} but q({i}) = 0"
            )));
        }
        terms.push(pi * (pi / qi).ln());
    }
    Ok(stable_sum(terms).max(0.0))
}

/// `KL(p ‖ q)` for log-probability rows.
pub fn kl_divergence_log(log_p: &[f64], log_q: &[f64]) -> Result<f64> {
    if log_p.len() != log_q.len() {
        return input_err("KL between rows of different length");
    }
    let mut terms = Vec::with_capacity(log_p.len());
    for (i, (&lp, &lq)) in log_p.iter().zip(log_q).enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        if lq == f64::NEG_INFINITY {
            return Err(SppoError::Domain(format!(
                "KL is infinite: response {i} has mass under p but not under q"
            )));
        }
        terms.push(lp.exp() * (lp - lq));
    }
    Ok(stable_sum(terms).max(0.0))
}

/// Per-prompt logit table `θ(·|x)` inducing a tabular policy through softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    logits: Vec<Vec<f64>>,
}

impl SoftmaxPolicy {
    pub fn new(logits: Vec<Vec<f64>>) -> Result<Self> {
        if logits.is_empty() || logits.iter().any(Vec::is_empty) {
            return input_err("softmax policy needs a non-empty row for every prompt");
        }
        if logits.iter().flatten().any(|v| !v.is_finite()) {
            return input_err("logits must be finite");
        }
        Ok(Self { logits })
    }

    /// Logits equal to the log-probabilities of a fully supported policy.
    pub fn from_tabular(pi: &TabularPolicy) -> Result<Self> {
        if pi.log_rows().iter().flatten().any(|l| !l.is_finite()) {
            return Err(SppoError::Domain(
                "softmax logits need a fully supported policy".into(),
            ));
        }
        Self::new(pi.log_rows().to_vec())
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn into_logits(self) -> Vec<Vec<f64>> {
        self.logits
    }

    pub fn num_prompts(&self) -> usize {
        self.logits.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.logits.iter().map(Vec::len).collect()
    }

    /// Log-probabilities of the induced policy for prompt `x`.
    pub fn log_probs(&self, x: usize) -> Vec<f64> {
        log_softmax(&self.logits[x])
    }

    /// The induced tabular policy (numerically stable softmax).
    pub fn realize(&self) -> TabularPolicy {
        TabularPolicy::from_log_probs_unchecked(
            self.logits.iter().map(|row| log_softmax(row)).collect(),
        )
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

/// Free-function form of [`SoftmaxPolicy::realize`].
pub fn softmax_realize(sp: &SoftmaxPolicy) -> TabularPolicy {
    sp.realize()
}

/// Uniform mixture `π̄_T = (1/T) Σ_t π_t` of tabular snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePolicy {
    members: Vec<TabularPolicy>,
}

impl MixturePolicy {
    pub fn new(members: Vec<TabularPolicy>) -> Result<Self> {
        let Some(first) = members.first() else {
            return input_err("mixture needs at least one member");
        };
        if members.iter().any(|m| !m.same_universe(first)) {
            return input_err("mixture members span different response universes");
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[TabularPolicy] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// `π̄(y|x)` as the arithmetic mean of member probabilities.
    pub fn eval(&self, x: usize, y: usize) -> Result<f64> {
        let first = &self.members[0];
        first.check_prompt(x)?;
        if y >= first.num_responses(x) {
            return input_err(format!("response {y} out of range for prompt {x}"));
        }
        Ok(stable_sum(self.members.iter().map(|m| m.prob(x, y))) / self.members.len() as f64)
    }

    /// The averaged distribution as a tabular policy (log-mean-exp per entry).
    pub fn materialize(&self) -> TabularPolicy {
        let first = &self.members[0];
        let mut scratch = Vec::with_capacity(self.members.len());
        let rows = (0..first.num_prompts())
            .map(|x| {
                (0..first.num_responses(x))
                    .map(|y| {
                        scratch.clear();
                        scratch.extend(self.members.iter().map(|m| m.log_prob(x, y)));
                        log_mean_exp(&scratch)
                    })
                    .collect()
            })
            .collect();
        TabularPolicy::from_log_probs_unchecked(rows)
    }
}

/// Free-function form of [`MixturePolicy::eval`].
pub fn mixture_eval(m: &MixturePolicy, x: usize, y: usize) -> Result<f64> {
    m.eval(x, y)
}

/// Per-(prompt, response) scaled log-ratios `a(y;x) = β log(π_θ/π_ref)` with
/// no normalization constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedLogRatio {
    values: Vec<Vec<f64>>,
}

impl UnconstrainedLogRatio {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return input_err("log-ratios must be finite");
        }
        Ok(Self { values })
    }

    pub fn zeros(counts: &[usize]) -> Self {
        Self {
            values: counts.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x][y]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.values
    }
}
