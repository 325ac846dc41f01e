//! The normalizing factor `Z` of the exponential update in two extreme
//! preference regimes: every pairwise preference a fair coin ("disordered")
//! and a strict total order ("ordered").

use std::fmt::Write as _;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::numeric::{log_expm1_over, log_mean_exp, stable_sum};
use crate::rng::seeded;

/// Fills `n` signs in `{−1, +1}` from 64-bit draws.
fn rademacher(rng: &mut impl RngCore, n: usize) -> Vec<i8> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let bits = rng.next_u64();
        let take = (n - out.len()).min(64);
        out.extend((0..take).map(|i| if (bits >> i) & 1 == 1 { 1 } else { -1 }));
    }
    out
}

fn check_k(k: usize, min: usize) -> Result<()> {
    if k < min {
        return input_err(format!("K must be at least {min}, got {k}"));
    }
    Ok(())
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta.is_finite() && eta >= 0.0) {
        return input_err(format!("eta must be finite and non-negative, got {eta}"));
    }
    Ok(())
}

/// Antisymmetric sign matrix `p` with `p_ii = 0` and independent fair signs
/// above the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DisorderedInstance {
    pub k: usize,
    pub eta: f64,
    pub seed: u64,
    p: Vec<i8>,
}

impl DisorderedInstance {
    pub fn sample(k: usize, eta: f64, seed: u64) -> Result<Self> {
        check_k(k, 2)?;
        let mut rng = seeded(seed);
        let signs = rademacher(&mut rng, k * (k - 1) / 2);
        Self::from_upper(k, eta, &signs).map(|inst| Self { seed, ..inst })
    }

    /// Builds from the upper triangle in row order; entries must lie in
    /// `{−1, 0, 1}`.
    pub fn from_upper(k: usize, eta: f64, upper: &[i8]) -> Result<Self> {
        check_k(k, 2)?;
        check_eta(eta)?;
        if upper.len() != k * (k - 1) / 2 {
            return input_err(format!("{} entries for K = {k}", upper.len()));
        }
        if upper.iter().any(|v| !(-1..=1).contains(v)) {
            return input_err("entries must lie in {-1, 0, 1}");
        }
        let mut p = vec![0i8; k * k];
        let mut it = upper.iter();
        for i in 0..k {
            for j in i + 1..k {
                let v = *it.next().expect("length checked");
                p[i * k + j] = v;
                p[j * k + i] = -v;
            }
        }
        Ok(Self { k, eta, seed: 0, p })
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.p[i * self.k + j]
    }

    /// `X_i = Σ_j p_ij / K`.
    pub fn x_values(&self) -> Vec<f64> {
        self.p
            .chunks(self.k)
            .map(|row| row.iter().map(|&v| i64::from(v)).sum::<i64>() as f64 / self.k as f64)
            .collect()
    }

    /// `log Z = η/2 + log((1/K) Σ_i e^{η X_i})`.
    pub fn log_partition(&self) -> f64 {
        let scaled: Vec<f64> = self.x_values().iter().map(|x| self.eta * x).collect();
        self.eta / 2.0 + log_mean_exp(&scaled)
    }

    pub fn partition(&self) -> f64 {
        self.log_partition().exp()
    }

    pub fn is_antisymmetric(&self) -> bool {
        (0..self.k).all(|i| (0..self.k).all(|j| self.get(i, j) == -self.get(j, i)))
    }
}

/// Mean, variance and pairwise covariance of `e^{η X_i}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DisorderedMoments {
    pub mean: f64,
    pub variance: f64,
    pub covariance: f64,
}

/// `E e^{ηX_i} = cosh(η/K)^{K−1}`,
/// `Var = cosh(2η/K)^{K−1} − cosh(η/K)^{2K−2}`,
/// `Cov = cosh(η/K)^{2K−4} − cosh(η/K)^{2K−2}`.
pub fn disordered_moments(k: usize, eta: f64) -> Result<DisorderedMoments> {
    check_k(k, 2)?;
    check_eta(eta)?;
    let kf = k as f64;
    let c1 = (eta / kf).cosh().ln();
    let c2 = (2.0 * eta / kf).cosh().ln();
    let mean_sq = ((2.0 * kf - 2.0) * c1).exp();
    Ok(DisorderedMoments {
        mean: ((kf - 1.0) * c1).exp(),
        variance: ((kf - 1.0) * c2).exp() - mean_sq,
        covariance: ((2.0 * kf - 4.0) * c1).exp() - mean_sq,
    })
}

/// `e^{η X_1}` from a fresh draw of only the `K − 1` signs in row 1.
pub fn sample_row_statistic(k: usize, eta: f64, seed: u64) -> Result<f64> {
    check_k(k, 2)?;
    check_eta(eta)?;
    let signs = rademacher(&mut seeded(seed), k - 1);
    let sum: i64 = signs.iter().map(|&v| i64::from(v)).sum();
    Ok((eta * sum as f64 / k as f64).exp())
}

/// `Z` for seeds `0..seeds`.
pub fn disordered_trials(k: usize, eta: f64, seeds: u64) -> Result<Vec<f64>> {
    (0..seeds)
        .map(|s| DisorderedInstance::sample(k, eta, s).map(|i| i.partition()))
        .collect()
}

/// A strict ordering of `K` responses. The partition value does not depend
/// on which permutation is used.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedInstance {
    pub k: usize,
    pub eta: f64,
    order: Vec<usize>,
}

impl OrderedInstance {
    pub fn new(k: usize, eta: f64) -> Result<Self> {
        Self::with_order(k, eta, (0..k).collect())
    }

    pub fn with_order(k: usize, eta: f64, order: Vec<usize>) -> Result<Self> {
        check_k(k, 1)?;
        check_eta(eta)?;
        let mut seen = vec![false; k];
        if order.len() != k || order.iter().any(|&i| i >= k || std::mem::replace(&mut seen[i], true)) {
            return input_err("order must be a permutation of 0..K");
        }
        Ok(Self { k, eta, order })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Win rate of the response at rank `i` (1 = worst) against the uniform
    /// mixture: `(i − 1/2)/K`.
    pub fn win_rates(&self) -> Vec<f64> {
        let kf = self.k as f64;
        let mut w = vec![0.0; self.k];
        for (rank, &y) in self.order.iter().enumerate() {
            w[y] = (rank as f64 + 0.5) / kf;
        }
        w
    }
}

/// `log((1/K) Σ_{i=1}^K e^{η(i−1/2)/K})`.
pub fn ordered_log_partition(inst: &OrderedInstance) -> f64 {
    let terms: Vec<f64> = inst.win_rates().iter().map(|w| inst.eta * w).collect();
    log_mean_exp(&terms)
}

/// The `K → ∞` ordered limit `log((e^η − 1)/η)`.
pub fn ordered_limit(eta: f64) -> f64 {
    log_expm1_over(eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Disordered,
    Ordered,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Disordered => "disordered",
            Regime::Ordered => "ordered",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "disordered" => Ok(Regime::Disordered),
            "ordered" => Ok(Regime::Ordered),
            other => input_err(format!("unknown regime `{other}`")),
        }
    }
}

/// Constant stand-in for `log Z`: `η/2` or `log((e^η − 1)/η)`.
pub fn regime_baseline(eta: f64, regime: Regime) -> Result<f64> {
    check_eta(eta)?;
    Ok(match regime {
        Regime::Disordered => eta / 2.0,
        Regime::Ordered => ordered_limit(eta),
    })
}

/// One output row: `(regime, K, eta, seed, statistic, value)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabRow {
    pub regime: Regime,
    pub k: usize,
    pub eta: f64,
    pub seed: Option<u64>,
    pub statistic: &'static str,
    pub value: f64,
}

pub fn rows_to_csv(rows: &[LabRow]) -> String {
    let mut out = String::from("regime,K,eta,seed,statistic,value\n");
    for r in rows {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.regime.name(),
            r.k,
            r.eta,
            seed,
            r.statistic,
            r.value
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    pub regimes: Vec<Regime>,
    pub k_values: Vec<usize>,
    pub etas: Vec<f64>,
    pub seeds: u64,
    pub base_seed: u64,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            regimes: vec![Regime::Disordered, Regime::Ordered],
            k_values: vec![10, 100, 1000],
            etas: vec![1.0],
            seeds: 200,
            base_seed: 0,
        }
    }
}

/// Summary checks of one lab run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabSummary {
    /// Largest `|mean_seeds(Z) e^{−η/2} − E[e^{ηX}]|` in units of its
    /// standard error.
    pub worst_disordered_z_score: f64,
    /// Largest `(|log Z − limit|) − η/K` over ordered cases with `K ≥ 10η`;
    /// non-positive when the `O(η/K)` bound holds.
    pub worst_ordered_excess: f64,
}

/// Disordered rows per seed plus the seed mean and closed-form moments;
/// ordered rows with the finite-K value, the limit and their gap.
pub fn run_lab(config: &LabConfig) -> Result<(Vec<LabRow>, LabSummary)> {
    if config.seeds < 2 {
        return input_err("need at least two seeds");
    }
    let mut rows = Vec::new();
    let mut worst_z: f64 = 0.0;
    let mut worst_excess = f64::NEG_INFINITY;
    for &regime in &config.regimes {
        for &k in &config.k_values {
            for &eta in &config.etas {
                let mut row = |seed, statistic, value| {
                    rows.push(LabRow {
                        regime,
                        k,
                        eta,
                        seed,
                        statistic,
                        value,
                    })
                };
                match regime {
                    Regime::Disordered => {
                        let mut scaled = Vec::with_capacity(config.seeds as usize);
                        for s in 0..config.seeds {
                            let seed = config.base_seed.wrapping_add(s);
                            let inst = DisorderedInstance::sample(k, eta, seed)?;
                            let v = (inst.log_partition() - eta / 2.0).exp();
                            row(Some(seed), "z_scaled", v);
                            scaled.push(v);
                        }
                        let n = scaled.len() as f64;
                        let mean = stable_sum(scaled.iter().copied()) / n;
                        let var =
                            stable_sum(scaled.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0);
                        let m = disordered_moments(k, eta)?;
                        row(None, "z_scaled_mean", mean);
                        row(None, "z_scaled_std_error", (var / n).sqrt());
                        row(None, "closed_form_mean", m.mean);
                        row(None, "closed_form_variance", m.variance);
                        row(None, "closed_form_covariance", m.covariance);
                        let se = (var / n).sqrt();
                        if se > 0.0 {
                            worst_z = worst_z.max((mean - m.mean).abs() / se);
                        }
                    }
                    Regime::Ordered => {
                        let log_z = ordered_log_partition(&OrderedInstance::new(k, eta)?);
                        let limit = ordered_limit(eta);
                        row(None, "log_z", log_z);
                        row(None, "limit", limit);
                        row(None, "abs_error", (log_z - limit).abs());
                        if k as f64 >= 10.0 * eta {
                            worst_excess = worst_excess.max((log_z - limit).abs() - eta / k as f64);
                        }
                    }
                }
            }
        }
    }
    Ok((
        rows,
        LabSummary {
            worst_disordered_z_score: worst_z,
            worst_ordered_excess: if worst_excess.is_finite() { worst_excess } else { 0.0 },
        },
    ))
}
