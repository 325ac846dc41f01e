//! Small numerical kernels shared by every module: stable log-sum-exp,
//! logistic functions and compensated summation.

/// `log Σ exp(x_i)`, stable for large magnitudes. Returns `-inf` for an empty
/// slice or when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let mut acc = NeumaierSum::default();
    for &x in xs {
        acc.add((x - max).exp());
    }
    max + acc.value().ln()
}

/// `log((1/n) Σ exp(x_i))`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

/// Logistic function `e^s / (1 + e^s)`.
///
/// Computed so that `sigmoid(s) + sigmoid(-s) == 1.0` holds exactly in
/// floating point: the upper half is evaluated directly and the lower half as
/// its exact complement (Sterbenz).
pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        1.0 - 1.0 / (1.0 + s.exp())
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = NeumaierSum::default();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Compensated sum of an iterator.
pub fn stable_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<NeumaierSum>().value()
}

/// `log((e^η − 1)/η)`, the limit of the log normalizer for a strictly ordered
/// preference. Continuous at `η = 0` where it equals 0.
pub fn log_expm1_over(eta: f64) -> f64 {
    if eta == 0.0 {
        0.0
    } else if eta.abs() > 1.0 {
        if eta > 0.0 {
            eta + (-(-eta).exp()).ln_1p() - eta.ln()
        } else {
            // (e^η − 1)/η = (1 − e^η)/(−η)
            (-eta.exp()).ln_1p() - (-eta).ln()
        }
    } else {
        (eta.exp_m1() / eta).ln()
    }
}
