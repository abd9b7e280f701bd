//! Small estimators shared by the experiments and the test suites.

use serde::{Deserialize, Serialize};

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                se: f64::NAN,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Self { mean, se: f64::NAN };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            se: (var / n as f64).sqrt(),
        }
    }

    /// Ratio `self / other` with a first-order (delta method) standard error,
    /// treating the two estimates as independent.
    pub fn ratio(&self, other: &Estimate) -> Estimate {
        let r = self.mean / other.mean;
        let rel = (self.se / self.mean).powi(2) + (other.se / other.mean).powi(2);
        Estimate {
            mean: r,
            se: r.abs() * rel.sqrt(),
        }
    }

    /// `|mean − target| ≤ k · se`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se
    }
}

/// One-sample Kolmogorov–Smirnov statistic against a continuous CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

/// Pearson chi-square statistic against equal expected counts.
pub fn chi_square_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum()
}

/// Standard-error scale for the two-sample `W_1` distance.
///
/// Returns `∫ sqrt(F(1 − F)) dx · sqrt(1/n_a + 1/n_b)` with `F` the pooled
/// empirical CDF: the L¹ norm of the pointwise standard error of the
/// difference of the two empirical CDFs. Under equal laws `W_1` concentrates
/// around `sqrt(2/π)` times this value.
pub fn w1_standard_error(a: &[f64], b: &[f64]) -> f64 {
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let n = pooled.len() as f64;
    let mut integral = 0.0;
    for k in 0..pooled.len() - 1 {
        let f = (k + 1) as f64 / n;
        integral += (f * (1.0 - f)).sqrt() * (pooled[k + 1] - pooled[k]);
    }
    integral * (1.0 / a.len() as f64 + 1.0 / b.len() as f64).sqrt()
}

/// Exact-integration trapezoid rule for a `2π`-periodic function.
pub fn periodic_mean<F: Fn(f64) -> f64>(f: F, points: usize) -> f64 {
    let h = std::f64::consts::TAU / points as f64;
    (0..points).map(|k| f(k as f64 * h)).sum::<f64>() / points as f64
}
