//! Summary statistics for sample sets: moments, a one-sample
//! Kolmogorov-Smirnov test against N(0, 1), and acceptability histograms.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Per-dimension mean and unbiased variance of row vectors.
pub fn mean_variance<R: AsRef<[f64]>>(rows: &[R]) -> (Vec<f64>, Vec<f64>) {
    let d = rows.first().map_or(0, |r| r.as_ref().len());
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r.as_ref()) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in rows {
        for ((v, x), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let denom = (n - 1.0).max(1.0);
    var.iter_mut().for_each(|v| *v /= denom);
    (mean, var)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Asymptotic Kolmogorov distribution survival function
/// `Q(t) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 t^2)`.
pub fn kolmogorov_survival(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    if t < 0.2 {
        // series converges slowly here and Q is 1 to double precision
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * t * t).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sided one-sample KS test against the standard normal.
pub fn ks_standard_normal(samples: &[f64]) -> KsResult {
    let n = samples.len();
    assert!(n > 0, "KS test needs samples");
    let normal = Normal::standard();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = normal.cdf(*x);
            (f - i as f64 / nf).max((i + 1) as f64 / nf - f)
        })
        .fold(0.0, f64::max);
    // Stephens' small-sample correction
    let t = statistic * (nf.sqrt() + 0.12 + 0.11 / nf.sqrt());
    KsResult {
        statistic,
        p_value: kolmogorov_survival(t),
        n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptabilitySummary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    /// Fraction of samples rated at least 0.5.
    pub frac_at_least_half: f64,
    /// Bin edges over [0, 1].
    pub bin_edges: Vec<f64>,
    pub histogram: Vec<usize>,
}

pub fn summarize_acceptability(values: &[f64], bins: usize) -> AcceptabilitySummary {
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mut histogram = vec![0; bins];
    for v in values {
        let k = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        histogram[k] += 1;
    }
    AcceptabilitySummary {
        n,
        mean: values.iter().sum::<f64>() / n.max(1) as f64,
        median,
        frac_at_least_half: values.iter().filter(|v| **v >= 0.5).count() as f64 / n.max(1) as f64,
        bin_edges: (0..=bins).map(|k| k as f64 / bins as f64).collect(),
        histogram,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn moments_by_hand() {
        let rows = [[1.0, 2.0], [3.0, 2.0], [5.0, 2.0]];
        let (m, v) = mean_variance(&rows);
        assert_eq!(m, vec![3.0, 2.0]);
        assert_eq!(v, vec![4.0, 0.0]);
    }

    #[test]
    fn kolmogorov_reference_values() {
        // Q(1.36) ~= 0.0494, Q(1.63) ~= 0.0098 (tabulated critical values)
        assert!((kolmogorov_survival(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_survival(1.628) - 0.01).abs() < 5e-4);
        assert_eq!(kolmogorov_survival(0.0), 1.0);
    }

    #[test]
    fn ks_accepts_normal_and_rejects_shifted() {
        let mut s = RngStream::new(10, "ks");
        let xs: Vec<f64> = (0..10_000).map(|_| s.standard_normal()).collect();
        assert!(ks_standard_normal(&xs).p_value > 0.01);
        let shifted: Vec<f64> = xs.iter().map(|x| x + 0.1).collect();
        assert!(ks_standard_normal(&shifted).p_value < 0.01);
        let wide: Vec<f64> = xs.iter().map(|x| x * 1.1).collect();
        assert!(ks_standard_normal(&wide).p_value < 0.01);
    }

    #[test]
    fn histogram_edges() {
        let s = summarize_acceptability(&[0.0, 0.5, 1.0, 0.99], 10);
        assert_eq!(s.histogram.iter().sum::<usize>(), 4);
        assert_eq!(s.histogram[9], 2);
        assert_eq!(s.histogram[5], 1);
        assert_eq!(s.frac_at_least_half, 0.75);
        assert_eq!(s.bin_edges.len(), 11);
    }
}
