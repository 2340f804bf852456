//! Gaussian-kernel density mode of bounded rating samples.
//!
//! Ratings live in [0, 1] and pile up against the bounds, so the sample mean
//! is a biased summary there. The mode of a KDE evaluated on a grid over
//! [0, 1] is used instead.

use std::f64::consts::PI;

pub const GRID_POINTS: usize = 1001;
pub const BANDWIDTH_FLOOR: f64 = 1e-3;

/// Linear-interpolated quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Silverman's rule, `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`, floored.
/// A zero IQR falls back to the standard deviation.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return BANDWIDTH_FLOOR;
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    (0.9 * spread * nf.powf(-0.2)).max(BANDWIDTH_FLOOR)
}

pub fn density(samples: &[f64], bandwidth: f64, at: f64) -> f64 {
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * PI).sqrt());
    samples
        .iter()
        .map(|s| {
            let u = (at - s) / bandwidth;
            (-0.5 * u * u).exp()
        })
        .sum::<f64>()
        * norm
}

/// Argmax of the KDE over a uniform grid on [0, 1]; first grid point wins ties.
pub fn kde_mode(samples: &[f64]) -> f64 {
    assert!(!samples.is_empty(), "kde_mode needs at least one sample");
    let h = silverman_bandwidth(samples);
    let steps = (GRID_POINTS - 1) as f64;
    let mut best = (0.0, f64::NEG_INFINITY);
    for k in 0..GRID_POINTS {
        let x = k as f64 / steps;
        let f = density(samples, h, x);
        if f > best.1 {
            best = (x, f);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    /// Mode by brute-force scan on a 100x finer grid, independent of the
    /// grid used by `kde_mode`.
    fn fine_scan_mode(samples: &[f64], h: f64) -> f64 {
        let n = 100_000;
        (0..=n)
            .map(|k| k as f64 / n as f64)
            .map(|x| (x, density(samples, h, x)))
            .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
            .0
    }

    #[test]
    fn point_mass() {
        assert_eq!(kde_mode(&[0.8; 20]), 0.8);
    }

    #[test]
    fn bandwidth_by_hand() {
        // sd = sqrt(0.162), IQR = 0 -> sd; 0.9 * 0.40249 * 5^-0.2
        let h = silverman_bandwidth(&[0.0, 0.0, 0.0, 0.0, 0.9]);
        assert!((h - 0.9 * 0.162f64.sqrt() * 5f64.powf(-0.2)).abs() < 1e-12);
        assert!((h - 0.26256).abs() < 1e-4);
        assert_eq!(silverman_bandwidth(&[0.3, 0.3]), BANDWIDTH_FLOOR);
    }

    #[test]
    fn clipped_at_zero_picks_mode_not_mean() {
        let s = [0.0, 0.0, 0.0, 0.0, 0.9];
        let mode = kde_mode(&s);
        assert!(mode < 0.02, "mode {mode}");
        let h = silverman_bandwidth(&s);
        assert!((mode - fine_scan_mode(&s, h)).abs() <= 1e-3);
    }

    #[test]
    fn clipped_at_one() {
        let s = [1.0, 1.0, 1.0, 0.95, 0.6];
        let mean = s.iter().sum::<f64>() / 5.0;
        let mode = kde_mode(&s);
        assert!(mode >= 0.95 && mode > mean, "mode {mode}, mean {mean}");
    }

    #[test]
    fn symmetric_sample_agrees_with_mean() {
        let s = [0.3, 0.4, 0.4, 0.5, 0.5, 0.5, 0.6, 0.6, 0.7];
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        assert!((kde_mode(&s) - mean).abs() < 0.02);

        let mut rng = RngStream::new(17, "kde");
        let mut big = Vec::new();
        for _ in 0..1000 {
            let g = 0.08 * rng.standard_normal();
            big.push(0.5 + g);
            big.push(0.5 - g);
        }
        let mean = big.iter().sum::<f64>() / big.len() as f64;
        assert!((kde_mode(&big) - mean).abs() < 0.02);
    }

    proptest::proptest! {
        #[test]
        fn mode_stays_in_unit_interval(samples in proptest::collection::vec(0.0f64..=1.0, 2..40)) {
            let m = kde_mode(&samples);
            proptest::prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}
