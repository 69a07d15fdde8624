// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sample statistics shared by the simulators and the Monte Carlo harness.

/// Type-1 (inverse empirical CDF) quantile of an ascending sample.
pub fn order_quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let n = sorted.len();
    let k = (p * n as f64).ceil() as usize;
    sorted[k.clamp(1, n) - 1]
}

pub fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() as f64 - 1.0)).sqrt()
}

/// Mean absolute deviation about a reference point.
pub fn mean_abs_dev(values: &[f64], center: f64) -> f64 {
    values.iter().map(|v| (v - center).abs()).sum::<f64>() / values.len() as f64
}

pub fn iqr(values: &[f64]) -> f64 {
    let s = sorted(values);
    order_quantile(&s, 0.75) - order_quantile(&s, 0.25)
}

pub fn median(values: &[f64]) -> f64 {
    let s = sorted(values);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Sample kurtosis `m4 / m2^2` (3 for a normal law).
pub fn kurtosis(values: &[f64]) -> f64 {
    let m = mean(values);
    let n = values.len() as f64;
    let m2 = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2)
}

/// Approximate standard error of the sample standard deviation.
pub fn std_dev_se(values: &[f64]) -> f64 {
    let k = kurtosis(values);
    std_dev(values) * ((k - 1.0).max(0.0) / (4.0 * values.len() as f64)).sqrt()
}

/// Drops the `k` smallest and `k` largest values.
pub fn trim(values: &[f64], k: usize) -> Vec<f64> {
    let s = sorted(values);
    if 2 * k >= s.len() {
        return Vec::new();
    }
    s[k..s.len() - k].to_vec()
}

/// One-sample Kolmogorov-Smirnov statistic against a continuous CDF.
pub fn ks_one_sample(values: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let s = sorted(values);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic Kolmogorov tail `P(K > x)`.
pub fn kolmogorov_survival(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * x * x).exp();
        sum += if k as i64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

pub fn ks_one_sample_pvalue(d: f64, n: usize) -> f64 {
    kolmogorov_survival(d * (n as f64).sqrt())
}

pub fn ks_two_sample_pvalue(d: f64, n: usize, m: usize) -> f64 {
    let en = (n as f64 * m as f64 / (n + m) as f64).sqrt();
    kolmogorov_survival(d * en)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type1_quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(order_quantile(&s, 0.25), 1.0);
        assert_eq!(order_quantile(&s, 0.26), 2.0);
        assert_eq!(order_quantile(&s, 1.0), 4.0);
        assert_eq!(order_quantile(&s, 0.0), 1.0);
    }

    #[test]
    fn kolmogorov_critical_values() {
        // classical 5% and 1% points of the Kolmogorov distribution
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_survival(1.6276) - 0.01).abs() < 1e-4);
    }

    #[test]
    fn ks_two_sample_identical_and_shifted() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(ks_two_sample(&a, &a), 0.0);
        let b: Vec<f64> = (50..150).map(|i| i as f64).collect();
        assert!((ks_two_sample(&a, &b) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn trimming_and_dispersion() {
        let v = [5.0, -100.0, 1.0, 2.0, 100.0, 3.0];
        assert_eq!(trim(&v, 1), vec![1.0, 2.0, 3.0, 5.0]);
        assert!(trim(&v, 3).is_empty());
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(mean_abs_dev(&[1.0, -1.0], 0.0), 1.0);
        assert!((std_dev(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-12);
    }
}
