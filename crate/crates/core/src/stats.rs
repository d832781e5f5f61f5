//! Ensemble statistics: moments, covariance matrices with bootstrap standard
//! errors, and goodness-of-fit tests.

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{invalid, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standard error of the mean.
pub fn standard_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Unbiased covariance matrix of the columns of `rows`.
pub fn covariance_matrix(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let idx: Vec<usize> = (0..rows.len()).collect();
    resampled_covariance(rows, &idx)
}

fn resampled_covariance(rows: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    let n = idx.len() as f64;
    let mut mu = vec![0.0; d];
    for &i in idx {
        for (m, v) in mu.iter_mut().zip(&rows[i]) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut c = vec![vec![0.0; d]; d];
    let mut centered = vec![0.0; d];
    for &i in idx {
        for ((z, v), m) in centered.iter_mut().zip(&rows[i]).zip(&mu) {
            *z = v - m;
        }
        for a in 0..d {
            let za = centered[a];
            for b in a..d {
                c[a][b] += za * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            c[a][b] /= n - 1.0;
            c[b][a] = c[a][b];
        }
    }
    c
}

/// Bootstrap standard errors of [`covariance_matrix`] from `resamples`
/// draws of the rows with replacement.
pub fn bootstrap_covariance_se<R: Rng + ?Sized>(rows: &[Vec<f64>], resamples: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len();
    let mut sum = vec![vec![0.0; d]; d];
    let mut sum_sq = vec![vec![0.0; d]; d];
    let mut idx = vec![0usize; n];
    for _ in 0..resamples {
        for i in idx.iter_mut() {
            *i = rng.gen_range(0..n);
        }
        let c = resampled_covariance(rows, &idx);
        for a in 0..d {
            for b in 0..d {
                sum[a][b] += c[a][b];
                sum_sq[a][b] += c[a][b] * c[a][b];
            }
        }
    }
    let r = resamples as f64;
    (0..d)
        .map(|a| {
            (0..d)
                .map(|b| {
                    let m = sum[a][b] / r;
                    ((sum_sq[a][b] / r - m * m).max(0.0) * r / (r - 1.0)).sqrt()
                })
                .collect()
        })
        .collect()
}

/// Kolmogorov distribution tail `P(K > λ) = 2 Σ (-1)^{k-1} e^{-2k²λ²}`.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    (d, kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d))
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0_f64);
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    (d, kolmogorov_tail((ne + 0.12 + 0.11 / ne) * d))
}

/// Pearson χ² statistic and p-value for `observed` counts against
/// `expected` counts (bins with expected < 5 should be pooled by the caller).
pub fn chi_square_test(observed: &[u64], expected: &[f64]) -> Result<(f64, f64)> {
    if observed.len() != expected.len() || observed.len() < 2 {
        return Err(invalid("bins", "need matching observed/expected with >= 2 bins"));
    }
    let stat: f64 = observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum();
    let dist = ChiSquared::new((observed.len() - 1) as f64).map_err(|e| invalid("bins", e.to_string()))?;
    Ok((stat, 1.0 - dist.cdf(stat)))
}
