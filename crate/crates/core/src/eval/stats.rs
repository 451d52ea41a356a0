use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample size that gets the exact null distribution.
pub const EXACT_MAX_N: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Wilcoxon {
    /// `min(W+, W-)`.
    pub w: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

/// Average ranks (1-based) of `|d|`, ties sharing their mean rank.
fn ranks(abs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut r = vec![0.0; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// `P(W+ ≤ w)` under the null, by counting sign assignments. Ranks are
/// doubled so tied (half-integer) ranks stay integral.
fn exact_lower_tail(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let limit = (2.0 * w).round() as usize;
    let hits: f64 = counts[..=limit.min(total)].iter().sum();
    hits / 2f64.powi(ranks.len() as i32)
}

/// Two-sided Wilcoxon signed-rank test of `a − b`.
///
/// Zero differences are dropped. For up to [`EXACT_MAX_N`] remaining pairs
/// the p-value is `2·P(W ≤ w)` from the exact null distribution; above that
/// a normal approximation with tie and continuity corrections is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "paired samples of different lengths ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if d.is_empty() {
        return Err(Error::Undefined("all paired differences are zero".into()));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite paired difference"));
    }
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let r = ranks(&abs);
    let w_plus: f64 = d
        .iter()
        .zip(&r)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);
    if n <= EXACT_MAX_N {
        let p = (2.0 * exact_lower_tail(&r, w)).min(1.0);
        return Ok(Wilcoxon {
            w,
            n,
            p,
            exact: true,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut ties = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    for group in sorted.chunk_by(|x, y| x == y) {
        let t = group.len() as f64;
        ties += t * t * t - t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std = Normal::standard();
    let p = (2.0 * std.cdf(-z)).min(1.0);
    Ok(Wilcoxon {
        w,
        n,
        p,
        exact: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KolmogorovSmirnov {
    pub d: f64,
    pub n: usize,
    pub p: f64,
}

/// Asymptotic Kolmogorov survival function `Q(λ) = 2 Σ (−1)^{k−1} e^{−2k²λ²}`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test of `samples` against `cdf`, with Stephens' small-sample
/// scaling of the asymptotic distribution.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KolmogorovSmirnov> {
    if samples.len() < 5 {
        return Err(Error::invalid(format!(
            "KS test needs at least 5 samples, got {}",
            samples.len()
        )));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in x.iter().enumerate() {
        let f = cdf(v);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sq = n.sqrt();
    let p = kolmogorov_q((sq + 0.12 + 0.11 / sq) * d);
    Ok(KolmogorovSmirnov { d, n: x.len(), p })
}

/// KS test against a normal with the sample mean and standard deviation.
pub fn ks_normality(samples: &[f64]) -> Result<KolmogorovSmirnov> {
    let (mean, sd) = mean_sd(samples)?;
    if !(sd > 0.0) {
        return Err(Error::invalid(
            "KS normality test of a sample with zero variance",
        ));
    }
    let normal = Normal::new(mean, sd).map_err(|e| Error::invalid(e.to_string()))?;
    ks_test(samples, |v| normal.cdf(v))
}

/// Mean and sample (n − 1) standard deviation.
pub fn mean_sd(x: &[f64]) -> Result<(f64, f64)> {
    if x.is_empty() {
        return Err(Error::invalid("mean of an empty sample"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = if x.len() > 1 {
        (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((mean, sd))
}
