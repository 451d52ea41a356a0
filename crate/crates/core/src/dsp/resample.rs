//! Integer-factor downsampling and percentile clipping.

use crate::error::{Error, Result};

/// Keep samples `0, factor, 2·factor, …`. The caller is responsible for
/// band-limiting first (the preprocessing pipeline runs its band-pass, or an
/// explicit anti-alias low-pass, before calling this).
pub fn decimate(signal: &[f64], factor: usize) -> Result<Vec<f64>> {
    if factor == 0 {
        return Err(Error::invalid("decimation factor must be ≥ 1"));
    }
    Ok(signal.iter().step_by(factor).copied().collect())
}

/// Percentile with linear interpolation between order statistics
/// (rank `p/100 · (n − 1)`).
pub fn percentile(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::invalid("percentile of an empty signal"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Clip bounds fitted on one signal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WinsorBounds {
    pub lo: f64,
    pub hi: f64,
}

impl WinsorBounds {
    pub fn fit(signal: &[f64], p_lo: f64, p_hi: f64) -> Result<Self> {
        if p_lo > p_hi {
            return Err(Error::invalid(format!(
                "lower percentile {p_lo} above upper {p_hi}"
            )));
        }
        if signal.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("winsorizing a signal containing NaN"));
        }
        let mut sorted = signal.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(WinsorBounds {
            lo: percentile(&sorted, p_lo)?,
            hi: percentile(&sorted, p_hi)?,
        })
    }

    pub fn apply(&self, signal: &mut [f64]) {
        for v in signal {
            *v = v.clamp(self.lo, self.hi);
        }
    }
}

/// Replace values below the `p_lo`-th percentile by that percentile and
/// values above the `p_hi`-th by that one. Returns the bounds used.
pub fn winsorize(signal: &mut [f64], p_lo: f64, p_hi: f64) -> Result<WinsorBounds> {
    let b = WinsorBounds::fit(signal, p_lo, p_hi)?;
    b.apply(signal);
    Ok(b)
}
