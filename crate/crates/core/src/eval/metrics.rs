use crate::error::{Error, Result};

const CE_CLIP: f64 = 1e-12;

/// Percentage of `preds` equal to `labels`.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// Mean negative log-probability (nats) of the true class; `probs` holds one
/// row of class probabilities per sample.
pub fn cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::invalid("cross-entropy of an empty set"));
    }
    let mut total = 0.0;
    for (row, &y) in probs.iter().zip(labels) {
        let p = *row.get(y).ok_or_else(|| {
            Error::invalid(format!("label {y} out of range for {} classes", row.len()))
        })?;
        total -= p.clamp(CE_CLIP, 1.0).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Wolpaw information per selection (bits) for `n` alternatives chosen with
/// accuracy `p`. Below chance the formula turns positive again (the decoder
/// is informative by being wrong); such accuracies are reported as 0 bits.
pub fn bits_per_selection(p: f64, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "bitrate needs at least 2 alternatives, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("accuracy {p} outside [0, 1]")));
    }
    let nf = n as f64;
    if p <= 1.0 / nf {
        return Ok(0.0);
    }
    let mut b = nf.log2() + p * p.log2();
    if p < 1.0 {
        b += (1.0 - p) * ((1.0 - p) / (nf - 1.0)).log2();
    }
    Ok(b.max(0.0))
}

/// Bits per minute at `seconds` per selection.
pub fn bitrate(p: f64, n: usize, seconds: f64) -> Result<f64> {
    if !(seconds > 0.0) {
        return Err(Error::invalid(format!(
            "selection time must be positive, got {seconds}"
        )));
    }
    Ok(bits_per_selection(p, n)? * 60.0 / seconds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 100.0);
        assert_eq!(accuracy(&[1, 0, 0, 0], &[1, 1, 1, 1]).unwrap(), 25.0);
        assert!(accuracy(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = vec![vec![0.5, 0.5]; 4];
        assert!((cross_entropy(&uniform, &[0, 1, 1, 0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(
            cross_entropy(&[vec![0.0, 1.0], vec![1.0, 0.0]], &[1, 0]).unwrap(),
            0.0
        );
        let clipped = cross_entropy(&[vec![1.0, 0.0]], &[1]).unwrap();
        assert!((clipped - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn bitrate_values() {
        let b = bits_per_selection(1.0, 6).unwrap();
        assert!((b - 6f64.log2()).abs() < 1e-12);
        assert!((bitrate(1.0, 6, 2.4).unwrap() - 64.62).abs() < 0.01);
        assert_eq!(bits_per_selection(1.0 / 6.0, 6).unwrap(), 0.0);
        // log2 6 + 0.9 log2 0.9 + 0.1 log2 0.02
        let direct = 2.584962500721156 + 0.9 * (-0.15200309344504997) + 0.1 * (-5.643856189774724);
        assert!((bits_per_selection(0.9, 6).unwrap() - direct).abs() < 1e-12);
        assert!((bitrate(0.9, 6, 9.6).unwrap() - 11.78).abs() < 0.01);
    }

    #[test]
    fn bitrate_monotone_above_chance() {
        let mut prev = 0.0;
        for i in 1..=1000 {
            let p = 1.0 / 6.0 + (5.0 / 6.0) * i as f64 / 1000.0;
            let b = bits_per_selection(p.min(1.0), 6).unwrap();
            assert!(b > prev, "p = {p}");
            prev = b;
        }
    }
}
