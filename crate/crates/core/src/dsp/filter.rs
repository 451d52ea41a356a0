//! IIR design (Butterworth, notch) as cascades of second-order sections, and
//! their application.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Poles must sit at least this far inside the unit circle.
pub const STABILITY_MARGIN: f64 = 1e-6;

/// `H(z) = (b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    pub const IDENTITY: Biquad = Biquad {
        b0: 1.0,
        b1: 0.0,
        b2: 0.0,
        a1: 0.0,
        a2: 0.0,
    };

    pub fn response(&self, z_inv: Complex64) -> Complex64 {
        let num = self.b0 + z_inv * (self.b1 + z_inv * self.b2);
        let den = 1.0 + z_inv * (self.a1 + z_inv * self.a2);
        num / den
    }

    /// Largest pole magnitude, the roots of `z² + a1 z + a2`.
    pub fn pole_radius(&self) -> f64 {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        let r1 = (-self.a1 + disc) / 2.0;
        let r2 = (-self.a1 - disc) / 2.0;
        r1.norm().max(r2.norm())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FilterKind {
    Bandpass { low: f64, high: f64, order: usize },
    Lowpass { cutoff: f64, order: usize },
    Notch { f0: f64, q: f64 },
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
    pub kind: FilterKind,
    pub fs: f64,
}

impl BiquadCascade {
    pub fn identity(fs: f64) -> Self {
        BiquadCascade {
            sections: vec![Biquad::IDENTITY],
            kind: FilterKind::Identity,
            fs,
        }
    }

    /// Complex response at `f` Hz.
    pub fn response(&self, f: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * f / self.fs);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    pub fn magnitude(&self, f: f64) -> f64 {
        self.response(f).norm()
    }

    pub fn max_pole_radius(&self) -> f64 {
        self.sections
            .iter()
            .map(Biquad::pole_radius)
            .fold(0.0, f64::max)
    }

    fn checked(self) -> Result<Self> {
        let r = self.max_pole_radius();
        if !(r < 1.0 - STABILITY_MARGIN) {
            return Err(Error::UnstableFilter(r));
        }
        Ok(self)
    }
}

/// Poles of the order-`n` analog Butterworth low-pass prototype (cutoff 1 rad/s).
fn prototype_poles(n: usize) -> Vec<Complex64> {
    (1..=n)
        .map(|k| Complex64::from_polar(1.0, PI * (2 * k + n - 1) as f64 / (2 * n) as f64))
        .collect()
}

/// Bilinear transform of an s-plane root.
fn bilinear(s: Complex64, fs: f64) -> Complex64 {
    (2.0 * fs + s) / (2.0 * fs - s)
}

fn prewarp(f: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * f / fs).tan()
}

/// Group digital poles into conjugate pairs (or pairs of real poles) and
/// build one section per pair with the given zero pair.
fn sections_from(poles: &[Complex64], zeros: &[(f64, f64)]) -> Vec<Biquad> {
    let tol = 1e-12;
    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > tol).collect();
    let mut real: Vec<f64> = poles
        .iter()
        .filter(|p| p.im.abs() <= tol)
        .map(|p| p.re)
        .collect();
    complex.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    real.sort_by(f64::total_cmp);
    let mut dens: Vec<(f64, f64)> = complex
        .iter()
        .map(|p| (-2.0 * p.re, p.norm_sqr()))
        .collect();
    for pair in real.chunks(2) {
        match *pair {
            [r1, r2] => dens.push((-(r1 + r2), r1 * r2)),
            [r] => dens.push((-r, 0.0)),
            _ => unreachable!(),
        }
    }
    dens.iter()
        .zip(zeros)
        .map(|(&(a1, a2), &(b1, b2))| Biquad {
            b0: 1.0,
            b1,
            b2,
            a1,
            a2,
        })
        .collect()
}

/// Scale the cascade so `|H(f)| = 1`, spreading the gain evenly over sections.
fn normalize_at(mut c: BiquadCascade, f: f64) -> BiquadCascade {
    let g = c.magnitude(f);
    let per = g.powf(-1.0 / c.sections.len() as f64);
    for s in &mut c.sections {
        s.b0 *= per;
        s.b1 *= per;
        s.b2 *= per;
    }
    c
}

/// Butterworth band-pass with `order` total poles (`order / 2` prototype
/// poles), band edges pre-warped so that both sit exactly at −3 dB.
pub fn design_butterworth_bandpass(
    order: usize,
    f_lo: f64,
    f_hi: f64,
    fs: f64,
) -> Result<BiquadCascade> {
    if order == 0 || order % 2 != 0 {
        return Err(Error::invalid(format!(
            "band-pass order must be a positive even number, got {order}"
        )));
    }
    if !(0.0 < f_lo && f_lo < f_hi && f_hi < fs / 2.0) {
        return Err(Error::invalid(format!(
            "band edges must satisfy 0 < {f_lo} < {f_hi} < Nyquist {}",
            fs / 2.0
        )));
    }
    let n = order / 2;
    let (w1, w2) = (prewarp(f_lo, fs), prewarp(f_hi, fs));
    let bw = w2 - w1;
    let w0 = (w1 * w2).sqrt();
    let mut poles = Vec::with_capacity(order);
    for p in prototype_poles(n) {
        let pb = p * bw / 2.0;
        let root = (pb * pb - w0 * w0).sqrt();
        poles.push(bilinear(pb + root, fs));
        poles.push(bilinear(pb - root, fs));
    }
    // n zeros at s = 0 (z = 1) and n at infinity (z = −1): (1 − z⁻¹)(1 + z⁻¹) per section.
    let zeros = vec![(0.0, -1.0); n];
    let cascade = BiquadCascade {
        sections: sections_from(&poles, &zeros),
        kind: FilterKind::Bandpass {
            low: f_lo,
            high: f_hi,
            order,
        },
        fs,
    };
    // The analog centre w0 maps back to this digital frequency, where |H| = 1.
    let centre = fs / PI * (w0 / (2.0 * fs)).atan();
    normalize_at(cascade, centre).checked()
}

/// Butterworth low-pass of the given order (used as the anti-alias filter
/// when decimating before band-pass filtering).
pub fn design_butterworth_lowpass(order: usize, cutoff: f64, fs: f64) -> Result<BiquadCascade> {
    if order == 0 {
        return Err(Error::invalid("low-pass order must be positive"));
    }
    if !(0.0 < cutoff && cutoff < fs / 2.0) {
        return Err(Error::invalid(format!(
            "cutoff {cutoff} must lie in (0, Nyquist {})",
            fs / 2.0
        )));
    }
    let wc = prewarp(cutoff, fs);
    let poles: Vec<Complex64> = prototype_poles(order)
        .into_iter()
        .map(|p| bilinear(p * wc, fs))
        .collect();
    let sections = order.div_ceil(2);
    let mut zeros = vec![(2.0, 1.0); sections];
    if order % 2 == 1 {
        // The lone real pole's section gets a single zero at z = −1.
        zeros[sections - 1] = (1.0, 0.0);
    }
    let cascade = BiquadCascade {
        sections: sections_from(&poles, &zeros),
        kind: FilterKind::Lowpass { cutoff, order },
        fs,
    };
    normalize_at(cascade, 0.0).checked()
}

/// Second-order notch at `f0` with quality factor `q` (unity gain away from `f0`).
pub fn design_notch(f0: f64, q: f64, fs: f64) -> Result<BiquadCascade> {
    if !(0.0 < f0 && f0 < fs / 2.0) {
        return Err(Error::invalid(format!(
            "notch frequency {f0} must lie in (0, Nyquist {})",
            fs / 2.0
        )));
    }
    if !(q > 0.0) {
        return Err(Error::invalid(format!("notch Q must be positive, got {q}")));
    }
    let w0 = 2.0 * PI * f0 / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let c = -2.0 * w0.cos();
    let section = Biquad {
        b0: 1.0 / a0,
        b1: c / a0,
        b2: 1.0 / a0,
        a1: c / a0,
        a2: (1.0 - alpha) / a0,
    };
    BiquadCascade {
        sections: vec![section],
        kind: FilterKind::Notch { f0, q },
        fs,
    }
    .checked()
}

/// Running state of a cascade (direct form II transposed), so a signal may
/// be filtered in chunks with the same result as in one piece.
#[derive(Clone, Debug)]
pub struct FilterState<'a> {
    cascade: &'a BiquadCascade,
    z: Vec<[f64; 2]>,
}

impl<'a> FilterState<'a> {
    pub fn new(cascade: &'a BiquadCascade) -> Self {
        FilterState {
            cascade,
            z: vec![[0.0; 2]; cascade.sections.len()],
        }
    }

    pub fn process(&mut self, x: &mut [f64]) {
        for (s, z) in self.cascade.sections.iter().zip(&mut self.z) {
            for v in x.iter_mut() {
                let y = s.b0 * *v + z[0];
                z[0] = s.b1 * *v - s.a1 * y + z[1];
                z[1] = s.b2 * *v - s.a2 * y;
                *v = y;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterMode {
    Causal,
    /// Forward then backward: squared magnitude, zero phase.
    ZeroPhase,
}

/// Filter `signal`. Zero-phase mode extends both ends by odd reflection of
/// `pad` samples (capped at `len − 1`) to tame start-up transients.
pub fn filter_apply(
    cascade: &BiquadCascade,
    signal: &[f64],
    mode: FilterMode,
    pad: usize,
) -> Vec<f64> {
    match mode {
        FilterMode::Causal => {
            let mut y = signal.to_vec();
            FilterState::new(cascade).process(&mut y);
            y
        }
        FilterMode::ZeroPhase => {
            let n = signal.len();
            if n == 0 {
                return Vec::new();
            }
            let pad = pad.min(n - 1);
            let mut ext = Vec::with_capacity(n + 2 * pad);
            let (first, last) = (signal[0], signal[n - 1]);
            ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
            ext.extend_from_slice(signal);
            ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));
            FilterState::new(cascade).process(&mut ext);
            ext.reverse();
            FilterState::new(cascade).process(&mut ext);
            ext.reverse();
            ext[pad..pad + n].to_vec()
        }
    }
}
