//! From a raw run to standardized epochs.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::filter::{
    design_butterworth_bandpass, design_butterworth_lowpass, design_notch, filter_apply,
    BiquadCascade, FilterMode,
};
use super::resample::{decimate, winsorize};
use crate::data::{Epoch, EpochMeta, EpochSet, RawRun};
use crate::error::{Error, Result};

/// Order of the conditioning stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageOrder {
    /// Notch and band-pass at the recording rate, then decimate; the
    /// band-pass doubles as the anti-alias filter.
    FilterFirst,
    /// Decimate first (behind an explicit anti-alias low-pass), then filter
    /// at the reduced rate.
    DecimateFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub notch_hz: Option<f64>,
    pub notch_q: f64,
    pub band_lo: f64,
    pub band_hi: f64,
    pub band_order: usize,
    pub decimation: usize,
    /// Lower/upper winsorization percentiles.
    pub winsor: Option<(f64, f64)>,
    pub window_ms: f64,
    pub order: StageOrder,
    pub mode: FilterMode,
    /// Reflection padding for zero-phase filtering, in seconds.
    pub pad_seconds: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            notch_hz: Some(60.0),
            notch_q: 30.0,
            band_lo: 1.0,
            band_hi: 15.0,
            band_order: 6,
            decimation: 20,
            winsor: Some((10.0, 90.0)),
            window_ms: 1000.0,
            order: StageOrder::FilterFirst,
            mode: FilterMode::ZeroPhase,
            pad_seconds: 1.0,
        }
    }
}

/// Identifies a run within a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunId {
    pub subject: u32,
    pub session: u32,
    pub run: u32,
}

#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub epochs: EpochSet,
    /// Flashes whose window ran past the end of the signal.
    pub dropped: usize,
    /// Stages applied, in order.
    pub stages: Vec<String>,
}

fn run_cascade(c: &BiquadCascade, channels: &mut [Vec<f64>], mode: FilterMode, pad_seconds: f64) {
    let pad = (pad_seconds * c.fs).round() as usize;
    for ch in channels.iter_mut() {
        *ch = filter_apply(c, ch, mode, pad);
    }
}

/// Window length in samples at rate `fs`.
pub fn window_samples(window_ms: f64, fs: f64) -> Result<usize> {
    let n = (window_ms / 1000.0 * fs).round() as usize;
    if n == 0 {
        return Err(Error::invalid(format!(
            "window of {window_ms} ms is empty at {fs} Hz"
        )));
    }
    Ok(n)
}

/// Cut `[onset, onset + window)` after every flash. `onset_scale` converts
/// event onsets (recorded at the original rate) to sample indices of
/// `channels`. Windows running past the end are dropped and counted.
pub fn extract_epochs(
    channels: &[Vec<f64>],
    run: &RawRun,
    id: RunId,
    onset_scale: usize,
    window: usize,
) -> (EpochSet, usize) {
    let len = channels.first().map_or(0, Vec::len);
    let mut set = EpochSet::new(channels.len(), window);
    let mut dropped = 0;
    for ev in &run.events {
        let start = ev.onset_sample as usize / onset_scale;
        if start + window > len {
            dropped += 1;
            continue;
        }
        let mut data = Vec::with_capacity(channels.len() * window);
        for ch in channels {
            data.extend_from_slice(&ch[start..start + window]);
        }
        let meta = EpochMeta {
            subject: id.subject,
            session: id.session,
            run: id.run,
            block: ev.block_index,
            item: ev.item_index,
        };
        set.epochs.push(Epoch {
            data,
            target: ev.is_target,
            meta,
        });
    }
    (set, dropped)
}

/// Filter, decimate, winsorize and epoch one run. Standardization is
/// separate because its statistics must come from the training split only.
pub fn preprocess_run(run: &RawRun, id: RunId, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    if cfg.decimation == 0 {
        return Err(Error::invalid("decimation factor must be ≥ 1"));
    }
    let fs_in = run.fs;
    let fs_out = fs_in / cfg.decimation as f64;
    let mut x = run.samples.clone();
    let mut stages = Vec::new();

    let notch = |x: &mut Vec<Vec<f64>>, fs: f64, stages: &mut Vec<String>| -> Result<()> {
        if let Some(f0) = cfg.notch_hz {
            if f0 >= fs / 2.0 {
                warn!("notch at {f0} Hz skipped: at or above Nyquist for {fs} Hz");
                stages.push(format!("notch {f0} Hz skipped (fs {fs})"));
                return Ok(());
            }
            run_cascade(
                &design_notch(f0, cfg.notch_q, fs)?,
                x,
                cfg.mode,
                cfg.pad_seconds,
            );
            stages.push(format!("notch {f0} Hz Q {} @ {fs} Hz", cfg.notch_q));
        }
        Ok(())
    };
    let bandpass = |x: &mut Vec<Vec<f64>>, fs: f64, stages: &mut Vec<String>| -> Result<()> {
        let c = design_butterworth_bandpass(cfg.band_order, cfg.band_lo, cfg.band_hi, fs)?;
        run_cascade(&c, x, cfg.mode, cfg.pad_seconds);
        stages.push(format!(
            "bandpass {}-{} Hz order {} @ {fs} Hz",
            cfg.band_lo, cfg.band_hi, cfg.band_order
        ));
        Ok(())
    };
    let downsample = |x: &mut Vec<Vec<f64>>, stages: &mut Vec<String>| -> Result<()> {
        for ch in x.iter_mut() {
            *ch = decimate(ch, cfg.decimation)?;
        }
        stages.push(format!("decimate x{} -> {fs_out} Hz", cfg.decimation));
        Ok(())
    };

    match cfg.order {
        StageOrder::FilterFirst => {
            notch(&mut x, fs_in, &mut stages)?;
            bandpass(&mut x, fs_in, &mut stages)?;
            downsample(&mut x, &mut stages)?;
        }
        StageOrder::DecimateFirst => {
            if cfg.decimation > 1 {
                let aa = design_butterworth_lowpass(8, 0.4 * fs_out, fs_in)?;
                run_cascade(&aa, &mut x, cfg.mode, cfg.pad_seconds);
                stages.push(format!(
                    "anti-alias lowpass {} Hz @ {fs_in} Hz",
                    0.4 * fs_out
                ));
            }
            downsample(&mut x, &mut stages)?;
            notch(&mut x, fs_out, &mut stages)?;
            bandpass(&mut x, fs_out, &mut stages)?;
        }
    }
    if let Some((lo, hi)) = cfg.winsor {
        for ch in x.iter_mut() {
            winsorize(ch, lo, hi)?;
        }
        stages.push(format!("winsorize {lo}/{hi}"));
    }
    let window = window_samples(cfg.window_ms, fs_out)?;
    let (epochs, dropped) = extract_epochs(&x, run, id, cfg.decimation, window);
    stages.push(format!("epoch {} ms = {window} samples", cfg.window_ms));
    if dropped > 0 {
        warn!("run {id:?}: {dropped} epochs dropped (window past end of signal)");
    }
    debug!("run {id:?}: {}", stages.join(" -> "));
    Ok(Preprocessed {
        epochs,
        dropped,
        stages,
    })
}

/// Per-channel z-scoring with statistics from one (training) set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(set: &EpochSet) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::invalid(
                "standardization statistics need at least one epoch",
            ));
        }
        let (c, w) = (set.channels, set.samples);
        let n = (set.len() * w) as f64;
        let mut mean = vec![0.0; c];
        for e in &set.epochs {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += e.data[ch * w..(ch + 1) * w].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for e in &set.epochs {
            for (ch, v) in var.iter_mut().enumerate() {
                *v += e.data[ch * w..(ch + 1) * w]
                    .iter()
                    .map(|x| (x - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        // A flat channel keeps unit scale instead of dividing by zero.
        let std = var
            .iter()
            .map(|v| (v / n).sqrt())
            .map(|s| if s > 0.0 { s } else { 1.0 })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, set: &mut EpochSet) -> Result<()> {
        if set.channels != self.mean.len() {
            return Err(Error::shape(
                "standardize",
                format!(
                    "{} channels, statistics for {}",
                    set.channels,
                    self.mean.len()
                ),
            ));
        }
        let w = set.samples;
        for e in &mut set.epochs {
            for ch in 0..set.channels {
                for v in &mut e.data[ch * w..(ch + 1) * w] {
                    *v = (*v - self.mean[ch]) / self.std[ch];
                }
            }
        }
        Ok(())
    }
}
