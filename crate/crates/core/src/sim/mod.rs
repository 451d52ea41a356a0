//! Synthetic oddball sessions: six items flash in randomized blocks, and
//! every flash of the attended item evokes a P300 on top of background EEG.

mod interaction;
mod io;

use std::f64::consts::PI;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{RawRun, StimulusEvent, ITEMS};
use crate::error::{Error, Result};

pub use interaction::{
    run_interaction, select_from_confidences, select_item, ConstantScorer, OracleScorer, Scorer,
    Selection,
};
pub(crate) use io::sha256_hex;
pub use io::{
    generate_dataset, load_dataset, read_events, read_raw_run, save_dataset, write_events,
    write_raw_run, DatasetManifest, RunEntry, SessionDataset, RAW_MAGIC, RAW_VERSION,
};

/// Montage of the generator (10–20 names).
pub const CHANNELS: [&str; 16] = [
    "Fz", "FC1", "FC2", "C3", "Cz", "C4", "CP1", "CP2", "P7", "P3", "Pz", "P4", "P8", "PO7", "PO8",
    "Oz",
];

/// Centro-parietal emphasis, Pz strongest.
pub const P300_WEIGHTS: [f64; 16] = [
    0.35, 0.5, 0.5, 0.6, 0.8, 0.6, 0.9, 0.9, 0.55, 0.85, 1.0, 0.85, 0.55, 0.6, 0.6, 0.4,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SnrPreset {
    High,
    Medium,
    Street,
}

impl SnrPreset {
    pub fn name(self) -> &'static str {
        match self {
            SnrPreset::High => "high",
            SnrPreset::Medium => "medium",
            SnrPreset::Street => "street",
        }
    }
}

impl FromStr for SnrPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "high" => Ok(SnrPreset::High),
            "medium" => Ok(SnrPreset::Medium),
            "street" | "street-noise" => Ok(SnrPreset::Street),
            other => Err(Error::invalid(format!(
                "unknown SNR preset `{other}` (valid: high, medium, street)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct P300Config {
    /// Peak amplitude at weight 1, µV.
    pub amplitude: f64,
    pub latency_ms: f64,
    /// Standard deviation of the per-flash latency jitter.
    pub jitter_ms: f64,
    /// Full width at half maximum of the Gaussian bump.
    pub width_ms: f64,
    pub channel_weights: Vec<f64>,
}

/// Background levels, all RMS in µV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub pink: f64,
    pub white: f64,
    /// 10 Hz alpha rhythm.
    pub alpha: f64,
    /// Mains interference.
    pub line: f64,
    pub line_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub subjects: u32,
    pub sessions: u32,
    pub runs_per_session: u32,
    pub blocks_min: u32,
    pub blocks_max: u32,
    pub fs: f64,
    pub soa_ms: f64,
    pub flash_ms: f64,
    /// Quiet signal before the first flash and after the last one.
    pub lead_in_ms: f64,
    pub tail_ms: f64,
    pub p300: P300Config,
    pub noise: NoiseConfig,
    /// Multiplies the P300 amplitude per subject (index = subject); missing
    /// entries mean 1.
    pub attenuation: Vec<f64>,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Nine subjects, the last three with a weaker response (the stroke
    /// cohort), four sessions of six runs.
    pub fn preset(snr: SnrPreset, seed: u64) -> Self {
        let (amplitude, jitter, pink, white, alpha, line) = match snr {
            SnrPreset::High => (10.0, 20.0, 3.0, 2.0, 2.0, 5.0),
            SnrPreset::Medium => (6.0, 35.0, 6.0, 4.0, 4.0, 10.0),
            SnrPreset::Street => (4.0, 50.0, 9.0, 6.0, 6.0, 25.0),
        };
        GeneratorConfig {
            subjects: 9,
            sessions: 4,
            runs_per_session: 6,
            blocks_min: 20,
            blocks_max: 25,
            fs: 2400.0,
            soa_ms: 400.0,
            flash_ms: 100.0,
            lead_in_ms: 2000.0,
            tail_ms: 1500.0,
            p300: P300Config {
                amplitude,
                latency_ms: 300.0,
                jitter_ms: jitter,
                width_ms: 200.0,
                channel_weights: P300_WEIGHTS.to_vec(),
            },
            noise: NoiseConfig {
                pink,
                white,
                alpha,
                line,
                line_hz: 60.0,
            },
            attenuation: vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.7, 0.7, 0.7],
            seed,
        }
    }

    pub fn channels(&self) -> usize {
        self.p300.channel_weights.len()
    }

    pub fn soa_samples(&self) -> usize {
        (self.soa_ms / 1000.0 * self.fs).round() as usize
    }

    fn ms(&self, ms: f64) -> usize {
        (ms / 1000.0 * self.fs).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.fs,
            self.soa_ms,
            self.flash_ms,
            self.p300.width_ms,
            self.p300.latency_ms,
        ];
        if positive.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(
                "sampling rate, SOA, flash, P300 latency and width must be positive",
            ));
        }
        if self.flash_ms > self.soa_ms {
            return Err(Error::invalid(
                "flash duration exceeds the stimulus-onset asynchrony",
            ));
        }
        if self.blocks_min == 0 || self.blocks_min > self.blocks_max {
            return Err(Error::invalid(format!(
                "invalid block range [{}, {}]",
                self.blocks_min, self.blocks_max
            )));
        }
        if self.subjects == 0
            || self.sessions == 0
            || self.runs_per_session == 0
            || self.channels() == 0
        {
            return Err(Error::invalid(
                "need at least one subject, session, run and channel",
            ));
        }
        let levels = [
            self.noise.pink,
            self.noise.white,
            self.noise.alpha,
            self.noise.line,
            self.p300.jitter_ms,
        ];
        if levels.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid(
                "noise levels and jitter must be non-negative",
            ));
        }
        Ok(())
    }

    pub fn attenuation_for(&self, subject: u32) -> f64 {
        self.attenuation
            .get(subject as usize)
            .copied()
            .unwrap_or(1.0)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream per run, derived from the master seed and the run's coordinates.
pub fn run_seed(master: u64, subject: u32, session: u32, run: u32) -> u64 {
    [subject, session, run]
        .iter()
        .fold(splitmix64(master), |h, &v| splitmix64(h ^ u64::from(v)))
}

/// Approximately 1/f noise: white noise through Kellet's pink filter,
/// scaled to unit RMS.
fn pink_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut b = [0.0_f64; 7];
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let y = b[..6].iter().sum::<f64>() + b[6] + w * 0.5362;
            b[6] = w * 0.115926;
            y
        })
        .collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

/// Event table of one run: `blocks` randomized passes over the six items.
fn schedule(
    cfg: &GeneratorConfig,
    blocks: u32,
    target: u8,
    rng: &mut impl Rng,
) -> Vec<StimulusEvent> {
    let soa = cfg.soa_samples() as u64;
    let start = cfg.ms(cfg.lead_in_ms) as u64;
    let mut events = Vec::with_capacity(blocks as usize * ITEMS);
    let mut order: Vec<u8> = (0..ITEMS as u8).collect();
    for b in 0..blocks {
        order.shuffle(rng);
        for &item in &order {
            let k = events.len() as u64;
            events.push(StimulusEvent {
                onset_sample: start + k * soa,
                item_index: item,
                is_target: item == target,
                block_index: b,
            });
        }
    }
    events
}

/// One continuous run. Samples are rounded to `f32` precision so that the
/// on-disk format reproduces them exactly.
pub fn generate_run(cfg: &GeneratorConfig, subject: u32, session: u32, run: u32) -> Result<RawRun> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed(cfg.seed, subject, session, run));
    let blocks = rng.gen_range(cfg.blocks_min..=cfg.blocks_max);
    let target = rng.gen_range(0..ITEMS as u8);
    let events = schedule(cfg, blocks, target, &mut rng);
    let n = cfg.ms(cfg.lead_in_ms) + events.len() * cfg.soa_samples() + cfg.ms(cfg.tail_ms);
    let c = cfg.channels();
    let fs = cfg.fs;

    // Shared and per-channel pink components (volume conduction makes real
    // EEG spatially correlated).
    let shared = pink_noise(n, &mut rng);
    let line_phase = rng.gen_range(0.0..2.0 * PI);
    let white = Normal::new(0.0, 1.0).expect("unit normal");
    let mut samples = Vec::with_capacity(c);
    for _ in 0..c {
        let own = pink_noise(n, &mut rng);
        let alpha_phase = rng.gen_range(0.0..2.0 * PI);
        let alpha_mod = rng.gen_range(0.0..2.0 * PI);
        let ch: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                let pink = cfg.noise.pink * std::f64::consts::FRAC_1_SQRT_2 * (shared[i] + own[i]);
                let alpha = cfg.noise.alpha
                    * std::f64::consts::SQRT_2
                    * (1.0 + 0.3 * (2.0 * PI * 0.1 * t + alpha_mod).sin())
                    * (2.0 * PI * 10.0 * t + alpha_phase).sin();
                let line = cfg.noise.line
                    * std::f64::consts::SQRT_2
                    * (2.0 * PI * cfg.noise.line_hz * t + line_phase).sin();
                pink + alpha + line + cfg.noise.white * white.sample(&mut rng)
            })
            .collect();
        samples.push(ch);
    }

    let p = &cfg.p300;
    let sigma = p.width_ms / 1000.0 * fs / (2.0 * (2.0 * 2f64.ln()).sqrt());
    let reach = (4.0 * sigma).ceil() as i64;
    let amp = p.amplitude * cfg.attenuation_for(subject);
    for ev in events.iter().filter(|e| e.is_target) {
        let jitter = if p.jitter_ms > 0.0 {
            rng.sample::<f64, _>(StandardNormal) * p.jitter_ms
        } else {
            0.0
        };
        let centre = ev.onset_sample as f64 + (p.latency_ms + jitter) / 1000.0 * fs;
        let lo = (centre.round() as i64 - reach).max(0);
        let hi = (centre.round() as i64 + reach).min(n as i64 - 1);
        for i in lo..=hi {
            let bump = amp * (-0.5 * ((i as f64 - centre) / sigma).powi(2)).exp();
            for (ch, w) in samples.iter_mut().zip(&p.channel_weights) {
                ch[i as usize] += w * bump;
            }
        }
    }
    for ch in &mut samples {
        ch.iter_mut().for_each(|v| *v = f64::from(*v as f32));
    }
    RawRun::new(fs, samples, events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(seed: u64) -> GeneratorConfig {
        let mut c = GeneratorConfig::preset(SnrPreset::High, seed);
        c.noise = NoiseConfig {
            pink: 0.0,
            white: 0.0,
            alpha: 0.0,
            line: 0.0,
            line_hz: 60.0,
        };
        c
    }

    #[test]
    fn block_counts_stay_in_range() {
        let cfg = GeneratorConfig::preset(SnrPreset::High, 0);
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(run_seed(seed, 0, 0, 0));
            let b = rng.gen_range(cfg.blocks_min..=cfg.blocks_max);
            assert!((20..=25).contains(&b));
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in 0..60 {
            let run = generate_run(&quiet(7), 0, 0, r).unwrap();
            assert!((20..=25).contains(&run.blocks()));
            seen.insert(run.blocks());
        }
        assert!(seen.len() > 3);
    }

    #[test]
    fn each_block_flashes_every_item_once_with_one_target() {
        let run = generate_run(&quiet(1), 2, 1, 3).unwrap();
        let target = run.target_item().unwrap();
        for b in 0..run.blocks() as u32 {
            let block: Vec<_> = run.events.iter().filter(|e| e.block_index == b).collect();
            let mut items: Vec<u8> = block.iter().map(|e| e.item_index).collect();
            items.sort();
            assert_eq!(items, vec![0, 1, 2, 3, 4, 5]);
            assert_eq!(block.iter().filter(|e| e.is_target).count(), 1);
            assert!(block
                .iter()
                .all(|e| e.is_target == (e.item_index == target)));
        }
        for w in run.events.windows(2) {
            assert_eq!(w[1].onset_sample - w[0].onset_sample, 960);
        }
    }

    #[test]
    fn noiseless_difference_peaks_at_latency() {
        let cfg = quiet(3);
        let run = generate_run(&cfg, 0, 0, 0).unwrap();
        let pz = 10;
        let win = 2400;
        let mut sums = [vec![0.0; win], vec![0.0; win]];
        let mut counts = [0.0; 2];
        for e in run
            .events
            .iter()
            .filter(|e| e.onset_sample as usize + win <= run.len())
        {
            let class = usize::from(e.is_target);
            counts[class] += 1.0;
            for (k, acc) in sums[class].iter_mut().enumerate() {
                *acc += run.samples[pz][e.onset_sample as usize + k];
            }
        }
        let diff: Vec<f64> = (0..win)
            .map(|k| sums[1][k] / counts[1] - sums[0][k] / counts[0])
            .collect();
        let peak = (0..win)
            .max_by(|&a, &b| diff[a].total_cmp(&diff[b]))
            .unwrap();
        let peak_ms = peak as f64 / 2.4;
        assert!(
            (peak_ms - 300.0).abs() <= cfg.p300.jitter_ms,
            "peak at {peak_ms} ms"
        );
    }

    #[test]
    fn target_minus_nontarget_matches_template_amplitude() {
        let mut cfg = GeneratorConfig::preset(SnrPreset::High, 11);
        cfg.p300.jitter_ms = 0.0;
        let lag = (0.3 * cfg.fs) as usize;
        let (mut t, mut n) = (Vec::new(), Vec::new());
        for r in 0..10 {
            let run = generate_run(&cfg, 0, 0, r).unwrap();
            for e in &run.events {
                let v = run.samples[10][e.onset_sample as usize + lag];
                if e.is_target {
                    t.push(v)
                } else {
                    n.push(v)
                }
            }
        }
        assert!(t.len() + n.len() >= 1000);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let se = (var(&t) / t.len() as f64 + var(&n) / n.len() as f64).sqrt();
        let d = mean(&t) - mean(&n);
        assert!(
            (d - cfg.p300.amplitude).abs() < 3.0 * se,
            "difference {d}, SE {se}"
        );
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let cfg = GeneratorConfig::preset(SnrPreset::Medium, 5);
        let a = generate_run(&cfg, 1, 2, 3).unwrap();
        assert_eq!(a, generate_run(&cfg, 1, 2, 3).unwrap());
        assert_ne!(
            a.samples[0][..100],
            generate_run(&cfg, 1, 2, 4).unwrap().samples[0][..100]
        );
        assert_ne!(run_seed(5, 1, 2, 3), run_seed(5, 1, 3, 2));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = GeneratorConfig::preset(SnrPreset::High, 0);
        cfg.blocks_min = 30;
        assert!(generate_run(&cfg, 0, 0, 0).is_err());
        let mut cfg = GeneratorConfig::preset(SnrPreset::High, 0);
        cfg.flash_ms = 500.0;
        assert!(cfg.validate().is_err());
        assert!("loud".parse::<SnrPreset>().is_err());
    }
}
