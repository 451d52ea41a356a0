//! Recordings, stimulus events and the epoch sets the networks consume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of selectable items (home appliances) in the oddball protocol.
pub const ITEMS: usize = 6;

/// One flash.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulusEvent {
    pub onset_sample: u64,
    pub item_index: u8,
    pub is_target: bool,
    pub block_index: u32,
}

/// A continuous multichannel recording with its flash events.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRun {
    pub fs: f64,
    /// Channel-major: `samples[c]` is channel `c`.
    pub samples: Vec<Vec<f64>>,
    pub events: Vec<StimulusEvent>,
}

impl RawRun {
    pub fn new(fs: f64, samples: Vec<Vec<f64>>, events: Vec<StimulusEvent>) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::invalid(format!(
                "sampling rate must be positive, got {fs}"
            )));
        }
        let len = samples.first().map_or(0, Vec::len);
        if samples.iter().any(|c| c.len() != len) {
            return Err(Error::invalid("channels of a run must have equal length"));
        }
        if let Some(e) = events.iter().find(|e| e.onset_sample as usize >= len) {
            return Err(Error::invalid(format!(
                "event onset {} beyond signal end {len}",
                e.onset_sample
            )));
        }
        Ok(RawRun {
            fs,
            samples,
            events,
        })
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn blocks(&self) -> usize {
        self.events
            .iter()
            .map(|e| e.block_index as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// The item flagged as target (the same in every block of a run).
    pub fn target_item(&self) -> Option<u8> {
        self.events
            .iter()
            .find(|e| e.is_target)
            .map(|e| e.item_index)
    }
}

/// Where an epoch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EpochMeta {
    pub subject: u32,
    pub session: u32,
    pub run: u32,
    pub block: u32,
    pub item: u8,
}

/// A fixed window after one flash, channel-major `channels × samples`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub data: Vec<f64>,
    pub target: bool,
    pub meta: EpochMeta,
}

impl Epoch {
    pub fn label(&self) -> usize {
        usize::from(self.target)
    }
}

/// Equal-shaped epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSet {
    pub channels: usize,
    pub samples: usize,
    pub epochs: Vec<Epoch>,
}

impl EpochSet {
    pub fn new(channels: usize, samples: usize) -> Self {
        EpochSet {
            channels,
            samples,
            epochs: Vec::new(),
        }
    }

    pub fn push(&mut self, e: Epoch) -> Result<()> {
        if e.data.len() != self.channels * self.samples {
            return Err(Error::shape(
                "epoch set",
                format!(
                    "epoch has {} values, expected {}×{}",
                    e.data.len(),
                    self.channels,
                    self.samples
                ),
            ));
        }
        self.epochs.push(e);
        Ok(())
    }

    pub fn extend(&mut self, other: EpochSet) -> Result<()> {
        for e in other.epochs {
            self.push(e)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.epochs.iter().map(Epoch::label).collect()
    }

    /// Epochs matching `keep`, cloned into a new set.
    pub fn filter(&self, keep: impl Fn(&Epoch) -> bool) -> EpochSet {
        EpochSet {
            channels: self.channels,
            samples: self.samples,
            epochs: self.epochs.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    /// `(batch, channels, samples, 1)` tensor of the selected epochs.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.channels * self.samples);
        for &i in idx {
            data.extend_from_slice(&self.epochs[i].data);
        }
        Tensor::new([idx.len(), self.channels, self.samples, 1], data)
    }

    /// Count of each class: `[non-target, target]`.
    pub fn class_counts(&self) -> [usize; 2] {
        let t = self.epochs.iter().filter(|e| e.target).count();
        [self.len() - t, t]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> EpochMeta {
        EpochMeta {
            subject: 0,
            session: 0,
            run: 0,
            block: 0,
            item: 0,
        }
    }

    #[test]
    fn batch_layout_is_channel_major() {
        let mut s = EpochSet::new(2, 3);
        s.push(Epoch {
            data: vec![1., 2., 3., 4., 5., 6.],
            target: true,
            meta: meta(),
        })
        .unwrap();
        s.push(Epoch {
            data: vec![0.; 6],
            target: false,
            meta: meta(),
        })
        .unwrap();
        let b = s.batch(&[0, 1]).unwrap();
        assert_eq!(b.shape(), &[2, 2, 3, 1]);
        assert_eq!(&b.data()[..6], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(s.class_counts(), [1, 1]);
        assert_eq!(s.labels(), vec![1, 0]);
    }

    #[test]
    fn wrong_epoch_size_rejected() {
        let mut s = EpochSet::new(2, 3);
        assert!(s
            .push(Epoch {
                data: vec![0.; 5],
                target: false,
                meta: meta()
            })
            .is_err());
    }

    #[test]
    fn run_validation() {
        let ev = StimulusEvent {
            onset_sample: 10,
            item_index: 0,
            is_target: true,
            block_index: 0,
        };
        assert!(RawRun::new(100.0, vec![vec![0.0; 5]], vec![ev]).is_err());
        assert!(RawRun::new(0.0, vec![vec![0.0; 20]], vec![]).is_err());
        assert!(RawRun::new(100.0, vec![vec![0.0; 20], vec![0.0; 19]], vec![]).is_err());
        let r = RawRun::new(100.0, vec![vec![0.0; 20]], vec![ev]).unwrap();
        assert_eq!((r.blocks(), r.target_item()), (1, Some(0)));
    }
}
