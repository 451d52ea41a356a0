//! Closed-loop item selection: score every flash of a run, average per item
//! over the first `n` blocks and pick the best-scoring item.

use crate::arch::Model;
use crate::data::{EpochSet, RawRun, ITEMS};
use crate::dsp::{preprocess_run, PreprocessConfig, RunId, Standardizer};
use crate::error::{Error, Result};

/// Anything that can rate how target-like each epoch is.
pub trait Scorer {
    fn confidences(&self, epochs: &EpochSet) -> Result<Vec<f64>>;
}

const SCORE_BATCH: usize = 256;

impl Scorer for Model {
    fn confidences(&self, epochs: &EpochSet) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(epochs.len());
        let idx: Vec<usize> = (0..epochs.len()).collect();
        for chunk in idx.chunks(SCORE_BATCH) {
            let p = self.predict_proba(&epochs.batch(chunk)?)?;
            out.extend((0..chunk.len()).map(|i| p.row(i)[1]));
        }
        Ok(out)
    }
}

/// Scores 1 for target flashes and 0 otherwise.
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn confidences(&self, epochs: &EpochSet) -> Result<Vec<f64>> {
        Ok(epochs
            .epochs
            .iter()
            .map(|e| f64::from(u8::from(e.target)))
            .collect())
    }
}

/// Scores every flash the same.
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn confidences(&self, epochs: &EpochSet) -> Result<Vec<f64>> {
        Ok(vec![self.0; epochs.len()])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub item: u8,
    /// Mean confidence per item.
    pub confidences: [f64; ITEMS],
    pub epochs_used: usize,
}

/// Pick the item with the highest mean confidence over blocks `0..n_blocks`.
/// Ties go to the lowest item index.
pub fn select_item<S: Scorer + ?Sized>(
    scorer: &S,
    epochs: &EpochSet,
    n_blocks: u32,
) -> Result<Selection> {
    let used = epochs.filter(|e| e.meta.block < n_blocks);
    let conf = scorer.confidences(&used)?;
    select_from_confidences(&used, &conf, n_blocks)
}

/// [`select_item`] with the per-epoch confidences already computed (one per
/// epoch of `epochs`), so several block counts can share one scoring pass.
pub fn select_from_confidences(
    epochs: &EpochSet,
    conf: &[f64],
    n_blocks: u32,
) -> Result<Selection> {
    if n_blocks == 0 {
        return Err(Error::invalid("selection needs at least one block"));
    }
    if conf.len() != epochs.len() {
        return Err(Error::invalid(format!(
            "{} confidences for {} epochs",
            conf.len(),
            epochs.len()
        )));
    }
    let mut sums = [0.0; ITEMS];
    let mut counts = [0usize; ITEMS];
    for (e, c) in epochs
        .epochs
        .iter()
        .zip(conf)
        .filter(|(e, _)| e.meta.block < n_blocks)
    {
        sums[e.meta.item as usize] += c;
        counts[e.meta.item as usize] += 1;
    }
    let used: usize = counts.iter().sum();
    if used == 0 {
        return Err(Error::invalid("no epochs in the requested blocks"));
    }
    let mut means = [f64::NEG_INFINITY; ITEMS];
    for i in 0..ITEMS {
        if counts[i] > 0 {
            means[i] = sums[i] / counts[i] as f64;
        }
    }
    let mut best = 0;
    for i in 1..ITEMS {
        if means[i] > means[best] {
            best = i;
        }
    }
    let ties = means.iter().filter(|&&m| m == means[best]).count();
    if ties > 1 {
        log::debug!(
            "{ties} items tie at {:.4}; choosing item {best}",
            means[best]
        );
    }
    Ok(Selection {
        item: best as u8,
        confidences: means,
        epochs_used: used,
    })
}

/// Preprocess a raw run, standardize it with training statistics and select
/// an item from its first `n_blocks` blocks.
pub fn run_interaction<S: Scorer + ?Sized>(
    scorer: &S,
    run: &RawRun,
    id: RunId,
    cfg: &PreprocessConfig,
    standardizer: Option<&Standardizer>,
    n_blocks: u32,
) -> Result<Selection> {
    let mut pre = preprocess_run(run, id, cfg)?;
    if let Some(s) = standardizer {
        s.apply(&mut pre.epochs)?;
    }
    select_item(scorer, &pre.epochs, n_blocks)
}
