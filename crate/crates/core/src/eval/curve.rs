use serde::{Deserialize, Serialize};

use super::metrics::bitrate;
use crate::data::{EpochSet, ITEMS};
use crate::error::{Error, Result};
use crate::sim::{select_from_confidences, Scorer};

/// Seconds per flash (100 ms flash + 300 ms blank).
pub const SOA_SECONDS: f64 = 0.4;
const SOA_MS: f64 = 400.0;

/// Time to present `blocks` blocks of six flashes.
pub fn selection_seconds(blocks: u32) -> f64 {
    // Integer milliseconds first, so 1 block is exactly 2.4 s.
    f64::from(blocks) * ITEMS as f64 * SOA_MS / 1000.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub blocks: u32,
    pub time_s: f64,
    /// Selection accuracy in percent.
    pub accuracy: f64,
    /// Bits per minute.
    pub bitrate: f64,
}

/// Selection accuracy and bitrate after `1..=max_blocks` blocks. Each entry
/// of `runs` holds the (preprocessed, standardized) epochs of one run.
pub fn target_by_block_curve<S: Scorer + ?Sized>(
    scorer: &S,
    runs: &[EpochSet],
    max_blocks: u32,
) -> Result<Vec<CurvePoint>> {
    if runs.is_empty() || max_blocks == 0 {
        return Err(Error::invalid(
            "target-by-block curve needs runs and at least one block",
        ));
    }
    let mut scored = Vec::with_capacity(runs.len());
    for run in runs {
        let target = run
            .epochs
            .iter()
            .find(|e| e.target)
            .map(|e| e.meta.item)
            .ok_or_else(|| Error::invalid("run without a target flash"))?;
        let blocks = run
            .epochs
            .iter()
            .map(|e| e.meta.block + 1)
            .max()
            .unwrap_or(0);
        if blocks < max_blocks {
            return Err(Error::invalid(format!(
                "run has {blocks} blocks, fewer than the {max_blocks} requested"
            )));
        }
        scored.push((run, scorer.confidences(run)?, target));
    }
    (1..=max_blocks)
        .map(|n| {
            let mut hits = 0;
            for (run, conf, target) in &scored {
                if select_from_confidences(run, conf, n)?.item == *target {
                    hits += 1;
                }
            }
            let p = hits as f64 / scored.len() as f64;
            let t = selection_seconds(n);
            Ok(CurvePoint {
                blocks: n,
                time_s: t,
                accuracy: 100.0 * p,
                bitrate: bitrate(p, ITEMS, t)?,
            })
        })
        .collect()
}
