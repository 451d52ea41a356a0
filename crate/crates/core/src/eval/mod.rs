//! Cross-validation plans, metrics, target-by-block curves, bitrate and the
//! paired significance tests used to compare topologies.

mod curve;
mod folds;
mod metrics;
mod report;
mod stats;

pub use curve::{selection_seconds, target_by_block_curve, CurvePoint, SOA_SECONDS};
pub use folds::{make_folds, Fold, Strategy, VALIDATION_FRACTION};
pub use metrics::{accuracy, bitrate, bits_per_selection, cross_entropy};
pub use report::{
    check_unique, compare_report, read_csv, stats_report, to_csv_string, write_csv, CompareRow,
    CurveRecord, ResultRecord, StatsRow, PAIRS,
};
pub use stats::{
    kolmogorov_q, ks_normality, ks_test, mean_sd, wilcoxon_signed_rank, KolmogorovSmirnov,
    Wilcoxon, EXACT_MAX_N,
};
