//! Signal conditioning: notch and band-pass filtering, decimation,
//! winsorization, epoch extraction and standardization.

pub mod filter;
pub mod pipeline;
pub mod resample;

pub use filter::{
    design_butterworth_bandpass, design_butterworth_lowpass, design_notch, filter_apply, Biquad,
    BiquadCascade, FilterKind, FilterMode, FilterState,
};
pub use pipeline::{
    extract_epochs, preprocess_run, PreprocessConfig, Preprocessed, RunId, StageOrder, Standardizer,
};
pub use resample::{decimate, percentile, winsorize, WinsorBounds};
