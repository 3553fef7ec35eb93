//! EEG cleaning: zero-phase bandpass, FastICA artifact separation and
//! removal, and fixed-length windowing.

mod artifacts;
mod filter;
mod ica;
mod pipeline;
mod recording;

pub use artifacts::{
    excess_kurtosis, identify_artifacts, pearson, remove_components, ArtifactCriteria,
};
pub use filter::{bandpass, butterworth_bandpass, measured_gain, Biquad, Sos, DEFAULT_ORDER};
pub use ica::{amari_index, fastica, IcaDecomposition, IcaOptions};
pub use pipeline::{clean, CleanOptions, Cleaned, Removal};
pub use recording::{EegSegment, RawRecording};

use alloc::format;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Cuts `rec` into consecutive non-overlapping windows of `window_s`
/// seconds; a trailing partial window is dropped. `trial_id` is copied to
/// every segment.
pub fn segment(rec: &RawRecording, window_s: f64, trial_id: u64) -> Result<Vec<EegSegment>> {
    let len = rec.fs * window_s;
    let rounded = len.round();
    if !(window_s > 0.0) || (len - rounded).abs() > 1e-9 * len.max(1.0) || rounded < 1.0 {
        return Err(Error::Argument(format!(
            "fs·window_s must be a positive integer, got {len}"
        )));
    }
    let w = rounded as usize;
    let count = rec.samples() / w;
    let c = rec.channels();
    Ok((0..count)
        .map(|k| {
            let mut data = Mat::zeros(c, w);
            for ch in 0..c {
                data.row_mut(ch)
                    .copy_from_slice(&rec.data.row(ch)[k * w..(k + 1) * w]);
            }
            EegSegment {
                data,
                window_index: k,
                trial_id,
            }
        })
        .collect())
}

/// Joins segments back along time.
pub fn concat_segments(segments: &[EegSegment]) -> Option<Mat> {
    let first = segments.first()?;
    let c = first.data.rows;
    let w: usize = segments.iter().map(|s| s.data.cols).sum();
    let mut out = Mat::zeros(c, w);
    for ch in 0..c {
        let row = out.row_mut(ch);
        let mut off = 0;
        for s in segments {
            row[off..off + s.data.cols].copy_from_slice(s.data.row(ch));
            off += s.data.cols;
        }
    }
    Some(out)
}
