//! Bandpass, decomposition and artifact removal chained in one call.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{bandpass, fastica, identify_artifacts, remove_components, ArtifactCriteria};
use super::{IcaDecomposition, IcaOptions, RawRecording};
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Which independent components to drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Removal {
    /// Flag components with [`identify_artifacts`].
    Auto(ArtifactCriteria),
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanOptions {
    /// Passband edges in Hz; `None` skips filtering.
    pub band: Option<(f64, f64)>,
    /// `None` skips the decomposition.
    pub ica: Option<IcaOptions>,
    pub removal: Option<Removal>,
}

#[derive(Debug, Clone)]
pub struct Cleaned {
    pub recording: RawRecording,
    pub decomposition: Option<IcaDecomposition>,
    pub removed: Vec<usize>,
}

/// Filters `rec`, then optionally decomposes it and reconstructs it
/// without the chosen components. `refs` holds reference signals (one per
/// row, same length as `rec`) for automatic flagging.
pub fn clean(rec: &RawRecording, opts: &CleanOptions, refs: Option<&Mat>) -> Result<Cleaned> {
    rec.validate()?;
    if opts.removal.is_some() && opts.ica.is_none() {
        return Err(Error::Argument("component removal needs a decomposition".into()));
    }
    if let Some(r) = refs {
        if r.cols != rec.samples() {
            return Err(Error::Argument(alloc::format!(
                "reference signals have {} samples, recording has {}",
                r.cols,
                rec.samples()
            )));
        }
    }
    let filtered = match opts.band {
        Some((lo, hi)) => bandpass(rec, lo, hi)?,
        None => rec.clone(),
    };
    let Some(ica) = &opts.ica else {
        return Ok(Cleaned {
            recording: filtered,
            decomposition: None,
            removed: Vec::new(),
        });
    };
    let dec = fastica(&filtered, ica)?;
    let removed = match &opts.removal {
        Some(Removal::Auto(criteria)) => {
            // References go through the same filter so correlations compare like with like.
            let refs = match (refs, opts.band) {
                (Some(r), Some((lo, hi))) => {
                    let names = (0..r.rows).map(|i| alloc::format!("ref{i}")).collect();
                    Some(bandpass(&RawRecording::new(r.clone(), rec.fs, names)?, lo, hi)?.data)
                }
                (r, _) => r.cloned(),
            };
            identify_artifacts(&dec, refs.as_ref(), criteria)
        }
        Some(Removal::Indices(idx)) => {
            let mut idx = idx.clone();
            idx.sort_unstable();
            idx.dedup();
            idx
        }
        None => Vec::new(),
    };
    let recording = remove_components(&filtered, &dec, &removed)?;
    Ok(Cleaned {
        recording,
        decomposition: Some(dec),
        removed,
    })
}
