use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Continuous multichannel recording, `channels × samples`, in microvolts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecording {
    pub data: Mat,
    pub fs: f64,
    pub channel_names: Vec<String>,
}

impl RawRecording {
    pub fn new(data: Mat, fs: f64, channel_names: Vec<String>) -> Result<Self> {
        let rec = Self {
            data,
            fs,
            channel_names,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Builds a recording with generic `ch{i}` channel names.
    pub fn unnamed(data: Mat, fs: f64) -> Result<Self> {
        let names = (0..data.rows).map(|i| format!("ch{i}")).collect();
        Self::new(data, fs, names)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::Argument(format!(
                "sampling rate must be positive, got {}",
                self.fs
            )));
        }
        if self.data.rows == 0 {
            return Err(Error::Argument(
                "recording needs at least one channel".into(),
            ));
        }
        if self.channel_names.len() != self.data.rows {
            return Err(Error::Argument(format!(
                "{} channel names for {} channels",
                self.channel_names.len(),
                self.data.rows
            )));
        }
        if let Some(i) = self.data.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "recording sample {} of channel {}",
                i % self.data.cols.max(1),
                i / self.data.cols.max(1)
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.data.rows
    }

    pub fn samples(&self) -> usize {
        self.data.cols
    }

    pub fn duration_s(&self) -> f64 {
        self.samples() as f64 / self.fs
    }

    pub(crate) fn with_data(&self, data: Mat) -> Self {
        Self {
            data,
            fs: self.fs,
            channel_names: self.channel_names.clone(),
        }
    }
}

/// One fixed-length window cut from a recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EegSegment {
    pub data: Mat,
    pub window_index: usize,
    pub trial_id: u64,
}
