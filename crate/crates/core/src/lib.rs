//! Multimodal EEG + facial-frame emotion classification, written against
//! `core` + `alloc` only.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod checks;
pub mod compressor;
pub mod diff;
pub mod eeg;
mod error;
pub mod fusion;
pub mod labels;
pub mod linalg;
pub mod metrics;
pub mod mil;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
