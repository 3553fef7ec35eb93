//! Exporting a generated dataset: per-subject recordings (with and without
//! the injected artifact), every trial's frames and a trial index.

use std::path::Path;

use emofuse_core::eeg::RawRecording;
use emofuse_core::linalg::Mat;
use emofuse_core::synth::Dataset;
use emofuse_core::visual::Frame;

use crate::error::Result;
use crate::formats::{write_frames, write_json, write_recording};
use crate::rundir::Table;

pub const TRIALS: &str = "trials.tsv";
pub const FRAMES: &str = "frames.json";
pub const MIXING: &str = "artifact-mixing.json";

pub fn subject_stem(subject: usize) -> String {
    format!("subject-{subject:02}")
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let mut mixing = Vec::with_capacity(ds.recordings.len());
    for r in &ds.recordings {
        let stem = subject_stem(r.subject);
        write_recording(&dir.join(format!("{stem}.json")), &r.raw)?;
        let clean = RawRecording::new(r.clean.clone(), r.raw.fs, r.raw.channel_names.clone())?;
        write_recording(&dir.join(format!("{stem}-clean.json")), &clean)?;
        let source = Mat::from_vec(1, r.artifact.len(), r.artifact.clone())?;
        let source = RawRecording::new(source, r.raw.fs, vec!["artifact".into()])?;
        write_recording(&dir.join(format!("{stem}-artifact.json")), &source)?;
        mixing.push(r.mixing.clone());
    }
    write_json(&dir.join(MIXING), &mixing)?;

    let frames: Vec<Frame> = ds.trials.iter().flat_map(|t| t.frames.iter().cloned()).collect();
    write_frames(&dir.join(FRAMES), &frames)?;

    let mut t = Table::create(
        &dir.join(TRIALS),
        &["trial", "subject", "window", "arousal", "valence", "label", "informative"],
    )?;
    for (i, tr) in ds.trials.iter().enumerate() {
        let informative: Vec<String> = tr.informative.iter().map(|k| k.to_string()).collect();
        t.row([
            i.to_string(),
            tr.subject.to_string(),
            tr.eeg.window_index.to_string(),
            format!("{}", tr.arousal),
            format!("{}", tr.valence),
            tr.label.to_string(),
            informative.join(","),
        ])?;
    }
    Ok(())
}
