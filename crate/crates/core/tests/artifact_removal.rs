use emofuse_core::eeg::{bandpass, clean, pearson, ArtifactCriteria, CleanOptions, IcaOptions, RawRecording, Removal};
use emofuse_core::linalg::Mat;
use emofuse_core::labels::LabelScheme;
use emofuse_core::synth::{gen_dataset, Dataset, SynthConfig};

fn one_subject(trials: usize, seed: u64) -> Dataset {
    let cfg = SynthConfig {
        trials,
        subjects: 1,
        image_size: 8,
        ..Default::default()
    };
    gen_dataset(&cfg, LabelScheme::Deap4, seed).unwrap()
}

fn auto_removal(channels: usize, seed: u64) -> CleanOptions {
    CleanOptions {
        band: None,
        ica: Some(IcaOptions::new(channels, seed)),
        removal: Some(Removal::Auto(ArtifactCriteria::default())),
    }
}

#[test]
fn removing_the_flagged_component_recovers_the_clean_signal() {
    let ds = one_subject(40, 21);
    let rec = &ds.recordings[0];
    let out = clean(&rec.raw, &auto_removal(rec.raw.channels(), 3), None).unwrap();
    assert_eq!(out.removed.len(), 1, "flagged {:?}", out.removed);
    let before = pearson(&rec.raw.data.data, &rec.clean.data);
    let after = pearson(&out.recording.data.data, &rec.clean.data);
    assert!(before < 0.95, "raw correlation {before}");
    assert!(after > 0.95, "clean-signal correlation {after} (raw {before})");
}

#[test]
fn the_flagged_component_is_the_one_tracking_the_artifact() {
    let ds = one_subject(40, 22);
    let rec = &ds.recordings[0];
    let out = clean(&rec.raw, &auto_removal(rec.raw.channels(), 5), None).unwrap();
    let dec = out.decomposition.unwrap();
    let corr: Vec<f64> = (0..dec.n_components())
        .map(|i| pearson(dec.sources.row(i), &rec.artifact).abs())
        .collect();
    let best = (0..corr.len()).max_by(|&a, &b| corr[a].total_cmp(&corr[b])).unwrap();
    assert_eq!(out.removed, [best]);
    assert!(corr[best] > 0.8, "{}", corr[best]);
}

#[test]
fn removal_without_decomposition_is_rejected() {
    let ds = one_subject(4, 1);
    let opts = CleanOptions {
        band: Some((1.0, 50.0)),
        ica: None,
        removal: Some(Removal::Indices(vec![0])),
    };
    assert!(clean(&ds.recordings[0].raw, &opts, None).is_err());
}

#[test]
fn bandpass_only_keeps_shape() {
    let ds = one_subject(4, 2);
    let raw = &ds.recordings[0].raw;
    let opts = CleanOptions {
        band: Some((1.0, 50.0)),
        ica: None,
        removal: None,
    };
    let out = clean(raw, &opts, None).unwrap();
    assert_eq!((out.recording.channels(), out.recording.samples()), (raw.channels(), raw.samples()));
    assert!(out.decomposition.is_none() && out.removed.is_empty());
}

#[test]
fn filtered_pipeline_with_reference_flags_one_component() {
    let ds = one_subject(40, 21);
    let rec = &ds.recordings[0];
    let refs = Mat::from_vec(1, rec.artifact.len(), rec.artifact.clone()).unwrap();
    let opts = CleanOptions {
        band: Some((1.0, 50.0)),
        ..auto_removal(rec.raw.channels(), 0)
    };
    let out = clean(&rec.raw, &opts, Some(&refs)).unwrap();
    assert_eq!(out.removed.len(), 1, "flagged {:?}", out.removed);
    let art = RawRecording::new(refs, rec.raw.fs, vec!["eog".into()]).unwrap();
    let art = bandpass(&art, 1.0, 50.0).unwrap();
    let dec = out.decomposition.unwrap();
    let corr: Vec<f64> = (0..dec.n_components())
        .map(|i| pearson(dec.sources.row(i), art.data.row(0)).abs())
        .collect();
    let best = (0..corr.len()).max_by(|&a, &b| corr[a].total_cmp(&corr[b])).unwrap();
    assert_eq!(out.removed, [best]);
}
