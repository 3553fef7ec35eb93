//! Synthetic trials with known ground truth: rated arousal/valence, an EEG
//! window whose channel topography and band powers follow the ratings, and
//! a bag of frames of which a known subset shows an oriented bar.
//!
//! Signal layout, by design:
//! - arousal is carried mainly by *where* alpha (10 Hz) and beta (20 Hz)
//!   activity sits (front vs back half of the montage); every level uses
//!   the same multiset of channel signals, so any order-invariant pooling
//!   over channels is blind to it;
//! - a global theta (6 Hz) amplitude gives a partial arousal cue and a
//!   26 Hz amplitude a very weak valence cue;
//! - the bar angle in informative frames encodes valence, with a small
//!   arousal offset;
//! - each subject's recording carries a blink-like artifact through a
//!   fixed mixing vector.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::eeg::{EegSegment, RawRecording};
use crate::error::{Error, Result};
use crate::labels::{map_label, LabelScheme, THRESHOLD};
use crate::linalg::Mat;
use crate::visual::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub trials: usize,
    pub subjects: usize,
    /// Frames per bag.
    pub frames: usize,
    /// Informative frames per bag.
    pub informative: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub eeg_channels: usize,
    pub fs: f64,
    pub window_s: f64,
    /// Ratings stay at least this far from every class boundary.
    pub margin: f64,
    pub eeg_noise: f64,
    pub topo_amp: f64,
    pub artifact_amp: f64,
    pub pixel_noise: f64,
    /// Angular jitter of the bar, in degrees (uniform, ±).
    pub angle_jitter: f64,
    /// Arousal-dependent shift of the bar angle, in degrees.
    pub arousal_tilt: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            trials: 400,
            subjects: 10,
            frames: 10,
            informative: 3,
            image_size: 56,
            image_channels: 1,
            eeg_channels: 32,
            fs: 128.0,
            window_s: 3.0,
            margin: 0.25,
            eeg_noise: 1.0,
            topo_amp: 0.8,
            artifact_amp: 8.0,
            pixel_noise: 0.08,
            angle_jitter: 10.0,
            arousal_tilt: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.informative > self.frames {
            return Err(Error::Argument(format!(
                "{} informative frames requested in bags of {}",
                self.informative, self.frames
            )));
        }
        if self.frames == 0 || self.trials == 0 || self.subjects == 0 {
            return Err(Error::Argument(
                "trials, subjects and frames must all be positive".into(),
            ));
        }
        if self.subjects > self.trials {
            return Err(Error::Argument(format!(
                "{} subjects for {} trials",
                self.subjects, self.trials
            )));
        }
        if self.eeg_channels < 2 || !self.eeg_channels.is_multiple_of(2) {
            return Err(Error::Argument(format!(
                "need an even channel count for the front/back split, got {}",
                self.eeg_channels
            )));
        }
        if self.image_size < 8 || !matches!(self.image_channels, 1 | 3) {
            return Err(Error::Argument("image must be at least 8 px with 1 or 3 channels".into()));
        }
        let w = self.fs * self.window_s;
        if !(w >= 1.0 && (w - w.round()).abs() < 1e-9) {
            return Err(Error::Argument(format!("fs·window_s = {w} is not an integer")));
        }
        if !(0.0..2.0).contains(&self.margin) {
            return Err(Error::Argument(format!("margin {} outside [0, 2)", self.margin)));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.fs * self.window_s).round() as usize
    }
}

/// One labeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub eeg: EegSegment,
    pub frames: Vec<Frame>,
    pub arousal: f64,
    pub valence: f64,
    pub label: usize,
    /// Indices into `frames` of the frames that show the bar, ascending.
    pub informative: Vec<usize>,
    pub subject: usize,
}

impl TrialRecord {
    /// Reorders the bag so that new frame `i` is old frame `perm[i]`.
    pub fn permute_frames(&mut self, perm: &[usize]) -> Result<()> {
        let q = self.frames.len();
        let mut seen = vec![false; q];
        if perm.len() != q || perm.iter().any(|&p| p >= q || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::Argument(format!("not a permutation of {q} frames")));
        }
        let old = core::mem::take(&mut self.frames);
        self.frames = perm.iter().map(|&p| old[p].clone()).collect();
        for (i, f) in self.frames.iter_mut().enumerate() {
            f.frame_index = i;
        }
        let mut inf: Vec<usize> = (0..q).filter(|&i| self.informative.contains(&perm[i])).collect();
        inf.sort_unstable();
        self.informative = inf;
        Ok(())
    }
}

/// A subject's continuous recording with its known artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecording {
    pub subject: usize,
    pub raw: RawRecording,
    /// The recording without the artifact.
    pub clean: Mat,
    /// Artifact source time course.
    pub artifact: Vec<f64>,
    /// Per-channel gain of the artifact.
    pub mixing: Vec<f64>,
    /// Index range into the trial list.
    pub trials: core::ops::Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub scheme: LabelScheme,
    pub trials: Vec<TrialRecord>,
    pub recordings: Vec<SubjectRecording>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.scheme.n_classes()];
        for t in &self.trials {
            c[t.label] += 1;
        }
        c
    }
}

/// Generic channel names; the first half of the montage counts as front.
pub fn channel_names(n: usize) -> Vec<alloc::string::String> {
    (0..n).map(|i| format!("E{i:02}")).collect()
}

/// Level of a rating along one axis: the class-boundary set of the scheme,
/// falling back to the two-way split when the scheme ignores that axis.
fn level(x: f64, cuts: &[f64]) -> (usize, usize) {
    const DEFAULT: &[f64] = &[THRESHOLD];
    let cuts = if cuts.is_empty() { DEFAULT } else { cuts };
    (cuts.iter().filter(|&&c| x >= c).count(), cuts.len() + 1)
}

/// `level / (levels − 1)` in `[0, 1]`.
fn unit(level: (usize, usize)) -> f64 {
    level.0 as f64 / (level.1 - 1) as f64
}

fn sample_rating<R: Rng + ?Sized>(rng: &mut R, cuts: &[f64], margin: f64) -> f64 {
    loop {
        let x = rng.gen_range(1.0..=9.0);
        let near = cuts.iter().chain([THRESHOLD].iter()).any(|&c| (x - c).abs() < margin);
        if !near {
            return x;
        }
    }
}

/// Which half of the channels carries alpha (true) for a given arousal
/// level. The first and last levels use the front/back split in opposite
/// directions; a middle level alternates channels.
fn alpha_channels(level: (usize, usize), channels: usize) -> Vec<bool> {
    let half = channels / 2;
    (0..channels)
        .map(|c| match level.0 {
            0 => c < half,
            l if l + 1 == level.1 => c >= half,
            _ => c % 2 == 0,
        })
        .collect()
}

struct TrialSignal {
    eeg: Mat,
    frames: Vec<Frame>,
    informative: Vec<usize>,
}

fn trial_signal<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    a: (usize, usize),
    v: (usize, usize),
    rng: &mut R,
) -> TrialSignal {
    let c = cfg.eeg_channels;
    let s = cfg.window_samples();
    let fs = cfg.fs;
    let alpha = alpha_channels(a, c);
    let ua = unit(a);
    let uv = unit(v);
    let theta_amp = Normal::new(0.6 + 0.4 * ua, 0.3).unwrap().sample(rng);
    let gamma_amp = Normal::new(0.5 + 0.15 * uv, 0.3).unwrap().sample(rng);
    let gain = rng.gen_range(0.8..1.2) * cfg.topo_amp;
    let mut eeg = Mat::zeros(c, s);
    for ch in 0..c {
        let bg_phase = rng.gen_range(0.0..2.0 * PI);
        let bg_freq = rng.gen_range(9.0..11.0);
        let row = eeg.row_mut(ch);
        for (n, x) in row.iter_mut().enumerate() {
            let t = n as f64 / fs;
            let topo = if alpha[ch] {
                (2.0 * PI * 10.0 * t).sin()
            } else {
                (2.0 * PI * 20.0 * t + 0.5).sin()
            };
            let noise: f64 = StandardNormal.sample(rng);
            *x = gain * topo
                + theta_amp * (2.0 * PI * 6.0 * t + 1.0).sin()
                + gamma_amp * (2.0 * PI * 26.0 * t + 2.0).sin()
                + 0.5 * (2.0 * PI * bg_freq * t + bg_phase).sin()
                + cfg.eeg_noise * noise;
        }
    }

    let q = cfg.frames;
    let mut order: Vec<usize> = (0..q).collect();
    order.shuffle(rng);
    let mut informative: Vec<usize> = order[..cfg.informative].to_vec();
    informative.sort_unstable();
    // angle in degrees: valence levels spread over (0, 180), arousal tilts
    let base = 180.0 * (v.0 as f64 + 0.5) / v.1 as f64;
    let tilt = cfg.arousal_tilt * (2.0 * ua - 1.0);
    let frames = (0..q)
        .map(|i| {
            let bar = informative.contains(&i).then(|| {
                let jitter = rng.gen_range(-cfg.angle_jitter..=cfg.angle_jitter);
                (base + tilt + jitter).to_radians()
            });
            let mut f = render_frame(cfg, bar, rng);
            f.frame_index = i;
            f
        })
        .collect();
    TrialSignal {
        eeg,
        frames,
        informative,
    }
}

/// Gray noise, plus an anti-aliased bright bar through (roughly) the centre
/// when `angle` is given (radians, counter-clockwise from the x axis).
fn render_frame<R: Rng + ?Sized>(cfg: &SynthConfig, angle: Option<f64>, rng: &mut R) -> Frame {
    let n = cfg.image_size;
    let ch = cfg.image_channels;
    let mut px = Vec::with_capacity(n * n * ch);
    let size = n as f64;
    let geom = angle.map(|th| {
        let off = size * 0.06;
        let cy = size / 2.0 + rng.gen_range(-off..=off);
        let cx = size / 2.0 + rng.gen_range(-off..=off);
        (th.sin(), th.cos(), cy, cx)
    });
    let half_len = 0.35 * size;
    let half_w = (size / 28.0).max(1.0);
    for y in 0..n {
        for x in 0..n {
            let bar = geom.map_or(0.0, |(sn, cs, cy, cx)| {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let along = dx * cs - dy * sn;
                let across = dx * sn + dy * cs;
                let wa = (half_w + 0.5 - across.abs()).clamp(0.0, 1.0);
                let wl = (half_len + 0.5 - along.abs()).clamp(0.0, 1.0);
                0.4 * wa * wl
            });
            for _ in 0..ch {
                let noise: f64 = StandardNormal.sample(rng);
                px.push((0.5 + bar + cfg.pixel_noise * noise).clamp(0.0, 1.0));
            }
        }
    }
    Frame::new(n, n, ch, px).expect("pixel count matches geometry")
}

/// Blink-like source: sparse Gaussian bumps of width ~0.1 s.
fn blink_source<R: Rng + ?Sized>(len: usize, fs: f64, amp: f64, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let width = 0.1 * fs;
    let reach = (4.0 * width) as usize;
    let mut t = 0usize;
    loop {
        // exponential gaps, mean 4 s
        let gap = -(1.0 - rng.gen::<f64>()).ln() * 4.0 * fs;
        t += gap as usize + 1;
        if t >= len {
            break;
        }
        let a = amp * rng.gen_range(0.7..1.3);
        for (i, o) in out
            .iter_mut()
            .enumerate()
            .take((t + reach).min(len))
            .skip(t.saturating_sub(reach))
        {
            let d = (i as f64 - t as f64) / width;
            *o += a * (-0.5 * d * d).exp();
        }
    }
    out
}

/// Generates a labeled dataset. Trials are split over subjects as evenly as
/// possible; each subject's windows are laid end to end into one
/// recording before the artifact is mixed in.
pub fn gen_dataset(cfg: &SynthConfig, scheme: LabelScheme, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a_cuts, v_cuts) = scheme.thresholds();
    let c = cfg.eeg_channels;
    let w = cfg.window_samples();
    let mut trials = Vec::with_capacity(cfg.trials);
    let mut recordings = Vec::with_capacity(cfg.subjects);
    for subject in 0..cfg.subjects {
        let start = subject * cfg.trials / cfg.subjects;
        let end = (subject + 1) * cfg.trials / cfg.subjects;
        let n = end - start;
        let mixing: Vec<f64> = (0..c)
            .map(|ch| (-(ch as f64) / 10.0).exp() * rng.gen_range(0.8..1.2))
            .collect();
        let artifact = blink_source(n * w, cfg.fs, cfg.artifact_amp, &mut rng);
        let mut clean = Mat::zeros(c, n * w);
        let mut pending = Vec::with_capacity(n);
        for k in 0..n {
            let arousal = sample_rating(&mut rng, a_cuts, cfg.margin);
            let valence = sample_rating(&mut rng, v_cuts, cfg.margin);
            let sig = trial_signal(
                cfg,
                level(arousal, a_cuts),
                level(valence, v_cuts),
                &mut rng,
            );
            for ch in 0..c {
                clean.row_mut(ch)[k * w..(k + 1) * w].copy_from_slice(sig.eeg.row(ch));
            }
            pending.push((arousal, valence, sig.frames, sig.informative));
        }
        let mut raw = clean.clone();
        for ch in 0..c {
            for (x, b) in raw.row_mut(ch).iter_mut().zip(&artifact) {
                *x += mixing[ch] * b;
            }
        }
        for (k, (arousal, valence, frames, informative)) in pending.into_iter().enumerate() {
            let mut data = Mat::zeros(c, w);
            for ch in 0..c {
                data.row_mut(ch).copy_from_slice(&raw.row(ch)[k * w..(k + 1) * w]);
            }
            trials.push(TrialRecord {
                eeg: EegSegment {
                    data,
                    window_index: k,
                    trial_id: (start + k) as u64,
                },
                frames,
                arousal,
                valence,
                label: map_label(arousal, valence, scheme)?,
                informative,
                subject,
            });
        }
        recordings.push(SubjectRecording {
            subject,
            raw: RawRecording::new(raw, cfg.fs, channel_names(c))?,
            clean,
            artifact,
            mixing,
            trials: start..end,
        });
    }
    Ok(Dataset {
        config: *cfg,
        scheme,
        trials,
        recordings,
    })
}

/// Small labeled bags for encoder pretraining. Each bag holds one key frame
/// at a random position among `bag_size - 1` plain frames. A bar key frame
/// labels the bag with the class its ratings map to under `scheme`; a plain
/// key frame labels it `scheme.n_classes()` (the neutral class).
pub fn pretrain_bags(
    cfg: &SynthConfig,
    scheme: LabelScheme,
    count: usize,
    bag_size: usize,
    seed: u64,
) -> Result<Vec<(Vec<Frame>, usize)>> {
    cfg.validate()?;
    if bag_size == 0 {
        return Err(Error::Argument("pretraining bags need at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a_cuts, v_cuts) = scheme.thresholds();
    let neutral = scheme.n_classes();
    (0..count)
        .map(|i| {
            let (key, label) = if i % (neutral + 1) == neutral {
                (render_frame(cfg, None, &mut rng), neutral)
            } else {
                let a = sample_rating(&mut rng, a_cuts, cfg.margin);
                let v = sample_rating(&mut rng, v_cuts, cfg.margin);
                let (la, lv) = (level(a, a_cuts), level(v, v_cuts));
                let base = 180.0 * (lv.0 as f64 + 0.5) / lv.1 as f64;
                let tilt = cfg.arousal_tilt * (2.0 * unit(la) - 1.0);
                let jitter = rng.gen_range(-cfg.angle_jitter..=cfg.angle_jitter);
                let f = render_frame(cfg, Some((base + tilt + jitter).to_radians()), &mut rng);
                (f, map_label(a, v, scheme)?)
            };
            let at = rng.gen_range(0..bag_size);
            let frames = (0..bag_size)
                .map(|j| if j == at { key.clone() } else { render_frame(cfg, None, &mut rng) })
                .collect();
            Ok((frames, label))
        })
        .collect()
}
