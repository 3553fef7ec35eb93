//! Run configuration, stratified splitting, the training loop and
//! evaluation.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::diff::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{argmax_rows, cosine_lr, Confusion};
use crate::mil::Selection;
use crate::model::{Inputs, Model, ModelConfig};
use crate::synth::{pretrain_bags, Dataset, SynthConfig, TrialRecord};
use crate::visual::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam: AdamConfig,
    pub test_fraction: f64,
    /// Epochs of encoder pretraining when the FT stage is on.
    pub pretrain_epochs: usize,
    /// Number of labeled bags in the pretraining set.
    pub pretrain_bags: usize,
    /// Frames per pretraining bag.
    pub pretrain_bag_size: usize,
    pub pretrain_lr: f64,
    /// Evaluate on the test split every this many epochs (0: only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr_max: 1e-3,
            lr_min: 1e-5,
            adam: AdamConfig::default(),
            test_fraction: 0.2,
            pretrain_epochs: 30,
            pretrain_bags: 400,
            pretrain_bag_size: 2,
            pretrain_lr: 3e-3,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 7,
            init: 11,
            shuffle: 13,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SynthConfig,
    pub train: TrainConfig,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            data: SynthConfig {
                image_size: model.encoder.image_size,
                ..Default::default()
            },
            model,
            train: TrainConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

impl RunConfig {
    /// Checks every field and the agreement between data and model shapes.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate().map_err(|e| Error::Config(format!("{e}")))?;
        let t = &self.train;
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if t.epochs == 0 || t.batch_size == 0 {
            return fail("epochs and batch size must be positive".into());
        }
        if !(t.lr_min >= 0.0 && t.lr_min <= t.lr_max && t.lr_max.is_finite()) {
            return fail(format!("need 0 ≤ lr_min ≤ lr_max, got {} and {}", t.lr_min, t.lr_max));
        }
        if !(t.test_fraction > 0.0 && t.test_fraction < 1.0) {
            return fail(format!("test fraction {} outside (0, 1)", t.test_fraction));
        }
        if self.model.ablation.ft && t.pretrain_epochs > 0 && (t.pretrain_bags == 0 || t.pretrain_bag_size == 0) {
            return fail("pretraining needs at least one non-empty bag".into());
        }
        check_data_fits(&self.model, &self.data)
    }
}

fn check_data_fits(m: &ModelConfig, d: &SynthConfig) -> Result<()> {
    let mut bad = Vec::new();
    if m.kind.uses_frames() {
        if d.frames != m.frames {
            bad.push(format!("bag size {} vs model {}", d.frames, m.frames));
        }
        if d.image_size != m.encoder.image_size || d.image_channels != m.encoder.channels {
            bad.push(format!(
                "frames {}×{}×{} vs encoder {}×{}×{}",
                d.image_size,
                d.image_size,
                d.image_channels,
                m.encoder.image_size,
                m.encoder.image_size,
                m.encoder.channels
            ));
        }
    }
    if m.kind.uses_eeg()
        && (d.eeg_channels != m.fusion.eeg_channels || d.window_samples() != m.fusion.eeg_samples)
    {
        bad.push(format!(
            "EEG windows {}×{} vs model {}×{}",
            d.eeg_channels,
            d.window_samples(),
            m.fusion.eeg_channels,
            m.fusion.eeg_samples
        ));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(bad.join("; ")))
    }
}

/// Splits indices per class, sending `round(count · test_fraction)` of
/// each class to the test side.
pub fn stratified_split(
    labels: &[usize],
    n_classes: usize,
    test_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub test_selection_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epochs: Vec<EpochLog>,
    /// Loss of the first batch, before any update.
    pub initial_loss: f64,
    pub pretrain_losses: Vec<f64>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: Confusion,
    /// Mean overlap of the kept frames with the informative frames, per K.
    pub selection_precision: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub selections: Vec<Selection>,
    pub confusion: Confusion,
    pub selection_precision: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    /// Model configuration with the fitted EEG scale.
    pub config: RunConfig,
    pub report: MetricsReport,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

fn batch_inputs<'a>(trials: &[&'a TrialRecord]) -> Result<(Tensor, Vec<&'a [Frame]>)> {
    let first = &trials[0].eeg.data;
    let (c, s) = (first.rows, first.cols);
    let mut eeg = Vec::with_capacity(trials.len() * c * s);
    for t in trials {
        if t.eeg.data.rows != c || t.eeg.data.cols != s {
            return Err(Error::Config("EEG windows differ in shape within a batch".into()));
        }
        eeg.extend_from_slice(&t.eeg.data.data);
    }
    let bags = trials.iter().map(|t| t.frames.as_slice()).collect();
    Ok((Tensor::new(&[trials.len(), c, s], eeg)?, bags))
}

/// Standard deviation of every EEG sample in the given trials.
pub fn eeg_std(ds: &Dataset, idx: &[usize]) -> f64 {
    let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
    for &i in idx {
        for &x in &ds.trials[i].eeg.data.data {
            n += 1.0;
            sum += x;
            sq += x * x;
        }
    }
    let mean = sum / n;
    (sq / n - mean * mean).max(0.0).sqrt()
}

/// Fraction of each kept set that is informative, averaged.
pub fn selection_precision(trials: &[&TrialRecord], selections: &[Selection]) -> Option<f64> {
    if selections.is_empty() {
        return None;
    }
    let total: f64 = trials
        .iter()
        .zip(selections)
        .map(|(t, s)| {
            let hit = s.indices.iter().filter(|i| t.informative.contains(i)).count();
            hit as f64 / s.indices.len() as f64
        })
        .sum();
    Some(total / selections.len() as f64)
}

/// Runs the model over `idx` and scores the predictions.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    ds: &Dataset,
    idx: &[usize],
    batch_size: usize,
) -> Result<Evaluation> {
    check_data_fits(&model.cfg, &ds.config)?;
    if ds.scheme != model.cfg.scheme {
        return Err(Error::Config(format!(
            "dataset labeled with {} but model trained for {}",
            ds.scheme, model.cfg.scheme
        )));
    }
    let n = model.cfg.n_classes();
    let (mut predictions, mut labels, mut selections) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in idx.chunks(batch_size.max(1)) {
        let trials: Vec<&TrialRecord> = chunk.iter().map(|&i| &ds.trials[i]).collect();
        let (eeg, bags) = batch_inputs(&trials)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, store, Inputs { eeg: Some(&eeg), bags: &bags })?;
        predictions.extend(argmax_rows(g.value(out.logits), n));
        labels.extend(trials.iter().map(|t| t.label));
        selections.extend(out.selections);
    }
    let confusion = Confusion::from_pairs(n, &labels, &predictions)?;
    let trials: Vec<&TrialRecord> = idx.iter().map(|&i| &ds.trials[i]).collect();
    let selection_precision = selection_precision(&trials, &selections);
    Ok(Evaluation {
        predictions,
        labels,
        selections,
        confusion,
        selection_precision,
    })
}

fn pretrain_encoder(
    model: &Model,
    store: &mut ParamStore,
    cfg: &RunConfig,
) -> Result<Vec<f64>> {
    let t = &cfg.train;
    let set = pretrain_bags(
        &cfg.data,
        cfg.model.scheme,
        t.pretrain_bags,
        t.pretrain_bag_size,
        cfg.seeds.data ^ 0x5eed_f00d,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.shuffle ^ 0xf7);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut opt = Adam::new(store, t.adam);
    let mut losses = Vec::with_capacity(t.pretrain_epochs);
    for epoch in 0..t.pretrain_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(t.batch_size).enumerate() {
            let bags: Vec<&[Frame]> = chunk.iter().map(|&i| set[i].0.as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| set[i].1).collect();
            let mut g = Graph::new();
            let logits = model.pretrain_logits(&mut g, store, &bags)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let l = g.scalar(loss);
            if !l.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pretraining loss at epoch {epoch}, batch {b}"
                )));
            }
            total += l * chunk.len() as f64;
            g.backward(loss)?.accumulate_into(store)?;
            opt.step(store, t.pretrain_lr);
        }
        losses.push(total / set.len().max(1) as f64);
    }
    Ok(losses)
}

/// Trains a fresh model on the training split of `ds` and evaluates it on
/// the test split. `on_epoch` sees every epoch's log as it completes.
pub fn train(
    cfg: &RunConfig,
    ds: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data_fits(&cfg.model, &ds.config)?;
    if ds.scheme != cfg.model.scheme {
        return Err(Error::Config(format!(
            "dataset labeled with {} but run configured for {}",
            ds.scheme, cfg.model.scheme
        )));
    }
    let n = cfg.model.n_classes();
    let t = &cfg.train;
    let (train_idx, test_idx) = stratified_split(&ds.labels(), n, t.test_fraction, cfg.seeds.shuffle);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Config(format!(
            "split of {} trials leaves an empty side",
            ds.trials.len()
        )));
    }
    let mut cfg = *cfg;
    if cfg.model.kind.uses_eeg() {
        let sd = eeg_std(ds, &train_idx);
        cfg.model.eeg_scale = if sd > 0.0 { sd } else { 1.0 };
    }
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg.model, cfg.seeds.init)?;
    let pretrain_losses = if model.pretrain_head.is_some() {
        pretrain_encoder(&model, &mut store, &cfg)?
    } else {
        Vec::new()
    };

    let mut opt = Adam::new(&store, t.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.shuffle);
    let mut order = train_idx.clone();
    let mut epochs = Vec::with_capacity(t.epochs);
    let mut initial_loss = None;
    for epoch in 0..t.epochs {
        let lr = cosine_lr(epoch, t.epochs, t.lr_max, t.lr_min)?;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(t.batch_size).enumerate() {
            let trials: Vec<&TrialRecord> = chunk.iter().map(|&i| &ds.trials[i]).collect();
            let labels: Vec<usize> = trials.iter().map(|t| t.label).collect();
            let (eeg, bags) = batch_inputs(&trials)?;
            let mut g = Graph::new();
            let out = model.forward(&mut g, &store, Inputs { eeg: Some(&eeg), bags: &bags })?;
            let loss = g.cross_entropy(out.logits, &labels)?;
            let l = g.scalar(loss);
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b}")));
            }
            initial_loss.get_or_insert(l);
            loss_sum += l * chunk.len() as f64;
            correct += argmax_rows(g.value(out.logits), n)
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
            g.backward(loss)?.accumulate_into(&mut store)?;
            opt.step(&mut store, lr);
        }
        let (test_accuracy, test_selection_precision) =
            if t.eval_every > 0 && (epoch + 1) % t.eval_every == 0 {
                let ev = evaluate(&model, &store, ds, &test_idx, t.batch_size)?;
                (Some(ev.confusion.accuracy()), ev.selection_precision)
            } else {
                (None, None)
            };
        let log = EpochLog {
            epoch,
            lr,
            loss: loss_sum / order.len() as f64,
            train_accuracy: correct as f64 / order.len() as f64,
            test_accuracy,
            test_selection_precision,
        };
        on_epoch(&log);
        epochs.push(log);
    }

    let ev = evaluate(&model, &store, ds, &test_idx, t.batch_size)?;
    let report = MetricsReport {
        epochs,
        initial_loss: initial_loss.unwrap_or(f64::NAN),
        pretrain_losses,
        accuracy: ev.confusion.accuracy(),
        macro_f1: ev.confusion.macro_f1(),
        confusion: ev.confusion,
        selection_precision: ev.selection_precision,
    };
    Ok(TrainOutcome {
        model,
        store,
        config: cfg,
        report,
        train_idx,
        test_idx,
    })
}
