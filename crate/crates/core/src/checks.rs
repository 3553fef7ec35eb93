//! Gradient checks over every tape op and over the composite model paths,
//! packaged so that the command-line harness and the test suites run the
//! same cases.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compressor::{Compressor, CompressorConfig};
use crate::diff::{gradcheck, GradcheckOptions, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::fusion::FusionConfig;
use crate::labels::LabelScheme;
use crate::mil::{select_batch, selected_weights, weighted_forward, MilConfig, MilScorer};
use crate::model::{Inputs, Model, ModelConfig};
use crate::synth::{gen_dataset, SynthConfig};
use crate::visual::{EncoderConfig, Frame};

/// Worst relative error for one named case.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub entries: usize,
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    positive: bool,
    build: Build,
}

const OPS: &[OpCase] = &[
    OpCase { name: "matmul", shapes: &[&[3, 4], &[4, 2]], positive: false, build: |g, v| g.matmul(v[0], v[1]) },
    OpCase { name: "matmul_t(tt)", shapes: &[&[4, 3], &[2, 4]], positive: false, build: |g, v| g.matmul_t(v[0], v[1], true, true) },
    OpCase { name: "matmul_t(nt)", shapes: &[&[3, 4], &[2, 4]], positive: false, build: |g, v| g.matmul_t(v[0], v[1], false, true) },
    OpCase { name: "bmm", shapes: &[&[2, 3, 4], &[2, 4, 5]], positive: false, build: |g, v| g.bmm(v[0], v[1], false, false) },
    OpCase { name: "bmm(tt)", shapes: &[&[2, 4, 3], &[2, 5, 4]], positive: false, build: |g, v| g.bmm(v[0], v[1], true, true) },
    OpCase { name: "linear", shapes: &[&[2, 3, 4], &[4, 5], &[5]], positive: false, build: |g, v| g.linear(v[0], v[1], Some(v[2])) },
    OpCase { name: "add", shapes: &[&[3, 4], &[3, 4]], positive: false, build: |g, v| g.add(v[0], v[1]) },
    OpCase { name: "sub", shapes: &[&[3, 4], &[3, 4]], positive: false, build: |g, v| g.sub(v[0], v[1]) },
    OpCase { name: "mul", shapes: &[&[3, 4], &[3, 4]], positive: false, build: |g, v| g.mul(v[0], v[1]) },
    OpCase { name: "add_tiled", shapes: &[&[2, 3, 4], &[3, 4]], positive: false, build: |g, v| g.add_tiled(v[0], v[1]) },
    OpCase { name: "scale", shapes: &[&[3, 4]], positive: false, build: |g, v| Ok(g.scale(v[0], -1.7)) },
    OpCase { name: "row_scale", shapes: &[&[3, 2, 2], &[3]], positive: false, build: |g, v| g.row_scale(v[0], v[1]) },
    OpCase { name: "tanh", shapes: &[&[3, 4]], positive: false, build: |g, v| Ok(g.tanh(v[0])) },
    OpCase { name: "gelu", shapes: &[&[3, 4]], positive: false, build: |g, v| Ok(g.gelu(v[0])) },
    OpCase { name: "exp", shapes: &[&[3, 4]], positive: false, build: |g, v| Ok(g.exp(v[0])) },
    OpCase { name: "log", shapes: &[&[3, 4]], positive: true, build: |g, v| g.log(v[0]) },
    // inputs kept away from the kink
    OpCase {
        name: "relu",
        shapes: &[&[3, 4]],
        positive: true,
        build: |g, v| {
            let n = g.scale(v[0], -1.0);
            let x = g.concat(&[v[0], n], 1)?;
            Ok(g.relu(x))
        },
    },
    OpCase { name: "softmax", shapes: &[&[3, 5]], positive: false, build: |g, v| Ok(g.softmax(v[0])) },
    OpCase { name: "permute", shapes: &[&[2, 3, 4]], positive: false, build: |g, v| g.permute(v[0], &[2, 0, 1]) },
    OpCase { name: "reshape", shapes: &[&[2, 3, 4]], positive: false, build: |g, v| g.reshape(v[0], &[4, 6]) },
    OpCase { name: "slice_outer", shapes: &[&[4, 3]], positive: false, build: |g, v| g.slice_outer(v[0], 1, 2) },
    OpCase { name: "concat", shapes: &[&[2, 3, 4], &[2, 1, 4]], positive: false, build: |g, v| g.concat(&[v[0], v[1]], 1) },
    OpCase { name: "gather_rows", shapes: &[&[4, 3]], positive: false, build: |g, v| g.gather_rows(v[0], &[3, 0, 3, 1]) },
    OpCase { name: "mean_axis", shapes: &[&[2, 3, 4]], positive: false, build: |g, v| g.mean_axis(v[0], 1) },
    OpCase { name: "sum", shapes: &[&[3, 4]], positive: false, build: |g, v| Ok(g.sum(v[0])) },
    OpCase { name: "mean", shapes: &[&[3, 4]], positive: false, build: |g, v| Ok(g.mean(v[0])) },
    OpCase { name: "broadcast", shapes: &[&[3, 4]], positive: false, build: |g, v| Ok(g.broadcast(v[0], 3)) },
    OpCase { name: "layernorm", shapes: &[&[3, 6], &[6], &[6]], positive: false, build: |g, v| g.layernorm(v[0], v[1], v[2], 1e-5) },
    OpCase { name: "cross_entropy", shapes: &[&[4, 3]], positive: false, build: |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]) },
];

/// Weights an output by a fixed random tensor and sums, so every output
/// entry contributes a distinct coefficient to the checked scalar.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let shape = g.shape(out).to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Gradchecks every tape op on `instances` random inputs each; inputs are
/// registered as parameters so the check covers them.
pub fn op_suite(instances: u64) -> Result<Vec<CheckOutcome>> {
    OPS.iter()
        .map(|case| {
            let mut out = CheckOutcome {
                name: case.name.into(),
                max_rel_err: 0.0,
                entries: 0,
            };
            for seed in 0..instances {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut store = ParamStore::new();
                let ids = case
                    .shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let mut x = Tensor::randn(s, 1.0, &mut rng);
                        if case.positive {
                            x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
                        }
                        store.insert(alloc::format!("in{i}"), x)
                    })
                    .collect::<Result<Vec<ParamId>>>()?;
                let r = gradcheck(
                    &mut store,
                    |g, st| {
                        let vars: Vec<Var> = ids.iter().map(|&id| g.param(st, id)).collect();
                        let y = (case.build)(g, &vars)?;
                        weighted_sum(g, y, seed)
                    },
                    GradcheckOptions::default(),
                )?;
                out.max_rel_err = out.max_rel_err.max(r.max_rel_err);
                out.entries += r.entries_checked;
            }
            Ok(out)
        })
        .collect()
}

fn small_model_config() -> ModelConfig {
    ModelConfig {
        frames: 4,
        encoder: EncoderConfig {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            embed_dim: 4,
            depth: 2,
            window_size: 1,
            num_heads: 2,
            merge_stages: 0,
            mlp_ratio: 2,
        },
        mil: MilConfig { hidden: 3, k: 2 },
        compressor: CompressorConfig { queries: 3, heads: 1 },
        fusion: FusionConfig {
            dim: 4,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            eeg_channels: 2,
            eeg_samples: 6,
            eeg_hidden: 3,
        },
        concat_hidden: 5,
        ..Default::default()
    }
}

fn scorer_check(seed: u64) -> Result<CheckOutcome> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let s = MilScorer::new(&mut store, "mil", 3, 4, &mut r)?;
    let pooled = Tensor::randn(&[10, 3], 1.0, &mut r);
    let tokens = Tensor::randn(&[6, 2, 3], 1.0, &mut r);
    let target = Tensor::randn(&[6, 2, 3], 1.0, &mut r);
    let sels = {
        let mut g = Graph::new();
        let p = g.constant(pooled.clone());
        let l = s.logits(&mut g, &store, p, 5)?;
        select_batch(g.value(l), 5, 3)?
    };
    let rep = gradcheck(
        &mut store,
        |g, st| {
            let p = g.constant(pooled.clone());
            let l = s.logits(g, st, p, 5)?;
            let w = selected_weights(g, l, &sels)?;
            let t = g.constant(tokens.clone());
            let y = weighted_forward(g, t, w)?;
            let c = g.constant(target.clone());
            let y = g.mul(y, c)?;
            Ok(g.sum(y))
        },
        GradcheckOptions::default(),
    )?;
    Ok(CheckOutcome {
        name: "mil scorer".into(),
        max_rel_err: rep.max_rel_err,
        entries: rep.entries_checked,
    })
}

fn compressor_check(seed: u64) -> Result<CheckOutcome> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = Compressor::new(&mut store, "ca", 4, CompressorConfig { queries: 3, heads: 2 }, &mut r)?;
    let tokens = store.insert("tokens", Tensor::randn(&[2, 5, 4], 1.0, &mut r))?;
    let rep = gradcheck(
        &mut store,
        |g, st| {
            let t = g.param(st, tokens);
            let y = c.compress(g, st, t)?;
            weighted_sum(g, y, seed)
        },
        GradcheckOptions::default(),
    )?;
    Ok(CheckOutcome {
        name: "compressor".into(),
        max_rel_err: rep.max_rel_err,
        entries: rep.entries_checked,
    })
}

fn classifier_check(seed: u64) -> Result<CheckOutcome> {
    let data = SynthConfig {
        trials: 2,
        subjects: 1,
        frames: 4,
        informative: 2,
        image_size: 8,
        eeg_channels: 2,
        fs: 2.0,
        ..Default::default()
    };
    let ds = gen_dataset(&data, LabelScheme::Deap4, seed)?;
    let eeg: Vec<f64> = ds.trials.iter().flat_map(|t| t.eeg.data.data.iter().copied()).collect();
    let eeg = Tensor::new(&[2, 2, 6], eeg)?;
    let bags: Vec<&[Frame]> = ds.trials.iter().map(|t| t.frames.as_slice()).collect();
    let labels: Vec<usize> = ds.trials.iter().map(|t| t.label).collect();

    let mut store = ParamStore::new();
    let model = Model::new(&mut store, small_model_config(), seed)?;
    // the head starts at zero; give it weights so every upstream path carries gradient
    if let Some(f) = &model.fusion {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead);
        store.get_mut(f.head.w).tensor = Tensor::randn(&[4, 4], 0.5, &mut r);
    }
    let rep = gradcheck(
        &mut store,
        |g, s| {
            let out = model.forward(g, s, Inputs { eeg: Some(&eeg), bags: &bags })?;
            g.cross_entropy(out.logits, &labels)
        },
        GradcheckOptions {
            max_entries_per_param: Some(6),
            seed,
            ..Default::default()
        },
    )?;
    Ok(CheckOutcome {
        name: "full classifier".into(),
        max_rel_err: rep.max_rel_err,
        entries: rep.entries_checked,
    })
}

/// MIL scorer with top-K weighting, cross-attention compressor, and the
/// whole classifier from raw inputs to the loss.
pub fn composite_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(alloc::vec![scorer_check(seed)?, compressor_check(seed)?, classifier_check(seed)?])
}
