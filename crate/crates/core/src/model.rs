//! The full classifier: EEG tokenizer, frame encoder, MIL frame selection,
//! cross-attention compression and fusion, plus the ablation variants.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::{Compressor, CompressorConfig};
use crate::diff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{ConcatHead, EegTokenizer, FusionConfig, FusionTransformer};
use crate::labels::LabelScheme;
use crate::mil::{pool_tokens, select_batch, selected_weights, weighted_forward, MilConfig, MilScorer, Selection};
use crate::nn::Linear;
use crate::visual::{EncoderConfig, Frame, TokenGrid, VisualEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Transformer,
    Concat,
    EegOnly,
    FaceOnly,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [
        FusionKind::EegOnly,
        FusionKind::FaceOnly,
        FusionKind::Concat,
        FusionKind::Transformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Transformer => "transformer",
            FusionKind::Concat => "concat",
            FusionKind::EegOnly => "eeg_only",
            FusionKind::FaceOnly => "face_only",
        }
    }

    pub fn uses_eeg(self) -> bool {
        self != FusionKind::FaceOnly
    }

    pub fn uses_frames(self) -> bool {
        self != FusionKind::EegOnly
    }
}

impl core::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion kind `{s}`")))
    }
}

/// Which of the three visual-path stages are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Pretrain the frame encoder before joint training.
    pub ft: bool,
    /// Score and select frames; off means frame 0 of every bag.
    pub mil: bool,
    /// Compress visual tokens; off means all selected tokens go to fusion.
    pub ca: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            ft: true,
            mil: true,
            ca: true,
        }
    }
}

impl Ablation {
    /// All eight combinations, full configuration first.
    pub fn grid() -> [Ablation; 8] {
        let mut out = [Ablation::default(); 8];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = Ablation {
                ft: i & 4 == 0,
                mil: i & 2 == 0,
                ca: i & 1 == 0,
            };
        }
        out
    }

    pub fn label(self) -> alloc::string::String {
        let parts: Vec<&str> = [("FT", self.ft), ("MIL", self.mil), ("CA", self.ca)]
            .iter()
            .filter(|p| p.1)
            .map(|p| p.0)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub scheme: LabelScheme,
    pub kind: FusionKind,
    pub ablation: Ablation,
    /// Frames per bag.
    pub frames: usize,
    pub encoder: EncoderConfig,
    pub mil: MilConfig,
    pub compressor: CompressorConfig,
    pub fusion: FusionConfig,
    /// Hidden width of the concatenation baseline.
    pub concat_hidden: usize,
    /// EEG samples are divided by this before tokenizing.
    pub eeg_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scheme: LabelScheme::Deap4,
            kind: FusionKind::Transformer,
            ablation: Ablation::default(),
            frames: 10,
            encoder: EncoderConfig::default(),
            mil: MilConfig::default(),
            compressor: CompressorConfig::default(),
            fusion: FusionConfig::default(),
            concat_hidden: 64,
            eeg_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if self.kind.uses_frames() {
            self.encoder.validate()?;
            if self.encoder.embed_dim != self.fusion.dim {
                return fail(format!(
                    "encoder width {} differs from fusion width {}",
                    self.encoder.embed_dim, self.fusion.dim
                ));
            }
            if self.frames == 0 {
                return fail("bags need at least one frame".into());
            }
            if self.ablation.mil && (self.mil.k == 0 || self.mil.k > self.frames) {
                return fail(format!(
                    "cannot keep {} of {} frames",
                    self.mil.k, self.frames
                ));
            }
            if self.ablation.mil && self.mil.hidden == 0 {
                return fail("scorer hidden width must be positive".into());
            }
            if self.ablation.ca {
                let c = &self.compressor;
                if c.queries == 0 || c.heads == 0 || !self.fusion.dim.is_multiple_of(c.heads) {
                    return fail(format!(
                        "compressor with {} queries and {} heads does not fit width {}",
                        c.queries, c.heads, self.fusion.dim
                    ));
                }
            }
        }
        let f = &self.fusion;
        if f.dim == 0 || f.eeg_channels == 0 || f.eeg_samples == 0 || f.eeg_hidden == 0 {
            return fail("fusion and EEG sizes must be positive".into());
        }
        if self.kind != FusionKind::Concat && (f.heads == 0 || !f.dim.is_multiple_of(f.heads)) {
            return fail(format!("fusion width {} is not divisible by {} heads", f.dim, f.heads));
        }
        if self.kind == FusionKind::Concat && self.concat_hidden == 0 {
            return fail("concat hidden width must be positive".into());
        }
        if !(self.eeg_scale > 0.0 && self.eeg_scale.is_finite()) {
            return fail(format!("EEG scale must be positive, got {}", self.eeg_scale));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.scheme.n_classes()
    }

    /// Frames that reach the encoder with gradient, per bag.
    pub fn kept_frames(&self) -> usize {
        if self.ablation.mil {
            self.mil.k
        } else {
            1
        }
    }

    /// Visual tokens per sample entering fusion.
    pub fn visual_tokens(&self) -> usize {
        if self.ablation.ca {
            self.compressor.queries
        } else {
            self.kept_frames() * self.encoder.tokens_per_frame()
        }
    }

    /// Fusion sequence length including the CLS token.
    pub fn sequence_len(&self) -> usize {
        let e = if self.kind.uses_eeg() { self.fusion.eeg_channels } else { 0 };
        let v = if self.kind.uses_frames() { self.visual_tokens() } else { 0 };
        1 + e + v
    }
}

/// Per-bag encoded frames: token grids and their token means.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBag {
    pub grids: Vec<TokenGrid>,
    /// `[q, D]`.
    pub pooled: Tensor,
}

/// One mini-batch of model inputs.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    /// `[B, channels, samples]`, unscaled.
    pub eeg: Option<&'a Tensor>,
    /// One bag of frames per sample.
    pub bags: &'a [&'a [Frame]],
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// `[B, n_classes]`.
    pub logits: Var,
    /// Frames chosen per bag (empty when MIL is off or frames are unused).
    pub selections: Vec<Selection>,
    /// Assembled fusion input, `[B, T, D]`, when the transformer path ran.
    pub sequence: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub eeg: Option<EegTokenizer>,
    pub encoder: Option<VisualEncoder>,
    pub scorer: Option<MilScorer>,
    pub compressor: Option<Compressor>,
    pub fusion: Option<FusionTransformer>,
    pub concat: Option<ConcatHead>,
    /// Frame classifier used only while pretraining the encoder.
    pub pretrain_head: Option<Linear>,
}

impl Model {
    /// Registers every parameter in `store`, drawing initial values from
    /// `seed`.
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let d = cfg.fusion.dim;
        let n = cfg.n_classes();
        let eeg = if cfg.kind.uses_eeg() {
            Some(EegTokenizer::new(store, "eeg", &cfg.fusion, rng)?)
        } else {
            None
        };
        let (mut encoder, mut scorer, mut compressor, mut pretrain_head) = (None, None, None, None);
        if cfg.kind.uses_frames() {
            encoder = Some(VisualEncoder::new(store, "encoder", cfg.encoder, rng)?);
            if cfg.ablation.mil {
                scorer = Some(MilScorer::new(store, "mil", d, cfg.mil.hidden, rng)?);
            }
            if cfg.ablation.ca {
                compressor = Some(Compressor::new(store, "compressor", d, cfg.compressor, rng)?);
            }
            if cfg.ablation.ft {
                pretrain_head = Some(Linear::new(store, "encoder.pretrain_head", d, n + 1, true, rng)?);
            }
        }
        let e_tokens = cfg.kind.uses_eeg().then_some(cfg.fusion.eeg_channels);
        let v_tokens = cfg.kind.uses_frames().then(|| cfg.visual_tokens());
        let (fusion, concat) = if cfg.kind == FusionKind::Concat {
            let head = ConcatHead::new(store, "concat", d, cfg.concat_hidden, n, rng)?;
            (None, Some(head))
        } else {
            let f = FusionTransformer::new(store, "fusion", &cfg.fusion, e_tokens, v_tokens, n, rng)?;
            (Some(f), None)
        };
        Ok(Self {
            cfg,
            eeg,
            encoder,
            scorer,
            compressor,
            fusion,
            concat,
            pretrain_head,
        })
    }

    fn encoder(&self) -> Result<&VisualEncoder> {
        self.encoder
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} model has no frame encoder", self.cfg.kind.name())))
    }

    /// Encodes every frame of a bag outside of any training tape.
    pub fn encode_bag(&self, s: &ParamStore, frames: &[Frame]) -> Result<InstanceBag> {
        let enc = self.encoder()?;
        let refs: Vec<&Frame> = frames.iter().collect();
        let mut g = Graph::new();
        let p = g.constant(enc.patches(&refs)?);
        let tokens = enc.forward(&mut g, s, p)?;
        let pooled = pool_tokens(&mut g, tokens)?;
        let side = *enc.cfg.stage_sides().last().unwrap();
        let per = side * side * enc.cfg.embed_dim;
        let grids = g
            .value(tokens)
            .chunks(per)
            .map(|c| {
                Ok(TokenGrid {
                    tokens: Tensor::new(&[side * side, enc.cfg.embed_dim], c.to_vec())?,
                    grid_h: side,
                    grid_w: side,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(InstanceBag {
            grids,
            pooled: g.tensor(pooled),
        })
    }

    /// Visual tokens entering fusion, `[B, T_vis, D]`, and the selections.
    fn visual(&self, g: &mut Graph, s: &ParamStore, bags: &[&[Frame]]) -> Result<(Var, Vec<Selection>)> {
        let enc = self.encoder()?;
        let b = bags.len();
        let q = self.cfg.frames;
        let d = self.cfg.fusion.dim;
        let m = self.cfg.encoder.tokens_per_frame();
        for bag in bags {
            if bag.len() != q {
                return Err(Error::Config(format!("bag of {} frames, model expects {q}", bag.len())));
            }
        }
        let (tokens, selections) = match self.scorer {
            Some(scorer) => {
                let k = self.cfg.mil.k;
                // Scores come from a gradient-free pass over the whole bag;
                // only the kept frames are re-encoded on the tape.
                let all: Vec<&Frame> = bags.iter().flat_map(|bag| bag.iter()).collect();
                let pooled = {
                    let mut g0 = Graph::new();
                    let p = g0.constant(enc.patches(&all)?);
                    let t = enc.forward(&mut g0, s, p)?;
                    let pooled = pool_tokens(&mut g0, t)?;
                    g0.tensor(pooled)
                };
                let pooled = g.constant(pooled);
                let logits = scorer.logits(g, s, pooled, q)?;
                let sels = select_batch(g.value(logits), q, k)?;
                let kept: Vec<&Frame> = bags
                    .iter()
                    .zip(&sels)
                    .flat_map(|(bag, sel)| sel.indices.iter().map(move |&i| &bag[i]))
                    .collect();
                let p = g.constant(enc.patches(&kept)?);
                let t = enc.forward(g, s, p)?;
                let w = selected_weights(g, logits, &sels)?;
                let t = weighted_forward(g, t, w)?;
                (g.reshape(t, &[b, k * m, d])?, sels)
            }
            None => {
                let first: Vec<&Frame> = bags.iter().map(|bag| &bag[0]).collect();
                let p = g.constant(enc.patches(&first)?);
                (enc.forward(g, s, p)?, Vec::new())
            }
        };
        let tokens = match &self.compressor {
            Some(c) => c.compress(g, s, tokens)?,
            None => tokens,
        };
        Ok((tokens, selections))
    }

    fn eeg_tokens(&self, g: &mut Graph, s: &ParamStore, eeg: &Tensor) -> Result<Var> {
        let tok = self
            .eeg
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} model takes no EEG", self.cfg.kind.name())))?;
        let f = &self.cfg.fusion;
        let sh = eeg.shape();
        if sh.len() != 3 || sh[1] != f.eeg_channels || sh[2] != f.eeg_samples {
            return Err(Error::Config(format!(
                "EEG batch {sh:?} does not match [B, {}, {}]",
                f.eeg_channels, f.eeg_samples
            )));
        }
        let x = g.constant(eeg.clone());
        let x = g.scale(x, 1.0 / self.cfg.eeg_scale);
        tok.forward(g, s, x)
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, inputs: Inputs<'_>) -> Result<ForwardOut> {
        let kind = self.cfg.kind;
        let e = if kind.uses_eeg() {
            let eeg = inputs
                .eeg
                .ok_or_else(|| Error::Config("EEG input missing".into()))?;
            if kind.uses_frames() && eeg.shape()[0] != inputs.bags.len() {
                return Err(Error::Config(format!(
                    "{} EEG windows for {} bags",
                    eeg.shape()[0],
                    inputs.bags.len()
                )));
            }
            Some(self.eeg_tokens(g, s, eeg)?)
        } else {
            None
        };
        let (v, selections) = if kind.uses_frames() {
            let (v, sel) = self.visual(g, s, inputs.bags)?;
            (Some(v), sel)
        } else {
            (None, Vec::new())
        };
        match (&self.fusion, &self.concat) {
            (Some(f), _) => {
                let seq = f.assemble(g, s, e, v)?;
                let logits = f.classify(g, s, seq)?;
                Ok(ForwardOut {
                    logits,
                    selections,
                    sequence: Some(seq),
                })
            }
            (None, Some(c)) => {
                let (e, v) = (e.unwrap(), v.unwrap());
                Ok(ForwardOut {
                    logits: c.forward(g, s, e, v)?,
                    selections,
                    sequence: None,
                })
            }
            (None, None) => unreachable!("model always has a head"),
        }
    }

    /// Bag-classification logits for encoder pretraining, `[B, n + 1]`.
    /// Frames are pooled with the scorer's attention when MIL is on and
    /// averaged otherwise.
    pub fn pretrain_logits(&self, g: &mut Graph, s: &ParamStore, bags: &[&[Frame]]) -> Result<Var> {
        let enc = self.encoder()?;
        let head = self
            .pretrain_head
            .ok_or_else(|| Error::Config("encoder pretraining is disabled".into()))?;
        let b = bags.len();
        let q = bags.first().map_or(0, |bag| bag.len());
        if q == 0 || bags.iter().any(|bag| bag.len() != q) {
            return Err(Error::Config("pretraining bags must be non-empty and equal-sized".into()));
        }
        let d = enc.cfg.embed_dim;
        let all: Vec<&Frame> = bags.iter().flat_map(|bag| bag.iter()).collect();
        let p = g.constant(enc.patches(&all)?);
        let t = enc.forward(g, s, p)?;
        let pooled = pool_tokens(g, t)?;
        let a = match self.scorer {
            Some(scorer) => scorer.scores(g, s, pooled, q)?,
            None => g.constant(Tensor::new(&[b, q], alloc::vec![1.0 / q as f64; b * q])?),
        };
        let a = g.reshape(a, &[b, 1, q])?;
        let x = g.reshape(pooled, &[b, q, d])?;
        let bag = g.bmm(a, x, false, false)?;
        let bag = g.reshape(bag, &[b, d])?;
        head.forward(g, s, bag)
    }
}
