//! Fused token sequence (CLS + EEG channel tokens + visual tokens), the
//! fusion transformer with its classification head, and the pooled
//! concatenation baseline.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{table, Block, LayerNorm, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub eeg_channels: usize,
    pub eeg_samples: usize,
    /// Width of the hidden layer of the per-channel EEG map.
    pub eeg_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            eeg_channels: 32,
            eeg_samples: 384,
            eeg_hidden: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Cls,
    Eeg,
    Vis,
}

impl Modality {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Maps every EEG channel's samples to one token through a shared
/// two-layer network with `tanh` between.
#[derive(Debug, Clone, Copy)]
pub struct EegTokenizer {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EegTokenizer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), cfg.eeg_samples, cfg.eeg_hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.eeg_hidden, cfg.dim, true, rng)?,
        })
    }

    /// `eeg` is `[B, channels, samples]`; returns `[B, channels, D]`.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, eeg: Var) -> Result<Var> {
        let want = s.tensor(self.fc1.w).shape()[0];
        let sh = g.shape(eeg);
        if sh.len() != 3 || sh[2] != want {
            return shape_err("tokenize_eeg", sh, &[want]);
        }
        let h = self.fc1.forward(g, s, eeg)?;
        let h = g.tanh(h);
        self.fc2.forward(g, s, h)
    }
}

/// A fused sequence for one sample, for inspection outside training.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// `[1 + T_eeg + T_vis, D]`.
    pub tokens: Tensor,
    pub tags: Vec<Modality>,
    /// Index of each token within its modality (0 for CLS).
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FusionTransformer {
    pub dim: usize,
    pub cls: ParamId,
    pub modal: ParamId,
    pub pos_eeg: Option<(ParamId, usize)>,
    pub pos_vis: Option<(ParamId, usize)>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl FusionTransformer {
    /// Builds a fusion transformer for the given token counts; a `None`
    /// modality is absent from the sequence.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &FusionConfig,
        eeg_tokens: Option<usize>,
        vis_tokens: Option<usize>,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.dim;
        if eeg_tokens.is_none() && vis_tokens.is_none() {
            return Err(Error::Config("fusion needs at least one modality".into()));
        }
        let mut pos = |m: &str, n: Option<usize>, rng: &mut R| -> Result<Option<(ParamId, usize)>> {
            n.map(|n| Ok((table(store, format!("{name}.pos_{m}"), n, d, 0.02, rng)?, n)))
                .transpose()
        };
        let pos_eeg = pos("eeg", eeg_tokens, rng)?;
        let pos_vis = pos("vis", vis_tokens, rng)?;
        let cls = store.insert(format!("{name}.cls"), Tensor::randn(&[d], 0.02, rng))?;
        let modal = table(store, format!("{name}.modal"), 3, d, 0.02, rng)?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("{name}.b{i}"), d, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim: d,
            cls,
            modal,
            pos_eeg,
            pos_vis,
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            head: Linear::zeroed(store, &format!("{name}.head"), d, n_classes)?,
        })
    }

    pub fn seq_len(&self) -> usize {
        1 + self.pos_eeg.map_or(0, |p| p.1) + self.pos_vis.map_or(0, |p| p.1)
    }

    pub fn layout(&self) -> (Vec<Modality>, Vec<usize>) {
        let mut tags = alloc::vec![Modality::Cls];
        let mut positions = alloc::vec![0];
        for (m, p) in [(Modality::Eeg, self.pos_eeg), (Modality::Vis, self.pos_vis)] {
            if let Some((_, n)) = p {
                tags.extend(std::iter::repeat_n(m, n));
                positions.extend(0..n);
            }
        }
        (tags, positions)
    }

    /// `[cls] ⊕ eeg ⊕ vis` plus modality-type and position embeddings:
    /// `[B, T, D]`. Inputs are `[B, T_m, D]`.
    pub fn assemble(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        eeg: Option<Var>,
        vis: Option<Var>,
    ) -> Result<Var> {
        let mut parts = Vec::new();
        let batch = eeg.or(vis).map(|v| g.shape(v)[0]).unwrap_or(1);
        let cls = g.param(s, self.cls);
        let cls = g.reshape(cls, &[1, self.dim])?;
        parts.push(g.broadcast(cls, batch));
        let mut pos_parts = alloc::vec![crate::nn::zeros(g, &[1, self.dim])];
        for (what, input, table) in [("eeg", eeg, self.pos_eeg), ("vis", vis, self.pos_vis)] {
            match (input, table) {
                (Some(x), Some((p, n))) => {
                    let sh = g.shape(x);
                    if sh.len() != 3 || sh[0] != batch || sh[1] != n || sh[2] != self.dim {
                        return Err(Error::Config(format!(
                            "{what} tokens {sh:?} do not match position table [{batch}, {n}, {}]",
                            self.dim
                        )));
                    }
                    parts.push(x);
                    pos_parts.push(g.param(s, p));
                }
                (None, None) => {}
                _ => {
                    return Err(Error::Config(format!(
                        "{what} tokens supplied to a model built without them (or missing)"
                    )))
                }
            }
        }
        let seq = g.concat(&parts, 1)?;
        let (tags, _) = self.layout();
        let tag_idx: Vec<usize> = tags.iter().map(|t| t.index()).collect();
        let modal = g.param(s, self.modal);
        let type_emb = g.gather_rows(modal, &tag_idx)?;
        let pos_emb = g.concat(&pos_parts, 0)?;
        let emb = g.add(type_emb, pos_emb)?;
        g.add_tiled(seq, emb)
    }

    /// Runs the encoder over `[B, T, D]` and classifies from the CLS slot.
    pub fn classify(&self, g: &mut Graph, s: &ParamStore, seq: Var) -> Result<Var> {
        let sh = g.shape(seq).to_vec();
        let (b, t, d) = (sh[0], sh[1], sh[2]);
        let mut x = g.reshape(seq, &[b, 1, t, d])?;
        for block in &self.blocks {
            x = block.forward(g, s, x, None)?;
        }
        let rows = g.reshape(x, &[b * t, d])?;
        let cls_rows: Vec<usize> = (0..b).map(|i| i * t).collect();
        let cls = g.gather_rows(rows, &cls_rows)?;
        let cls = self.norm.forward(g, s, cls)?;
        self.head.forward(g, s, cls)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        eeg: Option<Var>,
        vis: Option<Var>,
    ) -> Result<Var> {
        let seq = self.assemble(g, s, eeg, vis)?;
        self.classify(g, s, seq)
    }

    /// Assembled sequence of one sample.
    pub fn sequence(
        &self,
        s: &ParamStore,
        eeg: Option<&Tensor>,
        vis: Option<&Tensor>,
    ) -> Result<TokenSequence> {
        let mut g = Graph::new();
        let mut lift = |t: Option<&Tensor>| -> Result<Option<Var>> {
            t.map(|t| {
                let sh = t.shape();
                let v = g.constant(t.clone());
                g.reshape(v, &[1, sh[0], sh[sh.len() - 1]])
            })
            .transpose()
        };
        let (e, v) = (lift(eeg)?, lift(vis)?);
        let seq = self.assemble(&mut g, s, e, v)?;
        let (tags, positions) = self.layout();
        Ok(TokenSequence {
            tokens: Tensor::new(&[tags.len(), self.dim], g.value(seq).to_vec())?,
            tags,
            positions,
        })
    }
}

/// Pooled-concatenation baseline: mean of each modality's tokens,
/// concatenated, then a two-layer classifier.
#[derive(Debug, Clone, Copy)]
pub struct ConcatHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ConcatHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), 2 * dim, hidden, true, rng)?,
            fc2: Linear::zeroed(store, &format!("{name}.fc2"), hidden, n_classes)?,
        })
    }

    /// `eeg` is `[B, T_e, D]`, `vis` is `[B, T_v, D]`.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, eeg: Var, vis: Var) -> Result<Var> {
        let e = g.mean_axis(eeg, 1)?;
        let v = g.mean_axis(vis, 1)?;
        let x = g.concat(&[e, v], 1)?;
        let h = self.fc1.forward(g, s, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, s, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{gradcheck, GradcheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> FusionConfig {
        FusionConfig {
            dim: 4,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            eeg_channels: 3,
            eeg_samples: 6,
            eeg_hidden: 5,
        }
    }

    #[test]
    fn tokenizer_shapes_and_zero_input() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = FusionConfig {
            dim: 8,
            ..Default::default()
        };
        let tok = EegTokenizer::new(&mut store, "eeg", &cfg, &mut r).unwrap();
        store.get_mut(tok.fc2.b.unwrap()).tensor = Tensor::randn(&[8], 1.0, &mut r);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 32, 384]));
        let out = tok.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(out), [1, 32, 8]);
        let v = g.value(out);
        for row in v.chunks(8) {
            assert_eq!(row, &v[..8]);
        }
        let bad = g.constant(Tensor::zeros(&[1, 32, 100]));
        assert!(tok.forward(&mut g, &store, bad).is_err());
    }

    #[test]
    fn sequence_length_and_layout() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = FusionConfig {
            dim: 8,
            depth: 1,
            heads: 2,
            ..Default::default()
        };
        let f = FusionTransformer::new(&mut store, "f", &cfg, Some(32), Some(64), 4, &mut r).unwrap();
        assert_eq!(f.seq_len(), 97);
        let (tags, pos) = f.layout();
        assert_eq!(tags[0], Modality::Cls);
        assert!(tags[1..33].iter().all(|&t| t == Modality::Eeg));
        assert!(tags[33..].iter().all(|&t| t == Modality::Vis));
        assert_eq!(pos[32], 31);
        assert_eq!(pos[33], 0);
        let eeg = Tensor::zeros(&[32, 8]);
        let vis = Tensor::zeros(&[63, 8]);
        assert!(matches!(f.sequence(&store, Some(&eeg), Some(&vis)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_embeddings_give_raw_concatenation() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = small_cfg();
        let f = FusionTransformer::new(&mut store, "f", &cfg, Some(3), Some(2), 2, &mut r).unwrap();
        for id in [f.modal, f.pos_eeg.unwrap().0, f.pos_vis.unwrap().0] {
            store.get_mut(id).tensor.data_mut().fill(0.0);
        }
        let eeg = Tensor::randn(&[3, 4], 1.0, &mut r);
        let vis = Tensor::randn(&[2, 4], 1.0, &mut r);
        let seq = f.sequence(&store, Some(&eeg), Some(&vis)).unwrap();
        let mut want = store.tensor(f.cls).data().to_vec();
        want.extend_from_slice(eeg.data());
        want.extend_from_slice(vis.data());
        assert_eq!(seq.tokens.data(), &want[..]);
    }

    #[test]
    fn swapping_eeg_tokens_only_moves_content() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cfg = small_cfg();
        let f = FusionTransformer::new(&mut store, "f", &cfg, Some(3), Some(2), 2, &mut r).unwrap();
        let eeg = Tensor::randn(&[3, 4], 1.0, &mut r);
        let vis = Tensor::randn(&[2, 4], 1.0, &mut r);
        let mut swapped = eeg.clone();
        swapped.data_mut()[..4].copy_from_slice(&eeg.data()[4..8]);
        swapped.data_mut()[4..8].copy_from_slice(&eeg.data()[..4]);
        let a = f.sequence(&store, Some(&eeg), Some(&vis)).unwrap();
        let b = f.sequence(&store, Some(&swapped), Some(&vis)).unwrap();
        // direct construction: token i = content + modal[EEG] + pos_eeg[i]
        let modal = store.tensor(f.modal).data();
        let pos = store.tensor(f.pos_eeg.unwrap().0).data();
        for (slot, src) in [(0usize, 1usize), (1, 0), (2, 2)] {
            for c in 0..4 {
                let want = eeg.data()[src * 4 + c] + modal[4 + c] + pos[slot * 4 + c];
                assert!((b.tokens.data()[(1 + slot) * 4 + c] - want).abs() < 1e-15);
            }
        }
        assert_eq!(a.tokens.data()[..4], b.tokens.data()[..4]);
        assert_eq!(a.tokens.data()[16..], b.tokens.data()[16..]);
    }

    #[test]
    fn modality_embeddings_are_distinct() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let f = FusionTransformer::new(&mut store, "f", &small_cfg(), Some(3), Some(2), 2, &mut r).unwrap();
        let m = store.tensor(f.modal).data();
        assert_ne!(m[..4], m[4..8]);
        assert_ne!(m[4..8], m[8..]);
        assert_ne!(m[..4], m[8..]);
    }

    #[test]
    fn classify_shape_initial_uniformity_and_gradcheck() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cfg = small_cfg();
        let tok = EegTokenizer::new(&mut store, "eeg", &cfg, &mut r).unwrap();
        let f = FusionTransformer::new(&mut store, "f", &cfg, Some(3), Some(2), 3, &mut r).unwrap();
        let eeg = Tensor::randn(&[2, 3, 6], 1.0, &mut r);
        let vis = Tensor::randn(&[2, 2, 4], 1.0, &mut r);
        let labels = [2usize, 0];
        let build = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
            let e = g.constant(eeg.clone());
            let e = tok.forward(g, s, e)?;
            let v = g.constant(vis.clone());
            f.forward(g, s, Some(e), Some(v))
        };
        let mut g = Graph::new();
        let logits = build(&mut g, &store).unwrap();
        assert_eq!(g.shape(logits), [2, 3]);
        let loss = g.cross_entropy(logits, &labels).unwrap();
        assert!((g.scalar(loss) - 3f64.ln()).abs() < 1e-12);

        // head starts at zero; randomize it so every path carries gradient
        store.get_mut(f.head.w).tensor = Tensor::randn(&[4, 3], 0.5, &mut r);
        let report = gradcheck(
            &mut store,
            |g, s| {
                let l = build(g, s)?;
                g.cross_entropy(l, &labels)
            },
            GradcheckOptions {
                max_entries_per_param: Some(8),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn unimodal_sequences() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cfg = small_cfg();
        let f = FusionTransformer::new(&mut store, "f", &cfg, None, Some(2), 2, &mut r).unwrap();
        assert_eq!(f.seq_len(), 3);
        let mut g = Graph::new();
        let v = g.constant(Tensor::randn(&[5, 2, 4], 1.0, &mut r));
        let out = f.forward(&mut g, &store, None, Some(v)).unwrap();
        assert_eq!(g.shape(out), [5, 2]);
        let e = g.constant(Tensor::randn(&[5, 3, 4], 1.0, &mut r));
        assert!(f.forward(&mut g, &store, Some(e), Some(v)).is_err());
    }

    #[test]
    fn concat_baseline() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let head = ConcatHead::new(&mut store, "c", 4, 6, 4, &mut r).unwrap();
        store.get_mut(head.fc2.w).tensor = Tensor::randn(&[6, 4], 0.5, &mut r);
        let eeg = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        let vis = Tensor::randn(&[2, 5, 4], 1.0, &mut r);
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let e = g.constant(eeg.clone());
            let v = g.constant(vis.clone());
            let out = head.forward(&mut g, store, e, v).unwrap();
            assert_eq!(g.shape(out), [2, 4]);
            g.value(out).to_vec()
        };
        assert_eq!(run(&store), run(&store));
        let report = gradcheck(
            &mut store,
            |g, s| {
                let e = g.constant(eeg.clone());
                let v = g.constant(vis.clone());
                let l = head.forward(g, s, e, v)?;
                g.cross_entropy(l, &[1, 3])
            },
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4);
    }
}
