//! Attention-based multiple-instance scoring and top-K frame selection.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{kernels, topk_indices, Graph, ParamId, ParamStore, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::glorot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilConfig {
    /// Hidden width `L` of the scorer.
    pub hidden: usize,
    /// Number of frames kept per bag.
    pub k: usize,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self { hidden: 128, k: 3 }
    }
}

/// Scorer parameters: `V` is `[L, D]`, `w` is `[L, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct MilScorer {
    pub v: ParamId,
    pub w: ParamId,
}

impl MilScorer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let v = glorot(hidden, dim, rng);
        let w = glorot(hidden, 1, rng);
        Ok(Self {
            v: store.insert(format!("{name}.V"), v)?,
            w: store.insert(format!("{name}.w"), w)?,
        })
    }

    /// Pre-softmax scores `wᵀ tanh(V xᵀ)` for pooled instances `[B·q, D]`,
    /// returned as `[B, q]`.
    pub fn logits(&self, g: &mut Graph, s: &ParamStore, pooled: Var, q: usize) -> Result<Var> {
        let sh = g.shape(pooled).to_vec();
        if sh.len() != 2 || q == 0 || !sh[0].is_multiple_of(q) {
            return shape_err("mil logits", &sh, &[q]);
        }
        let v = g.param(s, self.v);
        let w = g.param(s, self.w);
        let h = g.matmul_t(pooled, v, false, true)?;
        let h = g.tanh(h);
        let l = g.matmul(h, w)?;
        g.reshape(l, &[sh[0] / q, q])
    }

    /// Attention weights `a` over each bag, `[B, q]`.
    pub fn scores(&self, g: &mut Graph, s: &ParamStore, pooled: Var, q: usize) -> Result<Var> {
        let l = self.logits(g, s, pooled, q)?;
        Ok(g.softmax(l))
    }
}

/// Mean over the token axis: `[F, M, D]` → `[F, D]`.
pub fn pool_tokens(g: &mut Graph, tokens: Var) -> Result<Var> {
    g.mean_axis(tokens, 1)
}

/// Frames kept from one bag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Bag positions, by descending attention weight (ties to lower index).
    pub indices: Vec<usize>,
    /// Attention weights restricted to `indices` and renormalized.
    pub weights: Vec<f64>,
}

/// Picks the `k` highest-weighted instances of one bag.
pub fn select_topk(a: &[f64], k: usize) -> Result<Selection> {
    if k > a.len() {
        return Err(Error::Argument(format!(
            "cannot select {k} frames from a bag of {}",
            a.len()
        )));
    }
    let indices = topk_indices(a, k)?;
    let total: f64 = indices.iter().map(|&i| a[i]).sum();
    let weights = indices.iter().map(|&i| a[i] / total).collect();
    Ok(Selection { indices, weights })
}

/// Selections for every bag from `[B, q]` pre-softmax logits. Softmax is
/// monotone, so ranking logits ranks the attention weights.
pub fn select_batch(logits: &[f64], q: usize, k: usize) -> Result<Vec<Selection>> {
    logits
        .chunks(q)
        .map(|row| {
            let a = kernels::softmax(row);
            let indices = topk_indices(row, k)?;
            let total: f64 = indices.iter().map(|&i| a[i]).sum();
            let weights = indices.iter().map(|&i| a[i] / total).collect();
            Ok(Selection { indices, weights })
        })
        .collect()
}

/// Renormalized weights of the selected frames on the tape: the softmax of
/// the selected logits, which equals `a` restricted and renormalized.
/// `logits` is `[B, q]`; returns `[B, K]`.
pub fn selected_weights(g: &mut Graph, logits: Var, selections: &[Selection]) -> Result<Var> {
    let sh = g.shape(logits).to_vec();
    let (b, q) = (sh[0], sh[1]);
    if selections.len() != b {
        return shape_err("selected_weights", &sh, &[selections.len()]);
    }
    let k = selections[0].indices.len();
    let idx: Vec<usize> = selections
        .iter()
        .enumerate()
        .flat_map(|(bi, s)| s.indices.iter().map(move |&i| bi * q + i))
        .collect();
    let flat = g.reshape(logits, &[b * q, 1])?;
    let picked = g.gather_rows(flat, &idx)?;
    let picked = g.reshape(picked, &[b, k])?;
    Ok(g.softmax(picked))
}

/// Scales each selected frame's tokens by `K × weight`, so uniform weights
/// leave them unchanged. `tokens` is `[B·K, M, D]`, `weights` is `[B, K]`.
pub fn weighted_forward(g: &mut Graph, tokens: Var, weights: Var) -> Result<Var> {
    let sh = g.shape(weights).to_vec();
    let k = sh[1];
    let flat = g.reshape(weights, &[sh[0] * k])?;
    let scaled = g.scale(flat, k as f64);
    g.row_scale(tokens, scaled)
}
