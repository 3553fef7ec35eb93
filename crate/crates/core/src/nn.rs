//! Parameterised layers built on the tape: affine maps, layer norm, MLPs,
//! and (optionally masked) multi-head self-attention.

use alloc::format;
use alloc::string::String;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;

use crate::diff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Logit assigned to masked attention pairs. Finite so that no node of the
/// tape ever holds an infinity; `exp` of it underflows to exactly zero.
pub const MASKED: f64 = -1e30;

pub const LN_EPS: f64 = 1e-5;

/// Draws an `[fan_in, fan_out]` weight with Glorot-normal scale.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::randn(&[fan_in, fan_out], std, rng)
}

/// `x·W + b` over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.insert(format!("{name}.w"), glorot(fan_in, fan_out, rng))?;
        let b = if bias {
            Some(store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    /// Weight and bias both start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let w = store.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]))?;
        let b = Some(store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?);
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = self.b.map(|b| g.param(s, b));
        g.linear(x, w, b)
    }

    pub fn out_dim(&self, s: &ParamStore) -> usize {
        s.tensor(self.w).shape()[1]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0))?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        g.layernorm(x, gamma, beta, LN_EPS)
    }
}

/// Two affine layers with GELU between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, s, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, s, h)
    }
}

/// Multi-head self-attention over groups of tokens.
///
/// Input is `[F, W, n, D]`: `F` independent items, each split into `W`
/// groups (windows) of `n` tokens. Attention never crosses groups. An
/// optional additive mask of shape `[W, n, n]` is shared by all items.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

pub struct AttentionOut {
    pub out: Var,
    /// `[F·heads·W, n, n]` attention probabilities.
    pub probs: Var,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, mask: Option<Var>) -> Result<Var> {
        Ok(self.forward_full(g, s, x, mask)?.out)
    }

    pub fn forward_full(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        x: Var,
        mask: Option<Var>,
    ) -> Result<AttentionOut> {
        let sh = g.shape(x).to_vec();
        if sh.len() != 4 {
            return shape_err("self_attention", &sh, &[0, 0, 0, 0]);
        }
        let (f, w, n, d) = (sh[0], sh[1], sh[2], sh[3]);
        let h = self.heads;
        if d % h != 0 {
            return shape_err("self_attention heads", &sh, &[h]);
        }
        let dh = d / h;
        if let Some(m) = mask {
            if g.shape(m) != [w, n, n] {
                return shape_err("attention mask", g.shape(m), &[w, n, n]);
            }
        }
        let qkv = self.qkv.forward(g, s, x)?;
        let qkv = g.reshape(qkv, &[f, w, n, 3, h, dh])?;
        let qkv = g.permute(qkv, &[3, 0, 4, 1, 2, 5])?;
        let qkv = g.reshape(qkv, &[3, f * h * w, n, dh])?;
        let mut take = |i: usize| -> Result<Var> {
            let t = g.slice_outer(qkv, i, 1)?;
            g.reshape(t, &[f * h * w, n, dh])
        };
        let (q, k, v) = (take(0)?, take(1)?, take(2)?);
        let scores = g.bmm(q, k, false, true)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            let sc = g.reshape(scores, &[f * h, w, n, n])?;
            let sc = g.add_tiled(sc, m)?;
            scores = g.reshape(sc, &[f * h * w, n, n])?;
        }
        let probs = g.softmax(scores);
        let o = g.bmm(probs, v, false, false)?;
        let o = g.reshape(o, &[f, h, w, n, dh])?;
        let o = g.permute(o, &[0, 2, 3, 1, 4])?;
        let o = g.reshape(o, &[f, w, n, d])?;
        let out = self.proj.forward(g, s, o)?;
        Ok(AttentionOut { out, probs })
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio.max(1), rng)?,
        })
    }

    /// `x` is `[F, W, n, D]`; see [`SelfAttention`].
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, mask: Option<Var>) -> Result<Var> {
        let h = self.ln1.forward(g, s, x)?;
        let h = self.attn.forward(g, s, h, mask)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, s, x)?;
        let h = self.mlp.forward(g, s, h)?;
        g.add(x, h)
    }
}

/// Registers a learned `[rows, cols]` table drawn from `N(0, std²)`.
pub fn table<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: impl Into<String>,
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Result<ParamId> {
    store.insert(name, Tensor::randn(&[rows, cols], std, rng))
}

/// Constant zero tensor on the tape.
pub fn zeros(g: &mut Graph, shape: &[usize]) -> Var {
    g.constant(Tensor::zeros(shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{gradcheck, GradcheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    /// Straight-line single-head attention oracle on one group.
    fn naive_attention(x: &[f64], n: usize, d: usize, wqkv: &[f64], bqkv: &[f64]) -> alloc::vec::Vec<f64> {
        let mut qkv = vec![0.0; n * 3 * d];
        for t in 0..n {
            for j in 0..3 * d {
                let mut acc = bqkv[j];
                for i in 0..d {
                    acc += x[t * d + i] * wqkv[i * 3 * d + j];
                }
                qkv[t * 3 * d + j] = acc;
            }
        }
        let mut out = vec![0.0; n * d];
        for t in 0..n {
            let logits: alloc::vec::Vec<f64> = (0..n)
                .map(|u| (0..d).map(|i| qkv[t * 3 * d + i] * qkv[u * 3 * d + d + i]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let p = crate::diff::kernels::softmax(&logits);
            for u in 0..n {
                for i in 0..d {
                    out[t * d + i] += p[u] * qkv[u * 3 * d + 2 * d + i];
                }
            }
        }
        out
    }

    #[test]
    fn single_head_matches_oracle() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let attn = SelfAttention::new(&mut store, "a", 4, 1, &mut r).unwrap();
        // identity output projection isolates the attention itself
        store.get_mut(attn.proj.w).tensor = Tensor::eye(4);
        store.get_mut(attn.proj.w).tensor.set_requires_grad(true);
        let x = Tensor::randn(&[1, 1, 5, 4], 1.0, &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = attn.forward(&mut g, &store, xv, None).unwrap();
        let want = naive_attention(
            x.data(),
            5,
            4,
            store.tensor(attn.qkv.w).data(),
            store.tensor(attn.qkv.b.unwrap()).data(),
        );
        for (a, b) in g.value(out).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_sum_to_one_and_single_token_returns_value_projection() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let attn = SelfAttention::new(&mut store, "a", 6, 2, &mut r).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[2, 3, 4, 6], 1.0, &mut r));
        let res = attn.forward_full(&mut g, &store, x, None).unwrap();
        for row in g.value(res.probs).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }

        // one token: output = proj(value(x))
        let mut g = Graph::new();
        let x1 = g.constant(Tensor::randn(&[1, 1, 1, 6], 1.0, &mut r));
        let out = attn.forward(&mut g, &store, x1, None).unwrap();
        let qkv = attn.qkv.forward(&mut g, &store, x1).unwrap();
        let v = g.value(qkv)[12..18].to_vec();
        let vt = g.constant(Tensor::new(&[1, 6], v).unwrap());
        let want = attn.proj.forward(&mut g, &store, vt).unwrap();
        for (a, b) in g.value(out).iter().zip(g.value(want)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn self_only_mask_returns_value_projection() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let attn = SelfAttention::new(&mut store, "a", 4, 1, &mut r).unwrap();
        let n = 3;
        let mut m = vec![MASKED; n * n];
        for i in 0..n {
            m[i * n + i] = 0.0;
        }
        let mut g = Graph::new();
        let mask = g.constant(Tensor::new(&[1, n, n], m).unwrap());
        let x = g.constant(Tensor::randn(&[1, 1, n, 4], 1.0, &mut r));
        let res = attn.forward_full(&mut g, &store, x, Some(mask)).unwrap();
        for (i, row) in g.value(res.probs).chunks(n).enumerate() {
            for (j, p) in row.iter().enumerate() {
                assert_eq!(*p, if i == j { 1.0 } else { 0.0 });
            }
        }
        let qkv = attn.qkv.forward(&mut g, &store, x).unwrap();
        let qv = g.value(qkv).to_vec();
        let v: alloc::vec::Vec<f64> = (0..n).flat_map(|t| qv[t * 12 + 8..t * 12 + 12].to_vec()).collect();
        let vt = g.constant(Tensor::new(&[n, 4], v).unwrap());
        let want = attn.proj.forward(&mut g, &store, vt).unwrap();
        for (a, b) in g.value(res.out).iter().zip(g.value(want)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn groups_do_not_leak() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", 4, 2, 2, &mut r).unwrap();
        let base = Tensor::randn(&[2, 2, 3, 4], 1.0, &mut r);
        let mut changed = base.clone();
        // perturb item 1, group 1 only
        for v in &mut changed.data_mut()[36..48] {
            *v += 0.5;
        }
        let run = |t: Tensor| {
            let mut g = Graph::new();
            let x = g.constant(t);
            let y = block.forward(&mut g, &store, x, None).unwrap();
            g.value(y).to_vec()
        };
        let (a, b) = (run(base), run(changed));
        assert_eq!(a[..36], b[..36]);
        assert_ne!(a[36..], b[36..]);
    }

    #[test]
    fn block_gradcheck() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", 4, 2, 2, &mut r).unwrap();
        let x = Tensor::randn(&[2, 2, 3, 4], 1.0, &mut r);
        let wsum = Tensor::randn(&[2, 2, 3, 4], 1.0, &mut r);
        let mut mask = vec![0.0; 2 * 9];
        mask[1] = MASKED;
        mask[3] = MASKED;
        let mask = Tensor::new(&[2, 3, 3], mask).unwrap();
        let report = gradcheck(
            &mut store,
            |g, s| {
                let xv = g.constant(x.clone());
                let m = g.constant(mask.clone());
                let y = block.forward(g, s, xv, Some(m))?;
                let c = g.constant(wsum.clone());
                let p = g.mul(y, c)?;
                Ok(g.sum(p))
            },
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        assert!(SelfAttention::new(&mut store, "a", 6, 4, &mut rng()).is_err());
    }
}
