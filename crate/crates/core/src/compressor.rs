//! Cross-attention from a bank of learned queries onto a variable number of
//! visual tokens, producing a fixed number of output tokens.

use alloc::format;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, ParamId, ParamStore, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{table, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressorConfig {
    /// Number of output tokens `N`.
    pub queries: usize,
    pub heads: usize,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            queries: 64,
            heads: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Compressor {
    /// `[N, D]` query bank.
    pub queries: ParamId,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub heads: usize,
}

pub struct CompressOut {
    /// `[B, N, D]`.
    pub out: Var,
    /// `[B·heads, N, M]` attention probabilities.
    pub probs: Var,
}

impl Compressor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        cfg: CompressorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.queries == 0 {
            return Err(Error::Config("compressor needs at least one query".into()));
        }
        if cfg.heads == 0 || !dim.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "compressor width {dim} is not divisible by {} heads",
                cfg.heads
            )));
        }
        Ok(Self {
            queries: table(store, format!("{name}.queries"), cfg.queries, dim, 0.02, rng)?,
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, false, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, false, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, false, rng)?,
            heads: cfg.heads,
        })
    }

    pub fn compress(&self, g: &mut Graph, s: &ParamStore, tokens: Var) -> Result<Var> {
        Ok(self.compress_full(g, s, tokens)?.out)
    }

    /// `tokens` is `[B, M, D]`.
    pub fn compress_full(&self, g: &mut Graph, s: &ParamStore, tokens: Var) -> Result<CompressOut> {
        let sh = g.shape(tokens).to_vec();
        let xq = g.param(s, self.queries);
        let qs = g.shape(xq).to_vec();
        let (n, d) = (qs[0], qs[1]);
        if sh.len() != 3 || sh[2] != d {
            return shape_err("compress", &sh, &qs);
        }
        let (b, m) = (sh[0], sh[1]);
        let h = self.heads;
        let dh = d / h;
        let q = self.wq.forward(g, s, xq)?;
        let q = g.broadcast(q, b);
        let k = self.wk.forward(g, s, tokens)?;
        let v = self.wv.forward(g, s, tokens)?;
        let split = |g: &mut Graph, x: Var, len: usize| -> Result<Var> {
            if h == 1 {
                return Ok(x);
            }
            let x = g.reshape(x, &[b, len, h, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[b * h, len, dh])
        };
        let (q, k, v) = (split(g, q, n)?, split(g, k, m)?, split(g, v, m)?);
        let scores = g.bmm(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = g.softmax(scores);
        let o = g.bmm(probs, v, false, false)?;
        let out = if h == 1 {
            o
        } else {
            let o = g.reshape(o, &[b, h, n, dh])?;
            let o = g.permute(o, &[0, 2, 1, 3])?;
            g.reshape(o, &[b, n, d])?
        };
        Ok(CompressOut { out, probs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{gradcheck, GradcheckOptions, Tensor};
    use crate::linalg::Mat;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, cfg: CompressorConfig) -> (ParamStore, Compressor, ChaCha8Rng) {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let c = Compressor::new(&mut store, "ca", d, cfg, &mut r).unwrap();
        (store, c, r)
    }

    fn set_identity(store: &mut ParamStore, c: &Compressor, d: usize) {
        for l in [c.wq, c.wk, c.wv] {
            store.get_mut(l.w).tensor.data_mut().copy_from_slice(Tensor::eye(d).data());
        }
    }

    fn run(store: &ParamStore, c: &Compressor, tokens: Tensor) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let t = g.constant(tokens);
        let res = c.compress_full(&mut g, store, t).unwrap();
        (g.value(res.out).to_vec(), g.value(res.probs).to_vec())
    }

    #[test]
    fn lone_token_passes_through() {
        let (mut store, c, mut r) = setup(4, CompressorConfig { queries: 1, heads: 1 });
        set_identity(&mut store, &c, 4);
        let tok = Tensor::randn(&[1, 1, 4], 1.0, &mut r);
        let (out, _) = run(&store, &c, tok.clone());
        for (a, b) in out.iter().zip(tok.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let (mut store, c, _) = setup(3, CompressorConfig { queries: 5, heads: 1 });
        set_identity(&mut store, &c, 3);
        let row = [0.3, -1.2, 2.0];
        let tokens = Tensor::new(&[1, 4, 3], row.repeat(4)).unwrap();
        let (out, _) = run(&store, &c, tokens);
        for chunk in out.chunks(3) {
            for (a, b) in chunk.iter().zip(&row) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    /// Straight-line evaluation of `softmax(QKᵀ/√d)·V` with explicit loops.
    fn oracle(xq: &[f64], x: &[f64], wq: &[f64], wk: &[f64], wv: &[f64], n: usize, m: usize, d: usize) -> Vec<f64> {
        let proj = |a: &[f64], w: &[f64], rows: usize| -> Vec<f64> {
            let mut o = vec![0.0; rows * d];
            for r in 0..rows {
                for j in 0..d {
                    for i in 0..d {
                        o[r * d + j] += a[r * d + i] * w[i * d + j];
                    }
                }
            }
            o
        };
        let (q, k, v) = (proj(xq, wq, n), proj(x, wk, m), proj(x, wv, m));
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let logits: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|t| q[i * d + t] * k[j * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..m {
                for t in 0..d {
                    out[i * d + t] += e[j] / z * v[j * d + t];
                }
            }
        }
        out
    }

    #[test]
    fn matches_straight_line_formulas() {
        let (store, c, mut r) = setup(4, CompressorConfig { queries: 2, heads: 1 });
        let tokens = Tensor::randn(&[1, 3, 4], 1.0, &mut r);
        let (out, probs) = run(&store, &c, tokens.clone());
        let want = oracle(
            store.tensor(c.queries).data(),
            tokens.data(),
            store.tensor(c.wq.w).data(),
            store.tensor(c.wk.w).data(),
            store.tensor(c.wv.w).data(),
            2,
            3,
            4,
        );
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in probs.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn output_shape_is_independent_of_token_count() {
        let (store, c, mut r) = setup(4, CompressorConfig { queries: 7, heads: 2 });
        for m in [1, 5, 49, 147] {
            let mut g = Graph::new();
            let t = g.constant(Tensor::randn(&[2, m, 4], 1.0, &mut r));
            let out = c.compress(&mut g, &store, t).unwrap();
            assert_eq!(g.shape(out), [2, 7, 4]);
        }
        let mut g = Graph::new();
        let t = g.constant(Tensor::randn(&[1, 3, 5], 1.0, &mut r));
        assert!(matches!(c.compress(&mut g, &store, t), Err(Error::Shape { .. })));
    }

    #[test]
    fn outputs_lie_in_convex_hull_of_values() {
        // With M = D + 1 affinely independent value rows, each output row
        // has unique barycentric coordinates; solve for them and check they
        // form a probability vector.
        let d = 3;
        let (store, c, mut r) = setup(d, CompressorConfig { queries: 4, heads: 1 });
        let m = d + 1;
        let tokens = Tensor::randn(&[1, m, d], 1.0, &mut r);
        let (out, _) = run(&store, &c, tokens.clone());
        let wv = store.tensor(c.wv.w).data();
        let mut vals = vec![0.0; m * d];
        for j in 0..m {
            for t in 0..d {
                for i in 0..d {
                    vals[j * d + t] += tokens.data()[j * d + i] * wv[i * d + t];
                }
            }
        }
        // system [Vᵀ; 1ᵀ] λ = [o; 1]
        let mut a = Mat::zeros(m, m);
        for j in 0..m {
            for t in 0..d {
                a.set(t, j, vals[j * d + t]);
            }
            a.set(d, j, 1.0);
        }
        let inv = a.inverse().unwrap();
        for row in out.chunks(d) {
            let mut rhs = Mat::zeros(m, 1);
            for t in 0..d {
                rhs.set(t, 0, row[t]);
            }
            rhs.set(d, 0, 1.0);
            let lam = inv.matmul(&rhs).unwrap();
            assert!(lam.data.iter().all(|&l| l > -1e-9), "{:?}", lam.data);
            assert!((lam.data.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn compressor_gradcheck_including_inputs() {
        for heads in [1, 2] {
            let (mut store, c, mut r) = setup(4, CompressorConfig { queries: 3, heads });
            let tokens = Tensor::randn(&[2, 5, 4], 1.0, &mut r);
            let wsum = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
            let report = gradcheck(
                &mut store,
                |g, s| {
                    let t = g.constant(tokens.clone());
                    let y = c.compress(g, s, t)?;
                    let w = g.constant(wsum.clone());
                    let y = g.mul(y, w)?;
                    Ok(g.sum(y))
                },
                GradcheckOptions::default(),
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{report:?}");

            // gradient with respect to the visual tokens, against central differences
            let grad_of = |t: &Tensor| -> f64 {
                let mut g = Graph::new();
                let tv = g.constant(t.clone());
                let y = c.compress(&mut g, &store, tv).unwrap();
                let w = g.constant(wsum.clone());
                let y = g.mul(y, w).unwrap();
                let l = g.sum(y);
                g.scalar(l)
            };
            let mut g = Graph::new();
            let tv = g.variable(tokens.clone());
            let y = c.compress(&mut g, &store, tv).unwrap();
            let w = g.constant(wsum.clone());
            let y = g.mul(y, w).unwrap();
            let l = g.sum(y);
            let grads = g.backward(l).unwrap();
            let analytic = grads.wrt(tv).unwrap().to_vec();
            for i in 0..tokens.len() {
                let mut plus = tokens.clone();
                plus.data_mut()[i] += 1e-5;
                let mut minus = tokens.clone();
                minus.data_mut()[i] -= 1e-5;
                let num = (grad_of(&plus) - grad_of(&minus)) / 2e-5;
                let err = (num - analytic[i]).abs() / 1f64.max(num.abs()).max(analytic[i].abs());
                assert!(err < 1e-4);
            }
        }
    }
}
