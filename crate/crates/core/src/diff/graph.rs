//! Define-by-run reverse-mode tape.
//!
//! Every operation evaluates eagerly and appends a node holding its output
//! value plus whatever the backward rule needs. Nodes only ever refer to
//! earlier nodes, so the tape is acyclic and a single reverse sweep visits
//! each node once in reverse topological order.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::kernels::{gelu, gelu_grad, gemm, softmax_into};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Relu,
    Gelu,
    Exp,
    Log,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(#[allow(dead_code)] ParamId),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddTiled(usize, usize),
    Scale(usize, f64),
    RowScale {
        x: usize,
        s: usize,
        cols: usize,
    },
    Unary(usize, Unary),
    Softmax {
        x: usize,
        cols: usize,
    },
    /// `map[o]` is the input offset that feeds output offset `o`.
    Permute {
        x: usize,
        map: Vec<usize>,
    },
    Reshape(usize),
    SliceOuter {
        x: usize,
        offset: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
        cols: usize,
    },
    MeanAxis {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Sum(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cols: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
        n: usize,
    },
    Broadcast {
        x: usize,
        times: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A computation tape. Build it with the operation methods, then call
/// [`Graph::backward`] on a scalar output.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: BTreeMap<ParamId, Var>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (useful for checking input gradients).
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Binds a parameter into the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let t = store.tensor(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), true);
        self.bound.insert(id, v);
        v
    }

    /// Index and description of the first node holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<(usize, String)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            n.value
                .iter()
                .any(|v| !v.is_finite())
                .then(|| (i, format!("{:?} {:?}", op_name(&n.op), n.shape)))
        })
    }

    // ---- linear algebra -------------------------------------------------

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Rank-2 product of optionally transposed operands.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err("matmul", sa, sb);
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return shape_err("matmul", sa, sb);
        }
        self.matmul_raw(a, b, 1, m, ka, n, ta, tb, vec![m, n])
    }

    /// Batched product over the leading axis of two rank-3 tensors.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("bmm", sa, sb);
        }
        let batch = sa[0];
        let (m, ka) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return shape_err("bmm", sa, sb);
        }
        self.matmul_raw(a, b, batch, m, ka, n, ta, tb, vec![batch, m, n])
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_raw(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    ta,
                    &bv[i * k * n..(i + 1) * k * n],
                    tb,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            },
            rg,
        ))
    }

    /// `x·w + b` applied to the last axis of `x`; `w` is `[k, n]`, `b` is `[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let k = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != k {
            return shape_err("linear", &sx, &sw);
        }
        let n = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return shape_err("linear bias", &sw, self.shape(b));
            }
        }
        let rows = numel(&sx) / k;
        let mut out = vec![0.0; rows * n];
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..rows {
                out[r * n..(r + 1) * n].copy_from_slice(bv);
            }
        }
        gemm(
            rows,
            k,
            n,
            self.value(x),
            false,
            self.value(w),
            false,
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        Ok(self.push(
            shape,
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                rows,
                k,
                n,
            },
            rg,
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a.0, b.0), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a.0, b.0), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a.0, b.0), |x, y| x * y))
    }

    /// Adds `b` to every trailing block of `a`; `b`'s shape must be a suffix
    /// of `a`'s shape (bias rows, position tables, attention masks).
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err("add_tiled", sa, sb);
        }
        let bv = self.value(b);
        let p = bv.len();
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % p])
            .collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        let shape = sa.to_vec();
        Ok(self.push(shape, out, Op::AddTiled(a.0, b.0), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x.0);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x.0, c), rg)
    }

    /// Multiplies row `r` of `x` (viewed as `[len(s), rest]`) by `s[r]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let rows = self.value(s).len();
        let total = self.value(x).len();
        if rows == 0 || !total.is_multiple_of(rows) {
            return shape_err("row_scale", self.shape(x), self.shape(s));
        }
        let cols = total / rows;
        let sv = self.value(s);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / cols])
            .collect();
        let rg = self.rg(x.0) || self.rg(s.0);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::RowScale {
                x: x.0,
                s: s.0,
                cols,
            },
            rg,
        ))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let xv = self.value(x);
        if kind == Unary::Log {
            if let Some(&bad) = xv.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain {
                    op: "log",
                    value: bad,
                });
            }
        }
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => |v| v.tanh(),
            Unary::Relu => |v| v.max(0.0),
            Unary::Gelu => gelu,
            Unary::Exp => |v| v.exp(),
            Unary::Log => |v| v.ln(),
        };
        let out = xv.iter().map(|&v| f(v)).collect();
        let rg = self.rg(x.0);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Unary(x.0, kind), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh).expect("tanh is total")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu).expect("relu is total")
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu).expect("gelu is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp).expect("exp is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().unwrap();
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_into(src, dst);
        }
        let rg = self.rg(x.0);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Softmax { x: x.0, cols }, rg)
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return shape_err("reshape", self.shape(x), shape);
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x.0), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let r = s.len();
        let mut seen = vec![false; r];
        if axes.len() != r
            || axes
                .iter()
                .any(|&a| a >= r || core::mem::replace(&mut seen[a], true))
        {
            return shape_err("permute", &s, axes);
        }
        let mut in_strides = vec![1usize; r];
        for i in (0..r.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * s[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total = numel(&s);
        let mut map = Vec::with_capacity(total);
        let mut counter = vec![0usize; r];
        let mut offset = 0usize;
        for _ in 0..total {
            map.push(offset);
            for d in (0..r).rev() {
                counter[d] += 1;
                offset += strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                offset -= strides[d] * out_shape[d];
                counter[d] = 0;
            }
        }
        let xv = self.value(x);
        let out = map.iter().map(|&o| xv[o]).collect();
        let rg = self.rg(x.0);
        Ok(self.push(out_shape, out, Op::Permute { x: x.0, map }, rg))
    }

    /// `x[start..start + len]` along axis 0.
    pub fn slice_outer(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::Index {
                what: "slice_outer",
                index: start + len,
                len: s[0],
            });
        }
        let inner = numel(&s[1..]);
        let out = self.value(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.rg(x.0);
        Ok(self.push(
            shape,
            out,
            Op::SliceOuter {
                x: x.0,
                offset: start * inner,
            },
            rg,
        ))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return shape_err("concat", &first, &[axis]);
        }
        let outer = numel(&first[..axis]);
        let mut shape = first.clone();
        shape[axis] = 0;
        let mut blocks = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != first.len()
                || sp[..axis] != first[..axis]
                || sp[axis + 1..] != first[axis + 1..]
            {
                return shape_err("concat", &first, sp);
            }
            shape[axis] += sp[axis];
            blocks.push((p.0, numel(&sp[axis..])));
        }
        let row: usize = blocks.iter().map(|b| b.1).sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for &(p, w) in &blocks {
                out.extend_from_slice(&self.nodes[p].value[o * w..(o + 1) * w]);
            }
        }
        let rg = blocks.iter().any(|b| self.rg(b.0));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: blocks,
                outer,
            },
            rg,
        ))
    }

    /// Gathers rows along axis 0: output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Index {
                what: "gather_rows",
                index: bad,
                len: s[0],
            });
        }
        if idx.is_empty() {
            return Err(Error::Argument(
                "gather_rows needs at least one index".into(),
            ));
        }
        let cols = numel(&s[1..]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(x.0);
        Ok(self.push(
            shape,
            out,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
                cols,
            },
            rg,
        ))
    }

    /// Prepends an axis of length `times`, repeating `x`.
    pub fn broadcast(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len() * times);
        for _ in 0..times {
            out.extend_from_slice(xv);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        let rg = self.rg(x.0);
        self.push(shape, out, Op::Broadcast { x: x.0, times }, rg)
    }

    // ---- reductions -----------------------------------------------------

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return shape_err("mean_axis", &s, &[axis]);
        }
        let outer = numel(&s[..axis]);
        let n = s[axis];
        let inner = numel(&s[axis + 1..]);
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        let inv = 1.0 / n as f64;
        for o in 0..outer {
            for j in 0..n {
                let src = &xv[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v * inv;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            shape,
            out,
            Op::MeanAxis {
                x: x.0,
                outer,
                n,
                inner,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let rg = self.rg(x.0);
        self.push(vec![1], vec![total], Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ---- fused layers ---------------------------------------------------

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().unwrap();
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return shape_err("layernorm", &s, self.shape(gamma));
        }
        let rows = numel(&s) / cols;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(
            s,
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                cols,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return shape_err("cross_entropy", &s, &[labels.len()]);
        }
        let (batch, n) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Index {
                what: "cross_entropy label",
                index: bad,
                len: n,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &lv[b * n..(b + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            for c in 0..n {
                probs[b * n + c] = (row[c] - lse).exp();
            }
        }
        let rg = self.rg(logits.0);
        Ok(self.push(
            vec![1],
            vec![loss / batch as f64],
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
                n,
            },
            rg,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err("backward", self.shape(loss), &[1]);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let keep = matches!(node.op, Op::Leaf | Op::Param(_));
            let Some(dy) = (if keep {
                grads[i].clone()
            } else {
                grads[i].take()
            }) else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(i, &dy, &mut grads);
        }
        Ok(Gradients {
            grads,
            bound: self.bound.clone(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], i: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let len = self.nodes[i].value.len();
        Some(grads[i].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            } => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                if let Some(ga) = self.acc(grads, a) {
                    for t in 0..batch {
                        let dc = &dy[t * m * n..(t + 1) * m * n];
                        let bs = &bv[t * k * n..(t + 1) * k * n];
                        let out = &mut ga[t * m * k..(t + 1) * m * k];
                        if ta {
                            gemm(k, n, m, bs, tb, dc, true, 1.0, out);
                        } else {
                            gemm(m, n, k, dc, false, bs, !tb, 1.0, out);
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for t in 0..batch {
                        let dc = &dy[t * m * n..(t + 1) * m * n];
                        let as_ = &av[t * m * k..(t + 1) * m * k];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if tb {
                            gemm(n, m, k, dc, true, as_, ta, 1.0, out);
                        } else {
                            gemm(k, m, n, as_, !ta, dc, false, 1.0, out);
                        }
                    }
                }
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                k,
                n,
            } => {
                if let Some(gx) = self.acc(grads, x) {
                    gemm(rows, n, k, dy, false, &self.nodes[w].value, true, 1.0, gx);
                }
                if let Some(gw) = self.acc(grads, w) {
                    gemm(k, rows, n, &self.nodes[x].value, true, dy, false, 1.0, gw);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, b) {
                        for row in dy.chunks(n) {
                            for (g, d) in gb.iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for j in [a, b] {
                    if let Some(g) = self.acc(grads, j) {
                        add_into(g, dy);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(g) = self.acc(grads, a) {
                    add_into(g, dy);
                }
                if let Some(g) = self.acc(grads, b) {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g -= d;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(g) = self.acc(grads, a) {
                    for ((g, d), o) in g.iter_mut().zip(dy).zip(&self.nodes[b].value) {
                        *g += d * o;
                    }
                }
                if let Some(g) = self.acc(grads, b) {
                    for ((g, d), o) in g.iter_mut().zip(dy).zip(&self.nodes[a].value) {
                        *g += d * o;
                    }
                }
            }
            &Op::AddTiled(a, b) => {
                if let Some(g) = self.acc(grads, a) {
                    add_into(g, dy);
                }
                if let Some(g) = self.acc(grads, b) {
                    let p = g.len();
                    for chunk in dy.chunks(p) {
                        add_into(g, chunk);
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(g) = self.acc(grads, x) {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += d * c;
                    }
                }
            }
            &Op::RowScale { x, s, cols } => {
                let sv = &self.nodes[s].value;
                if let Some(g) = self.acc(grads, x) {
                    for (j, (g, d)) in g.iter_mut().zip(dy).enumerate() {
                        *g += d * sv[j / cols];
                    }
                }
                if let Some(g) = self.acc(grads, s) {
                    let xv = &self.nodes[x].value;
                    for (r, g) in g.iter_mut().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        *g += dy[span.clone()]
                            .iter()
                            .zip(&xv[span])
                            .map(|(d, v)| d * v)
                            .sum::<f64>();
                    }
                }
            }
            &Op::Unary(x, kind) => {
                let (xv, yv) = (&self.nodes[x].value, &node.value);
                if let Some(g) = self.acc(grads, x) {
                    for j in 0..g.len() {
                        let local = match kind {
                            Unary::Tanh => 1.0 - yv[j] * yv[j],
                            Unary::Relu => {
                                if xv[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Gelu => gelu_grad(xv[j]),
                            Unary::Exp => yv[j],
                            Unary::Log => 1.0 / xv[j],
                        };
                        g[j] += dy[j] * local;
                    }
                }
            }
            &Op::Softmax { x, cols } => {
                if let Some(g) = self.acc(grads, x) {
                    for ((gr, dr), yr) in g
                        .chunks_mut(cols)
                        .zip(dy.chunks(cols))
                        .zip(node.value.chunks(cols))
                    {
                        let dot: f64 = dr.iter().zip(yr).map(|(d, y)| d * y).sum();
                        for c in 0..cols {
                            gr[c] += yr[c] * (dr[c] - dot);
                        }
                    }
                }
            }
            Op::Permute { x, map } => {
                if let Some(g) = self.acc(grads, *x) {
                    for (o, &src) in map.iter().enumerate() {
                        g[src] += dy[o];
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(g) = self.acc(grads, x) {
                    add_into(g, dy);
                }
            }
            &Op::SliceOuter { x, offset } => {
                if let Some(g) = self.acc(grads, x) {
                    add_into(&mut g[offset..offset + dy.len()], dy);
                }
            }
            Op::Concat { parts, outer } => {
                let row: usize = parts.iter().map(|p| p.1).sum();
                let mut start = 0;
                for &(p, w) in parts {
                    if let Some(g) = self.acc(grads, p) {
                        for o in 0..*outer {
                            add_into(
                                &mut g[o * w..(o + 1) * w],
                                &dy[o * row + start..o * row + start + w],
                            );
                        }
                    }
                    start += w;
                }
            }
            Op::GatherRows { x, idx, cols } => {
                let cols = *cols;
                if let Some(g) = self.acc(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(
                            &mut g[src * cols..(src + 1) * cols],
                            &dy[r * cols..(r + 1) * cols],
                        );
                    }
                }
            }
            &Op::MeanAxis { x, outer, n, inner } => {
                if let Some(g) = self.acc(grads, x) {
                    let inv = 1.0 / n as f64;
                    for o in 0..outer {
                        let d = &dy[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let dst = &mut g[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (gv, dv) in dst.iter_mut().zip(d) {
                                *gv += dv * inv;
                            }
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(g) = self.acc(grads, x) {
                    for v in g.iter_mut() {
                        *v += dy[0];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                rstd,
            } => {
                let cols = *cols;
                let gv = &self.nodes[*gamma].value;
                if let Some(g) = self.acc(grads, *gamma) {
                    for (dr, hr) in dy.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            g[c] += dr[c] * hr[c];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *beta) {
                    for dr in dy.chunks(cols) {
                        add_into(g, dr);
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    let inv = 1.0 / cols as f64;
                    for (r, ((gr, dr), hr)) in g
                        .chunks_mut(cols)
                        .zip(dy.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..cols {
                            let dh = dr[c] * gv[c];
                            mean_d += dh;
                            mean_dh += dh * hr[c];
                        }
                        mean_d *= inv;
                        mean_dh *= inv;
                        for c in 0..cols {
                            let dh = dr[c] * gv[c];
                            gr[c] += rstd[r] * (dh - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                n,
            } => {
                let n = *n;
                if let Some(g) = self.acc(grads, *logits) {
                    let scale = dy[0] / labels.len() as f64;
                    for (b, &label) in labels.iter().enumerate() {
                        for c in 0..n {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            g[b * n + c] += scale * (probs[b * n + c] - onehot);
                        }
                    }
                }
            }
            &Op::Broadcast { x, times } => {
                if let Some(g) = self.acc(grads, x) {
                    let p = g.len();
                    for t in 0..times {
                        add_into(g, &dy[t * p..(t + 1) * p]);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::MatMul { .. } => "matmul",
        Op::Linear { .. } => "linear",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddTiled(..) => "add_tiled",
        Op::Scale(..) => "scale",
        Op::RowScale { .. } => "row_scale",
        Op::Unary(..) => "unary",
        Op::Softmax { .. } => "softmax",
        Op::Permute { .. } => "permute",
        Op::Reshape(_) => "reshape",
        Op::SliceOuter { .. } => "slice_outer",
        Op::Concat { .. } => "concat",
        Op::GatherRows { .. } => "gather_rows",
        Op::MeanAxis { .. } => "mean_axis",
        Op::Sum(_) => "sum",
        Op::LayerNorm { .. } => "layernorm",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Broadcast { .. } => "broadcast",
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    bound: BTreeMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::variable`] or a
    /// bound parameter. `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.bound.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Adds every parameter gradient into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (&id, &v) in &self.bound {
            if let Some(g) = self.wrt(v) {
                store.get_mut(id).tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
