//! Windowed-attention image encoder turning each frame into a grid of
//! feature tokens.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{table, Block, LayerNorm, Linear, MASKED};

/// One image, `H × W × C`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    pub frame_index: usize,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return shape_err("frame", &[height, width, channels], &[pixels.len()]);
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!("frames need 1 or 3 channels, got {channels}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
            frame_index: 0,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
            frame_index: 0,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// `M × D` tokens laid out on a `grid_h × grid_w` grid (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub window_size: usize,
    pub num_heads: usize,
    pub merge_stages: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 56,
            channels: 1,
            patch_size: 8,
            embed_dim: 64,
            depth: 6,
            window_size: 7,
            num_heads: 4,
            merge_stages: 0,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.channels != 1 && self.channels != 3 {
            return fail(format!("encoder channels must be 1 or 3, got {}", self.channels));
        }
        let unit = self.patch_size << self.merge_stages;
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(unit) {
            return fail(format!(
                "image size {} is not divisible by patch {} × 2^{}",
                self.image_size, self.patch_size, self.merge_stages
            ));
        }
        if self.depth == 0 || !self.depth.is_multiple_of(2) {
            return fail(format!("encoder depth must be even and positive, got {}", self.depth));
        }
        if !self.depth.is_multiple_of(2 * (self.merge_stages + 1)) {
            return fail(format!(
                "encoder depth {} cannot be split into {} stages of regular/shifted pairs",
                self.depth,
                self.merge_stages + 1
            ));
        }
        for side in self.stage_sides() {
            if self.window_size == 0 || side % self.window_size != 0 {
                return fail(format!(
                    "window {} does not divide grid side {side}",
                    self.window_size
                ));
            }
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        Ok(())
    }

    /// Grid side at each stage.
    pub fn stage_sides(&self) -> Vec<usize> {
        let first = self.image_size / self.patch_size.max(1);
        (0..=self.merge_stages).map(|s| first >> s).collect()
    }

    /// Number of output tokens per frame.
    pub fn tokens_per_frame(&self) -> usize {
        let side = *self.stage_sides().last().unwrap();
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Cuts `frame` into non-overlapping patches: `[M, p·p·C]`, patches in
/// row-major grid order, each flattened as `(dy, dx, c)`.
pub fn patchify(frame: &Frame, patch: usize) -> Result<Tensor> {
    if patch == 0 || !frame.height.is_multiple_of(patch) || !frame.width.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "{}×{} frame is not divisible into {patch}×{patch} patches",
            frame.height, frame.width
        )));
    }
    let (gh, gw, c) = (frame.height / patch, frame.width / patch, frame.channels);
    let pd = patch * patch * c;
    let mut out = Vec::with_capacity(gh * gw * pd);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                let row = (py * patch + dy) * frame.width + px * patch;
                out.extend_from_slice(&frame.pixels[row * c..(row + patch) * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, pd], out)
}

/// Source grid index (row-major over `side × side`) for every position of
/// the windowed layout `[nW, ws·ws]`, after cyclically rolling the grid by
/// `-shift` in both axes.
pub fn window_index(side: usize, ws: usize, shift: usize) -> Result<Vec<usize>> {
    if ws == 0 || !side.is_multiple_of(ws) {
        return Err(Error::Config(format!("window {ws} does not divide grid side {side}")));
    }
    let nw = side / ws;
    let mut idx = Vec::with_capacity(side * side);
    for wy in 0..nw {
        for wx in 0..nw {
            for ty in 0..ws {
                for tx in 0..ws {
                    let y = (wy * ws + ty + shift) % side;
                    let x = (wx * ws + tx + shift) % side;
                    idx.push(y * side + x);
                }
            }
        }
    }
    Ok(idx)
}

pub fn invert_index(idx: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; idx.len()];
    for (i, &j) in idx.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Partitions a `[side·side, D]` grid into `[nW·ws·ws, D]` window order.
pub fn window_partition(grid: &Tensor, side: usize, ws: usize, shift: usize) -> Result<Tensor> {
    let idx = window_index(side, ws, shift)?;
    gather(grid, &idx)
}

/// Inverse of [`window_partition`].
pub fn window_reverse(windows: &Tensor, side: usize, ws: usize, shift: usize) -> Result<Tensor> {
    let idx = invert_index(&window_index(side, ws, shift)?);
    gather(windows, &idx)
}

fn gather(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let rows = t.shape()[0];
    if rows != idx.len() {
        return shape_err("window gather", t.shape(), &[idx.len()]);
    }
    let cols = t.len() / rows;
    let mut out = Vec::with_capacity(t.len());
    for &i in idx {
        out.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
    }
    Tensor::new(t.shape(), out)
}

/// Additive attention mask `[nW, n, n]` for a shifted layer: pairs of
/// tokens that came from different regions before the roll get [`MASKED`].
pub fn shift_mask(side: usize, ws: usize, shift: usize) -> Result<Tensor> {
    if ws == 0 || !side.is_multiple_of(ws) || shift >= ws {
        return Err(Error::Config(format!(
            "shift {shift} with window {ws} on grid side {side}"
        )));
    }
    let region = |p: usize| -> usize {
        // position in the rolled grid
        let band = |v: usize| -> usize {
            if v < side - ws {
                0
            } else if v < side - shift {
                1
            } else {
                2
            }
        };
        band(p / side) * 3 + band(p % side)
    };
    // Position in the rolled grid of windowed slot `i`.
    let nw = (side / ws) * (side / ws);
    let n = ws * ws;
    let rolled_pos = |i: usize| -> usize {
        let (w, t) = (i / n, i % n);
        let (wy, wx) = (w / (side / ws), w % (side / ws));
        (wy * ws + t / ws) * side + wx * ws + t % ws
    };
    let mut m = vec![0.0; nw * n * n];
    for w in 0..nw {
        for a in 0..n {
            for b in 0..n {
                if region(rolled_pos(w * n + a)) != region(rolled_pos(w * n + b)) {
                    m[(w * n + a) * n + b] = MASKED;
                }
            }
        }
    }
    Tensor::new(&[nw, n, n], m)
}

/// Per-stage layout tables, built once per encoder.
#[derive(Debug, Clone)]
struct StageLayout {
    side: usize,
    windows: usize,
    regular: Vec<usize>,
    regular_inv: Vec<usize>,
    shifted: Option<(Vec<usize>, Vec<usize>, Tensor)>,
}

#[derive(Debug, Clone, Copy)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub cfg: EncoderConfig,
    pub patch: Linear,
    pub pos: ParamId,
    pub stages: Vec<Vec<Block>>,
    pub merges: Vec<PatchMerge>,
    pub norm: LayerNorm,
    layouts: Vec<StageLayout>,
}

impl VisualEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch = Linear::new(store, &format!("{name}.patch"), cfg.patch_dim(), d, true, rng)?;
        let sides = cfg.stage_sides();
        let pos = table(store, format!("{name}.pos"), sides[0] * sides[0], d, 0.02, rng)?;
        let per_stage = cfg.depth / (cfg.merge_stages + 1);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        let mut layouts = Vec::new();
        for (si, &side) in sides.iter().enumerate() {
            let blocks = (0..per_stage)
                .map(|b| {
                    Block::new(
                        store,
                        &format!("{name}.s{si}.b{b}"),
                        d,
                        cfg.num_heads,
                        cfg.mlp_ratio,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            if si + 1 < sides.len() {
                merges.push(PatchMerge {
                    norm: LayerNorm::new(store, &format!("{name}.m{si}.norm"), 4 * d)?,
                    reduce: Linear::new(store, &format!("{name}.m{si}.reduce"), 4 * d, d, false, rng)?,
                });
            }
            layouts.push(StageLayout::new(side, cfg.window_size)?);
        }
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d)?;
        Ok(Self {
            cfg,
            patch,
            pos,
            stages,
            merges,
            norm,
            layouts,
        })
    }

    /// Flattened patches of a batch of frames: `[F, M0, p·p·C]`.
    pub fn patches(&self, frames: &[&Frame]) -> Result<Tensor> {
        let c = &self.cfg;
        let m0 = c.stage_sides()[0].pow(2);
        let mut data = Vec::with_capacity(frames.len() * m0 * c.patch_dim());
        for f in frames {
            if f.height != c.image_size || f.width != c.image_size || f.channels != c.channels {
                return Err(Error::Config(format!(
                    "frame {}×{}×{} does not match encoder input {}×{}×{}",
                    f.height, f.width, f.channels, c.image_size, c.image_size, c.channels
                )));
            }
            data.extend_from_slice(patchify(f, c.patch_size)?.data());
        }
        Tensor::new(&[frames.len().max(1), m0, c.patch_dim()], data)
    }

    /// Encodes `[F, M0, patch_dim]` patches into `[F, M, D]` tokens.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, patches: Var) -> Result<Var> {
        let sh = g.shape(patches).to_vec();
        let f = sh[0];
        let d = self.cfg.embed_dim;
        let x = self.patch.forward(g, s, patches)?;
        let pos = g.param(s, self.pos);
        let mut x = g.add_tiled(x, pos)?;
        for (si, blocks) in self.stages.iter().enumerate() {
            let lay = &self.layouts[si];
            let m = lay.side * lay.side;
            let n = m / lay.windows;
            for (bi, block) in blocks.iter().enumerate() {
                let shifted = if bi % 2 == 1 { lay.shifted.as_ref() } else { None };
                let (fwd, inv, mask) = match shifted {
                    Some((fwd, inv, mask)) => (fwd, inv, Some(mask)),
                    None => (&lay.regular, &lay.regular_inv, None),
                };
                let mask = mask.map(|t| g.constant(t.clone()));
                let rows = g.reshape(x, &[f * m, d])?;
                let w = g.gather_rows(rows, &batched(fwd, f))?;
                let w = g.reshape(w, &[f, lay.windows, n, d])?;
                let w = block.forward(g, s, w, mask)?;
                let w = g.reshape(w, &[f * m, d])?;
                let back = g.gather_rows(w, &batched(inv, f))?;
                x = g.reshape(back, &[f, m, d])?;
            }
            if let Some(merge) = self.merges.get(si) {
                let half = lay.side / 2;
                let t = g.reshape(x, &[f, half, 2, half, 2, d])?;
                let t = g.permute(t, &[0, 1, 3, 2, 4, 5])?;
                let t = g.reshape(t, &[f, half * half, 4 * d])?;
                let t = merge.norm.forward(g, s, t)?;
                x = merge.reduce.forward(g, s, t)?;
            }
        }
        self.norm.forward(g, s, x)
    }

    /// Encodes one frame outside of any training tape.
    pub fn encode_frame(&self, s: &ParamStore, frame: &Frame) -> Result<TokenGrid> {
        let mut g = Graph::new();
        let p = g.constant(self.patches(&[frame])?);
        let out = self.forward(&mut g, s, p)?;
        let side = *self.cfg.stage_sides().last().unwrap();
        let tokens = Tensor::new(&[side * side, self.cfg.embed_dim], g.value(out).to_vec())?;
        Ok(TokenGrid {
            tokens,
            grid_h: side,
            grid_w: side,
        })
    }
}

impl StageLayout {
    fn new(side: usize, ws: usize) -> Result<Self> {
        let regular = window_index(side, ws, 0)?;
        let regular_inv = invert_index(&regular);
        // Shifting a single window only wraps tokens around; it is skipped
        // when the window already covers the whole grid.
        let shifted = if side > ws {
            let shift = ws / 2;
            let fwd = window_index(side, ws, shift)?;
            let inv = invert_index(&fwd);
            Some((fwd, inv, shift_mask(side, ws, shift)?))
        } else {
            None
        };
        Ok(Self {
            side,
            windows: (side / ws) * (side / ws),
            regular,
            regular_inv,
            shifted,
        })
    }
}

fn batched(idx: &[usize], f: usize) -> Vec<usize> {
    let m = idx.len();
    (0..f)
        .flat_map(|b| idx.iter().map(move |&i| b * m + i))
        .collect()
}
