//! Image to token sequence: overlapping patches, linear projection, the
//! `[cls]` token and learnable position embeddings.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::numcore::{Graph, SeededRng, Tensor, Var};

/// Geometry of the sliding-window patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatchifyConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub stride: usize,
    pub dim: usize,
}

/// Patch grid extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PatchifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.stride == 0 {
            bail!(Config, "patch size and stride must be positive");
        }
        if self.stride > self.patch {
            bail!(Config, "stride {} exceeds patch size {}", self.stride, self.patch);
        }
        if self.height < self.patch || self.width < self.patch {
            bail!(Config, "image {}x{} smaller than patch {}", self.height, self.width, self.patch);
        }
        if self.channels == 0 || self.dim == 0 {
            bail!(Config, "channels and embedding dim must be positive");
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn grid(&self) -> Result<Grid> {
        let (rows, cols, _) = patch_count(self)?;
        Ok(Grid { rows, cols })
    }
}

/// `(N_H, N_W, N)` with `N_H = ⌊(H+S−P)/S⌋`, `N_W = ⌊(W+S−P)/S⌋`.
pub fn patch_count(cfg: &PatchifyConfig) -> Result<(usize, usize, usize)> {
    cfg.validate()?;
    let nh = (cfg.height + cfg.stride - cfg.patch) / cfg.stride;
    let nw = (cfg.width + cfg.stride - cfg.patch) / cfg.stride;
    Ok((nh, nw, nh * nw))
}

/// Splits an `H×W×C` image into `N` rows of `P·P·C` values.
///
/// Patch `i = r·N_W + c` covers pixels `[r·S, r·S+P) × [c·S, c·S+P)`; values
/// inside a patch are laid out in (row, col, channel) order.
pub fn extract_patches(img: &Tensor, cfg: &PatchifyConfig) -> Result<Tensor> {
    let (nh, nw, n) = patch_count(cfg)?;
    if img.shape() != [cfg.height, cfg.width, cfg.channels] {
        bail!(Dimension, "image {:?} does not match {}x{}x{}", img.shape(), cfg.height, cfg.width, cfg.channels);
    }
    let (p, s, c) = (cfg.patch, cfg.stride, cfg.channels);
    let row_len = cfg.width * c;
    let src = img.data();
    let mut out = Vec::with_capacity(n * cfg.patch_len());
    for r in 0..nh {
        for col in 0..nw {
            for dy in 0..p {
                let start = (r * s + dy) * row_len + col * s * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::new(&[n, cfg.patch_len()], out)
}

/// Learnable position table: row 0 belongs to `[cls]`, rows `1..=N` follow
/// the patch grid in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionEmbedding {
    pub table: Tensor,
    pub grid: Grid,
}

impl PositionEmbedding {
    pub fn new(table: Tensor, grid: Grid) -> Result<Self> {
        if table.rank() != 2 || table.shape()[0] != grid.len() + 1 {
            bail!(Contract, "position table {:?} does not fit a {}x{} grid", table.shape(), grid.rows, grid.cols);
        }
        Ok(PositionEmbedding { table, grid })
    }

    /// Truncated-normal initialisation (std 0.02, cut at ±2σ).
    pub fn init(grid: Grid, dim: usize, rng: &mut SeededRng) -> Self {
        let table = trunc_normal_tensor(&[grid.len() + 1, dim], rng);
        PositionEmbedding { table, grid }
    }
}

pub fn trunc_normal_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.trunc_normal(0.02, 2.0))
}

fn resample_axis(len_in: usize, len_out: usize, i: usize) -> (usize, usize, f32) {
    if len_out == 1 || len_in == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (len_in - 1) as f64 / (len_out - 1) as f64;
    let lo = (libm::floor(pos) as usize).min(len_in - 1);
    let hi = (lo + 1).min(len_in - 1);
    (lo, hi, (pos - lo as f64) as f32)
}

/// Bilinear (align-corners) resize of the grid part; `[cls]` row copied.
pub fn interpolate_pos_embed(src: &PositionEmbedding, dst: Grid) -> Result<PositionEmbedding> {
    let t = &src.table;
    if t.rank() != 2 || t.shape()[0] != src.grid.len() + 1 {
        bail!(Contract, "position table rows {} do not match grid {:?}", t.shape()[0], src.grid);
    }
    if dst.is_empty() {
        bail!(Contract, "empty destination grid");
    }
    if dst == src.grid {
        return Ok(src.clone());
    }
    let d = t.cols();
    let mut out = Vec::with_capacity((dst.len() + 1) * d);
    out.extend_from_slice(t.row(0));
    let cell = |r: usize, c: usize| t.row(1 + r * src.grid.cols + c);
    for r in 0..dst.rows {
        let (r0, r1, fr) = resample_axis(src.grid.rows, dst.rows, r);
        for c in 0..dst.cols {
            let (c0, c1, fc) = resample_axis(src.grid.cols, dst.cols, c);
            let (a, b, e, f) = (cell(r0, c0), cell(r0, c1), cell(r1, c0), cell(r1, c1));
            for k in 0..d {
                let top = a[k] + (b[k] - a[k]) * fc;
                let bottom = e[k] + (f[k] - e[k]) * fc;
                out.push(top + (bottom - top) * fr);
            }
        }
    }
    PositionEmbedding::new(Tensor::new(&[dst.len() + 1, d], out)?, dst)
}

/// Embedded token sequences for a batch: `[B·(N+1), D]`, sample-major.
#[derive(Clone, Copy, Debug)]
pub struct PatchSequence {
    pub tokens: Var,
    pub batch: usize,
    pub grid: Grid,
}

impl PatchSequence {
    /// Tokens per sample, `N + 1`.
    pub fn seq_len(&self) -> usize {
        self.grid.len() + 1
    }
}

/// Parameter nodes for the patch embedding.
#[derive(Clone, Copy, Debug)]
pub struct EmbedVars {
    /// `[P·P·C, D]`
    pub proj_w: Var,
    /// `[D]`
    pub proj_b: Var,
    /// `[1, D]`
    pub cls: Var,
    /// `[N+1, D]`
    pub pos: Var,
}

/// `Z₀ = [x_cls; F(x¹); …; F(xᴺ)] + 𝒫` for every sample in the batch.
///
/// `patches` is `[B·N, P·P·C]`, stacked sample-major.
pub fn project_and_assemble(g: &mut Graph, patches: Var, vars: &EmbedVars, batch: usize, grid: Grid) -> Result<PatchSequence> {
    let n = grid.len();
    if g.shape(vars.pos)[0] != n + 1 {
        bail!(Contract, "position embedding has {} rows, grid needs {}; interpolate first", g.shape(vars.pos)[0], n + 1);
    }
    if g.shape(patches)[0] != batch * n {
        bail!(Dimension, "patches {:?} for batch {batch} with {n} patches", g.shape(patches));
    }
    let proj = g.linear(patches, vars.proj_w, Some(vars.proj_b))?;
    let stacked = g.concat_rows(&[proj, vars.cls])?;
    let cls_row = batch * n;
    let mut order = Vec::with_capacity(batch * (n + 1));
    let mut pos_idx = Vec::with_capacity(batch * (n + 1));
    for b in 0..batch {
        order.push(cls_row);
        order.extend(b * n..(b + 1) * n);
        pos_idx.extend(0..=n);
    }
    let tokens = g.gather_rows(stacked, order)?;
    let pos = g.gather_rows(vars.pos, pos_idx)?;
    let tokens = g.add(tokens, pos)?;
    Ok(PatchSequence { tokens, batch, grid })
}
