//! Jigsaw patch module: shift and shuffle the patch tokens of `Z_{l−1}`,
//! split them into `k` groups that share the cls token, and run a shared
//! last layer over each group next to the ordinary global branch.

use alloc::vec::Vec;

use crate::embed::PatchSequence;
use crate::encoder::{transformer_layer, LayerVars, Mode};
use crate::error::{bail, Result};
use crate::numcore::{Graph, SeededRng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct JpmConfig {
    /// When false the model is the plain global-branch baseline.
    pub enabled: bool,
    /// Shift offset in tokens.
    pub m: usize,
    /// Group count.
    pub k: usize,
    /// Shift and shuffle before grouping; false splits contiguously.
    pub rearrange: bool,
    /// Concatenate local features into the retrieval feature.
    pub use_local_at_inference: bool,
    /// Replace the fixed transpose shuffle with a seeded random permutation.
    pub random_shuffle: bool,
}

impl Default for JpmConfig {
    fn default() -> Self {
        JpmConfig { enabled: true, m: 5, k: 4, rearrange: true, use_local_at_inference: true, random_shuffle: false }
    }
}

impl JpmConfig {
    pub fn baseline() -> Self {
        JpmConfig { enabled: false, ..Default::default() }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 {
            bail!(Config, "JPM needs k >= 1");
        }
        if self.enabled && self.k > n {
            bail!(Config, "JPM k = {} exceeds {n} patch tokens", self.k);
        }
        Ok(())
    }

    /// Streams feeding the loss: 1 for the baseline, `k+1` with JPM.
    pub fn streams(&self) -> usize {
        if self.enabled {
            self.k + 1
        } else {
            1
        }
    }

    /// Width of the retrieval feature for embedding size `dim`.
    pub fn feature_dim(&self, dim: usize) -> usize {
        if self.enabled && self.use_local_at_inference {
            (self.k + 1) * dim
        } else {
            dim
        }
    }
}

/// Cyclic left rotation by `m mod N`.
pub fn shift_tokens(indices: &[usize], m: usize) -> Vec<usize> {
    let mut out = indices.to_vec();
    let n = out.len();
    if n > 0 {
        out.rotate_left(m % n);
    }
    out
}

/// Transpose shuffle: lay the sequence out row-major as `k × ⌈N/k⌉`
/// (padding the tail), read it column by column and drop the pads.
pub fn patch_shuffle(indices: &[usize], k: usize) -> Result<Vec<usize>> {
    let n = indices.len();
    if k == 0 || k > n {
        bail!(Config, "patch shuffle needs 1 <= k <= N, got k={k} N={n}");
    }
    let cols = n.div_ceil(k);
    let mut out = Vec::with_capacity(n);
    for c in 0..cols {
        for r in 0..k {
            if let Some(&v) = indices.get(r * cols + c) {
                out.push(v);
            }
        }
    }
    Ok(out)
}

/// Seeded random permutation, the comparison variant for the shuffle.
pub fn random_shuffle(indices: &[usize], rng: &mut SeededRng) -> Vec<usize> {
    let mut out = indices.to_vec();
    rng.shuffle(&mut out);
    out
}

/// Contiguous group sizes for `n` tokens in `k` groups, larger groups first.
pub fn group_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|j| n / k + usize::from(j < n % k)).collect()
}

/// Splits `tokens` into `k` contiguous chunks, each led by `cls`.
pub fn regroup(tokens: &[usize], cls: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for size in group_sizes(tokens.len(), k) {
        let mut group = Vec::with_capacity(size + 1);
        group.push(cls);
        group.extend_from_slice(&tokens[start..start + size]);
        start += size;
        out.push(group);
    }
    out
}

/// Order of the patch positions `0..N` entering the local branches.
pub fn jpm_permutation(n: usize, cfg: &JpmConfig, rng: &mut SeededRng) -> Result<Vec<usize>> {
    cfg.validate(n)?;
    let ids: Vec<usize> = (0..n).collect();
    if !cfg.rearrange {
        return Ok(ids);
    }
    let shifted = shift_tokens(&ids, cfg.m);
    if cfg.random_shuffle {
        Ok(random_shuffle(&shifted, rng))
    } else {
        patch_shuffle(&shifted, cfg.k)
    }
}

/// Last-layer parameters bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub layer: LayerVars,
    pub norm_g: Var,
    pub norm_b: Var,
}

#[derive(Clone, Debug)]
pub struct JpmOutput {
    /// Global feature `[B, D]`.
    pub global: Var,
    /// Local features `[B, D]`, one per group.
    pub locals: Vec<Var>,
    /// Patch positions in local-branch order.
    pub permutation: Vec<usize>,
    /// Global-branch attention `[B·heads, N+1, N+1]`.
    pub global_attn: Var,
    pub local_attn: Vec<Var>,
}

fn cls_feature(g: &mut Graph, tokens: Var, batch: usize, seq_len: usize, branch: &BranchVars) -> Result<Var> {
    let cls = g.gather_rows(tokens, (0..batch).map(|b| b * seq_len).collect())?;
    g.layer_norm(cls, branch.norm_g, branch.norm_b, 1e-6)
}

/// Runs the global branch and, if enabled, the `k` local branches through
/// one shared layer.
pub fn jpm_forward(
    g: &mut Graph,
    z: PatchSequence,
    global: &BranchVars,
    local: Option<&BranchVars>,
    cfg: &JpmConfig,
    mode: Mode<'_>,
    rng: &mut SeededRng,
) -> Result<JpmOutput> {
    let t = z.seq_len();
    let n = t - 1;
    cfg.validate(n)?;
    // the permutation draw comes first so both branches see the same stream
    let permutation = if cfg.enabled { jpm_permutation(n, cfg, rng)? } else { Vec::new() };
    let (zg, global_attn) = transformer_layer(g, z.tokens, z.batch, t, &global.layer, mode, rng)?;
    let global_feat = cls_feature(g, zg, z.batch, t, global)?;
    let mut out = JpmOutput { global: global_feat, locals: Vec::new(), permutation, global_attn, local_attn: Vec::new() };
    if !cfg.enabled {
        return Ok(out);
    }
    let Some(local) = local else {
        bail!(Contract, "JPM enabled without local-branch parameters");
    };
    let tokens: Vec<usize> = out.permutation.iter().map(|p| p + 1).collect();
    for group in regroup(&tokens, 0, cfg.k) {
        let len = group.len();
        let rows = (0..z.batch).flat_map(|b| group.iter().map(move |&i| b * t + i)).collect();
        let seq = g.gather_rows(z.tokens, rows)?;
        let (zl, attn) = transformer_layer(g, seq, z.batch, len, &local.layer, mode, rng)?;
        let feat = cls_feature(g, zl, z.batch, len, local)?;
        out.locals.push(feat);
        out.local_attn.push(attn);
    }
    Ok(out)
}

/// `[f_g, f_l^1, …, f_l^k]` along columns, or `f_g` alone.
pub fn inference_feature(global: &Tensor, locals: &[Tensor], cfg: &JpmConfig) -> Result<Tensor> {
    if !cfg.enabled || !cfg.use_local_at_inference {
        return Ok(global.clone());
    }
    if locals.len() != cfg.k {
        bail!(Contract, "{} local features for k = {}", locals.len(), cfg.k);
    }
    let mut parts: Vec<&Tensor> = Vec::with_capacity(cfg.k + 1);
    parts.push(global);
    parts.extend(locals.iter());
    Tensor::concat_cols(&parts)
}
