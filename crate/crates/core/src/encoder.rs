//! Pre-norm transformer encoder: multi-head self-attention, GELU MLP,
//! residual connections with stochastic depth, optional dropouts.

use alloc::format;
use alloc::vec::Vec;

use crate::embed::PatchSequence;
use crate::error::{bail, Result};
use crate::numcore::{Graph, ParamId, ParamStore, SeededRng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderConfig {
    /// Total layer count `l`, including the last (global / jigsaw) layer.
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub dropout: f32,
    pub attn_dropout: f32,
    /// Drop-path probability of the deepest layer; shallower layers ramp
    /// linearly from 0.
    pub drop_path: f32,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            bail!(Config, "{} heads do not divide dim {}", self.heads, self.dim);
        }
        for (name, p) in [("dropout", self.dropout), ("attn_dropout", self.attn_dropout), ("drop_path", self.drop_path)] {
            if !(0.0..1.0).contains(&p) {
                bail!(Config, "{name} probability {p} outside [0, 1)");
            }
        }
        if self.mlp_ratio == 0 {
            bail!(Config, "mlp_ratio must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Per-layer drop-path probabilities, `p·i/(l−1)`.
    pub fn drop_path_schedule(&self) -> Vec<f32> {
        let l = self.depth.max(1);
        (0..l)
            .map(|i| if l == 1 { self.drop_path } else { self.drop_path * i as f32 / (l - 1) as f32 })
            .collect()
    }
}

/// Parameter handles of one transformer layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub drop_path: f32,
}

/// [`LayerParams`] bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub drop_path: f32,
}

pub(crate) fn init_weight(store: &mut ParamStore, name: &str, shape: &[usize], seed: u64) -> ParamId {
    let mut rng = SeededRng::named(seed, name);
    store.add(name, Tensor::from_fn(shape, |_| rng.trunc_normal(0.02, 2.0)), true)
}

impl LayerParams {
    /// Registers a layer under `prefix`; weights are truncated normal
    /// (std 0.02), biases zero, layer norms identity.
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, drop_path: f32, seed: u64) -> Self {
        let d = cfg.dim;
        let hidden = d * cfg.mlp_ratio;
        let mut w = |name: &str, shape: &[usize]| init_weight(store, &format!("{prefix}.{name}"), shape, seed);
        let qkv_w = w("qkv.weight", &[d, 3 * d]);
        let proj_w = w("proj.weight", &[d, d]);
        let fc1_w = w("fc1.weight", &[d, hidden]);
        let fc2_w = w("fc2.weight", &[hidden, d]);
        let mut c = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t, true);
        LayerParams {
            ln1_g: c("norm1.weight", Tensor::ones(&[d])),
            ln1_b: c("norm1.bias", Tensor::zeros(&[d])),
            qkv_w,
            qkv_b: c("qkv.bias", Tensor::zeros(&[3 * d])),
            proj_w,
            proj_b: c("proj.bias", Tensor::zeros(&[d])),
            ln2_g: c("norm2.weight", Tensor::ones(&[d])),
            ln2_b: c("norm2.bias", Tensor::zeros(&[d])),
            fc1_w,
            fc1_b: c("fc1.bias", Tensor::zeros(&[hidden])),
            fc2_w,
            fc2_b: c("fc2.bias", Tensor::zeros(&[d])),
            drop_path,
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> LayerVars {
        LayerVars {
            ln1_g: g.param(store, self.ln1_g),
            ln1_b: g.param(store, self.ln1_b),
            qkv_w: g.param(store, self.qkv_w),
            qkv_b: g.param(store, self.qkv_b),
            proj_w: g.param(store, self.proj_w),
            proj_b: g.param(store, self.proj_b),
            ln2_g: g.param(store, self.ln2_g),
            ln2_b: g.param(store, self.ln2_b),
            fc1_w: g.param(store, self.fc1_w),
            fc1_b: g.param(store, self.fc1_b),
            fc2_w: g.param(store, self.fc2_w),
            fc2_b: g.param(store, self.fc2_b),
            drop_path: self.drop_path,
        }
    }
}

/// Forward-time switches shared by every layer call.
#[derive(Clone, Copy, Debug)]
pub struct Mode<'a> {
    pub cfg: &'a EncoderConfig,
    pub train: bool,
}

fn dropout(g: &mut Graph, x: Var, p: f32, train: bool, rng: &mut SeededRng) -> Result<Var> {
    if !train || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let mask = (0..g.value(x).len()).map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 }).collect();
    g.mul_const(x, mask)
}

/// Keeps or drops a residual branch per sample, rescaling survivors by
/// `1/(1−p)`; identity in eval mode.
fn drop_path(g: &mut Graph, x: Var, batch: usize, p: f32, train: bool, rng: &mut SeededRng) -> Result<Var> {
    if !train || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let scales = (0..batch).map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 }).collect();
    g.scale_rows(x, scales)
}

/// Scaled dot-product attention over `tokens[B·T, D]`.
///
/// Returns the projected output and the attention probabilities
/// `[B·heads, T, T]`.
pub fn mha(
    g: &mut Graph,
    tokens: Var,
    batch: usize,
    seq_len: usize,
    vars: &LayerVars,
    mode: Mode<'_>,
    rng: &mut SeededRng,
) -> Result<(Var, Var)> {
    let cfg = mode.cfg;
    cfg.validate()?;
    let (d, h) = (cfg.dim, cfg.heads);
    let dh = d / h;
    if g.shape(tokens) != [batch * seq_len, d] {
        bail!(Dimension, "mha tokens {:?}, expected [{}, {d}]", g.shape(tokens), batch * seq_len);
    }
    let qkv = g.linear(tokens, vars.qkv_w, Some(vars.qkv_b))?;
    let qkv = g.reshape(qkv, &[batch, seq_len, 3, h, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut split = [tokens; 3];
    for (i, s) in split.iter_mut().enumerate() {
        let part = g.narrow(qkv, 0, i, 1)?;
        *s = g.reshape(part, &[batch * h, seq_len, dh])?;
    }
    let [q, k, v] = split;
    let q = g.scale(q, 1.0 / libm::sqrtf(dh as f32))?;
    let scores = g.bmm_nt(q, k)?;
    let attn = g.softmax(scores, 2)?;
    let attn_used = dropout(g, attn, cfg.attn_dropout, mode.train, rng)?;
    let ctx = g.bmm(attn_used, v)?;
    let ctx = g.reshape(ctx, &[batch, h, seq_len, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[batch * seq_len, d])?;
    let out = g.linear(ctx, vars.proj_w, Some(vars.proj_b))?;
    let out = dropout(g, out, cfg.dropout, mode.train, rng)?;
    Ok((out, attn))
}

/// `x += droppath(MHA(LN(x))); x += droppath(MLP(LN(x)))`.
///
/// Returns the new tokens and the layer's attention probabilities.
pub fn transformer_layer(
    g: &mut Graph,
    tokens: Var,
    batch: usize,
    seq_len: usize,
    vars: &LayerVars,
    mode: Mode<'_>,
    rng: &mut SeededRng,
) -> Result<(Var, Var)> {
    const LN_EPS: f32 = 1e-6;
    let cfg = mode.cfg;
    let h = g.layer_norm(tokens, vars.ln1_g, vars.ln1_b, LN_EPS)?;
    let (a, attn) = mha(g, h, batch, seq_len, vars, mode, rng)?;
    let a = drop_path(g, a, batch, vars.drop_path, mode.train, rng)?;
    let x = g.add(tokens, a)?;
    let h = g.layer_norm(x, vars.ln2_g, vars.ln2_b, LN_EPS)?;
    let m = g.linear(h, vars.fc1_w, Some(vars.fc1_b))?;
    let m = g.gelu(m)?;
    let m = dropout(g, m, cfg.dropout, mode.train, rng)?;
    let m = g.linear(m, vars.fc2_w, Some(vars.fc2_b))?;
    let m = dropout(g, m, cfg.dropout, mode.train, rng)?;
    let m = drop_path(g, m, batch, vars.drop_path, mode.train, rng)?;
    let x = g.add(x, m)?;
    Ok((x, attn))
}

/// Applies the first `l−1` layers and returns `Z_{l−1}`.
pub fn encode_stack(
    g: &mut Graph,
    seq: PatchSequence,
    layers: &[LayerVars],
    mode: Mode<'_>,
    rng: &mut SeededRng,
) -> Result<PatchSequence> {
    if mode.cfg.depth < 2 {
        bail!(Config, "encoder depth must be >= 2, got {}", mode.cfg.depth);
    }
    if layers.len() != mode.cfg.depth - 1 {
        bail!(Contract, "encode_stack got {} layers for depth {}", layers.len(), mode.cfg.depth);
    }
    let mut x = seq.tokens;
    for vars in layers {
        x = transformer_layer(g, x, seq.batch, seq.seq_len(), vars, mode, rng)?.0;
    }
    Ok(PatchSequence { tokens: x, ..seq })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Grid;

    fn setup(depth: usize, drop_path: f32) -> (EncoderConfig, ParamStore, Vec<LayerParams>) {
        let cfg = EncoderConfig { depth, heads: 2, dim: 8, mlp_ratio: 2, dropout: 0.0, attn_dropout: 0.0, drop_path };
        let mut store = ParamStore::new();
        let sched = cfg.drop_path_schedule();
        let layers = (0..depth).map(|i| LayerParams::register(&mut store, &format!("blocks.{i}"), &cfg, sched[i], 11)).collect();
        (cfg, store, layers)
    }

    #[test]
    fn single_token_attention_is_one() {
        let (cfg, store, layers) = setup(2, 0.0);
        let mut g = Graph::new();
        let vars = layers[0].bind(&mut g, &store);
        let x = g.constant(Tensor::from_fn(&[3, 8], |i| (i as f32).sin()));
        let mut rng = SeededRng::new(0);
        let (out, attn) = mha(&mut g, x, 3, 1, &vars, Mode { cfg: &cfg, train: false }, &mut rng).unwrap();
        assert!(g.value(attn).data().iter().all(|&a| a == 1.0));
        // with attention fixed at 1 the output is proj(v(x))
        let v_w: Vec<f32> = (0..8).flat_map(|r| store.value(layers[0].qkv_w).row(r)[16..24].to_vec()).collect();
        let mut v = alloc::vec![0.0; 24];
        crate::numcore::kernels::gemm(g.value(x).data(), &v_w, &mut v, 3, 8, 8, false);
        let mut want = alloc::vec![0.0; 24];
        crate::numcore::kernels::gemm(&v, store.value(layers[0].proj_w).data(), &mut want, 3, 8, 8, false);
        for (a, b) in g.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (cfg, store, layers) = setup(2, 0.0);
        let mut g = Graph::new();
        let vars = layers[0].bind(&mut g, &store);
        let mut rng = SeededRng::new(4);
        let x = g.constant(Tensor::from_fn(&[2 * 5, 8], |_| rng.normal()));
        let (_, attn) = mha(&mut g, x, 2, 5, &vars, Mode { cfg: &cfg, train: false }, &mut rng).unwrap();
        for row in g.value(attn).data().chunks(5) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = EncoderConfig { depth: 2, heads: 3, dim: 8, mlp_ratio: 2, dropout: 0.0, attn_dropout: 0.0, drop_path: 0.0 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn certain_drop_path_is_identity() {
        let (cfg, mut store, layers) = setup(2, 0.0);
        let mut lp = layers[1];
        lp.drop_path = 0.999_999;
        let _ = &mut store;
        let mut g = Graph::new();
        let vars = lp.bind(&mut g, &store);
        let mut rng = SeededRng::new(9);
        let x = g.constant(Tensor::from_fn(&[2 * 3, 8], |_| rng.normal()));
        let (y, _) = transformer_layer(&mut g, x, 2, 3, &vars, Mode { cfg: &cfg, train: true }, &mut rng).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (cfg, store, layers) = setup(3, 0.1);
        let run = |seed: u64| {
            let mut g = Graph::new();
            let vars: Vec<_> = layers[..2].iter().map(|l| l.bind(&mut g, &store)).collect();
            let mut rng = SeededRng::new(1);
            let x = g.constant(Tensor::from_fn(&[2 * 4, 8], |_| rng.normal()));
            let seq = PatchSequence { tokens: x, batch: 2, grid: Grid { rows: 1, cols: 3 } };
            let mut rng = SeededRng::new(seed);
            let out = encode_stack(&mut g, seq, &vars, Mode { cfg: &cfg, train: false }, &mut rng).unwrap();
            g.value(out.tokens).clone()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn stack_depth_checks() {
        let (cfg, store, layers) = setup(2, 0.0);
        let mut g = Graph::new();
        let vars: Vec<_> = layers.iter().map(|l| l.bind(&mut g, &store)).collect();
        let x = g.constant(Tensor::zeros(&[4, 8]));
        let seq = PatchSequence { tokens: x, batch: 1, grid: Grid { rows: 1, cols: 3 } };
        let mut rng = SeededRng::new(0);
        let mode = Mode { cfg: &cfg, train: false };
        // depth 2 applies exactly one layer here
        assert!(encode_stack(&mut g, seq, &vars, mode, &mut rng).is_err());
        let out = encode_stack(&mut g, seq, &vars[..1], mode, &mut rng).unwrap();
        assert_eq!(g.shape(out.tokens), &[4, 8]);
        let shallow = EncoderConfig { depth: 1, ..cfg };
        assert!(encode_stack(&mut g, seq, &[], Mode { cfg: &shallow, train: false }, &mut rng).is_err());
    }

    #[test]
    fn linear_drop_path_schedule() {
        let (cfg, _, _) = setup(5, 0.1);
        let s = cfg.drop_path_schedule();
        assert_eq!(s[0], 0.0);
        assert!((s[4] - 0.1).abs() < 1e-7);
        assert!((s[2] - 0.05).abs() < 1e-7);
    }
}
