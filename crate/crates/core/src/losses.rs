//! Identity and triplet losses, BNNeck heads and the combined objective
//! over the global and local feature streams.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::numcore::{Graph, ParamId, ParamStore, SeededRng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum TripletKind {
    /// `log(1 + exp(d_ap² − d_an²))`.
    Soft,
    /// `max(0, margin + d_ap − d_an)` on Euclidean distances.
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LossConfig {
    pub triplet: TripletKind,
    pub margin: f32,
    pub label_smoothing: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { triplet: TripletKind::Soft, margin: 0.3, label_smoothing: 0.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            bail!(Config, "label_smoothing {} outside [0, 1)", self.label_smoothing);
        }
        if !(self.margin >= 0.0) {
            bail!(Config, "triplet margin must be >= 0");
        }
        Ok(())
    }
}

/// Mean cross-entropy, optionally label-smoothed.
pub fn id_loss(g: &mut Graph, logits: Var, labels: &[usize], eps: f32) -> Result<Var> {
    g.cross_entropy(logits, labels, eps)
}

/// Hardest positive and negative per anchor as flat indices into the
/// `B×B` distance matrix. Ties go to the lowest column.
pub fn batch_hard(dist: &Tensor, labels: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let b = labels.len();
    if dist.shape() != [b, b] {
        bail!(Dimension, "distance matrix {:?} for {b} labels", dist.shape());
    }
    let mut pos = Vec::with_capacity(b);
    let mut neg = Vec::with_capacity(b);
    for a in 0..b {
        let row = dist.row(a);
        let mut hp: Option<usize> = None;
        let mut hn: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if hp.is_none_or(|p| row[j] > row[p]) {
                    hp = Some(j);
                }
            } else if hn.is_none_or(|n| row[j] < row[n]) {
                hn = Some(j);
            }
        }
        let Some(p) = hp else {
            bail!(Mining, "identity {} has a single instance in the batch", labels[a]);
        };
        let Some(n) = hn else {
            bail!(Mining, "batch has no negative for identity {}", labels[a]);
        };
        pos.push(a * b + p);
        neg.push(a * b + n);
    }
    Ok((pos, neg))
}

/// Soft-margin triplet loss with batch-hard mining on squared distances.
pub fn soft_triplet(g: &mut Graph, features: Var, labels: &[usize]) -> Result<Var> {
    let d = g.pairwise_sq_dist(features)?;
    let (pos, neg) = batch_hard(g.value(d), labels)?;
    let dap = g.gather_flat(d, pos)?;
    let dan = g.gather_flat(d, neg)?;
    let diff = g.sub(dap, dan)?;
    let l = g.softplus(diff)?;
    g.mean(l)
}

/// Margin triplet loss with batch-hard mining on Euclidean distances.
pub fn plain_triplet(g: &mut Graph, features: Var, labels: &[usize], margin: f32) -> Result<Var> {
    let d2 = g.pairwise_sq_dist(features)?;
    let (pos, neg) = batch_hard(g.value(d2), labels)?;
    let d = g.sqrt(d2)?;
    let dap = g.gather_flat(d, pos)?;
    let dan = g.gather_flat(d, neg)?;
    let diff = g.sub(dap, dan)?;
    let n = g.value(diff).len();
    let m = g.constant(Tensor::full(&[n], margin));
    let shifted = g.add(diff, m)?;
    let l = g.relu(shifted)?;
    g.mean(l)
}

pub fn triplet(g: &mut Graph, features: Var, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    match cfg.triplet {
        TripletKind::Soft => soft_triplet(g, features, labels),
        TripletKind::Plain => plain_triplet(g, features, labels, cfg.margin),
    }
}

/// Batch norm plus bias-free classifier for one feature stream. The BN
/// shift is frozen at zero.
#[derive(Clone, Copy, Debug)]
pub struct BnneckHead {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub classifier: ParamId,
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

impl BnneckHead {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize, num_ids: usize, seed: u64) -> Self {
        let mut rng = SeededRng::named(seed, &format!("{prefix}.classifier"));
        let cls = Tensor::from_fn(&[dim, num_ids], |_| 0.001 * rng.normal());
        BnneckHead {
            gamma: store.add(format!("{prefix}.bn.weight"), Tensor::ones(&[dim]), true),
            beta: store.add(format!("{prefix}.bn.bias"), Tensor::zeros(&[dim]), false),
            running_mean: store.add(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[dim]), false),
            running_var: store.add(format!("{prefix}.bn.running_var"), Tensor::ones(&[dim]), false),
            classifier: store.add(format!("{prefix}.classifier"), cls, true),
        }
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running(&self, store: &mut ParamStore, mean: &[f32], var: &[f32]) {
        for (r, &m) in store.value_mut(self.running_mean).data_mut().iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, &v) in store.value_mut(self.running_var).data_mut().iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BnneckOut {
    /// Pre-BN feature fed to the triplet loss.
    pub triplet: Var,
    /// Post-BN feature used for retrieval.
    pub inference: Var,
    pub logits: Var,
}

pub fn bnneck_forward(g: &mut Graph, f: Var, head: &BnneckHead, store: &ParamStore, train: bool) -> Result<BnneckOut> {
    let gamma = g.param(store, head.gamma);
    let beta = g.param(store, head.beta);
    let running = (store.value(head.running_mean).data(), store.value(head.running_var).data());
    let bn = g.batch_norm_1d(f, gamma, beta, running, train, BN_EPS)?;
    let w = g.param(store, head.classifier);
    let logits = g.matmul(bn, w)?;
    Ok(BnneckOut { triplet: f, inference: bn, logits })
}

/// ID and triplet terms for one stream.
#[derive(Clone, Copy, Debug)]
pub struct StreamLoss {
    pub id: Var,
    pub triplet: Var,
}

pub fn stream_loss(g: &mut Graph, out: &BnneckOut, labels: &[usize], cfg: &LossConfig) -> Result<StreamLoss> {
    let id = id_loss(g, out.logits, labels, cfg.label_smoothing)?;
    let triplet = triplet(g, out.triplet, labels, cfg)?;
    Ok(StreamLoss { id, triplet })
}

/// `L_ID(f_g) + L_T(f_g) + (1/k)·Σ_j (L_ID(f_l^j) + L_T(f_l^j))`.
pub fn total_loss(g: &mut Graph, global: StreamLoss, locals: &[StreamLoss]) -> Result<Var> {
    let mut total = g.add(global.id, global.triplet)?;
    if locals.is_empty() {
        return Ok(total);
    }
    let mut local_sum: Option<Var> = None;
    for s in locals {
        let pair = g.add(s.id, s.triplet)?;
        local_sum = Some(match local_sum {
            None => pair,
            Some(acc) => g.add(acc, pair)?,
        });
    }
    let local = g.scale(local_sum.expect("non-empty locals"), 1.0 / locals.len() as f32)?;
    total = g.add(total, local)?;
    Ok(total)
}
