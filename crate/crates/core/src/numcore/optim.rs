//! SGD with momentum, Adam and AdamW over a [`ParamStore`].

use alloc::vec;
use alloc::vec::Vec;

use super::params::ParamStore;
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer with one moment buffer pair per parameter slot.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let sized = |p: &super::params::Param| if p.trainable { vec![0.0; p.value.len()] } else { Vec::new() };
        let first = store.iter().map(|(_, p)| sized(p)).collect();
        let second = match config.kind {
            OptimizerKind::Sgd => store.iter().map(|_| Vec::new()).collect(),
            _ => store.iter().map(|(_, p)| sized(p)).collect(),
        };
        Optimizer { config, step: 0, first, second }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Momentum (SGD) or first-moment (Adam) buffers.
    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.second
    }

    /// Restores buffers saved from an optimizer built over the same store.
    pub fn restore(&mut self, step: u64, first: Vec<Vec<f32>>, second: Vec<Vec<f32>>) -> Result<()> {
        let ok = |a: &[Vec<f32>], b: &[Vec<f32>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !ok(&first, &self.first) || !ok(&second, &self.second) {
            bail!(Dimension, "optimizer state does not match the parameter layout");
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Applies one update with learning rate `lr`. Every trainable parameter
    /// must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) -> Result<()> {
        if self.first.len() != store.len() {
            bail!(Contract, "optimizer built for {} params, store has {}", self.first.len(), store.len());
        }
        for (_, p) in store.iter() {
            if p.trainable && p.grad.is_none() {
                bail!(Contract, "parameter {} has no gradient", p.name);
            }
        }
        self.step += 1;
        let cfg = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::powf(cfg.beta1, t as f32);
        let bc2 = 1.0 - libm::powf(cfg.beta2, t as f32);
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_ref().map(|g| g.data()).unwrap_or(&[]);
            let value = p.value.data_mut();
            let m = &mut self.first[id.0];
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for ((w, &g), buf) in value.iter_mut().zip(grad).zip(m.iter_mut()) {
                        let g = g + cfg.weight_decay * *w;
                        *buf = cfg.momentum * *buf + g;
                        *w -= lr * *buf;
                    }
                }
                OptimizerKind::Adam | OptimizerKind::AdamW => {
                    let v = &mut self.second[id.0];
                    let decoupled = cfg.kind == OptimizerKind::AdamW;
                    for (((w, &g), mi), vi) in value.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = if decoupled { g } else { g + cfg.weight_decay * *w };
                        if decoupled {
                            *w -= lr * cfg.weight_decay * *w;
                        }
                        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * mhat / (libm::sqrtf(vhat) + cfg.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base_lr` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f32) -> Result<f32> {
    if step > total_steps {
        bail!(Contract, "step {step} beyond schedule length {total_steps}");
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    let progress = step as f64 / total_steps as f64;
    Ok((0.5 * base_lr as f64 * (1.0 + libm::cos(core::f64::consts::PI * progress))) as f32)
}

/// Cosine schedule with an optional linear warmup.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CosineSchedule {
    pub base_lr: f32,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> Result<f32> {
        if step > self.total_steps {
            bail!(Contract, "step {step} beyond schedule length {}", self.total_steps);
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * (step + 1) as f32 / self.warmup_steps as f32);
        }
        let warm = self.warmup_steps.min(self.total_steps);
        cosine_lr(step - warm, self.total_steps - warm, self.base_lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Graph, Tensor};

    fn scalar_store(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[1], vec![v]).unwrap(), true);
        s
    }

    #[test]
    fn zero_lr_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::AdamW] {
            let mut s = scalar_store(1.5);
            let mut opt = Optimizer::new(OptimizerConfig { kind, ..Default::default() }, &s);
            s.accumulate_grad(crate::numcore::ParamId(0), &[0.7]).unwrap();
            opt.step(&mut s, 0.0).unwrap();
            assert_eq!(s.value(crate::numcore::ParamId(0)).item(), 1.5);
        }
    }

    #[test]
    fn sgd_first_step() {
        let mut s = scalar_store(1.0);
        let cfg = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = Optimizer::new(cfg, &s);
        s.accumulate_grad(crate::numcore::ParamId(0), &[1.0]).unwrap();
        opt.step(&mut s, 0.1).unwrap();
        assert!((s.value(crate::numcore::ParamId(0)).item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut s = scalar_store(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &s);
        assert!(opt.step(&mut s, 0.1).is_err());
    }

    fn run_bowl(kind: OptimizerKind, lr: f32, steps: usize) -> f32 {
        // f(w) = sum((w - c)^2)
        let target = [3.0f32, -2.0, 0.5];
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(&[3]), true);
        let cfg = OptimizerConfig { kind, weight_decay: 0.0, ..Default::default() };
        let mut opt = Optimizer::new(cfg, &s);
        for _ in 0..steps {
            s.zero_grad();
            let mut g = Graph::new();
            let w = g.param(&s, id);
            let c = g.constant(Tensor::new(&[3], target.to_vec()).unwrap());
            let d = g.sub(w, c).unwrap();
            let sq = g.mul(d, d).unwrap();
            let l = g.sum(sq).unwrap();
            g.backward(l).unwrap();
            g.accumulate_into(&mut s).unwrap();
            opt.step(&mut s, lr).unwrap();
        }
        s.value(id).data().iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn quadratic_bowl_converges() {
        assert!(run_bowl(OptimizerKind::Sgd, 0.05, 200) < 1e-3);
        assert!(run_bowl(OptimizerKind::AdamW, 0.05, 200) < 1e-2);
    }

    #[test]
    fn adamw_without_decay_matches_adam() {
        let mut a = scalar_store(0.3);
        let mut b = scalar_store(0.3);
        let base = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        let mut oa = Optimizer::new(OptimizerConfig { kind: OptimizerKind::Adam, ..base }, &a);
        let mut ob = Optimizer::new(OptimizerConfig { kind: OptimizerKind::AdamW, ..base }, &b);
        for i in 0..50 {
            let g = [libm::sinf(i as f32)];
            a.zero_grad();
            b.zero_grad();
            a.accumulate_grad(crate::numcore::ParamId(0), &g).unwrap();
            b.accumulate_grad(crate::numcore::ParamId(0), &g).unwrap();
            oa.step(&mut a, 0.01).unwrap();
            ob.step(&mut b, 0.01).unwrap();
            assert_eq!(a.value(crate::numcore::ParamId(0)).item().to_bits(), b.value(crate::numcore::ParamId(0)).item().to_bits());
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 0.008).unwrap(), 0.008);
        assert!((cosine_lr(50, 100, 0.008).unwrap() - 0.004).abs() < 1e-9);
        assert!(cosine_lr(100, 100, 0.008).unwrap().abs() < 1e-9);
        assert!(cosine_lr(101, 100, 0.008).is_err());
        let mut prev = f32::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 0.008).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn warmup_then_cosine() {
        let s = CosineSchedule { base_lr: 0.01, total_steps: 20, warmup_steps: 5 };
        assert!((s.lr(0).unwrap() - 0.002).abs() < 1e-9);
        assert_eq!(s.lr(5).unwrap(), 0.01);
        assert!(s.lr(20).unwrap().abs() < 1e-9);
    }
}
