//! Finite-difference gradient checking.
//!
//! Numerical derivatives are central differences at steps `h` and `h/2`,
//! optionally Richardson-extrapolated. Elements where the two estimates
//! disagree strongly sit on a kink (a max/min switch, a ReLU hinge) and are
//! skipped. Each tensor is scored by `‖a − n‖ / max(‖a‖, ‖n‖)` over its
//! checked elements, which keeps single-precision rounding in tiny
//! components from dominating the score. The denominator never drops below
//! the roundoff of the difference quotients themselves (a few f32 ulps of
//! the loss over `h`), so gradients that vanish identically are compared
//! absolutely at that noise level.

use alloc::string::String;
use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f32,
    pub tol: f64,
    /// Gradient norms below this are compared absolutely.
    pub floor: f64,
    /// Extrapolate the `h` and `h/2` estimates instead of using `h` alone.
    pub richardson: bool,
    /// Check at most this many elements per tensor (evenly strided).
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 5e-3, tol: 1e-3, floor: 1e-3, richardson: true, max_per_tensor: None }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest per-tensor relative error.
    pub max_rel_error: f64,
    /// Tensor with the largest error and its worst element.
    pub worst: Option<(String, usize)>,
    /// Elements compared.
    pub checked: usize,
    /// Tensors over tolerance.
    pub failures: usize,
    pub kinks_skipped: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.failures += other.failures;
        self.kinks_skipped += other.kinks_skipped;
    }
}

fn indices(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len => {
            let stride = len as f64 / c as f64;
            (0..c).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Loss ulps allowed per difference quotient.
const ROUNDOFF_ULPS: f64 = 2.0;

fn compare(
    name: &str,
    loss: f64,
    analytic: &[f32],
    cfg: &GradCheckConfig,
    mut eval_at: impl FnMut(usize, f32) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport { tol: cfg.tol, ..Default::default() };
    let h = cfg.step;
    let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    let mut worst_elem: Option<(usize, f64)> = None;
    for i in indices(analytic.len(), cfg.max_per_tensor) {
        let d1 = (eval_at(i, h)? - eval_at(i, -h)?) / (2.0 * h as f64);
        let d2 = (eval_at(i, h / 2.0)? - eval_at(i, -h / 2.0)?) / h as f64;
        let scale = d1.abs().max(d2.abs()).max(cfg.floor);
        if (d1 - d2).abs() > 0.1 * scale {
            report.kinks_skipped += 1;
            continue;
        }
        let numeric = if cfg.richardson { (4.0 * d2 - d1) / 3.0 } else { d1 };
        let a = analytic[i] as f64;
        diff2 += (a - numeric) * (a - numeric);
        a2 += a * a;
        n2 += numeric * numeric;
        report.checked += 1;
        let e = (a - numeric).abs();
        if worst_elem.is_none_or(|(_, w)| e > w) {
            worst_elem = Some((i, e));
        }
    }
    if report.checked > 0 {
        let roundoff = ROUNDOFF_ULPS * f32::EPSILON as f64 * libm::fabs(loss).max(1.0) / h as f64 * libm::sqrt(report.checked as f64);
        let err = libm::sqrt(diff2) / libm::sqrt(a2).max(libm::sqrt(n2)).max(cfg.floor).max(roundoff / cfg.tol);
        report.max_rel_error = err;
        report.worst = worst_elem.map(|(i, _)| (name.into(), i));
        if err > cfg.tol {
            report.failures = 1;
        }
    }
    Ok(report)
}

/// Checks `d f(x) / dx` for a scalar-valued `f` of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let value = g.scalar_value(loss);
    let mut probe = x.clone();
    compare("x", value, analytic.data(), &cfg, |i, delta| {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + delta;
        let mut g = Graph::new();
        let xv = g.leaf(probe.clone(), false);
        let out = f(&mut g, xv);
        probe.data_mut()[i] = orig;
        Ok(g.scalar_value(out?))
    })
}

/// Checks every trainable parameter of `store` against `loss(store)`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, &work)?;
    g.backward(loss)?;
    g.accumulate_into(&mut work)?;
    let value = g.scalar_value(loss);
    let mut report = GradCheckReport { tol: cfg.tol, ..Default::default() };
    let ids: Vec<_> = work.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let name = work.get(id).name.clone();
        let analytic = match work.grad(id) {
            Some(g) => g.data().to_vec(),
            None => alloc::vec![0.0; work.value(id).len()],
        };
        let part = compare(&name, value, &analytic, &cfg, |i, delta| {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + delta;
            let mut g = Graph::new();
            let out = f(&mut g, &work);
            work.value_mut(id).data_mut()[i] = orig;
            Ok(g.scalar_value(out?))
        })?;
        report.merge(part);
    }
    Ok(report)
}
