//! AdamW with decoupled weight decay and a reduce-on-plateau schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Real, TResDeltaGru};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("AdamW betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("AdamW eps must be > 0 and weight decay >= 0"));
        }
        Ok(())
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: TResDeltaGru<T>,
    pub v: TResDeltaGru<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &TResDeltaGru<T>) -> Self {
        Self {
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
        }
    }
}

/// Moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FlatAdam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl FlatAdam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// AdamW step on `p` (no weight decay when `decay` is false).
    pub fn step(&mut self, p: &mut [f64], g: &[f64], hyper: &AdamWConfig, lr: f64, decay: bool) -> Result<()> {
        if p.len() != g.len() || p.len() != self.m.len() {
            return Err(Error::shape("parameter, gradient and moment lengths differ"));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        self.t += 1;
        let wd = if decay { hyper.weight_decay } else { 0.0 };
        let (c1, c2) = bias_corrections(hyper, self.t);
        for i in 0..p.len() {
            let (np, nm, nv) = update(p[i], g[i], self.m[i], self.v[i], hyper, lr, wd, c1, c2);
            p[i] = np;
            self.m[i] = nm;
            self.v[i] = nv;
        }
        Ok(())
    }
}

fn bias_corrections(h: &AdamWConfig, t: u64) -> (f64, f64) {
    let t = t.min(i32::MAX as u64) as i32;
    (1.0 - h.beta1.powi(t), 1.0 - h.beta2.powi(t))
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn update(p: f64, g: f64, m: f64, v: f64, h: &AdamWConfig, lr: f64, wd: f64, c1: f64, c2: f64) -> (f64, f64, f64) {
    let m = h.beta1 * m + (1.0 - h.beta1) * g;
    let v = h.beta2 * v + (1.0 - h.beta2) * g * g;
    let p = p * (1.0 - lr * wd) - lr * (m / c1) / ((v / c2).sqrt() + h.eps);
    (p, m, v)
}

/// One AdamW update of every tensor of `params`.
pub fn adamw_step<T: Real>(
    params: &mut TResDeltaGru<T>,
    grads: &TResDeltaGru<T>,
    state: &mut AdamState<T>,
    hyper: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if params.dims() != grads.dims() || params.dims() != state.m.dims() {
        return Err(Error::shape("parameter, gradient and moment shapes differ"));
    }
    if !grads.all_finite() {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    state.t += 1;
    let (c1, c2) = bias_corrections(hyper, state.t);
    let g = grads.tensors();
    let AdamState { m, v, .. } = state;
    for ((((_, p), (_, g)), (_, m)), (_, v)) in params.tensors_mut().into_iter().zip(g).zip(m.tensors_mut()).zip(v.tensors_mut())
    {
        for i in 0..p.len() {
            let (np, nm, nv) = update(
                p[i].f64(),
                g[i].f64(),
                m[i].f64(),
                v[i].f64(),
                hyper,
                lr,
                hyper.weight_decay,
                c1,
                c2,
            );
            p[i] = T::of(np);
            m[i] = T::of(nm);
            v[i] = T::of(nv);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    /// Absolute improvement required to reset the patience counter.
    pub tolerance: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 10,
            tolerance: 1e-4,
            min_lr: 1e-5,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) || !(self.min_lr >= 0.0) || !(self.tolerance >= 0.0) {
            return Err(Error::invalid("scheduler needs 0 < factor < 1, min_lr >= 0, tolerance >= 0"));
        }
        Ok(())
    }
}

/// Learning-rate state for a minimized metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub cfg: PlateauConfig,
}

impl PlateauScheduler {
    pub fn new(lr: f64, cfg: PlateauConfig) -> Self {
        Self {
            lr: lr.max(cfg.min_lr),
            best: None,
            bad_epochs: 0,
            cfg,
        }
    }

    /// Records one epoch's metric. After `patience` consecutive epochs
    /// without an improvement larger than the tolerance, the rate is
    /// multiplied by `factor` (floored at `min_lr`).
    pub fn step(&mut self, metric: f64) -> Result<f64> {
        reduce_on_plateau(self, metric)
    }
}

pub fn reduce_on_plateau(s: &mut PlateauScheduler, metric: f64) -> Result<f64> {
    if !metric.is_finite() {
        return Err(Error::Divergence(format!("non-finite validation metric {metric}")));
    }
    match s.best {
        Some(b) if metric >= b - s.cfg.tolerance => {
            s.bad_epochs += 1;
            if s.bad_epochs >= s.cfg.patience {
                s.lr = (s.lr * s.cfg.factor).max(s.cfg.min_lr);
                s.bad_epochs = 0;
            }
        }
        _ => {
            s.best = Some(metric);
            s.bad_epochs = 0;
        }
    }
    Ok(s.lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelDims;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = TResDeltaGru::<f64>::init(ModelDims::dpd(3), 1);
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        let h = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut st, &h, 1e-2).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let mut p = TResDeltaGru::<f64>::init(ModelDims::dpd(3), 2);
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        let h = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &g, &mut st, &h, 0.01).unwrap();
        for ((_, a), (_, b)) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y * (1.0 - 0.001)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let h = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut a = FlatAdam::new(1);
        let mut p = [0.0];
        let lr = 1e-3;
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0];
            a.step(&mut p, &[0.7], &h, lr, true).unwrap();
            last = before - p[0];
        }
        // Bias-corrected moments are exact for a constant gradient.
        assert!((last - lr).abs() < 1e-9, "{last}");
        assert!(a.step(&mut p, &[f64::NAN], &h, lr, true).is_err());
    }

    #[test]
    fn plateau_rules() {
        let cfg = PlateauConfig::default();
        let mut s = PlateauScheduler::new(1e-2, cfg);
        for e in 0..30 {
            assert_eq!(s.step(1.0 - e as f64 * 0.01).unwrap(), 1e-2);
        }
        let mut s = PlateauScheduler::new(1e-2, cfg);
        let mut lrs = Vec::new();
        for _ in 0..12 {
            lrs.push(s.step(1.0).unwrap());
        }
        // Epoch 1 sets the best; epochs 2..=11 are flat.
        assert_eq!(&lrs[..10], &[1e-2; 10]);
        assert_eq!(lrs[10], 5e-3);
        let mut s = PlateauScheduler::new(1e-4, cfg);
        for _ in 0..200 {
            assert!(s.step(1.0).unwrap() >= cfg.min_lr);
        }
        assert_eq!(s.lr, cfg.min_lr);
        assert!(s.step(f64::NAN).is_err());
    }
}
