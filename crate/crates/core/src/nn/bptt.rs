//! Frame-level MSE losses and their BPTT gradients.

use num_complex::Complex64;
use rayon::prelude::*;

use super::params::{TResDeltaGru, IQ};
use super::real::Real;
use super::tape::{model_backward, model_forward_tape, ActGrads, ActQuant, ModelTape};
use crate::error::{Error, Result};
use crate::quant::QuantPoint;
use crate::signal::{feature_row, FEATURE_WIDTH};

/// Feature rows for `x[start..start+len]`; lookahead reads the full
/// sequence and replicates only at its very end.
pub fn frame_features<T: Real>(x: &[Complex64], start: usize, len: usize) -> Vec<T> {
    let n = x.len();
    let mut out = Vec::with_capacity(len * FEATURE_WIDTH);
    for t in start..start + len {
        let row = feature_row(x[t], x[(t + 1).min(n - 1)]);
        out.extend(row.iter().map(|&v| T::of(v)));
    }
    out
}

/// `x[start−d .. start+len+d]` as I/Q rows, zero outside the sequence.
pub fn frame_halo<T: Real>(x: &[Complex64], start: usize, len: usize, d: usize) -> Vec<[T; IQ]> {
    let n = x.len() as isize;
    (start as isize - d as isize..(start + len + d) as isize)
        .map(|i| {
            if (0..n).contains(&i) {
                let c = x[i as usize];
                [T::of(c.re), T::of(c.im)]
            } else {
                [T::zero(); IQ]
            }
        })
        .collect()
}

/// Feature rows built from a model output frame (`L × 2`) with the last
/// row replicating its own sample as lookahead.
pub fn features_from_iq<T: Real>(u: &[T]) -> Vec<T> {
    let len = u.len() / IQ;
    let mut out = Vec::with_capacity(len * FEATURE_WIDTH);
    for t in 0..len {
        let nt = (t + 1).min(len - 1);
        let (i, q) = (u[t * IQ], u[t * IQ + 1]);
        let mag = (i * i + q * q).sqrt();
        out.extend([i, q, u[nt * IQ], u[nt * IQ + 1], mag, mag * mag * mag]);
    }
    out
}

/// Chain rule from `dL/dφ` back to the I/Q frame it was built from.
pub fn features_from_iq_backward<T: Real>(u: &[T], d_phi: &[T]) -> Vec<T> {
    let len = u.len() / IQ;
    let f = FEATURE_WIDTH;
    let mut du = vec![T::zero(); u.len()];
    for t in 0..len {
        let nt = (t + 1).min(len - 1);
        let g = &d_phi[t * f..(t + 1) * f];
        let (i, q) = (u[t * IQ], u[t * IQ + 1]);
        let mag = (i * i + q * q).sqrt();
        du[t * IQ] += g[0];
        du[t * IQ + 1] += g[1];
        du[nt * IQ] += g[2];
        du[nt * IQ + 1] += g[3];
        if mag > T::zero() {
            let three_mag = T::of(3.0) * mag;
            du[t * IQ] += g[4] * i / mag + g[5] * three_mag * i;
            du[t * IQ + 1] += g[4] * q / mag + g[5] * three_mag * q;
        }
    }
    du
}

/// Loss and gradients of one frame. `sse` sums squared error over the
/// `count` loss positions (both I and Q).
#[derive(Debug, Clone)]
pub struct FrameGrad<T> {
    pub sse: f64,
    pub count: usize,
    pub grads: TResDeltaGru<T>,
    pub act: ActGrads,
}

/// Batch mean: `loss = Σ sse / (2 · Σ count)`, gradients of that loss.
#[derive(Debug, Clone)]
pub struct BatchGrad<T> {
    pub loss: f64,
    pub grads: TResDeltaGru<T>,
    pub act: ActGrads,
}

/// Where a frame sits inside the full sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRef {
    pub start: usize,
    pub len: usize,
}

fn model_on_frame<T: Real>(
    model: &TResDeltaGru<T>,
    x: &[Complex64],
    fr: FrameRef,
    aq: Option<&ActQuant<T>>,
) -> ModelTape<T> {
    let feats = frame_features::<T>(x, fr.start, fr.len);
    let halo = model.tcn.as_ref().map(|t| frame_halo::<T>(x, fr.start, fr.len, t.dilation));
    model_forward_tape(model, &feats, halo.as_deref(), aq)
}

/// Squared-error gradient `2(out − target)` on positions `t ≥ warmup`.
fn sse_grad<T: Real>(out: &[T], target: impl Fn(usize) -> [T; IQ], warmup: usize) -> (f64, usize, Vec<T>) {
    let len = out.len() / IQ;
    let mut d = vec![T::zero(); out.len()];
    let mut sse = 0.0;
    let two = T::of(2.0);
    for t in warmup..len {
        let y = target(t);
        for c in 0..IQ {
            let e = out[t * IQ + c] - y[c];
            sse += e.f64() * e.f64();
            d[t * IQ + c] = two * e;
        }
    }
    (sse, len.saturating_sub(warmup), d)
}

/// `model(x) ≈ y` on one frame.
pub fn supervised_frame_grad<T: Real>(
    model: &TResDeltaGru<T>,
    x: &[Complex64],
    y: &[Complex64],
    fr: FrameRef,
    warmup: usize,
    aq: Option<&ActQuant<T>>,
) -> FrameGrad<T> {
    let tape = model_on_frame(model, x, fr, aq);
    let target = |t: usize| {
        let c = y[fr.start + t];
        [T::of(c.re), T::of(c.im)]
    };
    let (sse, count, d_out) = sse_grad(&tape.out, target, warmup);
    let mut grads = model.zeros_like();
    let mut act = [0.0; QuantPoint::COUNT];
    model_backward(model, &tape, &d_out, aq, &mut grads, Some(&mut act), false);
    FrameGrad { sse, count, grads, act }
}

/// `pa(dpd(x)) ≈ G·x` on one frame; the PA model only routes gradients.
#[allow(clippy::too_many_arguments)]
pub fn cascade_frame_grad<T: Real>(
    dpd: &TResDeltaGru<T>,
    pa: &TResDeltaGru<T>,
    x: &[Complex64],
    fr: FrameRef,
    warmup: usize,
    gain: Complex64,
    aq: Option<&ActQuant<T>>,
) -> FrameGrad<T> {
    let dtape = model_on_frame(dpd, x, fr, aq);
    let pa_feats = features_from_iq(&dtape.out);
    let ptape = model_forward_tape(pa, &pa_feats, None, None);
    let target = |t: usize| {
        let c = gain * x[fr.start + t];
        [T::of(c.re), T::of(c.im)]
    };
    let (sse, count, d_y) = sse_grad(&ptape.out, target, warmup);
    let mut pa_sink = pa.zeros_like();
    let d_phi = model_backward(pa, &ptape, &d_y, None, &mut pa_sink, None, true).expect("input grad requested");
    let d_u = features_from_iq_backward(&dtape.out, &d_phi);
    let mut grads = dpd.zeros_like();
    let mut act = [0.0; QuantPoint::COUNT];
    model_backward(dpd, &dtape, &d_u, aq, &mut grads, Some(&mut act), false);
    FrameGrad { sse, count, grads, act }
}

/// Reduces per-frame results in frame order, independent of threading.
pub fn reduce_frames<T: Real>(template: &TResDeltaGru<T>, frames: Vec<FrameGrad<T>>) -> Result<BatchGrad<T>> {
    let mut grads = template.zeros_like();
    let mut act = [0.0; QuantPoint::COUNT];
    let mut sse = 0.0;
    let mut count = 0usize;
    for fg in &frames {
        sse += fg.sse;
        count += fg.count;
        grads.add_assign(&fg.grads);
        for (a, b) in act.iter_mut().zip(&fg.act) {
            *a += b;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no loss positions in batch (frames shorter than warm-up?)"));
    }
    let denom = (IQ * count) as f64;
    let loss = sse / denom;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {loss}")));
    }
    grads.scale(T::of(1.0 / denom));
    for a in &mut act {
        *a /= denom;
    }
    if !grads.all_finite() {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    Ok(BatchGrad { loss, grads, act })
}

/// BPTT over a batch of frames for `model(x) ≈ y`.
pub fn supervised_batch_grad<T: Real>(
    model: &TResDeltaGru<T>,
    x: &[Complex64],
    y: &[Complex64],
    frames: &[FrameRef],
    warmup: usize,
    aq: Option<&ActQuant<T>>,
) -> Result<BatchGrad<T>> {
    let per: Vec<FrameGrad<T>> = frames
        .par_iter()
        .map(|&fr| supervised_frame_grad(model, x, y, fr, warmup, aq))
        .collect();
    reduce_frames(model, per)
}

/// BPTT over a batch of frames for `pa(dpd(x)) ≈ G·x`.
#[allow(clippy::too_many_arguments)]
pub fn cascade_batch_grad<T: Real>(
    dpd: &TResDeltaGru<T>,
    pa: &TResDeltaGru<T>,
    x: &[Complex64],
    frames: &[FrameRef],
    warmup: usize,
    gain: Complex64,
    aq: Option<&ActQuant<T>>,
) -> Result<BatchGrad<T>> {
    let per: Vec<FrameGrad<T>> = frames
        .par_iter()
        .map(|&fr| cascade_frame_grad(dpd, pa, x, fr, warmup, gain, aq))
        .collect();
    reduce_frames(dpd, per)
}

/// Mean-square loss only, for evaluation and finite differences.
pub fn supervised_loss<T: Real>(
    model: &TResDeltaGru<T>,
    x: &[Complex64],
    y: &[Complex64],
    frames: &[FrameRef],
    warmup: usize,
    aq: Option<&ActQuant<T>>,
) -> f64 {
    let (sse, count) = frames
        .iter()
        .map(|&fr| {
            let tape = model_on_frame(model, x, fr, aq);
            let target = |t: usize| {
                let c = y[fr.start + t];
                [T::of(c.re), T::of(c.im)]
            };
            let (s, c, _) = sse_grad(&tape.out, target, warmup);
            (s, c)
        })
        .fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    sse / (IQ * count) as f64
}

pub fn cascade_loss<T: Real>(
    dpd: &TResDeltaGru<T>,
    pa: &TResDeltaGru<T>,
    x: &[Complex64],
    frames: &[FrameRef],
    warmup: usize,
    gain: Complex64,
    aq: Option<&ActQuant<T>>,
) -> f64 {
    let (sse, count) = frames
        .iter()
        .map(|&fr| {
            let dtape = model_on_frame(dpd, x, fr, aq);
            let ptape = model_forward_tape(pa, &features_from_iq(&dtape.out), None, None);
            let target = |t: usize| {
                let c = gain * x[fr.start + t];
                [T::of(c.re), T::of(c.im)]
            };
            let (s, c, _) = sse_grad(&ptape.out, target, warmup);
            (s, c)
        })
        .fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    sse / (IQ * count) as f64
}
