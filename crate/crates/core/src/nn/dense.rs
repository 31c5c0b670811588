//! Textbook dense reference layers.

use num_complex::Complex64;

use super::params::{FcParams, GruParams, TcnParams, IQ, TCN_HIDDEN, TCN_KERNEL};
use super::real::{hardswish, Real};
use crate::error::{Error, Result};
use crate::signal::{FeatureSequence, IQSequence};

/// One dense GRU step: `h = (1−z)⊙h_prev + z⊙n`.
pub fn gru_step_dense<T: Real>(gru: &GruParams<T>, x: &[T], h_prev: &[T], h_out: &mut [T]) {
    let (f, h) = (gru.input_size, gru.hidden_size);
    debug_assert_eq!(x.len(), f);
    debug_assert_eq!(h_prev.len(), h);
    for i in 0..h {
        let gate = |row: usize| -> (T, T) {
            let wi = &gru.w_ih[row * f..(row + 1) * f];
            let wh = &gru.w_hh[row * h..(row + 1) * h];
            let a = wi.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>() + gru.b_ih[row];
            let b = wh.iter().zip(h_prev).map(|(&w, &v)| w * v).sum::<T>();
            (a, b)
        };
        let (ar, br) = gate(i);
        let (az, bz) = gate(h + i);
        let (an, bn) = gate(2 * h + i);
        let r = (ar + br).sigmoid();
        let z = (az + bz).sigmoid();
        let n = (an + r * (bn + gru.b_hn[i])).tanh();
        h_out[i] = (T::one() - z) * h_prev[i] + z * n;
    }
}

/// Runs the GRU from `h_0 = 0` over `inputs` (`steps × F`, row-major) and
/// returns the hidden sequence (`steps × H`).
pub fn gru_forward_dense_flat<T: Real>(gru: &GruParams<T>, inputs: &[T]) -> Result<Vec<T>> {
    let (f, h) = (gru.input_size, gru.hidden_size);
    if inputs.is_empty() {
        return Err(Error::invalid("gru_forward_dense needs at least one step"));
    }
    if inputs.len() % f != 0 {
        return Err(Error::shape(format!("input length {} is not a multiple of F={f}", inputs.len())));
    }
    let steps = inputs.len() / f;
    let mut out = vec![T::zero(); steps * h];
    let mut prev = vec![T::zero(); h];
    for t in 0..steps {
        let (_, rest) = out.split_at_mut(t * h);
        gru_step_dense(gru, &inputs[t * f..(t + 1) * f], &prev, &mut rest[..h]);
        prev.copy_from_slice(&rest[..h]);
    }
    Ok(out)
}

pub fn gru_forward_dense<T: Real>(gru: &GruParams<T>, feats: &FeatureSequence) -> Result<Vec<Vec<T>>> {
    if gru.input_size != feats.rows.first().map_or(gru.input_size, |r| r.len()) {
        return Err(Error::shape("feature width does not match GRU input size"));
    }
    let flat: Vec<T> = feats.rows.iter().flatten().map(|&v| T::of(v)).collect();
    let h = gru.hidden_size;
    Ok(gru_forward_dense_flat(gru, &flat)?.chunks(h).map(|c| c.to_vec()).collect())
}

#[inline]
pub fn fc_forward<T: Real>(fc: &FcParams<T>, h: &[T]) -> [T; IQ] {
    let n = h.len();
    let mut out = [T::zero(); IQ];
    for (o, slot) in out.iter_mut().enumerate() {
        *slot = fc.w[o * n..(o + 1) * n].iter().zip(h).map(|(&w, &v)| w * v).sum::<T>() + fc.b[o];
    }
    out
}

/// TCN output at one position given its three dilated input taps
/// `x[t−D], x[t], x[t+D]`.
#[inline]
pub fn tcn_point<T: Real>(tcn: &TcnParams<T>, taps: &[[T; IQ]; TCN_KERNEL]) -> [T; IQ] {
    let mut s1 = [T::zero(); TCN_HIDDEN];
    for (c, s) in s1.iter_mut().enumerate() {
        let mut a = tcn.b1[c];
        for (k, tap) in taps.iter().enumerate() {
            for (i, &v) in tap.iter().enumerate() {
                a += tcn.w1_at(c, i, k) * v;
            }
        }
        *s = hardswish(a);
    }
    let mut out = [T::zero(); IQ];
    for (o, slot) in out.iter_mut().enumerate() {
        let a = tcn.b2[o] + (0..TCN_HIDDEN).map(|c| tcn.w2[o * TCN_HIDDEN + c] * s1[c]).sum::<T>();
        *slot = hardswish(a);
    }
    out
}

/// Non-causal TCN with `D` zeros padded on both sides, so the output has the
/// input's length and position `t` sees `x[t−D], x[t], x[t+D]`.
pub fn tcn_forward_iq<T: Real>(tcn: &TcnParams<T>, x: &[[T; IQ]]) -> Vec<[T; IQ]> {
    let d = tcn.dilation as isize;
    let n = x.len() as isize;
    let at = |i: isize| if (0..n).contains(&i) { x[i as usize] } else { [T::zero(); IQ] };
    (0..n)
        .map(|t| tcn_point(tcn, &[at(t - d), at(t), at(t + d)]))
        .collect()
}

pub fn tcn_forward<T: Real>(tcn: &TcnParams<T>, x: &IQSequence) -> Vec<[T; IQ]> {
    tcn_forward_iq(tcn, &iq_rows(x.samples()))
}

pub fn iq_rows<T: Real>(x: &[Complex64]) -> Vec<[T; IQ]> {
    x.iter().map(|c| [T::of(c.re), T::of(c.im)]).collect()
}
