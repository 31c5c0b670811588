//! Recorded forward passes and their reverse-mode gradients.
//!
//! The training forward evaluates the DeltaGRU in direct form,
//! `M = W_i·φ̃ + W_h·h̃ + b`, which equals the incremental accumulation
//! exactly in real arithmetic. Delta thresholds still decide which buffer
//! entries refresh; in the backward pass the threshold gate and every
//! rounding step are straight-through.

use super::params::{FcParams, GruParams, TResDeltaGru, TcnParams, IQ, TCN_HIDDEN, TCN_KERNEL};
use super::real::{hardswish, hardswish_grad, Real};
use crate::quant::{QParam, QuantPoint};

/// Optional fake quantizer per activation point.
#[derive(Debug, Clone, PartialEq)]
pub struct ActQuant<T> {
    pub points: [Option<QParam<T>>; QuantPoint::COUNT],
}

impl<T: Real> Default for ActQuant<T> {
    fn default() -> Self {
        Self {
            points: [None; QuantPoint::COUNT],
        }
    }
}

impl<T: Real> ActQuant<T> {
    pub fn set(&mut self, p: QuantPoint, q: QParam<T>) {
        self.points[p.index()] = Some(q);
    }

    #[inline]
    pub fn get(&self, p: QuantPoint) -> Option<&QParam<T>> {
        self.points[p.index()].as_ref()
    }
}

/// Scale gradients per activation point, `dL/ds`.
pub type ActGrads = [f64; QuantPoint::COUNT];

#[inline]
fn q<T: Real>(aq: Option<&ActQuant<T>>, p: QuantPoint, v: T) -> T {
    match aq.and_then(|a| a.get(p)) {
        Some(qp) => qp.apply(v),
        None => v,
    }
}

#[inline]
fn qb<T: Real>(aq: Option<&ActQuant<T>>, p: QuantPoint, v: T, g: T, sg: &mut Option<&mut ActGrads>) -> T {
    match aq.and_then(|a| a.get(p)) {
        Some(qp) => {
            let (gv, gs) = qp.backward(v, g);
            if let Some(s) = sg.as_deref_mut() {
                s[p.index()] += gs.f64();
            }
            gv
        }
        None => g,
    }
}

/// GRU + FC activations of one frame (`L` steps).
#[derive(Debug, Clone)]
pub struct GruTape<T> {
    pub steps: usize,
    pub f: usize,
    pub h: usize,
    pub phi_pre: Vec<T>,
    pub phi_used: Vec<T>,
    pub hbuf_used: Vec<T>,
    pub h_prev: Vec<T>,
    pub mr_pre: Vec<T>,
    pub mz_pre: Vec<T>,
    pub mnphi_pre: Vec<T>,
    pub mnh_pre: Vec<T>,
    pub mr: Vec<T>,
    pub mz: Vec<T>,
    pub mnphi: Vec<T>,
    pub mnh: Vec<T>,
    pub r_sig: Vec<T>,
    pub r: Vec<T>,
    pub z_sig: Vec<T>,
    pub z: Vec<T>,
    pub n_tanh: Vec<T>,
    pub n: Vec<T>,
    pub h_pre: Vec<T>,
    pub h_out: Vec<T>,
    pub fc_pre: Vec<T>,
    pub fc: Vec<T>,
    /// Buffer refreshes: input elements, hidden elements.
    pub phi_updates: u64,
    pub h_updates: u64,
}

/// Runs GRU + FC over `feats` (`L × F`) from a reset state.
pub fn gru_fc_forward<T: Real>(
    gru: &GruParams<T>,
    fc: &FcParams<T>,
    theta_phi: f64,
    theta_h: f64,
    feats: &[T],
    aq: Option<&ActQuant<T>>,
) -> GruTape<T> {
    let (f, h) = (gru.input_size, gru.hidden_size);
    let steps = feats.len() / f;
    let lh = steps * h;
    let z = || vec![T::zero(); lh];
    let mut tp = GruTape {
        steps,
        f,
        h,
        phi_pre: feats.to_vec(),
        phi_used: vec![T::zero(); steps * f],
        hbuf_used: z(),
        h_prev: z(),
        mr_pre: z(),
        mz_pre: z(),
        mnphi_pre: z(),
        mnh_pre: z(),
        mr: z(),
        mz: z(),
        mnphi: z(),
        mnh: z(),
        r_sig: z(),
        r: z(),
        z_sig: z(),
        z: z(),
        n_tanh: z(),
        n: z(),
        h_pre: z(),
        h_out: z(),
        fc_pre: vec![T::zero(); steps * IQ],
        fc: vec![T::zero(); steps * IQ],
        phi_updates: 0,
        h_updates: 0,
    };
    let th_phi = T::of(theta_phi);
    let th_h = T::of(theta_h);
    let mut pbuf = vec![T::zero(); f];
    let mut hbuf = vec![T::zero(); h];
    let mut hprev = vec![T::zero(); h];

    for t in 0..steps {
        for k in 0..f {
            let v = q(aq, QuantPoint::Phi, feats[t * f + k]);
            if (v - pbuf[k]).abs() > th_phi || theta_phi == 0.0 {
                pbuf[k] = v;
                tp.phi_updates += 1;
            }
        }
        for k in 0..h {
            if (hprev[k] - hbuf[k]).abs() > th_h || theta_h == 0.0 {
                hbuf[k] = hprev[k];
                tp.h_updates += 1;
            }
        }
        tp.phi_used[t * f..(t + 1) * f].copy_from_slice(&pbuf);
        tp.hbuf_used[t * h..(t + 1) * h].copy_from_slice(&hbuf);
        tp.h_prev[t * h..(t + 1) * h].copy_from_slice(&hprev);

        for i in 0..h {
            let dot_i = |row: usize| -> T {
                gru.w_ih[row * f..(row + 1) * f]
                    .iter()
                    .zip(&pbuf)
                    .map(|(&w, &v)| w * v)
                    .sum::<T>()
                    + gru.b_ih[row]
            };
            let dot_h = |row: usize| -> T {
                gru.w_hh[row * h..(row + 1) * h]
                    .iter()
                    .zip(&hbuf)
                    .map(|(&w, &v)| w * v)
                    .sum::<T>()
            };
            let j = t * h + i;
            let mr_pre = dot_i(i) + dot_h(i);
            let mz_pre = dot_i(h + i) + dot_h(h + i);
            let mnphi_pre = dot_i(2 * h + i);
            let mnh_pre = dot_h(2 * h + i) + gru.b_hn[i];
            let mr = q(aq, QuantPoint::Mr, mr_pre);
            let mz = q(aq, QuantPoint::Mz, mz_pre);
            let mnphi = q(aq, QuantPoint::Mnphi, mnphi_pre);
            let mnh = q(aq, QuantPoint::Mnh, mnh_pre);
            let r_sig = mr.sigmoid();
            let r = q(aq, QuantPoint::R, r_sig);
            let z_sig = mz.sigmoid();
            let zq = q(aq, QuantPoint::Z, z_sig);
            let n_tanh = (mnphi + r * mnh).tanh();
            let n = q(aq, QuantPoint::N, n_tanh);
            let h_pre = (T::one() - zq) * hprev[i] + zq * n;
            let hv = q(aq, QuantPoint::H, h_pre);
            tp.mr_pre[j] = mr_pre;
            tp.mz_pre[j] = mz_pre;
            tp.mnphi_pre[j] = mnphi_pre;
            tp.mnh_pre[j] = mnh_pre;
            tp.mr[j] = mr;
            tp.mz[j] = mz;
            tp.mnphi[j] = mnphi;
            tp.mnh[j] = mnh;
            tp.r_sig[j] = r_sig;
            tp.r[j] = r;
            tp.z_sig[j] = z_sig;
            tp.z[j] = zq;
            tp.n_tanh[j] = n_tanh;
            tp.n[j] = n;
            tp.h_pre[j] = h_pre;
            tp.h_out[j] = hv;
        }
        hprev.copy_from_slice(&tp.h_out[t * h..(t + 1) * h]);
        for o in 0..IQ {
            let pre = fc.w[o * h..(o + 1) * h]
                .iter()
                .zip(&hprev)
                .map(|(&w, &v)| w * v)
                .sum::<T>()
                + fc.b[o];
            tp.fc_pre[t * IQ + o] = pre;
            tp.fc[t * IQ + o] = q(aq, QuantPoint::FcOut, pre);
        }
    }
    tp
}

/// Backward through GRU + FC. `d_fc` is `dL/dfc` (`L × 2`, post-quant).
///
/// Gradients are accumulated into `g_gru`/`g_fc`. Returns `dL/dφ` (pre-quant
/// features, `L × F`) when `want_input_grad` is set.
#[allow(clippy::too_many_arguments)]
pub fn gru_fc_backward<T: Real>(
    gru: &GruParams<T>,
    fc: &FcParams<T>,
    tp: &GruTape<T>,
    d_fc: &[T],
    aq: Option<&ActQuant<T>>,
    g_gru: &mut GruParams<T>,
    g_fc: &mut FcParams<T>,
    mut sg: Option<&mut ActGrads>,
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let (f, h, steps) = (tp.f, tp.h, tp.steps);
    let need_phi = want_input_grad || aq.is_some_and(|a| a.get(QuantPoint::Phi).is_some());
    let mut d_phi = if need_phi { vec![T::zero(); steps * f] } else { Vec::new() };

    // Gradient w.r.t. the post-quant h_t, accumulated from later steps.
    let mut carry = vec![T::zero(); h];
    let mut next_carry = vec![T::zero(); h];
    let mut gi = vec![T::zero(); 3 * h];
    let mut gh = vec![T::zero(); 3 * h];

    for t in (0..steps).rev() {
        let ht = &tp.h_out[t * h..(t + 1) * h];
        for o in 0..IQ {
            let g = qb(aq, QuantPoint::FcOut, tp.fc_pre[t * IQ + o], d_fc[t * IQ + o], &mut sg);
            if g == T::zero() {
                continue;
            }
            g_fc.b[o] += g;
            for i in 0..h {
                g_fc.w[o * h + i] += g * ht[i];
                carry[i] += g * fc.w[o * h + i];
            }
        }
        next_carry.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..h {
            let j = t * h + i;
            let dh = qb(aq, QuantPoint::H, tp.h_pre[j], carry[i], &mut sg);
            let zq = tp.z[j];
            let dz = dh * (tp.n[j] - tp.h_prev[j]);
            let dn = dh * zq;
            next_carry[i] += dh * (T::one() - zq);
            let dn_t = qb(aq, QuantPoint::N, tp.n_tanh[j], dn, &mut sg);
            let da = dn_t * (T::one() - tp.n_tanh[j] * tp.n_tanh[j]);
            let dmnphi = da;
            let dr = da * tp.mnh[j];
            let dmnh = da * tp.r[j];
            let dr_s = qb(aq, QuantPoint::R, tp.r_sig[j], dr, &mut sg);
            let dmr = dr_s * tp.r_sig[j] * (T::one() - tp.r_sig[j]);
            let dz_s = qb(aq, QuantPoint::Z, tp.z_sig[j], dz, &mut sg);
            let dmz = dz_s * tp.z_sig[j] * (T::one() - tp.z_sig[j]);
            let dmr = qb(aq, QuantPoint::Mr, tp.mr_pre[j], dmr, &mut sg);
            let dmz = qb(aq, QuantPoint::Mz, tp.mz_pre[j], dmz, &mut sg);
            let dmnphi = qb(aq, QuantPoint::Mnphi, tp.mnphi_pre[j], dmnphi, &mut sg);
            let dmnh = qb(aq, QuantPoint::Mnh, tp.mnh_pre[j], dmnh, &mut sg);
            gi[i] = dmr;
            gi[h + i] = dmz;
            gi[2 * h + i] = dmnphi;
            gh[i] = dmr;
            gh[h + i] = dmz;
            gh[2 * h + i] = dmnh;
            g_gru.b_hn[i] += dmnh;
        }
        let phi = &tp.phi_used[t * f..(t + 1) * f];
        let hb = &tp.hbuf_used[t * h..(t + 1) * h];
        for row in 0..3 * h {
            let g = gi[row];
            g_gru.b_ih[row] += g;
            let w = &mut g_gru.w_ih[row * f..(row + 1) * f];
            for k in 0..f {
                w[k] += g * phi[k];
            }
            let g = gh[row];
            let w = &mut g_gru.w_hh[row * h..(row + 1) * h];
            for k in 0..h {
                w[k] += g * hb[k];
            }
        }
        if t > 0 {
            // h̃_{t−1} stands in for h_{t−1}: straight-through.
            for row in 0..3 * h {
                let g = gh[row];
                if g == T::zero() {
                    continue;
                }
                let w = &gru.w_hh[row * h..(row + 1) * h];
                for k in 0..h {
                    next_carry[k] += g * w[k];
                }
            }
        }
        if need_phi {
            for k in 0..f {
                let mut s = T::zero();
                for row in 0..3 * h {
                    s += gru.w_ih[row * f + k] * gi[row];
                }
                d_phi[t * f + k] = qb(aq, QuantPoint::Phi, tp.phi_pre[t * f + k], s, &mut sg);
            }
        }
        std::mem::swap(&mut carry, &mut next_carry);
    }
    want_input_grad.then_some(d_phi)
}

/// TCN activations over one frame. Inputs carry a `D`-sample halo on both
/// sides, so output `t` reads `x_halo[t], x_halo[t + D], x_halo[t + 2D]`.
#[derive(Debug, Clone)]
pub struct TcnTape<T> {
    pub len: usize,
    pub x_pre: Vec<[T; IQ]>,
    pub x: Vec<[T; IQ]>,
    pub a1_pre: Vec<[T; TCN_HIDDEN]>,
    pub a1: Vec<[T; TCN_HIDDEN]>,
    pub s1_pre: Vec<[T; TCN_HIDDEN]>,
    pub s1: Vec<[T; TCN_HIDDEN]>,
    pub a2_pre: Vec<[T; IQ]>,
    pub a2: Vec<[T; IQ]>,
    pub o_pre: Vec<[T; IQ]>,
    pub o: Vec<[T; IQ]>,
}

pub fn tcn_forward_tape<T: Real>(tcn: &TcnParams<T>, x_halo: &[[T; IQ]], aq: Option<&ActQuant<T>>) -> TcnTape<T> {
    let d = tcn.dilation;
    let len = x_halo.len() - 2 * d;
    let x: Vec<[T; IQ]> = x_halo
        .iter()
        .map(|v| [q(aq, QuantPoint::TcnIn, v[0]), q(aq, QuantPoint::TcnIn, v[1])])
        .collect();
    let mut tp = TcnTape {
        len,
        x_pre: x_halo.to_vec(),
        x,
        a1_pre: Vec::with_capacity(len),
        a1: Vec::with_capacity(len),
        s1_pre: Vec::with_capacity(len),
        s1: Vec::with_capacity(len),
        a2_pre: Vec::with_capacity(len),
        a2: Vec::with_capacity(len),
        o_pre: Vec::with_capacity(len),
        o: Vec::with_capacity(len),
    };
    for t in 0..len {
        let mut a1_pre = [T::zero(); TCN_HIDDEN];
        let mut a1 = [T::zero(); TCN_HIDDEN];
        let mut s1_pre = [T::zero(); TCN_HIDDEN];
        let mut s1 = [T::zero(); TCN_HIDDEN];
        for c in 0..TCN_HIDDEN {
            let mut a = tcn.b1[c];
            for k in 0..TCN_KERNEL {
                let tap = tp.x[t + k * d];
                for (i, &v) in tap.iter().enumerate() {
                    a += tcn.w1_at(c, i, k) * v;
                }
            }
            a1_pre[c] = a;
            a1[c] = q(aq, QuantPoint::Tcn1Pre, a);
            s1_pre[c] = hardswish(a1[c]);
            s1[c] = q(aq, QuantPoint::Tcn1Act, s1_pre[c]);
        }
        let mut a2_pre = [T::zero(); IQ];
        let mut a2 = [T::zero(); IQ];
        let mut o_pre = [T::zero(); IQ];
        let mut o = [T::zero(); IQ];
        for oc in 0..IQ {
            let a = tcn.b2[oc] + (0..TCN_HIDDEN).map(|c| tcn.w2[oc * TCN_HIDDEN + c] * s1[c]).sum::<T>();
            a2_pre[oc] = a;
            a2[oc] = q(aq, QuantPoint::Tcn2Pre, a);
            o_pre[oc] = hardswish(a2[oc]);
            o[oc] = q(aq, QuantPoint::TcnOut, o_pre[oc]);
        }
        tp.a1_pre.push(a1_pre);
        tp.a1.push(a1);
        tp.s1_pre.push(s1_pre);
        tp.s1.push(s1);
        tp.a2_pre.push(a2_pre);
        tp.a2.push(a2);
        tp.o_pre.push(o_pre);
        tp.o.push(o);
    }
    tp
}

/// Backward through the TCN given `dL/do` (post-quant outputs).
pub fn tcn_backward<T: Real>(
    tcn: &TcnParams<T>,
    tp: &TcnTape<T>,
    d_o: &[[T; IQ]],
    aq: Option<&ActQuant<T>>,
    g: &mut TcnParams<T>,
    mut sg: Option<&mut ActGrads>,
) {
    let d = tcn.dilation;
    let need_x = aq.is_some_and(|a| a.get(QuantPoint::TcnIn).is_some());
    let mut dx = vec![[T::zero(); IQ]; if need_x { tp.x.len() } else { 0 }];
    for t in 0..tp.len {
        let mut ds1 = [T::zero(); TCN_HIDDEN];
        for oc in 0..IQ {
            let go = qb(aq, QuantPoint::TcnOut, tp.o_pre[t][oc], d_o[t][oc], &mut sg);
            let ga2 = go * hardswish_grad(tp.a2[t][oc]);
            let ga2 = qb(aq, QuantPoint::Tcn2Pre, tp.a2_pre[t][oc], ga2, &mut sg);
            g.b2[oc] += ga2;
            for c in 0..TCN_HIDDEN {
                g.w2[oc * TCN_HIDDEN + c] += ga2 * tp.s1[t][c];
                ds1[c] += ga2 * tcn.w2[oc * TCN_HIDDEN + c];
            }
        }
        for c in 0..TCN_HIDDEN {
            let gs = qb(aq, QuantPoint::Tcn1Act, tp.s1_pre[t][c], ds1[c], &mut sg);
            let ga = gs * hardswish_grad(tp.a1[t][c]);
            let ga = qb(aq, QuantPoint::Tcn1Pre, tp.a1_pre[t][c], ga, &mut sg);
            g.b1[c] += ga;
            for k in 0..TCN_KERNEL {
                let tap = tp.x[t + k * d];
                for i in 0..IQ {
                    let idx = (c * IQ + i) * TCN_KERNEL + k;
                    g.w1[idx] += ga * tap[i];
                    if need_x {
                        dx[t + k * d][i] += ga * tcn.w1[idx];
                    }
                }
            }
        }
    }
    if need_x {
        for (xp, gx) in tp.x_pre.iter().zip(&dx) {
            for i in 0..IQ {
                qb(aq, QuantPoint::TcnIn, xp[i], gx[i], &mut sg);
            }
        }
    }
}

/// Full model activations for one frame.
#[derive(Debug, Clone)]
pub struct ModelTape<T> {
    pub gru: GruTape<T>,
    pub tcn: Option<TcnTape<T>>,
    /// `Û + TCN` before the output quantizer, `L × 2`.
    pub out_pre: Vec<T>,
    pub out: Vec<T>,
}

/// `feats` is `L × F`; `x_halo` carries `D` extra input samples on each
/// side (ignored without a TCN).
pub fn model_forward_tape<T: Real>(
    model: &TResDeltaGru<T>,
    feats: &[T],
    x_halo: Option<&[[T; IQ]]>,
    aq: Option<&ActQuant<T>>,
) -> ModelTape<T> {
    let th = model.thresholds;
    let gru = gru_fc_forward(&model.gru, &model.fc, th.theta_phi, th.theta_h, feats, aq);
    let tcn = match (&model.tcn, x_halo) {
        (Some(t), Some(xh)) => Some(tcn_forward_tape(t, xh, aq)),
        (Some(_), None) => panic!("TCN model needs input context"),
        _ => None,
    };
    let mut out_pre = gru.fc.clone();
    if let Some(tt) = &tcn {
        for (t, o) in tt.o.iter().enumerate() {
            out_pre[t * IQ] += o[0];
            out_pre[t * IQ + 1] += o[1];
        }
    }
    let out = out_pre.iter().map(|&v| q(aq, QuantPoint::Out, v)).collect();
    ModelTape { gru, tcn, out_pre, out }
}

/// Accumulates parameter gradients for `dL/dout` and optionally returns
/// `dL/dφ`.
pub fn model_backward<T: Real>(
    model: &TResDeltaGru<T>,
    tape: &ModelTape<T>,
    d_out: &[T],
    aq: Option<&ActQuant<T>>,
    grads: &mut TResDeltaGru<T>,
    mut sg: Option<&mut ActGrads>,
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let d_pre: Vec<T> = tape
        .out_pre
        .iter()
        .zip(d_out)
        .map(|(&v, &g)| qb(aq, QuantPoint::Out, v, g, &mut sg))
        .collect();
    if let (Some(tcn), Some(tt), Some(gt)) = (&model.tcn, &tape.tcn, grads.tcn.as_mut()) {
        let d_o: Vec<[T; IQ]> = d_pre.chunks(IQ).map(|c| [c[0], c[1]]).collect();
        tcn_backward(tcn, tt, &d_o, aq, gt, sg.as_deref_mut());
    }
    gru_fc_backward(
        &model.gru,
        &model.fc,
        &tape.gru,
        &d_pre,
        aq,
        &mut grads.gru,
        &mut grads.fc,
        sg,
        want_input_grad,
    )
}
