//! Fixed-point inference: integer multiplies, exact accumulators and
//! shift-based requantization.

use num_complex::Complex64;

use super::qmodel::{PointTrace, QuantizedModel};
use super::{pow2, QuantPoint, QuantSpec};
use crate::error::{Error, Result};
use crate::nn::{hardswish, Real, IQ, TCN_HIDDEN, TCN_KERNEL};
use crate::signal::{features_of, IQSequence};

/// The exact value `m · 2^e`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Fixed {
    pub m: i128,
    pub e: i32,
}

impl Fixed {
    pub fn new(m: i128, e: i32) -> Self {
        Self { m, e }
    }

    pub fn code(q: i64, spec: &QuantSpec) -> Self {
        Self::new(q as i128, spec.log2_scale)
    }

    pub fn to_f64(self) -> f64 {
        self.m as f64 * pow2(self.e)
    }

    pub fn mul(self, o: Fixed) -> Fixed {
        Fixed::new(self.m * o.m, self.e + o.e)
    }

    /// Same value at the finer exponent `e` (`e <= self.e`).
    pub fn at(self, e: i32) -> Fixed {
        debug_assert!(e <= self.e);
        Fixed::new(self.m << (self.e - e), e)
    }

    pub fn add(self, o: Fixed) -> Fixed {
        let e = self.e.min(o.e);
        Fixed::new(self.at(e).m + o.at(e).m, e)
    }

    /// Integer code under `spec`: round half away from zero, then saturate.
    pub fn requantize(self, spec: &QuantSpec) -> i64 {
        let (lo, hi) = (spec.qmin() as i128, spec.qmax() as i128);
        let k = spec.log2_scale - self.e;
        let q = if self.m == 0 {
            0
        } else if k <= 0 {
            let bits = 128 - self.m.unsigned_abs().leading_zeros() as i32;
            if bits - k > 100 {
                self.m.signum() * (1 << 100)
            } else {
                self.m << -k
            }
        } else if k >= 127 {
            0
        } else {
            let a = self.m.unsigned_abs();
            let r = ((a + (1u128 << (k - 1))) >> k) as i128;
            self.m.signum() * r
        };
        q.clamp(lo, hi) as i64
    }
}

fn check(acc: &Fixed, bits: u32, tensor: &str) -> Result<()> {
    let lim = 1i128 << (bits - 1);
    if acc.m >= lim || acc.m < -lim {
        return Err(Error::Overflow { tensor: tensor.to_string() });
    }
    Ok(())
}

/// A weight tensor as integer codes at one exponent.
struct WTensor {
    codes: Vec<i64>,
    e: i32,
}

impl WTensor {
    fn get(&self, i: usize) -> Fixed {
        Fixed::new(self.codes[i] as i128, self.e)
    }
}

fn weight(qm: &QuantizedModel, name: &str) -> Result<WTensor> {
    let spec = qm.weight_spec(name)?;
    let (_, vals) = qm
        .model
        .tensors()
        .into_iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::invalid(format!("model has no tensor `{name}`")))?;
    Ok(WTensor {
        codes: vals.iter().map(|&v| spec.quantize(v)).collect(),
        e: spec.log2_scale,
    })
}

/// Fixed-point forward over a whole sequence from a reset state.
///
/// The DeltaGRU runs incrementally: input-side and hidden-side
/// accumulators per gate row start at the aligned biases and absorb
/// `W[:, k] · Δ_k` for every evaluated column. Gate sums are read out
/// through the activation quantizers; σ, tanh and Hardswish are evaluated
/// on the exact dequantized value and re-quantized. Every accumulator is
/// checked against the configured accumulator width.
pub fn integer_forward(qm: &QuantizedModel, x: &IQSequence) -> Result<IntegerTrace> {
    if x.is_empty() {
        return Err(Error::EmptyDataset("integer_forward input".into()));
    }
    let cfg = qm.cfg;
    let acc_bits = cfg.accumulator_bits();
    let model = &qm.model;
    let (f, h) = (model.input_size(), model.hidden_size());
    let n = x.len();
    let th = model.thresholds;
    let act = |p| qm.act_spec(p);
    let s_phi = act(QuantPoint::Phi)?;
    let s_mr = act(QuantPoint::Mr)?;
    let s_mz = act(QuantPoint::Mz)?;
    let s_mnphi = act(QuantPoint::Mnphi)?;
    let s_mnh = act(QuantPoint::Mnh)?;
    let s_r = act(QuantPoint::R)?;
    let s_z = act(QuantPoint::Z)?;
    let s_n = act(QuantPoint::N)?;
    let s_h = act(QuantPoint::H)?;
    let s_fc = act(QuantPoint::FcOut)?;
    let s_out = act(QuantPoint::Out)?;

    let w_ih = weight(qm, "gru.w_ih")?;
    let w_hh = weight(qm, "gru.w_hh")?;
    let b_ih = weight(qm, "gru.b_ih")?;
    let b_hn = weight(qm, "gru.b_hn")?;
    let fc_w = weight(qm, "fc.w")?;
    let fc_b = weight(qm, "fc.b")?;

    let e_i = (w_ih.e + s_phi.log2_scale).min(b_ih.e);
    let e_h = (w_hh.e + s_h.log2_scale).min(b_hn.e);
    let mut acc_i: Vec<Fixed> = (0..3 * h).map(|r| b_ih.get(r).at(e_i)).collect();
    let mut acc_h: Vec<Fixed> = (0..3 * h)
        .map(|r| if r >= 2 * h { b_hn.get(r - 2 * h).at(e_h) } else { Fixed::new(0, e_h) })
        .collect();
    let mut pbuf = vec![0i64; f];
    let mut hbuf = vec![0i64; h];
    let mut hprev = vec![0i64; h];

    let mut tr = PointTrace::new(n, f, h, model.tcn.is_some());
    let feats = features_of(x.samples());
    let mut fc_codes = vec![[0i64; IQ]; n];

    for (t, row) in feats.iter().enumerate() {
        for k in 0..f {
            let v = s_phi.quantize(row[k]);
            tr.push(QuantPoint::Phi, s_phi.dequantize(v));
            let d = v - pbuf[k];
            if th.theta_phi == 0.0 || (s_phi.dequantize(d)).abs() > th.theta_phi {
                let dv = Fixed::code(d, &s_phi);
                for (r, a) in acc_i.iter_mut().enumerate() {
                    *a = a.add(w_ih.get(r * f + k).mul(dv));
                    check(a, acc_bits, "gru.w_ih accumulator")?;
                }
                pbuf[k] = v;
                tr.phi_updates += 1;
            }
        }
        for k in 0..h {
            let d = hprev[k] - hbuf[k];
            if th.theta_h == 0.0 || (s_h.dequantize(d)).abs() > th.theta_h {
                let dv = Fixed::code(d, &s_h);
                for (r, a) in acc_h.iter_mut().enumerate() {
                    *a = a.add(w_hh.get(r * h + k).mul(dv));
                    check(a, acc_bits, "gru.w_hh accumulator")?;
                }
                hbuf[k] = hprev[k];
                tr.h_updates += 1;
            }
        }
        let mut hnew = vec![0i64; h];
        for i in 0..h {
            let mr_acc = acc_i[i].add(acc_h[i]);
            let mz_acc = acc_i[h + i].add(acc_h[h + i]);
            check(&mr_acc, acc_bits, "gru.m_r")?;
            check(&mz_acc, acc_bits, "gru.m_z")?;
            let mr = mr_acc.requantize(&s_mr);
            let mz = mz_acc.requantize(&s_mz);
            let mnphi = acc_i[2 * h + i].requantize(&s_mnphi);
            let mnh = acc_h[2 * h + i].requantize(&s_mnh);
            let r = s_r.quantize(Real::sigmoid(s_mr.dequantize(mr)));
            let z = s_z.quantize(Real::sigmoid(s_mz.dequantize(mz)));
            let n_pre = Fixed::code(mnphi, &s_mnphi).add(Fixed::code(r, &s_r).mul(Fixed::code(mnh, &s_mnh)));
            check(&n_pre, acc_bits, "gru.n")?;
            let nq = s_n.quantize(n_pre.to_f64().tanh());
            let zf = Fixed::code(z, &s_z);
            let one_minus_z = Fixed::new(1, 0).add(Fixed::new(-zf.m, zf.e));
            let h_pre = one_minus_z
                .mul(Fixed::code(hprev[i], &s_h))
                .add(zf.mul(Fixed::code(nq, &s_n)));
            check(&h_pre, acc_bits, "gru.h")?;
            hnew[i] = h_pre.requantize(&s_h);
            for (p, spec, q) in [
                (QuantPoint::Mr, &s_mr, mr),
                (QuantPoint::Mz, &s_mz, mz),
                (QuantPoint::Mnphi, &s_mnphi, mnphi),
                (QuantPoint::Mnh, &s_mnh, mnh),
                (QuantPoint::R, &s_r, r),
                (QuantPoint::Z, &s_z, z),
                (QuantPoint::N, &s_n, nq),
                (QuantPoint::H, &s_h, hnew[i]),
            ] {
                tr.push(p, spec.dequantize(q));
            }
        }
        hprev = hnew;
        for o in 0..IQ {
            let mut a = fc_b.get(o);
            for (k, &hv) in hprev.iter().enumerate() {
                a = a.add(fc_w.get(o * h + k).mul(Fixed::code(hv, &s_h)));
            }
            check(&a, acc_bits, "fc.w accumulator")?;
            fc_codes[t][o] = a.requantize(&s_fc);
            tr.push(QuantPoint::FcOut, s_fc.dequantize(fc_codes[t][o]));
        }
    }

    let tcn_codes = match &model.tcn {
        Some(tcn) => Some(integer_tcn(qm, tcn.dilation, x, acc_bits, &mut tr)?),
        None => None,
    };
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let mut u = [0i64; IQ];
        for o in 0..IQ {
            let mut a = Fixed::code(fc_codes[t][o], &s_fc);
            if let Some((codes, spec)) = &tcn_codes {
                a = a.add(Fixed::code(codes[t][o], spec));
            }
            u[o] = a.requantize(&s_out);
            tr.push(QuantPoint::Out, s_out.dequantize(u[o]));
        }
        out.push(Complex64::new(s_out.dequantize(u[0]), s_out.dequantize(u[1])));
    }
    tr.output = out;
    Ok(tr)
}

type TcnCodes = (Vec<[i64; IQ]>, QuantSpec);

fn integer_tcn(qm: &QuantizedModel, d: usize, x: &IQSequence, acc_bits: u32, tr: &mut PointTrace) -> Result<TcnCodes> {
    let s_in = qm.act_spec(QuantPoint::TcnIn)?;
    let s_a1 = qm.act_spec(QuantPoint::Tcn1Pre)?;
    let s_s1 = qm.act_spec(QuantPoint::Tcn1Act)?;
    let s_a2 = qm.act_spec(QuantPoint::Tcn2Pre)?;
    let s_o = qm.act_spec(QuantPoint::TcnOut)?;
    let w1 = weight(qm, "tcn.w1")?;
    let b1 = weight(qm, "tcn.b1")?;
    let w2 = weight(qm, "tcn.w2")?;
    let b2 = weight(qm, "tcn.b2")?;
    let xq: Vec<[i64; IQ]> = x
        .samples()
        .iter()
        .map(|c| [s_in.quantize(c.re), s_in.quantize(c.im)])
        .collect();
    for v in &xq {
        tr.push(QuantPoint::TcnIn, s_in.dequantize(v[0]));
        tr.push(QuantPoint::TcnIn, s_in.dequantize(v[1]));
    }
    let n = xq.len() as isize;
    let at = |i: isize| if (0..n).contains(&i) { xq[i as usize] } else { [0; IQ] };
    let mut out = Vec::with_capacity(xq.len());
    for t in 0..n {
        let taps = [at(t - d as isize), at(t), at(t + d as isize)];
        let mut s1 = [0i64; TCN_HIDDEN];
        for c in 0..TCN_HIDDEN {
            let mut a = b1.get(c);
            for (k, tap) in taps.iter().enumerate() {
                for (i, &v) in tap.iter().enumerate() {
                    a = a.add(w1.get((c * IQ + i) * TCN_KERNEL + k).mul(Fixed::code(v, &s_in)));
                }
            }
            check(&a, acc_bits, "tcn.w1 accumulator")?;
            let a1 = a.requantize(&s_a1);
            s1[c] = s_s1.quantize(hardswish(s_a1.dequantize(a1)));
            tr.push(QuantPoint::Tcn1Pre, s_a1.dequantize(a1));
            tr.push(QuantPoint::Tcn1Act, s_s1.dequantize(s1[c]));
        }
        let mut o = [0i64; IQ];
        for (oc, slot) in o.iter_mut().enumerate() {
            let mut a = b2.get(oc);
            for (c, &v) in s1.iter().enumerate() {
                a = a.add(w2.get(oc * TCN_HIDDEN + c).mul(Fixed::code(v, &s_s1)));
            }
            check(&a, acc_bits, "tcn.w2 accumulator")?;
            let a2 = a.requantize(&s_a2);
            *slot = s_o.quantize(hardswish(s_a2.dequantize(a2)));
            tr.push(QuantPoint::Tcn2Pre, s_a2.dequantize(a2));
            tr.push(QuantPoint::TcnOut, s_o.dequantize(*slot));
        }
        out.push(o);
    }
    Ok((out, s_o))
}

/// Values seen at every quantization point by [`integer_forward`].
pub type IntegerTrace = PointTrace;
