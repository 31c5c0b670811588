//! Fake quantization with power-of-two scales and a fixed-point inference
//! path that reproduces it exactly.

mod fixed;
mod qmodel;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

pub use fixed::{integer_forward, Fixed, IntegerTrace};
pub use qmodel::{
    calibrate_scales, fake_quant_forward, ActScale, FakeQuantTrace, PointTrace, QuantTensor, QuantizedCheckpoint,
    QuantizedModel, QUANT_FORMAT, QUANT_FORMAT_VERSION,
};

/// Bit widths accepted for weights and activations.
pub const SUPPORTED_BITS: [u32; 3] = [8, 12, 16];

/// Signed `n`-bit quantizer with scale `2^log2_scale` and range
/// `[−2^{n−1}, 2^{n−1} − 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub n_bits: u32,
    pub log2_scale: i32,
}

impl QuantSpec {
    pub fn new(n_bits: u32, log2_scale: i32) -> Result<Self> {
        if !(2..=32).contains(&n_bits) {
            return Err(Error::invalid(format!("n_bits must be in 2..=32, got {n_bits}")));
        }
        Ok(Self { n_bits, log2_scale })
    }

    /// Snaps an arbitrary positive scale to the nearest power of two.
    pub fn from_scale(n_bits: u32, scale: f64) -> Result<Self> {
        let s = snap_scale_pow2(scale)?;
        Self::new(n_bits, s.log2().round() as i32)
    }

    pub fn scale(&self) -> f64 {
        pow2(self.log2_scale)
    }

    pub fn qmin(&self) -> i64 {
        -(1i64 << (self.n_bits - 1))
    }

    pub fn qmax(&self) -> i64 {
        (1i64 << (self.n_bits - 1)) - 1
    }

    /// Integer code of `x` (clip, then round half away from zero).
    pub fn quantize(&self, x: f64) -> i64 {
        let u = x / self.scale();
        u.clamp(self.qmin() as f64, self.qmax() as f64).round() as i64
    }

    pub fn dequantize(&self, q: i64) -> f64 {
        q as f64 * self.scale()
    }
}

/// Exact `2^e`.
pub fn pow2(e: i32) -> f64 {
    if (-1022..=1023).contains(&e) {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else {
        (e as f64).exp2()
    }
}

/// `s · Round(Clip(x/s, Q_min, Q_max))` with round-half-away-from-zero.
#[inline]
pub fn fake_quant(x: f64, spec: &QuantSpec) -> f64 {
    spec.dequantize(spec.quantize(x))
}

pub fn fake_quant_slice(x: &[f64], spec: &QuantSpec) -> Vec<f64> {
    x.iter().map(|&v| fake_quant(v, spec)).collect()
}

/// Straight-through gradient: passes `upstream` where `x/s` lies in the
/// closed clip range, zero elsewhere.
#[inline]
pub fn ste_backward(upstream: f64, x: f64, spec: &QuantSpec) -> f64 {
    let u = x / spec.scale();
    if u >= spec.qmin() as f64 && u <= spec.qmax() as f64 {
        upstream
    } else {
        0.0
    }
}

/// `2^round(log2 s)` with ties rounded up.
pub fn snap_scale_pow2(s: f64) -> Result<f64> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::invalid(format!("scale must be finite and > 0, got {s}")));
    }
    Ok((s.log2() + 0.5).floor().exp2())
}

/// Smallest power-of-two scale whose range covers `max_abs` without
/// clipping; an all-zero tensor gets `2^0`.
pub fn init_log2_scale(max_abs: f64, n_bits: u32) -> i32 {
    if !(max_abs > 0.0) || !max_abs.is_finite() {
        return 0;
    }
    let qmax = ((1i64 << (n_bits - 1)) - 1) as f64;
    (max_abs / qmax).log2().ceil() as i32
}

/// Differentiable fake quantizer used inside the training tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QParam<T> {
    pub scale: T,
    pub qmin: T,
    pub qmax: T,
}

impl<T: Real> QParam<T> {
    pub fn new(n_bits: u32, scale: f64) -> Self {
        let qmax = ((1i64 << (n_bits - 1)) - 1) as f64;
        Self {
            scale: T::of(scale),
            qmin: T::of(-qmax - 1.0),
            qmax: T::of(qmax),
        }
    }

    pub fn from_spec(spec: &QuantSpec) -> Self {
        Self::new(spec.n_bits, spec.scale())
    }

    /// Forward value; `+ 0` maps a negative zero to `+0` like the integer path.
    #[inline]
    pub fn apply(&self, v: T) -> T {
        self.scale * (v / self.scale).max(self.qmin).min(self.qmax).round() + T::zero()
    }

    /// Returns `(dL/dv, dL/ds)` for the upstream gradient `g` at input `v`.
    #[inline]
    pub fn backward(&self, v: T, g: T) -> (T, T) {
        let u = v / self.scale;
        if u < self.qmin {
            (T::zero(), g * self.qmin)
        } else if u > self.qmax {
            (T::zero(), g * self.qmax)
        } else {
            (g, g * (u.round() - u))
        }
    }
}

/// Activation quantization points, in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QuantPoint {
    Phi,
    Mr,
    Mz,
    Mnphi,
    Mnh,
    R,
    Z,
    N,
    H,
    FcOut,
    TcnIn,
    Tcn1Pre,
    Tcn1Act,
    Tcn2Pre,
    TcnOut,
    Out,
}

impl QuantPoint {
    pub const ALL: [QuantPoint; 16] = [
        QuantPoint::Phi,
        QuantPoint::Mr,
        QuantPoint::Mz,
        QuantPoint::Mnphi,
        QuantPoint::Mnh,
        QuantPoint::R,
        QuantPoint::Z,
        QuantPoint::N,
        QuantPoint::H,
        QuantPoint::FcOut,
        QuantPoint::TcnIn,
        QuantPoint::Tcn1Pre,
        QuantPoint::Tcn1Act,
        QuantPoint::Tcn2Pre,
        QuantPoint::TcnOut,
        QuantPoint::Out,
    ];

    pub const COUNT: usize = 16;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_tcn(self) -> bool {
        matches!(
            self,
            QuantPoint::TcnIn | QuantPoint::Tcn1Pre | QuantPoint::Tcn1Act | QuantPoint::Tcn2Pre | QuantPoint::TcnOut
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantPoint::Phi => "phi",
            QuantPoint::Mr => "m_r",
            QuantPoint::Mz => "m_z",
            QuantPoint::Mnphi => "m_nphi",
            QuantPoint::Mnh => "m_nh",
            QuantPoint::R => "r",
            QuantPoint::Z => "z",
            QuantPoint::N => "n",
            QuantPoint::H => "h",
            QuantPoint::FcOut => "fc_out",
            QuantPoint::TcnIn => "tcn_in",
            QuantPoint::Tcn1Pre => "tcn1_pre",
            QuantPoint::Tcn1Act => "tcn1_act",
            QuantPoint::Tcn2Pre => "tcn2_pre",
            QuantPoint::TcnOut => "tcn_out",
            QuantPoint::Out => "out",
        }
    }
}

impl fmt::Display for QuantPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Arithmetic precision for reporting and energy accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Int16,
    Int12,
    Int8,
}

impl Precision {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(Precision::Fp32),
            16 => Ok(Precision::Int16),
            12 => Ok(Precision::Int12),
            8 => Ok(Precision::Int8),
            _ => Err(Error::invalid(format!("unsupported bit width {bits}"))),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Precision::Fp32 => 32,
            Precision::Int16 => 16,
            Precision::Int12 => 12,
            Precision::Int8 => 8,
        }
    }

    /// Word-width ratio against 32 bits.
    pub fn alpha(self) -> f64 {
        self.bits() as f64 / 32.0
    }
}

/// Weight/activation bit widths of a quantized model, e.g. `W12A12`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantModelConfig {
    pub weight_bits: u32,
    pub activation_bits: u32,
}

impl QuantModelConfig {
    pub const W16A16: Self = Self {
        weight_bits: 16,
        activation_bits: 16,
    };
    pub const W12A12: Self = Self {
        weight_bits: 12,
        activation_bits: 12,
    };
    pub const W12A8: Self = Self {
        weight_bits: 12,
        activation_bits: 8,
    };

    pub fn validate(&self) -> Result<()> {
        for b in [self.weight_bits, self.activation_bits] {
            if !SUPPORTED_BITS.contains(&b) {
                return Err(Error::invalid(format!(
                    "unsupported bit width {b}; expected one of {SUPPORTED_BITS:?}"
                )));
            }
        }
        Ok(())
    }

    /// Accumulator width for dot products: 32 bits while a full-scale
    /// product fits with headroom, 64 bits otherwise.
    pub fn accumulator_bits(&self) -> u32 {
        if self.weight_bits + self.activation_bits <= 24 {
            32
        } else {
            64
        }
    }

    pub fn label(&self) -> String {
        format!("W{}A{}", self.weight_bits, self.activation_bits)
    }
}

impl FromStr for QuantModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("expected a precision like W16A16, got `{s}`"));
        let up = s.trim().to_ascii_uppercase();
        let rest = up.strip_prefix('W').ok_or_else(bad)?;
        let (w, a) = rest.split_once('A').ok_or_else(bad)?;
        let cfg = Self {
            weight_bits: w.parse().map_err(|_| bad())?,
            activation_bits: a.parse().map_err(|_| bad())?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for QuantModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// One power-of-two scale per quantized tensor.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScaleTable {
    pub weights: BTreeMap<String, i32>,
    pub activations: BTreeMap<QuantPoint, i32>,
}

impl ScaleTable {
    pub fn weight_spec(&self, cfg: &QuantModelConfig, name: &str) -> Result<QuantSpec> {
        let k = self
            .weights
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no scale for weight `{name}`")))?;
        QuantSpec::new(cfg.weight_bits, *k)
    }

    pub fn act_spec(&self, cfg: &QuantModelConfig, p: QuantPoint) -> Result<QuantSpec> {
        let k = self
            .activations
            .get(&p)
            .ok_or_else(|| Error::invalid(format!("no scale for activation `{p}`")))?;
        QuantSpec::new(cfg.activation_bits, *k)
    }
}
