use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::real::{cast_vec, Real};
use crate::error::{Error, Result};
use crate::signal::FEATURE_WIDTH;

/// Channels of the first TCN layer.
pub const TCN_HIDDEN: usize = 3;
/// Kernel size of the first TCN layer.
pub const TCN_KERNEL: usize = 3;
/// I and Q.
pub const IQ: usize = 2;

/// GRU weights with a single bias per input-side gate plus `b_hn`.
///
/// Gate blocks are stacked `[r; z; n]`: `w_ih` is `3H×F` row-major,
/// `w_hh` is `3H×H`, `b_ih` holds `b_ir, b_iz, b_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<T> {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_ih: Vec<T>,
    pub w_hh: Vec<T>,
    pub b_ih: Vec<T>,
    pub b_hn: Vec<T>,
}

impl<T: Real> GruParams<T> {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let h3 = 3 * hidden_size;
        Self {
            input_size,
            hidden_size,
            w_ih: vec![T::zero(); h3 * input_size],
            w_hh: vec![T::zero(); h3 * hidden_size],
            b_ih: vec![T::zero(); h3],
            b_hn: vec![T::zero(); hidden_size],
        }
    }

    pub fn random(input_size: usize, hidden_size: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden_size as f64).sqrt();
        let mut p = Self::zeros(input_size, hidden_size);
        for v in p
            .w_ih
            .iter_mut()
            .chain(p.w_hh.iter_mut())
            .chain(p.b_ih.iter_mut())
            .chain(p.b_hn.iter_mut())
        {
            *v = T::of(rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn cast<U: Real>(&self) -> GruParams<U> {
        GruParams {
            input_size: self.input_size,
            hidden_size: self.hidden_size,
            w_ih: cast_vec(&self.w_ih),
            w_hh: cast_vec(&self.w_hh),
            b_ih: cast_vec(&self.b_ih),
            b_hn: cast_vec(&self.b_hn),
        }
    }

    pub fn num_weights(&self) -> usize {
        self.w_ih.len() + self.w_hh.len()
    }

    pub fn num_biases(&self) -> usize {
        self.b_ih.len() + self.b_hn.len()
    }
}

/// `û = W_y h + b_y`, `W_y` is `2×H` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FcParams<T> {
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> FcParams<T> {
    pub fn zeros(hidden_size: usize) -> Self {
        Self {
            w: vec![T::zero(); IQ * hidden_size],
            b: vec![T::zero(); IQ],
        }
    }

    pub fn random(hidden_size: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden_size as f64).sqrt();
        let mut p = Self::zeros(hidden_size);
        for v in p.w.iter_mut().chain(p.b.iter_mut()) {
            *v = T::of(rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn cast<U: Real>(&self) -> FcParams<U> {
        FcParams {
            w: cast_vec(&self.w),
            b: cast_vec(&self.b),
        }
    }
}

/// Two-layer residual TCN on the raw I/Q input.
///
/// Layer 1: `Conv1D(2→3, K=3, dilation D, padding D)`, layer 2:
/// `Conv1D(3→2, K=1)`, each followed by Hardswish. `w1` is `[out][in][k]`,
/// `w2` is `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnParams<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub dilation: usize,
}

impl<T: Real> TcnParams<T> {
    pub fn zeros(dilation: usize) -> Self {
        Self {
            w1: vec![T::zero(); TCN_HIDDEN * IQ * TCN_KERNEL],
            b1: vec![T::zero(); TCN_HIDDEN],
            w2: vec![T::zero(); IQ * TCN_HIDDEN],
            b2: vec![T::zero(); IQ],
            dilation,
        }
    }

    pub fn random(dilation: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(dilation);
        let b1 = 1.0 / ((IQ * TCN_KERNEL) as f64).sqrt();
        let b2 = 1.0 / (TCN_HIDDEN as f64).sqrt();
        for v in p.w1.iter_mut().chain(p.b1.iter_mut()) {
            *v = T::of(rng.random_range(-b1..=b1));
        }
        for v in p.w2.iter_mut().chain(p.b2.iter_mut()) {
            *v = T::of(rng.random_range(-b2..=b2));
        }
        p
    }

    #[inline]
    pub fn w1_at(&self, out: usize, inp: usize, k: usize) -> T {
        self.w1[(out * IQ + inp) * TCN_KERNEL + k]
    }

    pub fn cast<U: Real>(&self) -> TcnParams<U> {
        TcnParams {
            w1: cast_vec(&self.w1),
            b1: cast_vec(&self.b1),
            w2: cast_vec(&self.w2),
            b2: cast_vec(&self.b2),
            dilation: self.dilation,
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaThresholds {
    pub theta_phi: f64,
    pub theta_h: f64,
}

impl DeltaThresholds {
    pub const DENSE: Self = Self {
        theta_phi: 0.0,
        theta_h: 0.0,
    };

    pub fn new(theta_phi: f64, theta_h: f64) -> Result<Self> {
        let t = Self { theta_phi, theta_h };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_phi >= 0.0 && self.theta_h >= 0.0)
            || !self.theta_phi.is_finite()
            || !self.theta_h.is_finite()
        {
            return Err(Error::invalid(format!("delta thresholds must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }

    pub fn is_dense(&self) -> bool {
        self.theta_phi == 0.0 && self.theta_h == 0.0
    }
}

/// DeltaGRU + FC head, plus an optional TCN residual: `U = Û + TCN(X)`.
///
/// The PA behavioral model reuses this type without a TCN and with
/// zero thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct TResDeltaGru<T> {
    pub gru: GruParams<T>,
    pub fc: FcParams<T>,
    pub tcn: Option<TcnParams<T>>,
    pub thresholds: DeltaThresholds,
}

/// Architecture of a [`TResDeltaGru`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub input_size: usize,
    pub hidden_size: usize,
    /// TCN dilation, or `None` for no residual path.
    pub tcn_dilation: Option<usize>,
}

impl ModelDims {
    /// DPD default: `H = 15` with the `D = 16` TCN.
    pub fn dpd(hidden_size: usize) -> Self {
        Self {
            input_size: FEATURE_WIDTH,
            hidden_size,
            tcn_dilation: Some(16),
        }
    }

    /// PA behavioral model: dense GRU + FC, no TCN.
    pub fn pa(hidden_size: usize) -> Self {
        Self {
            input_size: FEATURE_WIDTH,
            hidden_size,
            tcn_dilation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.hidden_size == 0 {
            return Err(Error::invalid("input and hidden size must be positive"));
        }
        if self.tcn_dilation == Some(0) {
            return Err(Error::invalid("TCN dilation must be positive"));
        }
        Ok(())
    }
}

impl<T: Real> TResDeltaGru<T> {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            gru: GruParams::zeros(dims.input_size, dims.hidden_size),
            fc: FcParams::zeros(dims.hidden_size),
            tcn: dims.tcn_dilation.map(TcnParams::zeros),
            thresholds: DeltaThresholds::DENSE,
        }
    }

    /// Uniform `±1/√H` recurrent and head weights, `±1/√(C_in·K)` convolutions.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            gru: GruParams::random(dims.input_size, dims.hidden_size, &mut rng),
            fc: FcParams::random(dims.hidden_size, &mut rng),
            tcn: dims.tcn_dilation.map(|d| TcnParams::random(d, &mut rng)),
            thresholds: DeltaThresholds::DENSE,
        }
    }

    pub fn with_thresholds(mut self, thresholds: DeltaThresholds) -> Self {
        self.thresholds = thresholds;
        self
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_size: self.gru.input_size,
            hidden_size: self.gru.hidden_size,
            tcn_dilation: self.tcn.as_ref().map(|t| t.dilation),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.gru.hidden_size
    }

    pub fn input_size(&self) -> usize {
        self.gru.input_size
    }

    pub fn cast<U: Real>(&self) -> TResDeltaGru<U> {
        TResDeltaGru {
            gru: self.gru.cast(),
            fc: self.fc.cast(),
            tcn: self.tcn.as_ref().map(|t| t.cast()),
            thresholds: self.thresholds,
        }
    }

    /// A same-shaped model of zeros (gradient and moment buffers).
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims()).with_thresholds(self.thresholds)
    }

    /// Named flat tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        let mut out: Vec<(&'static str, &[T])> = vec![
            ("gru.w_ih", &self.gru.w_ih),
            ("gru.w_hh", &self.gru.w_hh),
            ("gru.b_ih", &self.gru.b_ih),
            ("gru.b_hn", &self.gru.b_hn),
            ("fc.w", &self.fc.w),
            ("fc.b", &self.fc.b),
        ];
        if let Some(t) = &self.tcn {
            out.extend([
                ("tcn.w1", t.w1.as_slice()),
                ("tcn.b1", t.b1.as_slice()),
                ("tcn.w2", t.w2.as_slice()),
                ("tcn.b2", t.b2.as_slice()),
            ]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Vec<T>)> {
        let mut out: Vec<(&'static str, &mut Vec<T>)> = vec![
            ("gru.w_ih", &mut self.gru.w_ih),
            ("gru.w_hh", &mut self.gru.w_hh),
            ("gru.b_ih", &mut self.gru.b_ih),
            ("gru.b_hn", &mut self.gru.b_hn),
            ("fc.w", &mut self.fc.w),
            ("fc.b", &mut self.fc.b),
        ];
        if let Some(t) = &mut self.tcn {
            out.extend([
                ("tcn.w1", &mut t.w1),
                ("tcn.b1", &mut t.b1),
                ("tcn.w2", &mut t.w2),
                ("tcn.b2", &mut t.b2),
            ]);
        }
        out
    }

    /// Shapes matching [`Self::tensors`].
    pub fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (f, h) = (self.gru.input_size, self.gru.hidden_size);
        let mut out = vec![
            ("gru.w_ih", vec![3 * h, f]),
            ("gru.w_hh", vec![3 * h, h]),
            ("gru.b_ih", vec![3 * h]),
            ("gru.b_hn", vec![h]),
            ("fc.w", vec![IQ, h]),
            ("fc.b", vec![IQ]),
        ];
        if self.tcn.is_some() {
            out.extend([
                ("tcn.w1", vec![TCN_HIDDEN, IQ, TCN_KERNEL]),
                ("tcn.b1", vec![TCN_HIDDEN]),
                ("tcn.w2", vec![IQ, TCN_HIDDEN, 1]),
                ("tcn.b2", vec![IQ]),
            ]);
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for (_, a) in self.tensors_mut() {
            for x in a.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| v.f64() * v.f64())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let (f, h) = (self.gru.input_size, self.gru.hidden_size);
        if f == 0 || h == 0 {
            return Err(Error::shape("zero-sized GRU"));
        }
        for ((name, t), (_, shape)) in self.tensors().iter().zip(self.tensor_shapes()) {
            let want: usize = shape.iter().product();
            if t.len() != want {
                return Err(Error::shape(format!("{name}: {} values, expected {want}", t.len())));
            }
        }
        if !self.all_finite() {
            return Err(Error::invalid("non-finite parameter"));
        }
        self.thresholds.validate()
    }
}

/// Parameter totals, weights plus biases for every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub gru_weights: usize,
    pub gru_biases: usize,
    pub gru_params: usize,
    pub fc_params: usize,
    pub tcn_params: usize,
    pub total: usize,
}

/// Counts every weight and bias. The GRU carries `3H` input-side biases
/// and `H` for `b_hn`, so `H = 15, F = 6` gives `945 + 60` GRU parameters.
pub fn count_params<T: Real>(model: &TResDeltaGru<T>) -> ParamCount {
    let gru_weights = model.gru.num_weights();
    let gru_biases = model.gru.num_biases();
    let fc_params = model.fc.w.len() + model.fc.b.len();
    let tcn_params = model.tcn.as_ref().map_or(0, |t| t.num_params());
    ParamCount {
        gru_weights,
        gru_biases,
        gru_params: gru_weights + gru_biases,
        fc_params,
        tcn_params,
        total: gru_weights + gru_biases + fc_params + tcn_params,
    }
}

/// `#GRU·(1−Γ) + #FC + #TCN`.
pub fn count_active_params<T: Real>(model: &TResDeltaGru<T>, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma must be in [0, 1], got {gamma}")));
    }
    let c = count_params(model);
    Ok(c.gru_params as f64 * (1.0 - gamma) + (c.fc_params + c.tcn_params) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_sized_counts() {
        let m = TResDeltaGru::<f64>::zeros(ModelDims::dpd(15));
        let c = count_params(&m);
        assert_eq!(c.gru_weights, 945);
        assert_eq!(c.gru_biases, 60);
        assert_eq!(c.fc_params, 32);
        assert_eq!(c.tcn_params, 29);
        assert_eq!(c.total, 1066);
    }

    #[test]
    fn tiny_counts() {
        let m = TResDeltaGru::<f64>::zeros(ModelDims {
            input_size: 1,
            hidden_size: 1,
            tcn_dilation: None,
        });
        assert_eq!(count_params(&m).gru_weights, 6);
        assert_eq!(count_params(&m).tcn_params, 0);
    }

    #[test]
    fn hidden_weights_quadruple() {
        for h in [3, 8, 15] {
            let a = TResDeltaGru::<f64>::zeros(ModelDims::dpd(h));
            let b = TResDeltaGru::<f64>::zeros(ModelDims::dpd(2 * h));
            assert_eq!(b.gru.w_hh.len(), 4 * a.gru.w_hh.len());
        }
    }

    #[test]
    fn active_params_limits() {
        let m = TResDeltaGru::<f64>::zeros(ModelDims::dpd(15));
        let full = count_params(&m);
        assert_eq!(count_active_params(&m, 0.0).unwrap(), full.total as f64);
        assert_eq!(count_active_params(&m, 1.0).unwrap(), 61.0);
        assert!(count_active_params(&m, 1.5).is_err());
        let at_op = count_active_params(&m, 0.56).unwrap();
        assert!((at_op - 1005.0 * 0.44 - 61.0).abs() < 1e-9);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = TResDeltaGru::<f32>::init(ModelDims::dpd(15), 3);
        assert_eq!(a, TResDeltaGru::<f32>::init(ModelDims::dpd(15), 3));
        assert_ne!(a, TResDeltaGru::<f32>::init(ModelDims::dpd(15), 4));
        let bound = 1.0 / 15f32.sqrt();
        assert!(a.gru.w_hh.iter().all(|w| w.abs() <= bound));
        a.validate().unwrap();
    }

    #[test]
    fn thresholds_reject_negative() {
        assert!(DeltaThresholds::new(-0.1, 0.0).is_err());
        assert!(DeltaThresholds::new(0.0, f64::NAN).is_err());
        assert!(DeltaThresholds::new(0.01, 0.05).is_ok());
    }
}
