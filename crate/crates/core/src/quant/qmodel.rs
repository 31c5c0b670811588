//! Quantized models: weights on their power-of-two grids, activation
//! scales, the fake-quant reference forward and the quantized checkpoint.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{fake_quant, init_log2_scale, QParam, QuantModelConfig, QuantPoint, QuantSpec, ScaleTable};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::nn::{frame_features, frame_halo, model_forward_tape, ActQuant, DeltaThresholds, ModelDims, ModelTape, Real, SparsityReport, StepStats, TResDeltaGru, IQ};
use crate::signal::IQSequence;

pub const QUANT_FORMAT: &str = "dpdlab-qmodel";
pub const QUANT_FORMAT_VERSION: u32 = 1;

/// A model whose weights lie exactly on their quantization grids.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub cfg: QuantModelConfig,
    pub scales: ScaleTable,
    pub model: TResDeltaGru<f64>,
}

/// Activation points used by a model of this shape.
fn points_for(has_tcn: bool) -> impl Iterator<Item = QuantPoint> {
    QuantPoint::ALL.into_iter().filter(move |p| has_tcn || !p.is_tcn())
}

impl QuantizedModel {
    /// Quantizes the weights of `model` with the scales in `scales`.
    pub fn new(model: &TResDeltaGru<f64>, cfg: QuantModelConfig, scales: ScaleTable) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        for p in points_for(model.tcn.is_some()) {
            scales.act_spec(&cfg, p)?;
        }
        let mut q = model.clone();
        for (name, vals) in q.tensors_mut() {
            let spec = scales.weight_spec(&cfg, name)?;
            for v in vals.iter_mut() {
                *v = fake_quant(*v, &spec);
            }
        }
        Ok(Self { cfg, scales, model: q })
    }

    /// Calibrates scales on `x` and quantizes.
    pub fn calibrate(model: &TResDeltaGru<f64>, cfg: QuantModelConfig, x: &IQSequence) -> Result<Self> {
        Self::new(model, cfg, calibrate_scales(model, cfg, x)?)
    }

    pub fn weight_spec(&self, name: &str) -> Result<QuantSpec> {
        self.scales.weight_spec(&self.cfg, name)
    }

    pub fn act_spec(&self, p: QuantPoint) -> Result<QuantSpec> {
        self.scales.act_spec(&self.cfg, p)
    }

    /// Integer-path inference: output sequence and measured sparsity.
    pub fn forward(&self, x: &IQSequence) -> Result<(IQSequence, SparsityReport)> {
        let tr = super::integer_forward(self, x)?;
        Ok((tr.to_sequence(x.sample_rate_hz())?, tr.sparsity(self.dims())))
    }

    pub fn dims(&self) -> ModelDims {
        self.model.dims()
    }

    /// Fake quantizers for the training tape.
    pub fn act_quant<T: Real>(&self) -> ActQuant<T> {
        act_quant_from(&self.scales, &self.cfg, self.model.tcn.is_some())
    }

    pub fn to_checkpoint(&self) -> Result<QuantizedCheckpoint> {
        let mut weights = Vec::new();
        for ((name, vals), (_, shape)) in self.model.tensors().into_iter().zip(self.model.tensor_shapes()) {
            let spec = self.weight_spec(name)?;
            weights.push(QuantTensor {
                name: name.to_string(),
                shape,
                n_bits: spec.n_bits,
                log2_scale: spec.log2_scale,
                codes: vals.iter().map(|&v| spec.quantize(v)).collect(),
            });
        }
        let mut activations = Vec::new();
        for p in points_for(self.model.tcn.is_some()) {
            let spec = self.act_spec(p)?;
            activations.push(ActScale {
                point: p.name().to_string(),
                n_bits: spec.n_bits,
                log2_scale: spec.log2_scale,
            });
        }
        Ok(QuantizedCheckpoint {
            format: QUANT_FORMAT.into(),
            version: QUANT_FORMAT_VERSION,
            weight_bits: self.cfg.weight_bits,
            activation_bits: self.cfg.activation_bits,
            dims: self.dims(),
            thresholds: self.model.thresholds,
            weights,
            activations,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint()?).map_err(|e| Error::Format(e.to_string()))?;
        fsutil::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fsutil::read_to_string(path)?;
        let ck: QuantizedCheckpoint =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        ck.to_model()
    }
}

pub(crate) fn act_quant_from<T: Real>(scales: &ScaleTable, cfg: &QuantModelConfig, has_tcn: bool) -> ActQuant<T> {
    let mut aq = ActQuant::default();
    for p in points_for(has_tcn) {
        if let Ok(spec) = scales.act_spec(cfg, p) {
            aq.set(p, QParam::from_spec(&spec));
        }
    }
    aq
}

/// Max-abs scale initialization: weights from the parameters, activations
/// from an unquantized forward over `x`.
pub fn calibrate_scales(model: &TResDeltaGru<f64>, cfg: QuantModelConfig, x: &IQSequence) -> Result<ScaleTable> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::EmptyDataset("calibration signal".into()));
    }
    let mut table = ScaleTable::default();
    for (name, vals) in model.tensors() {
        let m = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        table.weights.insert(name.to_string(), init_log2_scale(m, cfg.weight_bits));
    }
    let tr = run_tape(model, x, None);
    for p in points_for(model.tcn.is_some()) {
        let m = tr.get(p).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        table.activations.insert(p, init_log2_scale(m, cfg.activation_bits));
    }
    Ok(table)
}

/// Values at every quantization point over a sequence, in step-major
/// order, plus the model output.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTrace {
    pub points: Vec<Vec<f64>>,
    pub output: Vec<Complex64>,
    pub phi_updates: u64,
    pub h_updates: u64,
}

impl PointTrace {
    pub(crate) fn new(n: usize, f: usize, h: usize, has_tcn: bool) -> Self {
        let points = QuantPoint::ALL
            .iter()
            .map(|p| {
                let per_step = match p {
                    QuantPoint::Phi => f,
                    QuantPoint::FcOut | QuantPoint::Out | QuantPoint::TcnIn => IQ,
                    QuantPoint::Tcn1Pre | QuantPoint::Tcn1Act => crate::nn::TCN_HIDDEN,
                    QuantPoint::Tcn2Pre | QuantPoint::TcnOut => IQ,
                    _ => h,
                };
                let used = has_tcn || !p.is_tcn();
                Vec::with_capacity(if used { n * per_step } else { 0 })
            })
            .collect();
        Self {
            points,
            output: Vec::with_capacity(n),
            phi_updates: 0,
            h_updates: 0,
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, p: QuantPoint, v: f64) {
        self.points[p.index()].push(v);
    }

    pub fn get(&self, p: QuantPoint) -> &[f64] {
        &self.points[p.index()]
    }

    pub fn to_sequence(&self, sample_rate_hz: f64) -> Result<IQSequence> {
        IQSequence::new(self.output.clone(), sample_rate_hz)
    }

    /// Column sparsity of the run, from the update counters.
    pub fn sparsity(&self, dims: ModelDims) -> SparsityReport {
        let n = self.output.len() as u64;
        let (f, h) = (dims.input_size as u64, dims.hidden_size as u64);
        let stats = StepStats {
            phi_evaluated: self.phi_updates,
            phi_skipped: n * f - self.phi_updates,
            h_evaluated: self.h_updates,
            h_skipped: n * h - self.h_updates,
        };
        SparsityReport::from_stats(stats, n)
    }

    /// First quantization point where two traces differ, if any.
    pub fn first_mismatch(&self, other: &PointTrace) -> Option<(QuantPoint, usize)> {
        for p in QuantPoint::ALL {
            let (a, b) = (self.get(p), other.get(p));
            if a.len() != b.len() {
                return Some((p, a.len().min(b.len())));
            }
            if let Some(i) = a.iter().zip(b).position(|(x, y)| x.to_bits() != y.to_bits()) {
                return Some((p, i));
            }
        }
        None
    }
}

/// Fake-quant reference values seen by [`fake_quant_forward`].
pub type FakeQuantTrace = PointTrace;

fn run_tape(model: &TResDeltaGru<f64>, x: &IQSequence, aq: Option<&ActQuant<f64>>) -> PointTrace {
    let n = x.len();
    let feats = frame_features::<f64>(x.samples(), 0, n);
    let halo = model.tcn.as_ref().map(|t| frame_halo::<f64>(x.samples(), 0, n, t.dilation));
    let tape = model_forward_tape(model, &feats, halo.as_deref(), aq);
    collect(&tape, &feats, model, aq)
}

fn collect(tape: &ModelTape<f64>, feats: &[f64], model: &TResDeltaGru<f64>, aq: Option<&ActQuant<f64>>) -> PointTrace {
    let g = &tape.gru;
    let mut tr = PointTrace::new(g.steps, g.f, g.h, tape.tcn.is_some());
    let phi_q = |v: f64| aq.and_then(|a| a.get(QuantPoint::Phi)).map_or(v, |q| q.apply(v));
    tr.points[QuantPoint::Phi.index()] = feats.iter().map(|&v| phi_q(v)).collect();
    for t in 0..g.steps {
        for i in 0..g.h {
            let j = t * g.h + i;
            for (p, v) in [
                (QuantPoint::Mr, g.mr[j]),
                (QuantPoint::Mz, g.mz[j]),
                (QuantPoint::Mnphi, g.mnphi[j]),
                (QuantPoint::Mnh, g.mnh[j]),
                (QuantPoint::R, g.r[j]),
                (QuantPoint::Z, g.z[j]),
                (QuantPoint::N, g.n[j]),
                (QuantPoint::H, g.h_out[j]),
            ] {
                tr.push(p, v);
            }
        }
    }
    tr.points[QuantPoint::FcOut.index()] = g.fc.clone();
    if let (Some(tt), Some(tcn)) = (&tape.tcn, &model.tcn) {
        let d = tcn.dilation;
        for v in &tt.x[d..d + tt.len] {
            tr.push(QuantPoint::TcnIn, v[0]);
            tr.push(QuantPoint::TcnIn, v[1]);
        }
        for t in 0..tt.len {
            for c in 0..crate::nn::TCN_HIDDEN {
                tr.push(QuantPoint::Tcn1Pre, tt.a1[t][c]);
                tr.push(QuantPoint::Tcn1Act, tt.s1[t][c]);
            }
            for o in 0..IQ {
                tr.push(QuantPoint::Tcn2Pre, tt.a2[t][o]);
                tr.push(QuantPoint::TcnOut, tt.o[t][o]);
            }
        }
    }
    tr.points[QuantPoint::Out.index()] = tape.out.clone();
    tr.output = tape.out.chunks(IQ).map(|c| Complex64::new(c[0], c[1])).collect();
    tr.phi_updates = g.phi_updates;
    tr.h_updates = g.h_updates;
    tr
}

/// Fake-quant reference forward: the training tape in `f64` with every
/// quantizer active, over the whole sequence from a reset state.
pub fn fake_quant_forward(qm: &QuantizedModel, x: &IQSequence) -> Result<FakeQuantTrace> {
    if x.is_empty() {
        return Err(Error::EmptyDataset("fake_quant_forward input".into()));
    }
    let aq = qm.act_quant::<f64>();
    Ok(run_tape(&qm.model, x, Some(&aq)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub n_bits: u32,
    pub log2_scale: i32,
    pub codes: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActScale {
    pub point: String,
    pub n_bits: u32,
    pub log2_scale: i32,
}

/// Integer tensors with per-tensor `(n_bits, log2_scale)` headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizedCheckpoint {
    pub format: String,
    pub version: u32,
    pub weight_bits: u32,
    pub activation_bits: u32,
    pub dims: ModelDims,
    pub thresholds: DeltaThresholds,
    pub weights: Vec<QuantTensor>,
    pub activations: Vec<ActScale>,
}

impl QuantizedCheckpoint {
    pub fn to_model(&self) -> Result<QuantizedModel> {
        if self.format != QUANT_FORMAT {
            return Err(Error::Format(format!("expected format {QUANT_FORMAT:?}, found {:?}", self.format)));
        }
        if self.version != QUANT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported quantized format version {} (this build reads {QUANT_FORMAT_VERSION})",
                self.version
            )));
        }
        let cfg = QuantModelConfig {
            weight_bits: self.weight_bits,
            activation_bits: self.activation_bits,
        };
        cfg.validate()?;
        self.dims.validate()?;
        let mut model = TResDeltaGru::<f64>::zeros(self.dims).with_thresholds(self.thresholds);
        let shapes = model.tensor_shapes();
        if shapes.len() != self.weights.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} tensors, architecture needs {}",
                self.weights.len(),
                shapes.len()
            )));
        }
        let mut scales = ScaleTable::default();
        for (((name, dst), (_, shape)), rec) in model.tensors_mut().into_iter().zip(shapes).zip(&self.weights) {
            if rec.name != name {
                return Err(Error::Format(format!("expected tensor {name}, found {}", rec.name)));
            }
            if rec.shape != shape || rec.codes.len() != dst.len() {
                return Err(Error::shape(format!("{name}: shape {:?}, expected {shape:?}", rec.shape)));
            }
            if rec.n_bits != cfg.weight_bits {
                return Err(Error::Format(format!("{name}: {} bits, header says {}", rec.n_bits, cfg.weight_bits)));
            }
            let spec = QuantSpec::new(rec.n_bits, rec.log2_scale)?;
            for (d, &c) in dst.iter_mut().zip(&rec.codes) {
                if c < spec.qmin() || c > spec.qmax() {
                    return Err(Error::Format(format!("{name}: code {c} outside {}-bit range", rec.n_bits)));
                }
                *d = spec.dequantize(c);
            }
            scales.weights.insert(name.to_string(), rec.log2_scale);
        }
        for a in &self.activations {
            let p = QuantPoint::ALL
                .into_iter()
                .find(|p| p.name() == a.point)
                .ok_or_else(|| Error::Format(format!("unknown quantization point `{}`", a.point)))?;
            if a.n_bits != cfg.activation_bits {
                return Err(Error::Format(format!("{}: {} bits, header says {}", a.point, a.n_bits, cfg.activation_bits)));
            }
            scales.activations.insert(p, a.log2_scale);
        }
        QuantizedModel::new(&model, cfg, scales)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::integer_forward;
    use crate::signal::{generate_ofdm, OfdmConfig};

    fn setup(cfg: QuantModelConfig, th: DeltaThresholds) -> (QuantizedModel, IQSequence) {
        let x = generate_ofdm(&OfdmConfig {
            num_symbols: 1,
            ..OfdmConfig::default()
        })
        .unwrap();
        let x = x.slice(0, 300);
        let peak = x.max_magnitude();
        let x = x.scaled(Complex64::new(1.0 / peak, 0.0));
        let model = TResDeltaGru::<f64>::init(ModelDims::dpd(6), 4).with_thresholds(th);
        (QuantizedModel::calibrate(&model, cfg, &x).unwrap(), x)
    }

    #[test]
    fn weights_sit_on_their_grids() {
        let (qm, _) = setup(QuantModelConfig::W12A12, DeltaThresholds::DENSE);
        for (name, vals) in qm.model.tensors() {
            let s = qm.weight_spec(name).unwrap();
            for &v in vals {
                assert_eq!(fake_quant(v, &s), v, "{name}");
            }
        }
    }

    #[test]
    fn integer_matches_fake_quant_small() {
        for cfg in [QuantModelConfig::W16A16, QuantModelConfig::W12A12, QuantModelConfig::W12A8] {
            for th in [DeltaThresholds::DENSE, DeltaThresholds::new(0.01, 0.03).unwrap()] {
                let (qm, x) = setup(cfg, th);
                let a = fake_quant_forward(&qm, &x).unwrap();
                let b = integer_forward(&qm, &x).unwrap();
                assert_eq!(a.first_mismatch(&b), None, "{cfg} {th:?}");
                assert_eq!(a.output, b.output);
                assert_eq!((a.phi_updates, a.h_updates), (b.phi_updates, b.h_updates));
            }
        }
    }

    #[test]
    fn outputs_stay_in_clip_range() {
        let (qm, x) = setup(QuantModelConfig::W12A8, DeltaThresholds::DENSE);
        let s = qm.act_spec(QuantPoint::Out).unwrap();
        let tr = fake_quant_forward(&qm, &x).unwrap();
        for &v in tr.get(QuantPoint::Out) {
            assert!(v >= s.dequantize(s.qmin()) && v <= s.dequantize(s.qmax()));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (qm, _) = setup(QuantModelConfig::W12A12, DeltaThresholds::new(0.0, 0.05).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.json");
        qm.save(&p).unwrap();
        assert_eq!(QuantizedModel::load(&p).unwrap(), qm);
        let mut ck = qm.to_checkpoint().unwrap();
        ck.version = 7;
        assert!(matches!(ck.to_model(), Err(Error::Format(_))));
        let mut ck = qm.to_checkpoint().unwrap();
        ck.weights[0].codes[0] = 1 << 20;
        assert!(matches!(ck.to_model(), Err(Error::Format(_))));
    }

    #[test]
    fn missing_scale_is_an_error() {
        let (qm, _) = setup(QuantModelConfig::W16A16, DeltaThresholds::DENSE);
        let mut scales = qm.scales.clone();
        scales.activations.remove(&QuantPoint::Mz);
        assert!(QuantizedModel::new(&qm.model, qm.cfg, scales).is_err());
    }
}
