//! PA modeling, cascaded DPD learning and quantization-aware fine-tuning.

use serde::{Deserialize, Serialize};

use super::engine::{QatState, Task, Trainer};
use super::{CascadeConfig, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::nn::{model_forward, ModelDims, Real, SparsityReport, TResDeltaGru};
use crate::quant::{calibrate_scales, fake_quant_forward, QuantModelConfig, QuantizedModel};
use crate::signal::{DatasetSplit, IQSequence};

/// Fits a behavioral PA model to measured `x → y` pairs.
///
/// Selection is always by validation loss. Zero epochs returns the
/// initialized model and an empty log.
pub fn train_pa_model<T: Real>(
    split: &DatasetSplit,
    dims: ModelDims,
    cfg: &TrainConfig,
) -> Result<(TResDeltaGru<T>, TrainLog)> {
    dims.validate()?;
    cfg.validate()?;
    let model = TResDeltaGru::<T>::init(dims, cfg.seed);
    if cfg.epochs == 0 {
        return Ok((model, TrainLog::default()));
    }
    let mut cfg = cfg.clone();
    cfg.selection_metric = super::SelectionMetric::ValLoss;
    let task = Task::Supervised {
        x: &split.train.input,
        y: &split.train.output,
        val_x: &split.val.input,
        val_y: &split.val.output,
    };
    let state = Trainer::new(task, cfg, model, None)?.run()?;
    Ok((state.best_model, state.log))
}

/// Trains `dpd` so that `pa(dpd(x)) ≈ G·x` with the PA model frozen.
pub fn train_dpd_cascade<T: Real>(
    pa: &TResDeltaGru<T>,
    dpd: TResDeltaGru<T>,
    cascade: &CascadeConfig,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(TResDeltaGru<T>, TrainLog)> {
    cfg.validate()?;
    cascade.validate()?;
    if cfg.epochs == 0 {
        return Ok((dpd, TrainLog::default()));
    }
    let frozen = pa.clone();
    let task = Task::Cascade {
        pa,
        x: &split.train.input,
        val_x: &split.val.input,
        cfg: cascade,
    };
    let state = Trainer::new(task, cfg.clone(), dpd, None)?.run()?;
    if *pa != frozen {
        return Err(Error::invalid("PA model changed during DPD training"));
    }
    Ok((state.best_model, state.log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QatConfig {
    pub quant: QuantModelConfig,
    pub train_scales: bool,
    pub scale_lr: f64,
}

impl Default for QatConfig {
    fn default() -> Self {
        Self {
            quant: QuantModelConfig::W16A16,
            train_scales: true,
            scale_lr: 1e-2,
        }
    }
}

impl QatConfig {
    pub fn validate(&self) -> Result<()> {
        self.quant.validate()?;
        if !(self.scale_lr.is_finite() && self.scale_lr >= 0.0) {
            return Err(Error::invalid("scale_lr must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QatResult {
    pub model: QuantizedModel,
    pub log: TrainLog,
}

/// Calibrates scales on the training input, then fine-tunes weights (and
/// optionally scales) through the fake-quantized cascade.
///
/// Zero epochs is plain post-training quantization.
pub fn train_qat<T: Real>(
    dpd: &TResDeltaGru<T>,
    pa: &TResDeltaGru<T>,
    qat: &QatConfig,
    cascade: &CascadeConfig,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<QatResult> {
    qat.validate()?;
    cfg.validate()?;
    let dpd64 = dpd.cast::<f64>();
    let table = calibrate_scales(&dpd64, qat.quant, &split.train.input)?;
    if cfg.epochs == 0 {
        return Ok(QatResult {
            model: QuantizedModel::new(&dpd64, qat.quant, table)?,
            log: TrainLog::default(),
        });
    }
    let state = QatState::new(qat.quant, table, qat.train_scales, qat.scale_lr);
    let task = Task::Cascade {
        pa,
        x: &split.train.input,
        val_x: &split.val.input,
        cfg: cascade,
    };
    let st = Trainer::new(task, cfg.clone(), dpd.clone(), Some(state))?.run()?;
    let scales = st
        .best_scales
        .ok_or_else(|| Error::invalid("QAT state lost its scale table"))?;
    Ok(QatResult {
        model: QuantizedModel::new(&st.best_model.cast::<f64>(), qat.quant, scales)?,
        log: st.log,
    })
}

#[derive(Debug, Clone)]
pub struct CascadeOutput {
    /// DPD output.
    pub u: IQSequence,
    /// PA-model output.
    pub y: IQSequence,
    pub sparsity: SparsityReport,
}

/// Streams `x` through the DPD (the fake-quantized model when `quant` is
/// given) and then through the dense PA model.
pub fn simulate_cascade<T: Real>(
    dpd: &TResDeltaGru<T>,
    quant: Option<&QuantizedModel>,
    pa: &TResDeltaGru<T>,
    x: &IQSequence,
) -> Result<CascadeOutput> {
    let (u, sparsity) = match quant {
        Some(qm) => {
            let tr = fake_quant_forward(qm, x)?;
            (tr.to_sequence(x.sample_rate_hz())?, tr.sparsity(qm.dims()))
        }
        None => model_forward(dpd, x)?,
    };
    let mut pa_dense = pa.clone();
    pa_dense.thresholds = crate::nn::DeltaThresholds::DENSE;
    let (y, _) = model_forward(&pa_dense, &u)?;
    Ok(CascadeOutput { u, y, sparsity })
}
