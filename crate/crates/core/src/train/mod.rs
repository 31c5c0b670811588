//! Three-stage training: PA behavioral modeling, cascaded DPD learning
//! through the frozen PA model, and quantization-aware fine-tuning.

mod engine;
mod optim;
mod stages;

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::metrics::AcprConfig;
use crate::nn::FrameRef;
use crate::signal::OfdmConfig;

pub use engine::{QatState, Task, TrainState, Trainer, TRAIN_STATE_FORMAT};
pub use optim::{adamw_step, reduce_on_plateau, AdamState, AdamWConfig, FlatAdam, PlateauConfig, PlateauScheduler};
pub use stages::{
    simulate_cascade, train_dpd_cascade, train_pa_model, train_qat, CascadeOutput, QatConfig, QatResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// ACPR of the simulated cascade on the validation signal.
    ValAcpr,
    ValLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub frame_length: usize,
    pub frame_stride: usize,
    /// Leading positions of each frame excluded from the loss.
    pub warmup: usize,
    pub optimizer: AdamWConfig,
    pub scheduler: PlateauConfig,
    pub seed: u64,
    /// Worker threads for batch gradients; `Some(1)` is strictly serial.
    /// Results do not depend on this setting.
    pub threads: Option<usize>,
    /// Global gradient-norm clip.
    pub grad_clip_norm: Option<f64>,
    pub selection_metric: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 240,
            lr: 5e-3,
            batch_size: 64,
            frame_length: 100,
            frame_stride: 50,
            warmup: 20,
            optimizer: AdamWConfig::default(),
            scheduler: PlateauConfig::default(),
            seed: 0,
            threads: None,
            grad_clip_norm: None,
            selection_metric: SelectionMetric::ValAcpr,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.frame_length < 2 {
            return Err(Error::invalid("frame_length must be at least 2"));
        }
        if self.frame_stride == 0 || self.batch_size == 0 {
            return Err(Error::invalid("frame_stride and batch_size must be positive"));
        }
        if self.warmup >= self.frame_length {
            return Err(Error::invalid("warmup must be shorter than the frame"));
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("threads must be positive"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("grad_clip_norm must be positive"));
            }
        }
        self.optimizer.validate()?;
        self.scheduler.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeConfig {
    /// Target gain `G` of the linearized cascade.
    pub target_gain: Complex64,
    /// Bands for validation ACPR.
    pub acpr: AcprConfig,
    /// Epochs trained with thresholds at zero before the model's own
    /// thresholds take effect.
    pub dense_warmup_epochs: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            target_gain: Complex64::new(1.0, 0.0),
            acpr: AcprConfig::for_ofdm(&OfdmConfig::default()),
            dense_warmup_epochs: 0,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_gain.norm() > 0.0) {
            return Err(Error::invalid("target gain must be non-zero"));
        }
        Ok(())
    }
}

/// Equal-length frames `[s, s + frame_length)` at `s = 0, stride, 2·stride, …`;
/// the tail that does not fill a frame is dropped.
pub fn frame_starts(len: usize, frame_length: usize, stride: usize) -> Result<Vec<FrameRef>> {
    if frame_length == 0 || stride == 0 {
        return Err(Error::invalid("frame length and stride must be positive"));
    }
    if frame_length > len {
        return Err(Error::invalid(format!(
            "frame length {frame_length} exceeds sequence length {len}"
        )));
    }
    Ok((0..=len - frame_length)
        .step_by(stride)
        .map(|start| FrameRef {
            start,
            len: frame_length,
        })
        .collect())
}

/// [`frame_starts`] grouped into batches of at most `batch_size` frames.
pub fn frame_batches(len: usize, frame_length: usize, stride: usize, batch_size: usize) -> Result<Vec<Vec<FrameRef>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    Ok(frame_starts(len, frame_length, stride)?
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_acpr: Option<f64>,
    pub lr: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// Training loss of the initial model.
    pub initial_train_mse: Option<f64>,
    pub epochs: Vec<EpochLog>,
    /// Epoch (1-based) of the selected model, `None` for the initial one.
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn final_train_mse(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_mse)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse,val_acpr,lr,gamma\n");
        for e in &self.epochs {
            let acpr = e.val_acpr.map_or(String::new(), |v| format!("{v}"));
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.train_mse, e.val_mse, acpr, e.lr, e.gamma
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fsutil::write_atomic(path, self.to_csv().as_bytes())
    }

    /// Appends one row, writing the header first for a new file.
    pub fn append_csv(path: impl AsRef<Path>, e: &EpochLog) -> Result<()> {
        let path = path.as_ref();
        let new = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|err| Error::io(path, err))?;
        let mut line = String::new();
        if new {
            line.push_str("epoch,train_mse,val_mse,val_acpr,lr,gamma\n");
        }
        let acpr = e.val_acpr.map_or(String::new(), |v| format!("{v}"));
        line.push_str(&format!("{},{},{},{},{},{}\n", e.epoch, e.train_mse, e.val_mse, acpr, e.lr, e.gamma));
        f.write_all(line.as_bytes()).map_err(|err| Error::io(path, err))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_examples() {
        let starts: Vec<usize> = frame_starts(10, 4, 2).unwrap().iter().map(|f| f.start).collect();
        assert_eq!(starts, vec![0, 2, 4, 6]);
        let starts: Vec<usize> = frame_starts(12, 4, 4).unwrap().iter().map(|f| f.start).collect();
        assert_eq!(starts, vec![0, 4, 8]);
        assert!(frame_starts(11, 4, 3).unwrap().iter().all(|f| f.len == 4 && f.start + 4 <= 11));
        assert!(frame_starts(3, 4, 1).is_err());
        let b = frame_batches(100, 10, 5, 4).unwrap();
        assert_eq!(b.iter().map(|v| v.len()).sum::<usize>(), 19);
        assert!(b[..b.len() - 1].iter().all(|v| v.len() == 4));
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.frame_length, c.frame_stride), (240, 64, 100, 50));
        assert!(c.validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { frame_length: 1, warmup: 0, ..c.clone() }.validate().is_err());
        assert!(CascadeConfig {
            target_gain: Complex64::new(0.0, 0.0),
            ..CascadeConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn csv_log_format() {
        let mut log = TrainLog::default();
        log.epochs.push(EpochLog {
            epoch: 1,
            train_mse: 0.5,
            val_mse: 0.25,
            val_acpr: None,
            lr: 5e-3,
            gamma: 0.0,
        });
        let csv = log.to_csv();
        assert_eq!(csv, "epoch,train_mse,val_mse,val_acpr,lr,gamma\n1,0.5,0.25,,0.005,0\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        TrainLog::append_csv(&p, &log.epochs[0]).unwrap();
        TrainLog::append_csv(&p, &log.epochs[0]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
    }
}
