//! Model checkpoints: versioned JSON with named tensors and shape headers.
//!
//! Values are written as shortest round-trip decimals, so `f32` and `f64`
//! models reload bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{DeltaThresholds, ModelDims, TResDeltaGru};
use super::real::Real;
use crate::error::{Error, Result};
use crate::fsutil;

pub const MODEL_FORMAT: &str = "dpdlab-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub dims: ModelDims,
    pub thresholds: DeltaThresholds,
    pub tensors: Vec<TensorRecord>,
}

impl ModelFile {
    pub fn from_model<T: Real>(model: &TResDeltaGru<T>) -> Self {
        let tensors = model
            .tensors()
            .into_iter()
            .zip(model.tensor_shapes())
            .map(|((name, data), (_, shape))| TensorRecord {
                name: name.to_string(),
                shape,
                data: data.iter().map(|v| v.f64()).collect(),
            })
            .collect();
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_FORMAT_VERSION,
            dtype: T::NAME.into(),
            dims: model.dims(),
            thresholds: model.thresholds,
            tensors,
        }
    }

    pub fn to_model<T: Real>(&self) -> Result<TResDeltaGru<T>> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Format(format!("expected format {MODEL_FORMAT:?}, found {:?}", self.format)));
        }
        if self.version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format version {} (this build reads {MODEL_FORMAT_VERSION})",
                self.version
            )));
        }
        self.dims.validate()?;
        let mut model = TResDeltaGru::<T>::zeros(self.dims).with_thresholds(self.thresholds);
        let shapes = model.tensor_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} tensors, architecture needs {}",
                self.tensors.len(),
                shapes.len()
            )));
        }
        for (((name, dst), (_, shape)), rec) in model.tensors_mut().into_iter().zip(shapes).zip(&self.tensors) {
            if rec.name != name {
                return Err(Error::Format(format!("expected tensor {name}, found {}", rec.name)));
            }
            if rec.shape != shape || rec.data.len() != dst.len() {
                return Err(Error::shape(format!(
                    "{name}: shape {:?} with {} values, expected {shape:?}",
                    rec.shape,
                    rec.data.len()
                )));
            }
            for (d, &v) in dst.iter_mut().zip(&rec.data) {
                *d = T::of(v);
            }
        }
        model.validate()?;
        Ok(model)
    }
}

pub fn model_to_json<T: Real>(model: &TResDeltaGru<T>) -> Result<String> {
    serde_json::to_string_pretty(&ModelFile::from_model(model)).map_err(|e| Error::Format(e.to_string()))
}

pub fn model_from_json<T: Real>(text: &str) -> Result<TResDeltaGru<T>> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    file.to_model()
}

/// Writes a model checkpoint atomically.
pub fn save_model<T: Real>(model: &TResDeltaGru<T>, path: impl AsRef<Path>) -> Result<()> {
    fsutil::write_atomic(path, model_to_json(model)?.as_bytes())
}

pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<TResDeltaGru<T>> {
    let path = path.as_ref();
    model_from_json(&fsutil::read_to_string(path)?)
        .map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let m = TResDeltaGru::<f32>::init(ModelDims::dpd(15), 3)
            .with_thresholds(DeltaThresholds::new(0.0123, 0.2).unwrap());
        let back: TResDeltaGru<f32> = model_from_json(&model_to_json(&m).unwrap()).unwrap();
        for ((_, a), (_, b)) in m.tensors().iter().zip(back.tensors()) {
            let ab: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.thresholds, m.thresholds);
    }

    #[test]
    fn f64_round_trip_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/m.json");
        let m = TResDeltaGru::<f64>::init(ModelDims::pa(7), 9);
        save_model(&m, &p).unwrap();
        assert_eq!(load_model::<f64>(&p).unwrap(), m);
    }

    #[test]
    fn rejects_bad_headers() {
        let m = TResDeltaGru::<f64>::init(ModelDims::pa(2), 1);
        let mut f = ModelFile::from_model(&m);
        f.version = 99;
        assert!(matches!(f.to_model::<f64>(), Err(Error::Format(_))));
        let mut f = ModelFile::from_model(&m);
        f.tensors[1].shape = vec![5, 5];
        assert!(matches!(f.to_model::<f64>(), Err(Error::Shape(_))));
        assert!(matches!(load_model::<f64>("/nonexistent/x.json"), Err(Error::MissingPrerequisite(_))));
    }
}
