//! Dataset loading, normalization and the oracle PA.

use std::path::{Path, PathBuf};

use num_complex::Complex64;

use dpdlab_core::pa::{default_test_pa, pa_apply, MemoryPolynomialPa};
use dpdlab_core::signal::{load_dataset_dir, load_iq_csv, SignalPair};
use dpdlab_core::{split_dataset, DatasetSplit, Error, IQSequence, Result};

use crate::config::{DatasetSource, ExperimentConfig};

pub enum Oracle {
    Pa(MemoryPolynomialPa),
    Loopback,
}

impl Oracle {
    pub fn apply(&self, x: &IQSequence) -> IQSequence {
        match self {
            Oracle::Pa(pa) => pa_apply(pa, x),
            Oracle::Loopback => x.clone(),
        }
    }
}

pub fn oracle(cfg: &ExperimentConfig) -> Result<Option<Oracle>> {
    let d = &cfg.dataset;
    let o = match d.oracle.as_str() {
        "none" => return Ok(None),
        "loopback" => Oracle::Loopback,
        "default" => Oracle::Pa(default_test_pa(cfg.seed).with_noise(d.oracle_noise_dbc, cfg.seed)),
        path => Oracle::Pa(MemoryPolynomialPa::load_json(path)?.with_noise(d.oracle_noise_dbc, cfg.seed)),
    };
    Ok(Some(o))
}

pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("data")
}

/// Normalized dataset plus what is needed to drive the oracle with it.
pub struct Data {
    pub split: DatasetSplit,
    pub scale_x: f64,
    pub scale_y: f64,
    pub oracle: Option<Oracle>,
}

impl Data {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let fs = cfg.sample_rate_hz()?;
        let raw = match cfg.dataset.source {
            DatasetSource::Synthetic => {
                let dir = data_dir(cfg);
                let x = load_iq_csv(require(&dir.join("input.csv"), "gen-data")?, fs)?;
                let y = load_iq_csv(require(&dir.join("output.csv"), "gen-data")?, fs)?;
                split_dataset(&x, &y, cfg.dataset.split)?
            }
            DatasetSource::Files => {
                let dir = cfg.dataset.dir.as_ref().expect("validated");
                if !dir.is_dir() {
                    return Err(Error::MissingPrerequisite(format!(
                        "dataset directory {} does not exist",
                        dir.display()
                    )));
                }
                load_dataset_dir(dir, fs, cfg.dataset.split)?
            }
        };
        let peak = |f: fn(&SignalPair) -> &IQSequence| {
            [&raw.train, &raw.val, &raw.test]
                .iter()
                .map(|p| f(p).max_magnitude())
                .fold(0.0, f64::max)
        };
        let (px, py) = (peak(|p| &p.input), peak(|p| &p.output));
        if px == 0.0 || py == 0.0 {
            return Err(Error::invalid("dataset input or output is all zero"));
        }
        let norm = |p: &SignalPair| SignalPair {
            input: p.input.scaled(Complex64::from(1.0 / px)),
            output: p.output.scaled(Complex64::from(1.0 / py)),
        };
        Ok(Self {
            split: DatasetSplit {
                train: norm(&raw.train),
                val: norm(&raw.val),
                test: norm(&raw.test),
            },
            scale_x: px,
            scale_y: py,
            oracle: oracle(cfg)?,
        })
    }

    /// Oracle response to a normalized drive signal, in normalized units.
    pub fn through_oracle(&self, u: &IQSequence) -> Option<IQSequence> {
        self.oracle.as_ref().map(|o| {
            o.apply(&u.scaled(Complex64::from(self.scale_x)))
                .scaled(Complex64::from(1.0 / self.scale_y))
        })
    }
}

/// `path` if it exists, otherwise an error naming it and the command that
/// produces it.
pub fn require<'a>(path: &'a Path, producer: &str) -> Result<&'a Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingPrerequisite(format!(
            "{} does not exist; run `dpdlab {producer}` first",
            path.display()
        )))
    }
}
