//! Declarative experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dpdlab_core::energy::{EnergyTable, PowerScenario};
use dpdlab_core::nn::{DeltaThresholds, ModelDims};
use dpdlab_core::train::{CascadeConfig, QatConfig, TrainConfig};
use dpdlab_core::{AcprConfig, Error, OfdmConfig, QuantModelConfig, Result, SplitRatios};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed: signal generation, model initialization and shuffling.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub pa_model: PaModelConfig,
    #[serde(default)]
    pub dpd: DpdConfig,
    #[serde(default)]
    pub quant: QatConfig,
    #[serde(default)]
    pub train: StageConfigs,
    #[serde(default)]
    pub cascade: CascadeSection,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub energy: EnergyConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Files source: directory with `input.csv`/`output.csv` or pre-split
    /// `{train,val,test}_{input,output}.csv`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Required for the files source; derived from `ofdm` otherwise.
    #[serde(default)]
    pub sample_rate_hz: Option<f64>,
    /// Generator settings; its `seed` is replaced by the master seed.
    #[serde(default)]
    pub ofdm: OfdmConfig,
    /// `"default"`, `"loopback"` (output = input), `"none"`, or a path to a
    /// memory-polynomial JSON file.
    #[serde(default = "default_oracle")]
    pub oracle: String,
    /// Additive output noise of the oracle, dBc.
    #[serde(default)]
    pub oracle_noise_dbc: Option<f64>,
    #[serde(default)]
    pub split: SplitRatios,
}

fn default_oracle() -> String {
    "default".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PaModelConfig {
    pub hidden_size: usize,
}

impl Default for PaModelConfig {
    fn default() -> Self {
        Self { hidden_size: 24 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpdConfig {
    pub hidden_size: usize,
    /// `None` drops the TCN residual path.
    pub tcn_dilation: Option<usize>,
    pub theta_phi: f64,
    pub theta_h: f64,
}

impl Default for DpdConfig {
    fn default() -> Self {
        let d = ModelDims::dpd(15);
        Self {
            hidden_size: d.hidden_size,
            tcn_dilation: d.tcn_dilation,
            theta_phi: 0.0,
            theta_h: 0.0,
        }
    }
}

impl DpdConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            tcn_dilation: self.tcn_dilation,
            ..ModelDims::dpd(self.hidden_size)
        }
    }

    pub fn thresholds(&self) -> Result<DeltaThresholds> {
        DeltaThresholds::new(self.theta_phi, self.theta_h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfigs {
    pub pa: TrainConfig,
    pub dpd: TrainConfig,
    pub qat: TrainConfig,
}

impl Default for StageConfigs {
    fn default() -> Self {
        let base = TrainConfig {
            epochs: 100,
            batch_size: 8,
            ..TrainConfig::default()
        };
        Self {
            pa: base.clone(),
            dpd: base.clone(),
            qat: TrainConfig { epochs: 10, ..base },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeSection {
    pub target_gain_re: f64,
    pub target_gain_im: f64,
    pub dense_warmup_epochs: usize,
}

impl Default for CascadeSection {
    fn default() -> Self {
        Self {
            target_gain_re: 1.0,
            target_gain_im: 0.0,
            dense_warmup_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Main channel edges; defaults to the generator's occupied band.
    pub acpr_main_lo_hz: Option<f64>,
    pub acpr_main_hi_hz: Option<f64>,
    /// Amplitude bins of the AM/AM and AM/PM plot data.
    pub am_bins: Option<usize>,
    /// Points written to the constellation plot data.
    pub constellation_points: Option<usize>,
}

/// Operating point for the power budget; `E_F` comes from the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub sample_rate_hz: f64,
    pub t_dpd_s: f64,
    pub p_adc_w: f64,
    pub n_sam: f64,
    pub n_epo: f64,
}

impl ScenarioConfig {
    pub fn to_scenario(&self) -> PowerScenario {
        PowerScenario {
            energy_per_forward_j: 0.0,
            sample_rate_hz: self.sample_rate_hz,
            t_dpd_s: self.t_dpd_s,
            p_adc_w: self.p_adc_w,
            n_sam: self.n_sam,
            n_epo: self.n_epo,
            backward_cost_ratio: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub table: EnergyTable,
    pub scenario: Option<ScenarioConfig>,
}

pub const SUPPORTED_SWEEP_BITS: [u32; 4] = [32, 16, 12, 8];

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingPrerequisite(format!("config {} does not exist", path.display()))
            } else {
                Error::InvalidArgument(format!("{}: {e}", path.display()))
            }
        })?;
        Self::parse(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    /// Applies the master seed everywhere it is consumed.
    pub fn resolve(mut self, seed: Option<u64>, deterministic: bool) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.dataset.ofdm.seed = self.seed;
        for (i, t) in [&mut self.train.pa, &mut self.train.dpd, &mut self.train.qat]
            .into_iter()
            .enumerate()
        {
            t.seed = self.seed.wrapping_add(i as u64);
            if deterministic {
                t.threads = Some(1);
            }
        }
        self
    }

    pub fn sample_rate_hz(&self) -> Result<f64> {
        match self.dataset.source {
            DatasetSource::Synthetic => Ok(self.dataset.ofdm.sample_rate_hz()),
            DatasetSource::Files => self
                .dataset
                .sample_rate_hz
                .ok_or_else(|| Error::invalid("dataset.sample_rate_hz is required for the files source")),
        }
    }

    pub fn acpr(&self) -> Result<AcprConfig> {
        let m = &self.metrics;
        match (m.acpr_main_lo_hz, m.acpr_main_hi_hz) {
            (Some(lo), Some(hi)) => Ok(AcprConfig::composite(lo, hi)),
            (None, None) => match self.dataset.source {
                DatasetSource::Synthetic => Ok(AcprConfig::for_ofdm(&self.dataset.ofdm)),
                DatasetSource::Files => Err(Error::invalid(
                    "metrics.acpr_main_lo_hz/acpr_main_hi_hz are required for the files source",
                )),
            },
            _ => Err(Error::invalid("set both metrics.acpr_main_lo_hz and acpr_main_hi_hz")),
        }
    }

    pub fn cascade(&self) -> Result<CascadeConfig> {
        Ok(CascadeConfig {
            target_gain: num_complex::Complex64::new(self.cascade.target_gain_re, self.cascade.target_gain_im),
            acpr: self.acpr()?,
            dense_warmup_epochs: self.cascade.dense_warmup_epochs,
        })
    }

    pub fn quant(&self) -> QuantModelConfig {
        self.quant.quant
    }

    /// Rejects anything a later stage would reject.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match d.source {
            DatasetSource::Synthetic => {
                d.ofdm.validate()?;
                if d.dir.is_some() || d.sample_rate_hz.is_some() {
                    return Err(Error::invalid(
                        "dataset.dir and dataset.sample_rate_hz apply to the files source only",
                    ));
                }
            }
            DatasetSource::Files => {
                if d.dir.is_none() {
                    return Err(Error::invalid("dataset.dir is required for the files source"));
                }
                let fs = self.sample_rate_hz()?;
                if !(fs.is_finite() && fs > 0.0) {
                    return Err(Error::invalid("dataset.sample_rate_hz must be positive"));
                }
            }
        }
        if let Some(n) = d.oracle_noise_dbc {
            if !n.is_finite() {
                return Err(Error::invalid("dataset.oracle_noise_dbc must be finite"));
            }
        }
        d.split.validate()?;
        ModelDims::pa(self.pa_model.hidden_size).validate()?;
        self.dpd.dims().validate()?;
        self.dpd.thresholds()?;
        self.quant.validate()?;
        for t in [&self.train.pa, &self.train.dpd, &self.train.qat] {
            t.validate()?;
        }
        let cascade = self.cascade()?;
        cascade.validate()?;
        cascade.acpr.validate(self.sample_rate_hz()?)?;
        if self.metrics.am_bins == Some(0) {
            return Err(Error::invalid("metrics.am_bins must be positive"));
        }
        self.energy.table.validate()?;
        if let Some(s) = &self.energy.scenario {
            PowerScenario {
                energy_per_forward_j: 1.0,
                ..s.to_scenario()
            }
            .validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "output_dir = \"out\"\n[dataset]\nsource = \"synthetic\"\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.dpd.dims(), ModelDims::dpd(15));
        assert_eq!(c.train.pa.batch_size, 8);
        assert_eq!(c.acpr().unwrap(), AcprConfig::for_ofdm(&OfdmConfig::default()));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}bogus = 1\n");
        assert!(ExperimentConfig::parse(&text).is_err());
        let text = format!("{MINIMAL}[train.pa]\nepoch = 3\n");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn seed_reaches_every_consumer() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap().resolve(Some(7), true);
        assert_eq!(c.dataset.ofdm.seed, 7);
        assert_eq!((c.train.pa.seed, c.train.dpd.seed, c.train.qat.seed), (7, 8, 9));
        assert_eq!(c.train.qat.threads, Some(1));
    }

    #[test]
    fn stage_errors_fail_fast() {
        for extra in [
            "[train.dpd]\nwarmup = 500\n",
            "[quant.quant]\nweight_bits = 10\nactivation_bits = 10\n",
            "[dpd]\ntheta_h = -1.0\n",
            "[metrics]\nacpr_main_lo_hz = -1e6\n",
            "[metrics]\nacpr_main_lo_hz = -4e6\nacpr_main_hi_hz = 4e6\n",
        ] {
            let c = ExperimentConfig::parse(&format!("{MINIMAL}{extra}")).unwrap();
            assert!(c.validate().is_err(), "{extra}");
        }
        let files = "output_dir = \"o\"\n[dataset]\nsource = \"files\"\ndir = \"d\"\n";
        assert!(ExperimentConfig::parse(files).unwrap().validate().is_err());
    }
}
