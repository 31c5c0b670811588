//! Desk-scale neural digital predistortion.
//!
//! The crate is organised bottom-up:
//!
//! * [`signal`]: IQ containers, CSV ingestion, an OFDM test-signal generator
//!   and DPD input features.
//! * [`pa`]: a memory-polynomial amplifier oracle.
//! * [`nn`]: dense GRU, DeltaGRU with temporal sparsity, the TCN residual
//!   path and BPTT.
//! * [`quant`]: fake quantization, power-of-two scales and a fixed-point
//!   inference path.
//! * [`train`]: PA modeling, cascaded DPD learning and quantization-aware
//!   fine-tuning.
//! * [`metrics`]: Welch PSD, ACPR, EVM and NMSE.
//! * [`energy`]: op counting, per-op energy tables and the DPD power budget.

pub mod energy;
pub mod error;
pub mod fsutil;
pub mod metrics;
pub mod nn;
pub mod pa;
pub mod quant;
pub mod signal;
pub mod train;

pub use error::{Error, Result};
pub use metrics::{acpr, evm, nmse, psd_welch, AcprConfig, AcprResult, Spectrum, Window};
pub use nn::{
    count_active_params, count_params, model_forward, DeltaState, DeltaThresholds, FcParams,
    GruParams, ModelStream, ParamCount, Real, SparsityReport, TResDeltaGru, TcnParams,
};
pub use pa::{default_test_pa, extract_am_curves, pa_apply, AmCurves, MemoryPolynomialPa};
pub use quant::{fake_quant, snap_scale_pow2, Precision, QuantModelConfig, QuantSpec};
pub use signal::{
    build_features, generate_ofdm, load_iq_csv, normalize_pair, papr, save_iq_csv, split_dataset,
    DatasetSplit, FeatureSequence, IQSequence, OfdmConfig, SignalPair, SplitRatios,
};
