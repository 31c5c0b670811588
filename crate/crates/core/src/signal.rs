//! Baseband signal containers, CSV ingestion, the desk-scale OFDM generator,
//! normalization, and construction of the six-wide DPD input features.

use std::fs::File;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of one feature row: `[I_t, Q_t, I_{t+1}, Q_{t+1}, |x_t|, |x_t|^3]`.
pub const FEATURE_WIDTH: usize = 6;

/// Complex baseband samples at a fixed sample rate.
///
/// Samples are always finite. Sequences produced by [`split_dataset`] may be
/// empty (e.g. a zero-width validation split); every operation that needs
/// data checks for that itself.
#[derive(Debug, Clone, PartialEq)]
pub struct IQSequence {
    samples: Vec<Complex64>,
    sample_rate_hz: f64,
}

impl IQSequence {
    pub fn new(samples: Vec<Complex64>, sample_rate_hz: f64) -> Result<Self> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::invalid(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if let Some(i) = samples.iter().position(|s| !(s.re.is_finite() && s.im.is_finite())) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }

    pub fn max_magnitude(&self) -> f64 {
        self.samples.iter().map(|s| s.norm()).fold(0.0, f64::max)
    }

    /// Contiguous sub-range `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> IQSequence {
        IQSequence {
            samples: self.samples[start..end].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// Multiply every sample by a complex factor.
    pub fn scaled(&self, factor: Complex64) -> IQSequence {
        IQSequence {
            samples: self.samples.iter().map(|s| s * factor).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// Same sample rate, new samples. The caller guarantees finiteness.
    pub(crate) fn with_samples(&self, samples: Vec<Complex64>) -> IQSequence {
        debug_assert!(samples.iter().all(|s| s.re.is_finite() && s.im.is_finite()));
        IQSequence {
            samples,
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// Read a two-column `I,Q` CSV file. A single `I,Q` header line is optional.
pub fn load_iq_csv(path: impl AsRef<Path>, sample_rate_hz: f64) -> Result<IQSequence> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut samples = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx as u64 + 1;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if idx == 0 && record.len() == 2 && &record[0] == "I" && &record[1] == "Q" {
            continue;
        }
        if record.len() != 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected 2 columns (I,Q), found {}", record.len()),
            });
        }
        let parse = |field: &str| -> Result<f64> {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("`{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("`{field}` is not finite"),
                });
            }
            Ok(v)
        };
        samples.push(Complex64::new(parse(&record[0])?, parse(&record[1])?));
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    IQSequence::new(samples, sample_rate_hz)
}

/// Write `I,Q` CSV with a header. Values use the shortest decimal form that
/// parses back to the identical `f64`.
pub fn save_iq_csv(path: impl AsRef<Path>, seq: &IQSequence) -> Result<()> {
    let mut text = String::with_capacity(seq.samples.len() * 40 + 4);
    text.push_str("I,Q\n");
    for s in &seq.samples {
        let _ = writeln!(text, "{},{}", s.re, s.im);
    }
    crate::fsutil::write_atomic(path, text.as_bytes())
}

/// Parameters of the synthetic multicarrier QAM test signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfdmConfig {
    pub num_channels: usize,
    pub channel_bw_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub qam_order: usize,
    pub num_symbols: usize,
    /// Sample rate divided by the composite bandwidth.
    pub oversample_ratio: f64,
    pub seed: u64,
    /// Fraction of each channel carrying subcarriers; the rest is guard band.
    #[serde(default = "default_occupied_fraction")]
    pub occupied_fraction: f64,
}

fn default_occupied_fraction() -> f64 {
    0.9
}

impl Default for OfdmConfig {
    /// Five 0.4 MHz channels sampled at 9.8304 MHz, 256-QAM.
    fn default() -> Self {
        Self {
            num_channels: 5,
            channel_bw_hz: 0.4e6,
            subcarrier_spacing_hz: 9.6e3,
            qam_order: 256,
            num_symbols: 120,
            oversample_ratio: 4.9152,
            seed: 2024,
            occupied_fraction: default_occupied_fraction(),
        }
    }
}

impl OfdmConfig {
    pub fn sample_rate_hz(&self) -> f64 {
        self.num_channels as f64 * self.channel_bw_hz * self.oversample_ratio
    }

    pub fn occupied_bw_hz(&self) -> f64 {
        self.num_channels as f64 * self.channel_bw_hz
    }

    pub fn fft_size(&self) -> usize {
        (self.sample_rate_hz() / self.subcarrier_spacing_hz).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let is_pow4 = |m: usize| m >= 4 && m.is_power_of_two() && m.trailing_zeros() % 2 == 0;
        if !is_pow4(self.qam_order) {
            return Err(Error::invalid(format!(
                "qam_order must be a power of 4, got {}",
                self.qam_order
            )));
        }
        if self.num_channels == 0 || self.num_symbols == 0 {
            return Err(Error::invalid("num_channels and num_symbols must be >= 1"));
        }
        if !(self.oversample_ratio >= 1.0) {
            return Err(Error::invalid("oversample_ratio must be >= 1"));
        }
        if !(self.channel_bw_hz > 0.0 && self.subcarrier_spacing_hz > 0.0) {
            return Err(Error::invalid("bandwidths must be positive"));
        }
        if !(self.occupied_fraction > 0.0 && self.occupied_fraction <= 1.0) {
            return Err(Error::invalid("occupied_fraction must be in (0, 1]"));
        }
        if self.fft_size() < 2 * self.num_channels {
            return Err(Error::invalid("subcarrier spacing too coarse for the band"));
        }
        Ok(())
    }

    /// Whether baseband frequency `f` lies on an occupied part of some channel.
    fn is_occupied(&self, f: f64) -> bool {
        let half = 0.5 * self.occupied_fraction * self.channel_bw_hz;
        let n = self.num_channels as f64;
        (0..self.num_channels).any(|c| {
            let center = (c as f64 - (n - 1.0) / 2.0) * self.channel_bw_hz;
            (f - center).abs() <= half
        })
    }
}

/// Unit-average-power square QAM constellation.
fn qam_constellation(order: usize) -> Vec<Complex64> {
    let side = (order as f64).sqrt().round() as usize;
    let levels: Vec<f64> = (0..side).map(|i| 2.0 * i as f64 - (side as f64 - 1.0)).collect();
    let mean_power = 2.0 * levels.iter().map(|l| l * l).sum::<f64>() / side as f64;
    let norm = mean_power.sqrt();
    levels
        .iter()
        .flat_map(|&i| levels.iter().map(move |&q| Complex64::new(i / norm, q / norm)))
        .collect()
}

/// Generate a multicarrier QAM signal, peak-normalized to `max|x| = 1`.
///
/// Random QAM symbols fill the occupied subcarriers of each channel. Symbols
/// are synthesized by an IFFT sized to the output rate and concatenated
/// without cyclic prefix; the whole record is then band-limited by zeroing
/// every out-of-band bin of its DFT, so the result is exactly periodic and
/// free of symbol-boundary spectral splatter.
pub fn generate_ofdm(cfg: &OfdmConfig) -> Result<IQSequence> {
    cfg.validate()?;
    let fs = cfg.sample_rate_hz();
    let n_fft = cfg.fft_size();
    let constellation = qam_constellation(cfg.qam_order);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut planner = FftPlanner::<f64>::new();

    let bin_freq = |k: usize, n: usize, rate: f64| {
        let signed = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
        signed * rate / n as f64
    };
    let occupied: Vec<usize> = (0..n_fft)
        .filter(|&k| cfg.is_occupied(bin_freq(k, n_fft, fs)))
        .collect();

    let ifft = planner.plan_fft_inverse(n_fft);
    let mut signal = Vec::with_capacity(n_fft * cfg.num_symbols);
    let mut symbol = vec![Complex64::new(0.0, 0.0); n_fft];
    for _ in 0..cfg.num_symbols {
        symbol.iter_mut().for_each(|s| *s = Complex64::new(0.0, 0.0));
        for &k in &occupied {
            symbol[k] = constellation[rng.random_range(0..constellation.len())];
        }
        ifft.process(&mut symbol);
        signal.extend_from_slice(&symbol);
    }

    let total = signal.len();
    planner.plan_fft_forward(total).process(&mut signal);
    for (k, bin) in signal.iter_mut().enumerate() {
        if !cfg.is_occupied(bin_freq(k, total, fs)) {
            *bin = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(total).process(&mut signal);

    let peak = signal.iter().map(|s| s.norm()).fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::invalid("generator produced an all-zero signal"));
    }
    signal.iter_mut().for_each(|s| *s /= peak);
    IQSequence::new(signal, fs)
}

/// Peak-to-average power ratio in dB.
pub fn papr(x: &IQSequence) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::EmptyDataset("papr of empty sequence".into()));
    }
    let mean = x.mean_power();
    if mean == 0.0 {
        return Err(Error::invalid("papr of an all-zero signal"));
    }
    let peak = x.samples.iter().map(|s| s.norm_sqr()).fold(0.0, f64::max);
    Ok(10.0 * (peak / mean).log10())
}

/// Input/output pair normalized by their own peak magnitudes.
#[derive(Debug, Clone)]
pub struct NormalizedPair {
    pub x: IQSequence,
    pub y: IQSequence,
    pub scale_x: f64,
    pub scale_y: f64,
}

fn peak_normalize(s: &IQSequence, name: &str) -> Result<(IQSequence, f64)> {
    if s.is_empty() {
        return Err(Error::EmptyDataset(format!("{name} is empty")));
    }
    let peak = s.max_magnitude();
    if peak == 0.0 {
        return Err(Error::invalid(format!("{name} is all zero")));
    }
    Ok((s.with_samples(s.samples.iter().map(|v| v / peak).collect()), peak))
}

pub fn normalize_pair(x: &IQSequence, y: &IQSequence) -> Result<NormalizedPair> {
    let (xn, scale_x) = peak_normalize(x, "input")?;
    let (yn, scale_y) = peak_normalize(y, "output")?;
    Ok(NormalizedPair {
        x: xn,
        y: yn,
        scale_x,
        scale_y,
    })
}

pub fn denormalize(x: &IQSequence, scale: f64) -> IQSequence {
    x.with_samples(x.samples.iter().map(|v| v * scale).collect())
}

/// Per-step DPD input features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub rows: Vec<[f64; FEATURE_WIDTH]>,
    pub sample_rate_hz: f64,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Feature row for sample `cur` with one-sample lookahead `next`.
#[inline]
pub fn feature_row(cur: Complex64, next: Complex64) -> [f64; FEATURE_WIDTH] {
    let mag = cur.norm();
    [cur.re, cur.im, next.re, next.im, mag, mag * mag * mag]
}

/// Rows `[I_t, Q_t, I_{t+1}, Q_{t+1}, |x_t|, |x_t|^3]`; the final row reuses
/// the last sample as its own lookahead.
pub fn build_features(x: &IQSequence) -> Result<FeatureSequence> {
    if x.len() < 2 {
        return Err(Error::invalid(format!(
            "feature construction needs at least 2 samples, got {}",
            x.len()
        )));
    }
    Ok(FeatureSequence {
        rows: features_of(&x.samples),
        sample_rate_hz: x.sample_rate_hz,
    })
}

/// Feature rows of a raw sample slice (same lookahead rule, no length check).
pub fn features_of(samples: &[Complex64]) -> Vec<[f64; FEATURE_WIDTH]> {
    let n = samples.len();
    (0..n)
        .map(|t| feature_row(samples[t], samples[(t + 1).min(n - 1)]))
        .collect()
}

/// Fractions for the train/validation/test partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid("split ratios must lie in [0, 1]"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split ratios must sum to 1"));
        }
        Ok(())
    }
}

/// Aligned PA input/output sequences.
#[derive(Debug, Clone)]
pub struct SignalPair {
    pub input: IQSequence,
    pub output: IQSequence,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: SignalPair,
    pub val: SignalPair,
    pub test: SignalPair,
}

/// Contiguous `train | val | test` partition. Validation and test sizes are
/// rounded down; the remainder goes to training.
pub fn split_dataset(x: &IQSequence, y: &IQSequence, ratios: SplitRatios) -> Result<DatasetSplit> {
    ratios.validate()?;
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "input has {} samples, output has {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    let n_val = (ratios.val * n as f64 + 1e-9).floor() as usize;
    let n_test = (ratios.test * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    let pair = |a: usize, b: usize| SignalPair {
        input: x.slice(a, b),
        output: y.slice(a, b),
    };
    Ok(DatasetSplit {
        train: pair(0, n_train),
        val: pair(n_train, n_train + n_val),
        test: pair(n_train + n_val, n),
    })
}

/// Load a dataset directory: either pre-split
/// `{train,val,test}_{input,output}.csv` files, or a single
/// `input.csv`/`output.csv` pair split with `ratios`.
pub fn load_dataset_dir(
    dir: impl AsRef<Path>,
    sample_rate_hz: f64,
    ratios: SplitRatios,
) -> Result<DatasetSplit> {
    let dir = dir.as_ref();
    if dir.join("train_input.csv").exists() {
        let load_pair = |name: &str| -> Result<SignalPair> {
            let input = load_iq_csv(dir.join(format!("{name}_input.csv")), sample_rate_hz)?;
            let output = load_iq_csv(dir.join(format!("{name}_output.csv")), sample_rate_hz)?;
            if input.len() != output.len() {
                return Err(Error::shape(format!(
                    "{name}: input has {} samples, output has {}",
                    input.len(),
                    output.len()
                )));
            }
            Ok(SignalPair { input, output })
        };
        return Ok(DatasetSplit {
            train: load_pair("train")?,
            val: load_pair("val")?,
            test: load_pair("test")?,
        });
    }
    let x = load_iq_csv(dir.join("input.csv"), sample_rate_hz)?;
    let y = load_iq_csv(dir.join("output.csv"), sample_rate_hz)?;
    split_dataset(&x, &y, ratios)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(v: &[(f64, f64)]) -> IQSequence {
        IQSequence::new(v.iter().map(|&(i, q)| Complex64::new(i, q)).collect(), 1.0).unwrap()
    }

    #[test]
    fn csv_parses_rows_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "0.1,0.2\n0.3,-0.4\n").unwrap();
        let s = load_iq_csv(&p, 1e6).unwrap();
        assert_eq!(s.samples(), &[Complex64::new(0.1, 0.2), Complex64::new(0.3, -0.4)]);
        assert_eq!(s.sample_rate_hz(), 1e6);
    }

    #[test]
    fn csv_header_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "I,Q\n1,2\n").unwrap();
        assert_eq!(load_iq_csv(&p, 1.0).unwrap().len(), 1);
    }

    #[test]
    fn csv_empty_file_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "").unwrap();
        let err = load_iq_csv(&p, 1.0).unwrap_err();
        assert!(err.to_string().contains("empty dataset"), "{err}");
    }

    #[test]
    fn csv_single_column_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "0.1\n").unwrap();
        match load_iq_csv(&p, 1.0).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            e => panic!("unexpected {e}"),
        }
        std::fs::write(&p, "I,Q\n1,2\n3,x\n").unwrap();
        match load_iq_csv(&p, 1.0).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn csv_missing_file() {
        assert!(matches!(load_iq_csv("/nonexistent/x.csv", 1.0), Err(Error::Io { .. })));
    }

    #[test]
    fn ofdm_is_deterministic() {
        let cfg = OfdmConfig {
            num_channels: 1,
            qam_order: 4,
            num_symbols: 4,
            ..OfdmConfig::default()
        };
        let a = generate_ofdm(&cfg).unwrap();
        let b = generate_ofdm(&cfg).unwrap();
        assert_eq!(a, b);
        assert!((a.max_magnitude() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ofdm_rejects_bad_qam() {
        let cfg = OfdmConfig {
            qam_order: 8,
            ..OfdmConfig::default()
        };
        assert!(generate_ofdm(&cfg).is_err());
    }

    #[test]
    fn papr_small_cases() {
        let tone: Vec<Complex64> =
            (0..64).map(|t| Complex64::from_polar(0.7, 0.3 * t as f64)).collect();
        let p = papr(&IQSequence::new(tone, 1.0).unwrap()).unwrap();
        assert!(p.abs() < 1e-12, "{p}");
        let two = seq(&[(1.0, 0.0), (3f64.sqrt(), 0.0)]);
        assert!((papr(&two).unwrap() - 10.0 * 1.5f64.log10()).abs() < 1e-12);
        assert!(papr(&seq(&[(0.0, 0.0)])).is_err());
    }

    #[test]
    fn normalize_by_peak() {
        let x = seq(&[(2.0, 0.0), (0.0, 1.0)]);
        let y = seq(&[(0.5, 0.0), (0.0, 1.0)]);
        let n = normalize_pair(&x, &y).unwrap();
        assert_eq!(n.scale_x, 2.0);
        assert_eq!(n.scale_y, 1.0);
        assert_eq!(n.x.samples()[0], Complex64::new(1.0, 0.0));
        assert_eq!(n.y, y);
        let back = denormalize(&n.x, n.scale_x);
        for (a, b) in back.samples().iter().zip(x.samples()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(normalize_pair(&seq(&[(0.0, 0.0)]), &y).is_err());
    }

    #[test]
    fn feature_rows() {
        let f = build_features(&seq(&[(1.0, 0.0), (0.0, 1.0)])).unwrap();
        assert_eq!(f.rows[0], [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        // last row replicates itself as lookahead
        assert_eq!(f.rows[1], [0.0, 1.0, 0.0, 1.0, 1.0, 1.0]);

        let f = build_features(&seq(&[(0.0, 0.0), (0.5, 0.5)])).unwrap();
        assert_eq!(f.rows[0][4], 0.0);
        assert_eq!(f.rows[0][5], 0.0);

        let f = build_features(&seq(&[(0.6, 0.8), (0.1, 0.1)])).unwrap();
        assert!((f.rows[0][4] - 1.0).abs() < 1e-15);
        assert!((f.rows[0][5] - 1.0).abs() < 1e-15);

        assert!(build_features(&seq(&[(1.0, 0.0)])).is_err());
    }

    #[test]
    fn split_sizes() {
        let mk = |n: usize| {
            IQSequence::new(vec![Complex64::new(1.0, 0.0); n], 1.0).unwrap()
        };
        let x = mk(98_304);
        let s = split_dataset(&x, &x, SplitRatios::default()).unwrap();
        assert_eq!((s.train.input.len(), s.val.input.len(), s.test.input.len()), (58_984, 19_660, 19_660));

        let x = mk(10);
        let s = split_dataset(&x, &x, SplitRatios::default()).unwrap();
        assert_eq!((s.train.input.len(), s.val.input.len(), s.test.input.len()), (6, 2, 2));

        let all = SplitRatios { train: 1.0, val: 0.0, test: 0.0 };
        let s = split_dataset(&x, &x, all).unwrap();
        assert_eq!(s.train.input.len(), 10);
        assert!(s.val.input.is_empty() && s.test.input.is_empty());

        assert!(split_dataset(&mk(10), &mk(9), SplitRatios::default()).is_err());
    }

    #[test]
    fn dataset_dir_both_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let x = seq(&(0..10).map(|i| (i as f64, 0.0)).collect::<Vec<_>>());
        save_iq_csv(dir.path().join("input.csv"), &x).unwrap();
        save_iq_csv(dir.path().join("output.csv"), &x).unwrap();
        let s = load_dataset_dir(dir.path(), 1.0, SplitRatios::default()).unwrap();
        assert_eq!(s.train.input.len(), 6);

        for name in ["train", "val", "test"] {
            save_iq_csv(dir.path().join(format!("{name}_input.csv")), &x).unwrap();
            save_iq_csv(dir.path().join(format!("{name}_output.csv")), &x).unwrap();
        }
        let s = load_dataset_dir(dir.path(), 1.0, SplitRatios::default()).unwrap();
        assert_eq!(s.val.output.len(), 10);
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.csv");
            let s = seq(&v);
            save_iq_csv(&p, &s).unwrap();
            prop_assert_eq!(load_iq_csv(&p, 1.0).unwrap(), s);
        }

        #[test]
        fn features_scale_elementwise(v in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..20), c in 0.1f64..5.0) {
            let s = seq(&v);
            let a = build_features(&s).unwrap();
            let b = build_features(&s.scaled(Complex64::new(c, 0.0))).unwrap();
            for (ra, rb) in a.rows.iter().zip(&b.rows) {
                for k in 0..5 {
                    prop_assert!((rb[k] - c * ra[k]).abs() <= 1e-12 * (1.0 + rb[k].abs()));
                }
                prop_assert!((rb[5] - c * c * c * ra[5]).abs() <= 1e-12 * (1.0 + rb[5].abs()));
            }
        }

        #[test]
        fn papr_is_scale_invariant(v in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..40), re in 0.1f64..3.0, im in -3.0f64..3.0) {
            let s = seq(&v);
            prop_assume!(s.mean_power() > 1e-6);
            let a = papr(&s).unwrap();
            let b = papr(&s.scaled(Complex64::new(re, im))).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn split_is_ordered_partition(n in 1usize..500, tr in 0.0f64..1.0, va_frac in 0.0f64..1.0) {
            let va = (1.0 - tr) * va_frac;
            let ratios = SplitRatios { train: tr, val: va, test: 1.0 - tr - va };
            let x = IQSequence::new((0..n).map(|i| Complex64::new(i as f64, 0.0)).collect(), 1.0).unwrap();
            let s = split_dataset(&x, &x, ratios).unwrap();
            let joined: Vec<_> = [&s.train, &s.val, &s.test]
                .iter()
                .flat_map(|p| p.input.samples().to_vec())
                .collect();
            prop_assert_eq!(joined.as_slice(), x.samples());
        }
    }
}
