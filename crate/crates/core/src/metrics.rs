//! Linearization metrics: Welch PSD, ACPR, EVM and NMSE.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{IQSequence, OfdmConfig};

/// Lower bound reported for EVM and NMSE, in dB.
pub const METRIC_FLOOR_DB: f64 = -120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            // Periodic Hann, the usual choice for spectral averaging.
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Window::Hann => "hann",
            Window::Rectangular => "rectangular",
        }
    }
}

/// Two-sided power spectral density centred at 0 Hz.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spectrum {
    /// Bin centres in Hz, ascending.
    pub freqs_hz: Vec<f64>,
    /// Power per Hz (linear).
    pub psd: Vec<f64>,
    /// `10·log10(psd)`, floored at −300 dB.
    pub psd_db: Vec<f64>,
    /// Equivalent noise bandwidth of one bin.
    pub rbw_hz: f64,
    pub bin_width_hz: f64,
    pub sample_rate_hz: f64,
    pub window: Window,
    pub segments: usize,
}

impl Spectrum {
    /// Integrated power over bins whose centre lies in `[lo, hi)`.
    pub fn band_power(&self, lo_hz: f64, hi_hz: f64) -> f64 {
        self.freqs_hz
            .iter()
            .zip(&self.psd)
            .filter(|(f, _)| **f >= lo_hz && **f < hi_hz)
            .map(|(_, p)| p * self.bin_width_hz)
            .sum()
    }

    pub fn total_power(&self) -> f64 {
        self.psd.iter().sum::<f64>() * self.bin_width_hz
    }
}

/// Averaged windowed periodograms (Welch).
///
/// Normalized so that the integrated PSD equals the mean power of the
/// windowed data. `overlap` is in samples.
pub fn psd_welch(x: &IQSequence, segment_len: usize, overlap: usize, window: Window) -> Result<Spectrum> {
    if segment_len < 2 {
        return Err(Error::invalid("segment length must be at least 2"));
    }
    if segment_len > x.len() {
        return Err(Error::invalid(format!(
            "segment length {segment_len} exceeds signal length {}",
            x.len()
        )));
    }
    if overlap >= segment_len {
        return Err(Error::invalid("overlap must be smaller than the segment length"));
    }
    let fs = x.sample_rate_hz();
    let n = segment_len;
    let hop = n - overlap;
    let w = window.coefficients(n);
    let w_energy: f64 = w.iter().map(|v| v * v).sum();
    let w_sum: f64 = w.iter().sum();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut acc = vec![0.0f64; n];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut segments = 0;
    let s = x.samples();
    let mut start = 0;
    while start + n <= s.len() {
        for (b, (&v, &wi)) in buf.iter_mut().zip(s[start..start + n].iter().zip(&w)) {
            *b = v * wi;
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        segments += 1;
        start += hop;
    }
    let norm = 1.0 / (segments as f64 * fs * w_energy);
    // fftshift: bin k maps to frequency (k - n/2) · fs/n.
    let half = n / 2;
    let mut freqs_hz = Vec::with_capacity(n);
    let mut psd = Vec::with_capacity(n);
    for i in 0..n {
        let k = (i + n - half) % n;
        freqs_hz.push((i as f64 - half as f64) * fs / n as f64);
        psd.push(acc[k] * norm);
    }
    let psd_db = psd.iter().map(|&p| 10.0 * p.max(1e-30).log10()).collect();
    Ok(Spectrum {
        freqs_hz,
        psd,
        psd_db,
        rbw_hz: fs * w_energy / (w_sum * w_sum),
        bin_width_hz: fs / n as f64,
        sample_rate_hz: fs,
        window,
        segments,
    })
}

/// Main channel band plus two adjacent bands at `±adjacent_offset_hz`
/// (centre to centre).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcprConfig {
    pub main_lo_hz: f64,
    pub main_hi_hz: f64,
    pub adjacent_offset_hz: f64,
    pub adjacent_bw_hz: f64,
}

impl AcprConfig {
    /// Composite band `[lo, hi)` with same-width neighbours immediately
    /// above and below.
    pub fn composite(main_lo_hz: f64, main_hi_hz: f64) -> Self {
        let bw = main_hi_hz - main_lo_hz;
        Self {
            main_lo_hz,
            main_hi_hz,
            adjacent_offset_hz: bw,
            adjacent_bw_hz: bw,
        }
    }

    /// Bands for the composite OFDM signal of `cfg`.
    pub fn for_ofdm(cfg: &OfdmConfig) -> Self {
        let bw = cfg.occupied_bw_hz();
        Self::composite(-bw / 2.0, bw / 2.0)
    }

    pub fn main_bw_hz(&self) -> f64 {
        self.main_hi_hz - self.main_lo_hz
    }

    fn centre(&self) -> f64 {
        0.5 * (self.main_lo_hz + self.main_hi_hz)
    }

    pub fn lower_band(&self) -> (f64, f64) {
        let c = self.centre() - self.adjacent_offset_hz;
        (c - self.adjacent_bw_hz / 2.0, c + self.adjacent_bw_hz / 2.0)
    }

    pub fn upper_band(&self) -> (f64, f64) {
        let c = self.centre() + self.adjacent_offset_hz;
        (c - self.adjacent_bw_hz / 2.0, c + self.adjacent_bw_hz / 2.0)
    }

    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        if !(self.main_hi_hz > self.main_lo_hz) || !(self.adjacent_bw_hz > 0.0) {
            return Err(Error::invalid("ACPR bands must have positive width"));
        }
        if self.adjacent_offset_hz < 0.5 * (self.main_bw_hz() + self.adjacent_bw_hz) - 1e-9 {
            return Err(Error::invalid("adjacent bands overlap the main channel"));
        }
        let nyq = sample_rate_hz / 2.0;
        let (lo, _) = self.lower_band();
        let (_, hi) = self.upper_band();
        if lo < -nyq - 1e-9 || hi > nyq + 1e-9 {
            return Err(Error::invalid(format!(
                "ACPR bands [{lo:.0}, {hi:.0}] Hz exceed Nyquist ±{nyq:.0} Hz"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcprResult {
    pub lower_dbc: f64,
    pub upper_dbc: f64,
    /// dB-domain mean of the two sides.
    pub avg_dbc: f64,
}

pub fn acpr(spec: &Spectrum, cfg: &AcprConfig) -> Result<AcprResult> {
    cfg.validate(spec.sample_rate_hz)?;
    if cfg.main_bw_hz() < 4.0 * spec.bin_width_hz || cfg.adjacent_bw_hz < 4.0 * spec.bin_width_hz {
        return Err(Error::invalid(format!(
            "bands are not resolvable at a {:.0} Hz bin width",
            spec.bin_width_hz
        )));
    }
    let main = spec.band_power(cfg.main_lo_hz, cfg.main_hi_hz);
    if !(main > 0.0) {
        return Err(Error::invalid("no power in the main channel"));
    }
    let side = |(lo, hi): (f64, f64)| 10.0 * (spec.band_power(lo, hi).max(1e-300) / main).log10();
    let lower_dbc = side(cfg.lower_band());
    let upper_dbc = side(cfg.upper_band());
    Ok(AcprResult {
        lower_dbc,
        upper_dbc,
        avg_dbc: 0.5 * (lower_dbc + upper_dbc),
    })
}

/// Welch segment length: the smallest power of two whose Hann RBW is at
/// most a thousandth of the main bandwidth, capped by the signal length.
pub fn default_segment_len(len: usize, sample_rate_hz: f64, main_bw_hz: f64) -> usize {
    let target = main_bw_hz / 1000.0;
    let mut n = 64usize;
    while 1.5 * sample_rate_hz / (n as f64) > target && n * 2 <= len {
        n *= 2;
    }
    n.min(len).max(2)
}

/// ACPR of `x` with a Hann Welch PSD (50% overlap) sized by
/// [`default_segment_len`].
pub fn acpr_of(x: &IQSequence, cfg: &AcprConfig) -> Result<AcprResult> {
    let n = default_segment_len(x.len(), x.sample_rate_hz(), cfg.main_bw_hz());
    acpr(&psd_welch(x, n, n / 2, Window::Hann)?, cfg)
}

fn check_pair(x: &IQSequence, y: &IQSequence) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    let px: f64 = x.samples().iter().map(|v| v.norm_sqr()).sum();
    if !(px > 0.0) {
        return Err(Error::invalid("reference signal has zero power"));
    }
    Ok(px)
}

fn to_db_floored(r: f64) -> f64 {
    if r > 0.0 {
        (10.0 * r.log10()).max(METRIC_FLOOR_DB)
    } else {
        METRIC_FLOOR_DB
    }
}

/// EVM in dB after a least-squares complex gain fit of `y` to `x_ref`.
pub fn evm(x_ref: &IQSequence, y: &IQSequence) -> Result<f64> {
    let px = check_pair(x_ref, y)?;
    let (x, y) = (x_ref.samples(), y.samples());
    let g: Complex64 = x.iter().zip(y).map(|(a, b)| b * a.conj()).sum::<Complex64>() / px;
    let err: f64 = x.iter().zip(y).map(|(a, b)| (b - g * a).norm_sqr()).sum();
    let sig = g.norm_sqr() * px;
    if !(sig > 0.0) {
        return Ok(0.0);
    }
    Ok(to_db_floored(err / sig))
}

/// `10·log10(Σ|y−x|² / Σ|x|²)`, no gain fit.
pub fn nmse(x_ref: &IQSequence, y: &IQSequence) -> Result<f64> {
    let px = check_pair(x_ref, y)?;
    let err: f64 = x_ref
        .samples()
        .iter()
        .zip(y.samples())
        .map(|(a, b)| (b - a).norm_sqr())
        .sum();
    Ok(to_db_floored(err / px))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(n: usize, sigma2: f64, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (sigma2 / 2.0).sqrt();
        (0..n)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                Complex64::new(a * s, b * s)
            })
            .collect()
    }

    fn seq(v: Vec<Complex64>) -> IQSequence {
        IQSequence::new(v, 9.8304e6).unwrap()
    }

    #[test]
    fn tone_is_a_single_peak() {
        let fs = 9.8304e6;
        let n = 256;
        let f0 = 40.0 * fs / n as f64;
        let x: Vec<Complex64> = (0..n * 64)
            .map(|t| Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * f0 * t as f64 / fs))
            .collect();
        let s = psd_welch(&seq(x), n, 0, Window::Hann).unwrap();
        assert!(s.segments >= 64);
        let (imax, _) = s
            .psd
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert!((s.freqs_hz[imax] - f0).abs() < 1e-6);
        let mut sorted = s.psd_db.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(s.psd_db[imax] - sorted[n / 2] >= 50.0);
    }

    #[test]
    fn white_noise_is_flat_and_parseval_holds() {
        let x = seq(noise(256 * 512, 2.0, 1));
        let s = psd_welch(&x, 256, 0, Window::Hann).unwrap();
        assert!(s.segments >= 256);
        let mean = s.psd.iter().sum::<f64>() / s.psd.len() as f64;
        for &p in &s.psd {
            assert!((10.0 * (p / mean).log10()).abs() <= 1.5);
        }
        let db = 10.0 * (s.total_power() / x.mean_power()).log10();
        assert!(db.abs() < 0.1, "{db}");
    }

    #[test]
    fn segment_too_long_is_an_error() {
        let x = seq(noise(100, 1.0, 2));
        assert!(psd_welch(&x, 128, 0, Window::Hann).is_err());
        assert!(psd_welch(&x, 64, 64, Window::Hann).is_err());
    }

    #[test]
    fn acpr_of_white_noise_is_zero() {
        let x = seq(noise(1 << 18, 1.0, 3));
        let r = acpr_of(&x, &AcprConfig::for_ofdm(&OfdmConfig::default())).unwrap();
        assert!(r.lower_dbc.abs() < 0.2 && r.upper_dbc.abs() < 0.2, "{r:?}");
        assert!(r.avg_dbc >= r.lower_dbc.min(r.upper_dbc) && r.avg_dbc <= r.lower_dbc.max(r.upper_dbc));
    }

    #[test]
    fn band_limited_signal_has_low_acpr() {
        let n = 1 << 17;
        let fs = 9.8304e6;
        let mut spec: Vec<Complex64> = noise(n, 1.0, 4);
        for (k, v) in spec.iter_mut().enumerate() {
            let f = if k < n / 2 { k as f64 } else { k as f64 - n as f64 } * fs / n as f64;
            if f.abs() >= 0.9e6 {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
        let r = acpr_of(&seq(spec), &AcprConfig::composite(-1e6, 1e6)).unwrap();
        assert!(r.avg_dbc <= -60.0, "{r:?}");
    }

    #[test]
    fn acpr_rejects_bands_past_nyquist() {
        let x = seq(noise(1 << 14, 1.0, 5));
        let s = psd_welch(&x, 1024, 512, Window::Hann).unwrap();
        assert!(acpr(&s, &AcprConfig::composite(-3e6, 3e6)).is_err());
    }

    #[test]
    fn acpr_is_scale_invariant() {
        let x = seq(noise(1 << 15, 1.0, 6));
        let cfg = AcprConfig::composite(-1e6, 1e6);
        let a = acpr_of(&x, &cfg).unwrap();
        let b = acpr_of(&x.scaled(Complex64::new(0.0, 7.0)), &cfg).unwrap();
        assert!((a.avg_dbc - b.avg_dbc).abs() < 1e-9);
    }

    #[test]
    fn evm_and_nmse_examples() {
        let x = seq(noise(1 << 16, 1.0, 7));
        let c = Complex64::new(0.3, -1.2);
        assert_eq!(evm(&x, &x.scaled(c)).unwrap(), METRIC_FLOOR_DB);
        assert_eq!(evm(&x, &x.scaled(Complex64::from_polar(1.0, 0.7))).unwrap(), METRIC_FLOOR_DB);
        let n = noise(1 << 16, 1e-3, 8);
        let y = seq(x.samples().iter().zip(&n).map(|(a, b)| a + b).collect());
        assert!((evm(&x, &y).unwrap() + 30.0).abs() < 0.3);
        assert_eq!(nmse(&x, &x).unwrap(), METRIC_FLOOR_DB);
        assert!((nmse(&x, &x.scaled(Complex64::new(1.1, 0.0))).unwrap() + 20.0).abs() < 1e-9);
        let zero = seq(vec![Complex64::new(0.0, 0.0); x.len()]);
        assert!(nmse(&x, &zero).unwrap().abs() < 1e-12);
        assert!(evm(&zero, &x).is_err());
        assert!(nmse(&x, &seq(vec![Complex64::new(1.0, 0.0)])).is_err());
        // NMSE sees a global gain, EVM does not.
        assert!(nmse(&x, &y.scaled(c)).unwrap() > -1.0);
        assert!((evm(&x, &y.scaled(c)).unwrap() - evm(&x, &y).unwrap()).abs() < 1e-9);
    }
}
