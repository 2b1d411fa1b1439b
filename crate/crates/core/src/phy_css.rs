//! Chirp spread spectrum symbol modulation and demodulation.
//!
//! A symbol `k` is an up-chirp whose start frequency is shifted by
//! `k * BW / 2^SF` and wraps back to `-BW/2` when it reaches `+BW/2`.
//! Demodulation multiplies by the conjugate base chirp and takes an
//! unnormalized `2^SF`-point DFT, so a clean symbol peaks at bin `k` with
//! magnitude `2^SF`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iq::IqBuffer;

pub const MIN_SPREADING_FACTOR: u8 = 7;
pub const MAX_SPREADING_FACTOR: u8 = 12;

/// Modulation parameters shared by transmitter and receiver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawChirpParams", into = "RawChirpParams")]
pub struct ChirpParams {
    pub spreading_factor: u8,
    /// Hz
    pub bandwidth: f64,
    /// Hz
    pub carrier_freq: f64,
    /// Hz, an integer multiple of `bandwidth`.
    pub sample_rate: f64,
    oversampling: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChirpParams {
    #[serde(default = "default_sf")]
    spreading_factor: u8,
    #[serde(default = "default_bw")]
    bandwidth: f64,
    #[serde(default = "default_fc")]
    carrier_freq: f64,
    #[serde(default)]
    sample_rate: Option<f64>,
}

fn default_sf() -> u8 {
    7
}
fn default_bw() -> f64 {
    125e3
}
fn default_fc() -> f64 {
    868e6
}

impl TryFrom<RawChirpParams> for ChirpParams {
    type Error = Error;

    fn try_from(raw: RawChirpParams) -> Result<Self> {
        ChirpParams::new(
            raw.spreading_factor,
            raw.bandwidth,
            raw.carrier_freq,
            raw.sample_rate.unwrap_or(raw.bandwidth),
        )
    }
}

impl From<ChirpParams> for RawChirpParams {
    fn from(p: ChirpParams) -> Self {
        RawChirpParams {
            spreading_factor: p.spreading_factor,
            bandwidth: p.bandwidth,
            carrier_freq: p.carrier_freq,
            sample_rate: Some(p.sample_rate),
        }
    }
}

impl Default for ChirpParams {
    /// SF7, 125 kHz, 868 MHz, critically sampled.
    fn default() -> Self {
        ChirpParams::new(7, 125e3, 868e6, 125e3).expect("default parameters are valid")
    }
}

impl ChirpParams {
    pub fn new(spreading_factor: u8, bandwidth: f64, carrier_freq: f64, sample_rate: f64) -> Result<Self> {
        if !(MIN_SPREADING_FACTOR..=MAX_SPREADING_FACTOR).contains(&spreading_factor) {
            return Err(Error::Domain(format!(
                "spreading factor {spreading_factor} outside [{MIN_SPREADING_FACTOR}, {MAX_SPREADING_FACTOR}]"
            )));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Domain(format!("bandwidth must be positive, got {bandwidth}")));
        }
        if !(carrier_freq > 0.0 && carrier_freq.is_finite()) {
            return Err(Error::Domain(format!(
                "carrier frequency must be positive, got {carrier_freq}"
            )));
        }
        let ratio = sample_rate / bandwidth;
        let oversampling = ratio.round();
        if oversampling.is_nan() || oversampling < 1.0 || (ratio - oversampling).abs() > 1e-9 * ratio {
            return Err(Error::Domain(format!(
                "sample rate {sample_rate} Hz is not a positive integer multiple of bandwidth {bandwidth} Hz"
            )));
        }
        Ok(Self {
            spreading_factor,
            bandwidth,
            carrier_freq,
            sample_rate,
            oversampling: oversampling as usize,
        })
    }

    /// Alphabet size `2^SF`.
    pub fn num_bins(&self) -> usize {
        1usize << self.spreading_factor
    }

    pub fn oversampling(&self) -> usize {
        self.oversampling
    }

    pub fn samples_per_symbol(&self) -> usize {
        self.num_bins() * self.oversampling
    }

    /// Seconds per symbol, `2^SF / BW`.
    pub fn symbol_duration(&self) -> f64 {
        self.num_bins() as f64 / self.bandwidth
    }

    /// Frequency spacing of adjacent DFT bins, `BW / 2^SF`.
    pub fn bin_spacing(&self) -> f64 {
        self.bandwidth / self.num_bins() as f64
    }

    pub fn wavelength(&self) -> f64 {
        crate::SPEED_OF_LIGHT / self.carrier_freq
    }

    pub fn symbol(&self, value: u32) -> Result<Symbol> {
        Symbol::new(value, self)
    }
}

/// A CSS symbol: the start-frequency index of a chirp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Symbol(u32);

impl Symbol {
    pub fn new(value: u32, params: &ChirpParams) -> Result<Self> {
        if (value as usize) >= params.num_bins() {
            return Err(Error::Domain(format!(
                "symbol {value} outside alphabet of size {}",
                params.num_bins()
            )));
        }
        Ok(Symbol(value))
    }

    pub fn value(self) -> u32 {
        self.0
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChirpDirection {
    Up,
    Down,
}

/// Generates one symbol of samples with unit magnitude.
///
/// Phase is computed from an exact integer numerator modulo one cycle so
/// that long symbols (SF12, oversampled) keep full precision.
pub fn gen_chirp(params: &ChirpParams, symbol: Symbol, direction: ChirpDirection) -> Result<IqBuffer> {
    if symbol.value() as usize >= params.num_bins() {
        return Err(Error::Domain(format!(
            "symbol {symbol} outside alphabet of size {}",
            params.num_bins()
        )));
    }
    Ok(chirp_unchecked(params, symbol.value(), direction))
}

pub(crate) fn chirp_unchecked(params: &ChirpParams, k: u32, direction: ChirpDirection) -> IqBuffer {
    let n_bins = params.num_bins() as i64;
    let os = params.oversampling() as i64;
    let k = k as i64;
    // phase(n) / 2pi = (n^2 + (2k - N) n os) / (2 N os^2), minus one cycle per
    // chip after the wrap point (N - k) * os.
    let denom = 2 * n_bins * os * os;
    let wrap_at = (n_bins - k) * os;
    let sps = params.samples_per_symbol() as i64;
    let samples = (0..sps)
        .map(|n| {
            let mut num = n * n + (2 * k - n_bins) * n * os;
            if n >= wrap_at {
                num -= (n - wrap_at) * 2 * n_bins * os;
            }
            let phase = 2.0 * PI * (num.rem_euclid(denom) as f64) / denom as f64;
            let s = Complex64::from_polar(1.0, phase);
            match direction {
                ChirpDirection::Up => s,
                ChirpDirection::Down => s.conj(),
            }
        })
        .collect();
    IqBuffer {
        samples,
        sample_rate: params.sample_rate,
        start_time: 0.0,
    }
}

/// Peak of a dechirped symbol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymbolPeak {
    pub bin: usize,
    pub value: Complex64,
}

impl SymbolPeak {
    pub fn phase(&self) -> f64 {
        self.value.arg()
    }

    pub fn magnitude(&self) -> f64 {
        self.value.norm()
    }
}

/// Result of [`demod_symbol`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Demodulated {
    pub symbol: Symbol,
    /// radians
    pub peak_phase: f64,
    pub peak_magnitude: f64,
}

/// Reusable dechirp engine holding the reference chirps and FFT plan.
#[derive(Clone)]
pub struct Demodulator {
    params: ChirpParams,
    base_up: Vec<Complex64>,
    fft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Demodulator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Demodulator")
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

impl Demodulator {
    pub fn new(params: &ChirpParams) -> Self {
        let base = chirp_unchecked(params, 0, ChirpDirection::Up);
        // only the zeroth polyphase branch survives decimation
        let base_up = base.samples.iter().step_by(params.oversampling()).copied().collect();
        let fft = FftPlanner::new().plan_fft_forward(params.num_bins());
        Self {
            params: *params,
            base_up,
            fft,
        }
    }

    pub fn params(&self) -> &ChirpParams {
        &self.params
    }

    fn check_len(&self, window: &[Complex64]) -> Result<()> {
        let expected = self.params.samples_per_symbol();
        if window.len() != expected {
            return Err(Error::FrameAlignment {
                expected,
                actual: window.len(),
            });
        }
        Ok(())
    }

    /// Spectrum of `window` mixed with the conjugate base up-chirp.
    ///
    /// Folding the aliased images of the full-rate product onto `2^SF` bins
    /// equals the DFT of its zeroth polyphase branch, which is what is
    /// computed here.
    pub fn dechirp(&self, window: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_len(window)?;
        Ok(self.mix(window, |s, r| s * r.conj()))
    }

    /// Spectrum of `window` mixed with the base up-chirp; collapses a
    /// down-chirp into a tone.
    pub fn dechirp_down(&self, window: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_len(window)?;
        Ok(self.mix(window, |s, r| s * r))
    }

    fn mix(&self, window: &[Complex64], op: impl Fn(Complex64, Complex64) -> Complex64) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = window
            .iter()
            .step_by(self.params.oversampling())
            .zip(&self.base_up)
            .map(|(s, r)| op(*s, *r))
            .collect();
        self.fft.process(&mut buf);
        buf
    }

    pub fn demod(&self, window: &[Complex64]) -> Result<Demodulated> {
        let spectrum = self.dechirp(window)?;
        let peak = peak_of(&spectrum);
        Ok(Demodulated {
            symbol: Symbol(peak.bin as u32),
            peak_phase: peak.phase(),
            peak_magnitude: peak.magnitude(),
        })
    }
}

/// Largest-magnitude bin; the lowest index wins ties.
pub fn peak_of(spectrum: &[Complex64]) -> SymbolPeak {
    let mut best = SymbolPeak {
        bin: 0,
        value: Complex64::new(0.0, 0.0),
    };
    let mut best_mag = -1.0;
    for (bin, v) in spectrum.iter().enumerate() {
        let m = v.norm_sqr();
        if m > best_mag {
            best_mag = m;
            best = SymbolPeak { bin, value: *v };
        }
    }
    best
}

/// Peak power over mean bin power; zero for an all-zero spectrum.
pub fn peak_to_mean_ratio(spectrum: &[Complex64]) -> f64 {
    let total: f64 = spectrum.iter().map(|v| v.norm_sqr()).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let peak = spectrum.iter().map(|v| v.norm_sqr()).fold(0.0, f64::max);
    peak * spectrum.len() as f64 / total
}

pub fn dechirp(buf: &IqBuffer, params: &ChirpParams) -> Result<Vec<Complex64>> {
    Demodulator::new(params).dechirp(&buf.samples)
}

pub fn demod_symbol(buf: &IqBuffer, params: &ChirpParams) -> Result<Demodulated> {
    Demodulator::new(params).demod(&buf.samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sf7() -> ChirpParams {
        ChirpParams::default()
    }

    /// Direct DFT, independent of the FFT path.
    fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, v)| v * Complex64::from_polar(1.0, -2.0 * PI * (k * t) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    /// Chirp from the continuous instantaneous-frequency definition,
    /// integrated numerically sample by sample.
    fn reference_chirp(p: &ChirpParams, k: u32) -> Vec<Complex64> {
        let n = p.num_bins() as f64;
        let bw = p.bandwidth;
        let dt = 1.0 / p.sample_rate;
        let slope = bw * bw / n;
        let mut out = Vec::new();
        let mut phase = 0.0f64;
        let mut t = 0.0f64;
        let t_wrap = (n - k as f64) / bw;
        for _ in 0..p.samples_per_symbol() {
            out.push(Complex64::from_polar(1.0, phase));
            // exact integral of a linear sweep over one sample, with wrap
            let f0 = -bw / 2.0 + k as f64 * bw / n;
            let integral = |tt: f64| {
                let base = f0 * tt + 0.5 * slope * tt * tt;
                if tt > t_wrap {
                    base - bw * (tt - t_wrap)
                } else {
                    base
                }
            };
            phase += 2.0 * PI * (integral(t + dt) - integral(t));
            t += dt;
        }
        out
    }

    #[test]
    fn rejects_bad_params() {
        assert!(ChirpParams::new(6, 125e3, 868e6, 125e3).is_err());
        assert!(ChirpParams::new(13, 125e3, 868e6, 125e3).is_err());
        assert!(ChirpParams::new(7, 125e3, 868e6, 187.5e3).is_err());
        assert!(ChirpParams::new(7, 125e3, 868e6, 62.5e3).is_err());
        assert_eq!(ChirpParams::new(7, 125e3, 868e6, 500e3).unwrap().oversampling(), 4);
    }

    #[test]
    fn symbol_domain() {
        let p = sf7();
        assert!(p.symbol(127).is_ok());
        assert!(matches!(p.symbol(128), Err(Error::Domain(_))));
    }

    #[test]
    fn base_chirp_starts_at_lower_band_edge() {
        let p = sf7();
        let c = gen_chirp(&p, Symbol(0), ChirpDirection::Up).unwrap();
        assert_eq!(c.len(), 128);
        // phase(n) = 2pi (n^2/2N - n/2): first difference gives -BW/2 + BW/2N
        let d = (c.samples[1] * c.samples[0].conj()).arg();
        let expected = 2.0 * PI * (1.0 / 256.0 - 0.5);
        assert!((d - expected).abs() < 1e-12);
        // second difference is the constant sweep rate
        for n in 1..127 {
            let d1 = (c.samples[n] * c.samples[n - 1].conj()).arg();
            let d2 = (c.samples[n + 1] * c.samples[n].conj()).arg();
            let dd = (Complex64::from_polar(1.0, d2 - d1)).arg();
            assert!((dd - 2.0 * PI / 128.0).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_integrated_instantaneous_frequency() {
        for os in [1usize, 2, 4] {
            let p = ChirpParams::new(7, 125e3, 868e6, 125e3 * os as f64).unwrap();
            for k in [0u32, 1, 42, 127] {
                let got = gen_chirp(&p, Symbol(k), ChirpDirection::Up).unwrap();
                let want = reference_chirp(&p, k);
                for (g, w) in got.samples.iter().zip(&want) {
                    assert!((g - w).norm() < 1e-6, "os={os} k={k}");
                }
            }
        }
    }

    #[test]
    fn gen_chirp_rejects_foreign_symbol() {
        let p = sf7();
        let big = ChirpParams::new(9, 125e3, 868e6, 125e3).unwrap().symbol(300).unwrap();
        assert!(matches!(gen_chirp(&p, big, ChirpDirection::Up), Err(Error::Domain(_))));
    }

    #[test]
    fn down_chirp_is_conjugate() {
        let p = sf7();
        let up = gen_chirp(&p, Symbol(0), ChirpDirection::Up).unwrap();
        let down = gen_chirp(&p, Symbol(0), ChirpDirection::Down).unwrap();
        for (u, d) in up.samples.iter().zip(&down.samples) {
            assert_eq!(u.conj(), *d);
        }
    }

    #[test]
    fn unit_magnitude() {
        for sf in 7..=9 {
            let p = ChirpParams::new(sf, 125e3, 868e6, 250e3).unwrap();
            for k in [0, 3, (1u32 << sf) - 1] {
                let c = gen_chirp(&p, Symbol(k), ChirpDirection::Up).unwrap();
                assert!(c.samples.iter().all(|s| (s.norm() - 1.0).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn dechirp_agrees_with_naive_dft() {
        let p = sf7();
        let c = gen_chirp(&p, Symbol(42), ChirpDirection::Up).unwrap();
        let base = gen_chirp(&p, Symbol(0), ChirpDirection::Up).unwrap();
        let mixed: Vec<_> = c.samples.iter().zip(&base.samples).map(|(a, b)| a * b.conj()).collect();
        let want = naive_dft(&mixed);
        let got = dechirp(&c, &p).unwrap();
        let peak = peak_of(&want);
        assert_eq!(peak.bin, 42);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).norm() < 1e-9);
        }
    }

    #[test]
    fn dechirp_single_bin_for_every_symbol() {
        for os in [1usize, 2] {
            let p = ChirpParams::new(7, 125e3, 868e6, 125e3 * os as f64).unwrap();
            let demod = Demodulator::new(&p);
            for k in 0..128u32 {
                let c = gen_chirp(&p, Symbol(k), ChirpDirection::Up).unwrap();
                let spec = demod.dechirp(&c.samples).unwrap();
                let peak = spec[k as usize].norm();
                assert!((peak - 128.0).abs() < 1e-9);
                for (b, v) in spec.iter().enumerate() {
                    if b != k as usize {
                        assert!(v.norm() <= 1e-9 * peak, "k={k} bin={b}");
                    }
                }
            }
        }
    }

    #[test]
    fn dechirp_zero_and_wrong_length() {
        let p = sf7();
        let z = IqBuffer::zeros(128, p.sample_rate, 0.0).unwrap();
        assert!(dechirp(&z, &p).unwrap().iter().all(|v| v.norm() == 0.0));
        let short = IqBuffer::zeros(127, p.sample_rate, 0.0).unwrap();
        assert!(matches!(
            dechirp(&short, &p),
            Err(Error::FrameAlignment {
                expected: 128,
                actual: 127
            })
        ));
        assert!(demod_symbol(&short, &p).is_err());
    }

    #[test]
    fn dechirp_scales_with_complex_gain() {
        let p = sf7();
        let c = gen_chirp(&p, Symbol(9), ChirpDirection::Up).unwrap();
        let g = Complex64::from_polar(0.37, 2.1);
        let a = dechirp(&c, &p).unwrap();
        let b = dechirp(&c.scaled(g), &p).unwrap();
        assert!((b[9] - a[9] * g).norm() < 1e-12);
    }

    #[test]
    fn base_chirp_self_correlation() {
        let p = sf7();
        let d = demod_symbol(&gen_chirp(&p, Symbol(0), ChirpDirection::Up).unwrap(), &p).unwrap();
        assert_eq!(d.symbol.value(), 0);
        assert!(d.peak_phase.abs() < 1e-12);
        assert!((d.peak_magnitude - 128.0).abs() < 1e-9);
    }

    #[test]
    fn down_chirp_collapses_under_dechirp_down() {
        let p = sf7();
        let demod = Demodulator::new(&p);
        let down = gen_chirp(&p, Symbol(0), ChirpDirection::Down).unwrap();
        let peak = peak_of(&demod.dechirp_down(&down.samples).unwrap());
        assert_eq!(peak.bin, 0);
        assert!((peak.magnitude() - 128.0).abs() < 1e-9);
    }

    #[test]
    fn awgn_10db_symbol_five() {
        // 1000 seeded trials at 10 dB per-sample SNR
        let p = sf7();
        let demod = Demodulator::new(&p);
        let clean = gen_chirp(&p, Symbol(5), ChirpDirection::Up).unwrap();
        let sigma = (0.1f64 / 2.0).sqrt();
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut correct = 0;
        for _ in 0..1000 {
            let noisy: Vec<_> = clean
                .samples
                .iter()
                .map(|s| s + Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)))
                .collect();
            if demod.demod(&noisy).unwrap().symbol.value() == 5 {
                correct += 1;
            }
        }
        assert!(correct >= 999, "{correct}/1000");
    }

    #[test]
    fn params_serde_defaults_and_validation() {
        let p: ChirpParams = serde_json::from_str("{}").unwrap();
        assert_eq!(p, ChirpParams::default());
        assert!(serde_json::from_str::<ChirpParams>(r#"{"spreading_factor": 5}"#).is_err());
        assert!(serde_json::from_str::<ChirpParams>(r#"{"bogus": 1}"#).is_err());
        let back: ChirpParams = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
