//! Propagation and impairment models.
//!
//! A [`ChannelScene`] superposes delayed, scaled copies of the transmitted
//! waveform (one per path), optionally adds the soil leg seen by the deeper
//! transmit antenna, then applies carrier offset, sampling offset and white
//! noise in that order.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iq::IqBuffer;
use crate::SPEED_OF_LIGHT;

/// Volumetric water content bounds accepted by the dielectric model.
pub const MOISTURE_MIN: f64 = 0.0;
pub const MOISTURE_MAX: f64 = 0.5;

/// Relative permittivity of soil from volumetric water content (Topp).
pub fn permittivity_of_moisture(theta: f64) -> Result<f64> {
    if !(MOISTURE_MIN..=MOISTURE_MAX).contains(&theta) {
        return Err(Error::Domain(format!(
            "volumetric water content {theta} outside [{MOISTURE_MIN}, {MOISTURE_MAX}]"
        )));
    }
    Ok(topp(theta))
}

pub(crate) fn topp(theta: f64) -> f64 {
    3.03 + theta * (9.3 + theta * (146.0 + theta * -76.7))
}

/// Soil between the two buried transmit antennas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSoilProfile", into = "RawSoilProfile")]
pub struct SoilProfile {
    /// m³/m³
    pub moisture: f64,
    /// Vertical distance between the antennas, metres.
    pub antenna_separation_d: f64,
    /// dB/m
    pub attenuation_per_meter: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSoilProfile {
    moisture: f64,
    antenna_separation_d: f64,
    #[serde(default)]
    attenuation_per_meter: f64,
}

impl TryFrom<RawSoilProfile> for SoilProfile {
    type Error = Error;
    fn try_from(r: RawSoilProfile) -> Result<Self> {
        SoilProfile::new(r.moisture, r.antenna_separation_d, r.attenuation_per_meter)
    }
}

impl From<SoilProfile> for RawSoilProfile {
    fn from(s: SoilProfile) -> Self {
        RawSoilProfile {
            moisture: s.moisture,
            antenna_separation_d: s.antenna_separation_d,
            attenuation_per_meter: s.attenuation_per_meter,
        }
    }
}

impl SoilProfile {
    pub fn new(moisture: f64, antenna_separation_d: f64, attenuation_per_meter: f64) -> Result<Self> {
        if !(MOISTURE_MIN..=MOISTURE_MAX).contains(&moisture) {
            return Err(Error::Domain(format!(
                "soil moisture {moisture} outside [{MOISTURE_MIN}, {MOISTURE_MAX}]"
            )));
        }
        if !(antenna_separation_d > 0.0 && antenna_separation_d.is_finite()) {
            return Err(Error::Domain(format!(
                "antenna separation must be positive, got {antenna_separation_d}"
            )));
        }
        if !(attenuation_per_meter >= 0.0 && attenuation_per_meter.is_finite()) {
            return Err(Error::Domain(format!(
                "attenuation must be non-negative, got {attenuation_per_meter}"
            )));
        }
        Ok(Self {
            moisture,
            antenna_separation_d,
            attenuation_per_meter,
        })
    }

    /// Linear amplitude factor of the soil leg.
    pub fn amplitude_factor(&self) -> f64 {
        10f64.powf(-self.attenuation_per_meter * self.antenna_separation_d / 20.0)
    }
}

/// Extra phase the deeper antenna's signal accrues over the soil leg,
/// `2 pi fc d sqrt(eps_r) / c`, evaluated at the carrier only.
pub fn soil_phase_shift(soil: &SoilProfile, fc: f64) -> f64 {
    phase_for_permittivity(topp(soil.moisture), soil.antenna_separation_d, fc)
}

pub(crate) fn phase_for_permittivity(eps_r: f64, d: f64, fc: f64) -> f64 {
    2.0 * PI * fc * d * eps_r.sqrt() / SPEED_OF_LIGHT
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    Walking,
    Still,
}

/// Excess path length of a human reflector as a function of absolute time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TrajectorySpec", into = "TrajectorySpec")]
pub enum Trajectory {
    Still {
        excess_m: f64,
    },
    Walking {
        seed: u64,
        excess_m: f64,
        /// (amplitude m, frequency Hz, phase rad)
        components: Vec<(f64, f64, f64)>,
    },
    /// Constant-rate change, mainly for constructing exact phase shifts.
    Linear {
        excess_m: f64,
        rate_mps: f64,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum TrajectorySpec {
    Still {
        #[serde(default = "default_excess")]
        excess_m: f64,
    },
    Walking {
        seed: u64,
        #[serde(default = "default_excess")]
        excess_m: f64,
    },
    Linear {
        #[serde(default = "default_excess")]
        excess_m: f64,
        rate_mps: f64,
    },
}

fn default_excess() -> f64 {
    DEFAULT_EXCESS_M
}

/// Nominal excess path of the human reflector over the direct path, metres.
pub const DEFAULT_EXCESS_M: f64 = 3.0;

impl From<TrajectorySpec> for Trajectory {
    fn from(s: TrajectorySpec) -> Self {
        match s {
            TrajectorySpec::Still { excess_m } => Trajectory::Still { excess_m },
            TrajectorySpec::Walking { seed, excess_m } => walking(seed, excess_m),
            TrajectorySpec::Linear { excess_m, rate_mps } => Trajectory::Linear { excess_m, rate_mps },
        }
    }
}

impl From<Trajectory> for TrajectorySpec {
    fn from(t: Trajectory) -> Self {
        match t {
            Trajectory::Still { excess_m } => TrajectorySpec::Still { excess_m },
            Trajectory::Walking { seed, excess_m, .. } => TrajectorySpec::Walking { seed, excess_m },
            Trajectory::Linear { excess_m, rate_mps } => TrajectorySpec::Linear { excess_m, rate_mps },
        }
    }
}

// Walking: one slow pacing sweep (period 8 to 12.5 s, peak speed near
// 0.8 m/s) plus gait sway between 0.5 and 1.9 Hz. All components are below
// 2 Hz.
const PACING_FREQ: (f64, f64) = (0.08, 0.125);
const PACING_PEAK_SPEED: f64 = 0.8;
const SWAY_COMPONENTS: usize = 4;
const SWAY_FREQ: (f64, f64) = (0.5, 1.9);
const SWAY_PEAK_SPEED: f64 = 0.3;

fn walking(seed: u64, excess_m: f64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut components = Vec::with_capacity(SWAY_COMPONENTS + 1);
    let f0 = rng.random_range(PACING_FREQ.0..PACING_FREQ.1);
    components.push((PACING_PEAK_SPEED / (2.0 * PI * f0), f0, rng.random_range(0.0..2.0 * PI)));
    for _ in 0..SWAY_COMPONENTS {
        let f = rng.random_range(SWAY_FREQ.0..SWAY_FREQ.1);
        let v = rng.random_range(0.5..1.0) * SWAY_PEAK_SPEED;
        components.push((v / (2.0 * PI * f), f, rng.random_range(0.0..2.0 * PI)));
    }
    Trajectory::Walking {
        seed,
        excess_m,
        components,
    }
}

/// Builds a deterministic trajectory for `kind` from `seed`.
pub fn human_trajectory(kind: MotionKind, seed: u64) -> Trajectory {
    match kind {
        MotionKind::Still => Trajectory::Still {
            excess_m: DEFAULT_EXCESS_M,
        },
        MotionKind::Walking => walking(seed, DEFAULT_EXCESS_M),
    }
}

impl Trajectory {
    /// Excess path length in metres at absolute time `t`.
    pub fn excess_at(&self, t: f64) -> f64 {
        match self {
            Trajectory::Still { excess_m } => *excess_m,
            Trajectory::Linear { excess_m, rate_mps } => excess_m + rate_mps * t,
            Trajectory::Walking {
                excess_m, components, ..
            } => {
                excess_m
                    + components
                        .iter()
                        .map(|(a, f, ph)| a * (2.0 * PI * f * t + ph).sin())
                        .sum::<f64>()
            }
        }
    }

    /// Same trajectory shifted by a constant excess length.
    pub fn offset_by(&self, meters: f64) -> Trajectory {
        let mut t = self.clone();
        match &mut t {
            Trajectory::Still { excess_m }
            | Trajectory::Linear { excess_m, .. }
            | Trajectory::Walking { excess_m, .. } => *excess_m += meters,
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Static,
    Human,
}

/// One propagation path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPathSpec", into = "RawPathSpec")]
pub struct PathSpec {
    pub kind: PathKind,
    /// seconds
    pub base_delay: f64,
    pub base_gain: Complex64,
    pub motion: Option<Trajectory>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPathSpec {
    kind: PathKind,
    #[serde(default)]
    base_delay: f64,
    /// [re, im]
    base_gain: [f64; 2],
    #[serde(default)]
    motion: Option<Trajectory>,
}

impl TryFrom<RawPathSpec> for PathSpec {
    type Error = Error;
    fn try_from(r: RawPathSpec) -> Result<Self> {
        let gain = Complex64::new(r.base_gain[0], r.base_gain[1]);
        match r.kind {
            PathKind::Static => {
                if r.motion.is_some() {
                    return Err(Error::Config("static paths take no motion".into()));
                }
                PathSpec::fixed(r.base_delay, gain)
            }
            PathKind::Human => PathSpec::human(
                r.base_delay,
                gain,
                r.motion.unwrap_or(Trajectory::Still { excess_m: 0.0 }),
            ),
        }
    }
}

impl From<PathSpec> for RawPathSpec {
    fn from(p: PathSpec) -> Self {
        RawPathSpec {
            kind: p.kind,
            base_delay: p.base_delay,
            base_gain: [p.base_gain.re, p.base_gain.im],
            motion: p.motion,
        }
    }
}

impl PathSpec {
    fn check(base_delay: f64, gain: Complex64) -> Result<()> {
        if !(base_delay >= 0.0 && base_delay.is_finite()) {
            return Err(Error::Domain(format!("path delay must be >= 0, got {base_delay}")));
        }
        if gain.norm().is_nan() || gain.norm() > 1.0 + 1e-12 {
            return Err(Error::Domain(format!("path gain magnitude {} exceeds 1", gain.norm())));
        }
        Ok(())
    }

    pub fn fixed(base_delay: f64, base_gain: Complex64) -> Result<Self> {
        Self::check(base_delay, base_gain)?;
        Ok(Self {
            kind: PathKind::Static,
            base_delay,
            base_gain,
            motion: None,
        })
    }

    pub fn human(base_delay: f64, base_gain: Complex64, motion: Trajectory) -> Result<Self> {
        Self::check(base_delay, base_gain)?;
        Ok(Self {
            kind: PathKind::Human,
            base_delay,
            base_gain,
            motion: Some(motion),
        })
    }

    /// Unit-gain, zero-delay path.
    pub fn identity() -> Self {
        Self::fixed(0.0, Complex64::new(1.0, 0.0)).expect("valid")
    }

    /// Propagation delay at absolute time `t`.
    pub fn delay_at(&self, t: f64) -> f64 {
        let excess = match (&self.kind, &self.motion) {
            (PathKind::Human, Some(m)) => m.excess_at(t),
            _ => 0.0,
        };
        self.base_delay + excess / SPEED_OF_LIGHT
    }
}

/// Clock and noise impairments at one receive antenna.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Impairments {
    /// dB relative to received signal power; `None` is noise-free.
    #[serde(default)]
    pub snr_db: Option<f64>,
    /// Hz
    #[serde(default)]
    pub cfo: f64,
    #[serde(default)]
    pub sfo_ppm: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

/// Largest sampling-clock error accepted.
pub const MAX_SFO_PPM: f64 = 100.0;

impl Default for Impairments {
    fn default() -> Self {
        Self::none()
    }
}

impl Impairments {
    pub fn none() -> Self {
        Self {
            snr_db: None,
            cfo: 0.0,
            sfo_ppm: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sfo_ppm.abs() > MAX_SFO_PPM {
            return Err(Error::Domain(format!(
                "|sfo_ppm| = {} exceeds {MAX_SFO_PPM}",
                self.sfo_ppm.abs()
            )));
        }
        if let Some(s) = self.snr_db {
            if !s.is_finite() {
                return Err(Error::Domain("snr_db must be finite".into()));
            }
        }
        if !self.cfo.is_finite() {
            return Err(Error::Domain("cfo must be finite".into()));
        }
        Ok(())
    }
}

/// Which transmit antenna of the node emitted the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxAntenna {
    /// Shallow antenna, or the only antenna of a single-antenna node.
    First,
    /// Deep antenna; its signal also crosses the soil leg.
    Second,
}

impl TxAntenna {
    pub fn tag(self) -> u8 {
        match self {
            TxAntenna::First => 1,
            TxAntenna::Second => 2,
        }
    }
}

/// Paths, optional soil leg and impairments for one link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScene", into = "RawScene")]
pub struct ChannelScene {
    pub paths: Vec<PathSpec>,
    pub soil: Option<SoilProfile>,
    pub impairments: Impairments,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    paths: Vec<PathSpec>,
    #[serde(default)]
    soil: Option<SoilProfile>,
    #[serde(default)]
    impairments: Impairments,
}

impl TryFrom<RawScene> for ChannelScene {
    type Error = Error;
    fn try_from(r: RawScene) -> Result<Self> {
        ChannelScene::new(r.paths, r.soil, r.impairments)
    }
}

impl From<ChannelScene> for RawScene {
    fn from(s: ChannelScene) -> Self {
        RawScene {
            paths: s.paths,
            soil: s.soil,
            impairments: s.impairments,
        }
    }
}

impl ChannelScene {
    pub fn new(paths: Vec<PathSpec>, soil: Option<SoilProfile>, impairments: Impairments) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::Config("a channel scene needs at least one path".into()));
        }
        impairments.validate()?;
        Ok(Self {
            paths,
            soil,
            impairments,
        })
    }

    /// Single unit path, no soil, no impairments.
    pub fn identity() -> Self {
        Self::new(vec![PathSpec::identity()], None, Impairments::none()).expect("valid")
    }

    pub fn with_impairments(mut self, impairments: Impairments) -> Result<Self> {
        impairments.validate()?;
        self.impairments = impairments;
        Ok(self)
    }
}

/// Multipath superposition plus the soil leg for the second antenna.
///
/// Each path contributes `gain * exp(-j 2 pi fc tau) * x[n - round(tau Fs)]`;
/// the output grows by the largest integer delay.
pub fn propagate(buf: &IqBuffer, scene: &ChannelScene, antenna: TxAntenna, t: f64, fc: f64) -> IqBuffer {
    let fs = buf.sample_rate;
    let taps: Vec<(usize, Complex64)> = scene
        .paths
        .iter()
        .map(|p| {
            let tau = p.delay_at(t);
            let shift = (tau * fs).round() as usize;
            (shift, p.base_gain * Complex64::from_polar(1.0, -2.0 * PI * fc * tau))
        })
        .collect();
    let max_shift = taps.iter().map(|(s, _)| *s).max().unwrap_or(0);
    let soil = match (antenna, &scene.soil) {
        (TxAntenna::Second, Some(soil)) => Complex64::from_polar(soil.amplitude_factor(), -soil_phase_shift(soil, fc)),
        _ => Complex64::new(1.0, 0.0),
    };
    let out_len = if buf.is_empty() { 0 } else { buf.len() + max_shift };
    let mut out = vec![Complex64::new(0.0, 0.0); out_len];
    for (shift, g) in taps {
        let g = g * soil;
        for (o, x) in out[shift..].iter_mut().zip(&buf.samples) {
            *o += g * x;
        }
    }
    IqBuffer {
        samples: out,
        sample_rate: fs,
        start_time: buf.start_time,
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Noise stream key derived from the scene seed, packet time and antenna.
pub fn noise_key(seed: u64, t: f64, antenna_tag: u8) -> u64 {
    splitmix(splitmix(seed) ^ t.to_bits()) ^ splitmix(antenna_tag as u64)
}

/// Carrier offset, sampling offset and AWGN, in that order.
pub fn impair(buf: &IqBuffer, imp: &Impairments, noise_key: u64) -> IqBuffer {
    let fs = buf.sample_rate;
    let mut samples: Vec<Complex64> = if imp.cfo != 0.0 {
        buf.samples
            .iter()
            .enumerate()
            .map(|(n, s)| s * Complex64::from_polar(1.0, 2.0 * PI * imp.cfo * n as f64 / fs))
            .collect()
    } else {
        buf.samples.clone()
    };
    if imp.sfo_ppm != 0.0 {
        samples = resample_linear(&samples, 1.0 + imp.sfo_ppm * 1e-6);
    }
    if let Some(snr_db) = imp.snr_db {
        let out = IqBuffer {
            samples,
            sample_rate: fs,
            start_time: buf.start_time,
        };
        return add_awgn(&out, snr_db, noise_key);
    }
    IqBuffer {
        samples,
        sample_rate: fs,
        start_time: buf.start_time,
    }
}

/// `y[n] = x(n * ratio)` by linear interpolation; zero past the end.
pub fn resample_linear(x: &[Complex64], ratio: f64) -> Vec<Complex64> {
    let at = |i: usize| x.get(i).copied().unwrap_or_default();
    (0..x.len())
        .map(|n| {
            let pos = n as f64 * ratio;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            at(i) * (1.0 - frac) + at(i + 1) * frac
        })
        .collect()
}

/// Adds circular complex Gaussian noise at `snr_db` below the mean power.
pub fn add_awgn(buf: &IqBuffer, snr_db: f64, noise_key: u64) -> IqBuffer {
    let power = buf.mean_power();
    let noise_power = power / 10f64.powf(snr_db / 10.0);
    let sigma = (noise_power / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_key);
    let samples = if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        buf.samples
            .iter()
            .map(|s| s + Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)))
            .collect()
    } else {
        buf.samples.clone()
    };
    IqBuffer {
        samples,
        sample_rate: buf.sample_rate,
        start_time: buf.start_time,
    }
}

/// Full link for a buffer emitted by one transmit antenna at time `t`.
pub fn apply_scene(buf: &IqBuffer, scene: &ChannelScene, antenna: TxAntenna, t: f64, fc: f64) -> IqBuffer {
    let prop = propagate(buf, scene, antenna, t, fc);
    impair(
        &prop,
        &scene.impairments,
        noise_key(scene.impairments.rng_seed, t, antenna.tag()),
    )
}

/// Link for a node whose single RF chain is switched between two antennas:
/// both legs are propagated, summed, then impaired once.
pub fn apply_scene_switched(
    first: &IqBuffer,
    second: &IqBuffer,
    scene: &ChannelScene,
    t: f64,
    fc: f64,
) -> Result<IqBuffer> {
    if first.len() != second.len() || first.sample_rate != second.sample_rate {
        return Err(Error::Domain("antenna buffers must be sample aligned".into()));
    }
    let a = propagate(first, scene, TxAntenna::First, t, fc);
    let b = propagate(second, scene, TxAntenna::Second, t, fc);
    let summed = IqBuffer {
        samples: a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect(),
        sample_rate: a.sample_rate,
        start_time: a.start_time,
    };
    Ok(impair(
        &summed,
        &scene.impairments,
        noise_key(scene.impairments.rng_seed, t, 0),
    ))
}
