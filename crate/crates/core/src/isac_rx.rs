//! Gateway-side processing.
//!
//! Soil mode measures the phase step that the node's antenna switch leaves in
//! the preamble. Presence mode divides the dechirped preamble peaks of two
//! receive antennas that share one clock, which cancels the chirp modulation
//! and the carrier/sampling offsets and leaves only the multipath difference.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{impair, noise_key, propagate, ChannelScene, TxAntenna};
use crate::error::{Error, Result};
use crate::framing::{decode_frame, detect_preamble, DecodedFrame, FrameLayout};
use crate::iq::IqBuffer;
use crate::isac_tx::Emission;
use crate::phy_css::Demodulator;
use crate::wrap_phase;

/// Drift-fit residual RMS (radians) above which an estimate is flagged.
pub const FIT_QUALITY_THRESHOLD: f64 = 0.2;

/// Reference peaks below this fraction of the packet's mean peak are skipped.
pub const DIVISION_FLOOR: f64 = 1e-6;

/// Communication path of the gateway.
pub fn receive_decode(stream: &IqBuffer, hint: &FrameLayout) -> DecodedFrame {
    decode_frame(stream, hint)
}

/// Phase step between the two transmit antennas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseEstimate {
    /// Antenna-2 phase minus antenna-1 phase, in `(-pi, pi]`.
    pub delta_phi_wrapped: f64,
    /// Carrier drift per symbol from the pre-switch fit, radians.
    pub drift_slope: f64,
    /// RMS residual of the drift fit over the preamble, radians.
    pub quality: f64,
    pub low_confidence: bool,
}

/// Circular mean of `p_i - slope * i` over `(i, p_i)` pairs.
fn circular_intercept<'a>(points: impl Iterator<Item = (usize, &'a f64)>, slope: f64) -> f64 {
    points
        .map(|(i, p)| Complex64::from_polar(1.0, p - slope * i as f64))
        .sum::<Complex64>()
        .arg()
}

/// Estimates the inter-antenna phase from a frame's preamble peaks.
///
/// The peak phases follow `a + b i` before the switch and `a + delta + b i`
/// after it, where the common slope `b` is the carrier drift between node and
/// gateway. Both segments are unwrapped against a circular first guess, then
/// `b` is fitted by least squares within each segment and `delta` is the
/// difference of the two intercepts.
pub fn estimate_interantenna_phase(frame: &DecodedFrame, switch_index: usize) -> Result<PhaseEstimate> {
    if !frame.ok {
        return Err(Error::Estimation("frame was not decoded".into()));
    }
    let phases: Vec<f64> = frame.preamble_metadata.iter().map(|m| m.peak_phase).collect();
    let n = phases.len();
    if switch_index < 2 || switch_index + 2 > n {
        return Err(Error::Estimation(format!(
            "switch_index {switch_index} leaves fewer than 2 preamble symbols on one side of {n}"
        )));
    }
    let s = switch_index;

    // first guess of the drift from symbol-to-symbol advances, skipping the
    // step across the switch
    let guess_slope = (1..n)
        .filter(|&i| i != s)
        .map(|i| Complex64::from_polar(1.0, phases[i] - phases[i - 1]))
        .sum::<Complex64>()
        .arg();
    let segments = [0..s, s..n];
    let unwrapped: Vec<Vec<f64>> = segments
        .iter()
        .map(|r| {
            let icpt = circular_intercept(r.clone().map(|i| (i, &phases[i])), guess_slope);
            r.clone()
                .map(|i| {
                    let line = icpt + guess_slope * i as f64;
                    line + wrap_phase(phases[i] - line)
                })
                .collect()
        })
        .collect();

    let means: Vec<(f64, f64)> = segments
        .iter()
        .zip(&unwrapped)
        .map(|(r, u)| {
            let len = r.len() as f64;
            (r.clone().sum::<usize>() as f64 / len, u.iter().sum::<f64>() / len)
        })
        .collect();
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for ((r, u), (mx, my)) in segments.iter().zip(&unwrapped).zip(&means) {
        for (i, y) in r.clone().zip(u) {
            let dx = i as f64 - mx;
            sxy += dx * (y - my);
            sxx += dx * dx;
        }
    }
    let slope = sxy / sxx;
    let icpts: Vec<f64> = means.iter().map(|(mx, my)| my - slope * mx).collect();
    let quality = (segments
        .iter()
        .zip(&unwrapped)
        .zip(&icpts)
        .flat_map(|((r, u), a)| r.clone().zip(u).map(move |(i, y)| (y - a - slope * i as f64).powi(2)))
        .sum::<f64>()
        / n as f64)
        .sqrt();

    Ok(PhaseEstimate {
        delta_phi_wrapped: wrap_phase(icpts[1] - icpts[0]),
        drift_slope: slope,
        quality,
        low_confidence: quality > FIT_QUALITY_THRESHOLD,
    })
}

/// Per-packet inter-antenna ratios over time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RatioSeries {
    pub timestamps: Vec<f64>,
    pub values: Vec<Complex64>,
    /// Timestamps of packets dropped because the reference peak was too weak
    /// or the packet could not be synchronized.
    pub flagged: Vec<f64>,
}

impl RatioSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn push(&mut self, t: f64, value: Complex64) -> Result<()> {
        if let Some(&last) = self.timestamps.last() {
            if t.is_nan() || t <= last {
                return Err(Error::Domain(format!(
                    "ratio timestamps must increase: {t} after {last}"
                )));
            }
        }
        self.timestamps.push(t);
        self.values.push(value);
        Ok(())
    }

    /// Appends `other`, which must start after the last sample of `self`.
    pub fn append(&mut self, other: &RatioSeries) -> Result<()> {
        for (t, v) in other.timestamps.iter().zip(&other.values) {
            self.push(*t, *v)?;
        }
        self.flagged.extend_from_slice(&other.flagged);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, Complex64)> + '_ {
        self.timestamps.iter().copied().zip(self.values.iter().copied())
    }
}

/// Divides the preamble peaks of `rx2` by those of `rx1` for one packet.
///
/// Returns a one-sample series stamped with `rx1.start_time`, or an empty
/// series with the packet flagged when every reference peak falls below the
/// floor or the packet cannot be synchronized.
pub fn antenna_division(rx1: &IqBuffer, rx2: &IqBuffer, layout: &FrameLayout) -> Result<RatioSeries> {
    if rx1.len() != rx2.len() || rx1.sample_rate != rx2.sample_rate {
        return Err(Error::Domain("receive buffers must be sample aligned".into()));
    }
    let mut series = RatioSeries::new();
    let t = rx1.start_time;
    let p = layout.params;
    let sps = p.samples_per_symbol();
    let sync = match detect_preamble(rx1, &p) {
        Ok(s) => s,
        Err(_) => {
            series.flagged.push(t);
            return Ok(series);
        }
    };
    let start = match sync.sfd_start.checked_sub(layout.n_preamble * sps) {
        Some(s) => s,
        None => {
            series.flagged.push(t);
            return Ok(series);
        }
    };
    let bin = sync.cfo_bin.rem_euclid(p.num_bins() as i64) as usize;
    let demod = Demodulator::new(&p);
    let peaks: Vec<(Complex64, Complex64)> = (0..layout.n_preamble)
        .map(|i| {
            let w = start + i * sps..start + (i + 1) * sps;
            let a = demod.dechirp(&rx1.samples[w.clone()])?[bin];
            let b = demod.dechirp(&rx2.samples[w])?[bin];
            Ok((a, b))
        })
        .collect::<Result<_>>()?;
    let mean_ref = peaks.iter().map(|(a, _)| a.norm()).sum::<f64>() / peaks.len() as f64;
    let ratios: Vec<Complex64> = peaks
        .iter()
        .filter(|(a, _)| a.norm() >= DIVISION_FLOOR * mean_ref && a.norm() > 0.0)
        .map(|(a, b)| b / a)
        .collect();
    if ratios.is_empty() {
        series.flagged.push(t);
        return Ok(series);
    }
    let mean = ratios.iter().sum::<Complex64>() / ratios.len() as f64;
    series.push(t, mean)?;
    Ok(series)
}

/// Passes one emitted buffer through the multipath of two receive antennas
/// that share a clock. Carrier and sampling offsets come from `rx1_scene` and
/// apply to both; noise is independent per antenna.
pub fn receive_two_antennas(
    tx: &IqBuffer,
    rx1_scene: &ChannelScene,
    rx2_scene: &ChannelScene,
    t: f64,
    fc: f64,
) -> (IqBuffer, IqBuffer) {
    let imp = &rx1_scene.impairments;
    let rx = |scene: &ChannelScene, tag: u8| {
        let prop = propagate(tx, scene, TxAntenna::First, t, fc);
        impair(&prop, imp, noise_key(imp.rng_seed, t, tag))
    };
    let mut a = rx(rx1_scene, 11);
    let mut b = rx(rx2_scene, 12);
    // identical delays keep the two copies aligned; pad the shorter one
    let len = a.len().max(b.len());
    a.samples.resize(len, Complex64::new(0.0, 0.0));
    b.samples.resize(len, Complex64::new(0.0, 0.0));
    (a, b)
}

/// Receives one emission on two antennas and divides their preamble peaks.
pub fn sense_packet(
    emission: &Emission,
    rx1_scene: &ChannelScene,
    rx2_scene: &ChannelScene,
    fc: f64,
) -> Result<RatioSeries> {
    let tx = emission.reassembled();
    let (a, b) = receive_two_antennas(&tx, rx1_scene, rx2_scene, emission.t_start, fc);
    antenna_division(&a, &b, &emission.layout)
}
