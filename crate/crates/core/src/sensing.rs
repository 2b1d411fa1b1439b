//! Application outputs: soil moisture from the inter-antenna phase, and a
//! moving/still decision from the inter-antenna ratio series.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{phase_for_permittivity, topp, MOISTURE_MAX, MOISTURE_MIN};
use crate::error::{Error, Result};
use crate::isac_rx::{PhaseEstimate, RatioSeries};
use crate::SPEED_OF_LIGHT;

/// Phase slack (radians) past either end of the physical range that is
/// still accepted and clamped to the endpoint.
pub const EDGE_TOLERANCE_RAD: f64 = 0.3;

/// Minimum ratio-series packet rate for walking motion (twice 2 Hz).
pub const MIN_PACKET_RATE_HZ: f64 = 4.0;

pub const DEFAULT_THRESHOLD_MULTIPLIER: f64 = 5.0;

const BISECTION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoistureReading {
    pub theta_hat: f64,
    pub epsilon_hat: f64,
    /// Soil-leg phase after branch selection, radians.
    pub delta_phi_used: f64,
    /// Residual RMS of the drift fit, radians.
    pub confidence: f64,
    pub low_confidence: bool,
    /// More than one branch fit and no prior was given.
    pub ambiguous: bool,
    /// The phase fell slightly outside the physical range and was clamped.
    pub clamped: bool,
}

/// Inverts the Topp polynomial on `[0, 0.5]` by bisection.
pub fn moisture_of_permittivity(eps_r: f64) -> Result<f64> {
    let (lo_eps, hi_eps) = (topp(MOISTURE_MIN), topp(MOISTURE_MAX));
    if !(lo_eps..=hi_eps).contains(&eps_r) {
        return Err(Error::Domain(format!(
            "permittivity {eps_r} outside [{lo_eps}, {hi_eps}]"
        )));
    }
    let (mut lo, mut hi) = (MOISTURE_MIN, MOISTURE_MAX);
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if topp(mid) < eps_r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Number of `2 pi` branches the soil phase can occupy for separation `d`.
pub fn branch_count(d: f64, fc: f64) -> usize {
    let hi = phase_for_permittivity(topp(MOISTURE_MAX), d, fc);
    let lo = phase_for_permittivity(topp(MOISTURE_MIN), d, fc);
    ((hi / (2.0 * PI)).floor() - (lo / (2.0 * PI)).floor()) as usize + 1
}

/// Moisture from a measured inter-antenna phase.
///
/// The second antenna's signal is delayed by the soil leg, so the measured
/// step is the negative soil phase. Every `2 pi` branch whose phase lies in
/// the physical range (with [`EDGE_TOLERANCE_RAD`] slack) is a candidate;
/// the one closest to `prior` wins, or the lowest without a prior.
pub fn moisture_from_phase(est: &PhaseEstimate, d: f64, fc: f64, prior: Option<f64>) -> Result<MoistureReading> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::Domain(format!("antenna separation must be positive, got {d}")));
    }
    if !est.delta_phi_wrapped.is_finite() {
        return Err(Error::Estimation("non-finite phase estimate".into()));
    }
    let base = (-est.delta_phi_wrapped).rem_euclid(2.0 * PI);
    let phi_lo = phase_for_permittivity(topp(MOISTURE_MIN), d, fc);
    let phi_hi = phase_for_permittivity(topp(MOISTURE_MAX), d, fc);
    let k_max = ((phi_hi + EDGE_TOLERANCE_RAD) / (2.0 * PI)).ceil() as i64;

    let theta_of = |phi: f64| -> Result<(f64, bool)> {
        let clamped = phi.clamp(phi_lo, phi_hi);
        let eps = (clamped * SPEED_OF_LIGHT / (2.0 * PI * fc * d)).powi(2);
        let eps = eps.clamp(topp(MOISTURE_MIN), topp(MOISTURE_MAX));
        Ok((moisture_of_permittivity(eps)?, clamped != phi))
    };
    let mut candidates = Vec::new();
    for k in 0..=k_max {
        let phi = base + 2.0 * PI * k as f64;
        if phi >= phi_lo - EDGE_TOLERANCE_RAD && phi <= phi_hi + EDGE_TOLERANCE_RAD {
            let (theta, clamped) = theta_of(phi)?;
            candidates.push((phi, theta, clamped));
        }
    }
    let ambiguous = candidates.len() > 1 && prior.is_none();
    let chosen = match prior {
        Some(p) => candidates
            .iter()
            .min_by(|a, b| (a.1 - p).abs().total_cmp(&(b.1 - p).abs()))
            .copied(),
        None => candidates.first().copied(),
    };
    let (phi, theta, clamped) = chosen.ok_or(Error::MoistureOutOfRange {
        delta_phi: est.delta_phi_wrapped,
    })?;
    Ok(MoistureReading {
        theta_hat: theta,
        epsilon_hat: topp(theta),
        delta_phi_used: phi,
        confidence: est.quality,
        low_confidence: est.low_confidence || ambiguous || clamped,
        ambiguous,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Moving,
    Still,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PresenceState {
    pub state: Motion,
    pub window_start: f64,
    pub window_end: f64,
    pub metric: f64,
    pub threshold_used: f64,
}

/// Output of the sensing pipelines, one entry per packet or window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SensingReport {
    Moisture {
        node_id: u32,
        timestamp: f64,
        reading: MoistureReading,
    },
    Presence {
        node_id: u32,
        state: PresenceState,
    },
}

/// Spread of a window of ratios: RMS of `|v / mean - 1|`.
pub fn normalized_spread(values: &[Complex64]) -> f64 {
    if values.iter().all(|v| *v == values[0]) {
        return 0.0;
    }
    let mean = values.iter().sum::<Complex64>() / values.len() as f64;
    if mean.norm() == 0.0 {
        return f64::INFINITY;
    }
    (values.iter().map(|v| (v / mean - 1.0).norm_sqr()).sum::<f64>() / values.len() as f64).sqrt()
}

/// Average packet rate of the series in Hz.
pub fn packet_rate(series: &RatioSeries) -> f64 {
    match (series.timestamps.first(), series.timestamps.last()) {
        (Some(a), Some(b)) if b > a => (series.len() - 1) as f64 / (b - a),
        _ => 0.0,
    }
}

/// Consecutive non-overlapping windows of length `window` and their metrics.
pub fn window_metrics(series: &RatioSeries, window: f64) -> Result<Vec<(f64, f64, f64)>> {
    if !(window > 0.0 && window.is_finite()) {
        return Err(Error::Domain(format!("window must be positive, got {window}")));
    }
    let rate = packet_rate(series);
    if rate < MIN_PACKET_RATE_HZ {
        return Err(Error::SamplingRate {
            actual_hz: rate,
            required_hz: MIN_PACKET_RATE_HZ,
        });
    }
    let t0 = series.timestamps[0];
    // the last packet covers one mean spacing past its timestamp
    let span = series.timestamps[series.len() - 1] - t0 + 1.0 / rate;
    let n_windows = (span / window + 1e-9).floor() as usize;
    if n_windows == 0 {
        return Err(Error::Domain(format!(
            "series spans {span} s, shorter than one {window} s window"
        )));
    }
    let mut out = Vec::with_capacity(n_windows);
    let mut idx = 0;
    for w in 0..n_windows {
        let (start, end) = (t0 + w as f64 * window, t0 + (w + 1) as f64 * window);
        let mut vals = Vec::new();
        while idx < series.len() && series.timestamps[idx] < end - 1e-12 {
            if series.timestamps[idx] >= start - 1e-12 {
                vals.push(series.values[idx]);
            }
            idx += 1;
        }
        out.push((start, end, normalized_spread(&vals)));
    }
    Ok(out)
}

/// Moving/still decision per window.
pub fn detect_presence(series: &RatioSeries, window: f64, threshold: f64) -> Result<Vec<PresenceState>> {
    Ok(window_metrics(series, window)?
        .into_iter()
        .map(|(window_start, window_end, metric)| PresenceState {
            state: if metric > threshold {
                Motion::Moving
            } else {
                Motion::Still
            },
            window_start,
            window_end,
            metric,
            threshold_used: threshold,
        })
        .collect())
}

/// Threshold from a recording of a still scene: `multiplier` times the RMS
/// of the per-window metric.
pub fn calibrate_threshold(baseline: &RatioSeries, multiplier: f64, window: f64) -> Result<f64> {
    if !(multiplier > 0.0 && multiplier.is_finite()) {
        return Err(Error::Calibration(format!(
            "multiplier must be positive, got {multiplier}"
        )));
    }
    let metrics = match window_metrics(baseline, window) {
        Ok(m) => m,
        Err(Error::SamplingRate { .. }) | Err(Error::Domain(_)) if baseline.len() < 2 => {
            return Err(Error::Calibration(format!(
                "baseline has {} samples; need at least two windows",
                baseline.len()
            )))
        }
        Err(e) => return Err(e),
    };
    if metrics.len() < 2 {
        return Err(Error::Calibration(format!(
            "baseline covers {} window(s); need at least two",
            metrics.len()
        )));
    }
    let rms = (metrics.iter().map(|m| m.2 * m.2).sum::<f64>() / metrics.len() as f64).sqrt();
    Ok(multiplier * rms)
}
