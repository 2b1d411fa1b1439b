//! Packet assembly, synchronization and decoding.
//!
//! A frame is `n_preamble` base up-chirps, `n_sfd` base down-chirps and one
//! up-chirp per payload symbol. The receiver finds symbol timing from the
//! preamble/SFD pair, keeps the raw per-symbol preamble peaks for sensing and
//! demodulates the payload after removing the carrier offset.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iq::IqBuffer;
use crate::phy_css::{chirp_unchecked, peak_of, peak_to_mean_ratio, ChirpDirection, ChirpParams, Demodulator, Symbol};
use crate::wrap_phase;

/// Minimum dechirped peak-to-mean power ratio for a window to count as a
/// chirp. Pure noise over 128 bins exceeds it with probability below 1e-3.
pub const DETECTION_THRESHOLD: f64 = 12.0;

/// Number of windows past the first stable pair searched for the SFD.
const SFD_SEARCH_WINDOWS: usize = 64;

/// Symbol-level map of a packet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFrameLayout", into = "RawFrameLayout")]
pub struct FrameLayout {
    pub n_preamble: usize,
    pub n_sfd: usize,
    pub payload: Vec<Symbol>,
    pub switch_index: Option<usize>,
    pub params: ChirpParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrameLayout {
    #[serde(default = "default_preamble")]
    n_preamble: usize,
    #[serde(default = "default_sfd")]
    n_sfd: usize,
    #[serde(default)]
    payload: Vec<u32>,
    #[serde(default)]
    switch_index: Option<usize>,
    #[serde(default)]
    params: ChirpParams,
}

pub(crate) fn default_preamble() -> usize {
    8
}
pub(crate) fn default_sfd() -> usize {
    2
}

impl TryFrom<RawFrameLayout> for FrameLayout {
    type Error = Error;

    fn try_from(raw: RawFrameLayout) -> Result<Self> {
        FrameLayout::new(raw.params, raw.n_preamble, raw.n_sfd, &raw.payload, raw.switch_index)
    }
}

impl From<FrameLayout> for RawFrameLayout {
    fn from(l: FrameLayout) -> Self {
        RawFrameLayout {
            n_preamble: l.n_preamble,
            n_sfd: l.n_sfd,
            payload: l.payload.iter().map(|s| s.value()).collect(),
            switch_index: l.switch_index,
            params: l.params,
        }
    }
}

impl FrameLayout {
    pub fn new(
        params: ChirpParams,
        n_preamble: usize,
        n_sfd: usize,
        payload: &[u32],
        switch_index: Option<usize>,
    ) -> Result<Self> {
        if n_preamble < 2 {
            return Err(Error::Config(format!(
                "n_preamble must be at least 2, got {n_preamble}"
            )));
        }
        if n_sfd < 1 {
            return Err(Error::Config("n_sfd must be at least 1".into()));
        }
        if let Some(s) = switch_index {
            if s < 1 || s >= n_preamble {
                return Err(Error::Config(format!(
                    "switch_index {s} must lie in [1, {}]",
                    n_preamble - 1
                )));
            }
        }
        let payload = payload
            .iter()
            .map(|&v| Symbol::new(v, &params))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_preamble,
            n_sfd,
            payload,
            switch_index,
            params,
        })
    }

    /// Default 8 + 2 layout with the given payload and no switch.
    pub fn with_payload(params: ChirpParams, payload: &[u32]) -> Result<Self> {
        Self::new(params, default_preamble(), default_sfd(), payload, None)
    }

    pub fn total_symbols(&self) -> usize {
        self.n_preamble + self.n_sfd + self.payload.len()
    }

    pub fn total_samples(&self) -> usize {
        self.total_symbols() * self.params.samples_per_symbol()
    }

    /// Time on air in seconds.
    pub fn airtime(&self) -> f64 {
        self.total_symbols() as f64 * self.params.symbol_duration()
    }

    /// Index of the first payload symbol.
    pub fn payload_start_symbol(&self) -> usize {
        self.n_preamble + self.n_sfd
    }
}

/// Concatenates preamble, SFD and payload chirps.
pub fn build_frame(layout: &FrameLayout) -> IqBuffer {
    let p = &layout.params;
    let up0 = chirp_unchecked(p, 0, ChirpDirection::Up);
    let down0 = chirp_unchecked(p, 0, ChirpDirection::Down);
    let mut samples = Vec::with_capacity(layout.total_samples());
    for _ in 0..layout.n_preamble {
        samples.extend_from_slice(&up0.samples);
    }
    for _ in 0..layout.n_sfd {
        samples.extend_from_slice(&down0.samples);
    }
    for s in &layout.payload {
        samples.extend(chirp_unchecked(p, s.value(), ChirpDirection::Up).samples);
    }
    IqBuffer {
        samples,
        sample_rate: p.sample_rate,
        start_time: 0.0,
    }
}

/// Timing and coarse frequency found by [`detect_preamble`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncResult {
    /// Sample index of the first preamble symbol.
    pub offset: usize,
    /// Sample index of the first SFD symbol.
    pub sfd_start: usize,
    /// Integer carrier offset in bins, signed.
    pub cfo_bin: i64,
    /// Preamble windows seen before the SFD.
    pub preamble_symbols: usize,
}

/// Why synchronization failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SyncFailure {
    TooShort { samples: usize, required: usize },
    NoPreamble,
    NoSfd,
}

impl std::fmt::Display for SyncFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SyncFailure::TooShort { samples, required } => {
                write!(f, "stream of {samples} samples is shorter than {required}")
            }
            SyncFailure::NoPreamble => write!(f, "no stable preamble found"),
            SyncFailure::NoSfd => write!(f, "preamble found but no start frame delimiter"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct WindowStats {
    up_bin: usize,
    up_ratio: f64,
    down_bin: usize,
    down_ratio: f64,
}

fn bin_distance(a: usize, b: usize, n: usize) -> usize {
    let d = (a + n - b) % n;
    d.min(n - d)
}

fn signed_bin(b: usize, n: usize) -> i64 {
    if b >= n / 2 {
        b as i64 - n as i64
    } else {
        b as i64
    }
}

/// Two-stage preamble synchronizer.
///
/// Coarse: the first pair of symbol-spaced windows with a strong, stable
/// up-chirp bin marks the preamble; the strongest down-chirp window marks the
/// SFD. Timing and integer carrier offset separate because a late window
/// shifts up-chirp bins up and down-chirp bins down, while a carrier offset
/// shifts both the same way. Fine: the grid is nudged by up to one chip to
/// maximize energy at the expected bin.
pub fn detect_preamble(stream: &IqBuffer, params: &ChirpParams) -> std::result::Result<SyncResult, SyncFailure> {
    Synchronizer::new(params).detect(&stream.samples)
}

struct Synchronizer {
    demod: Demodulator,
}

impl Synchronizer {
    fn new(params: &ChirpParams) -> Self {
        Self {
            demod: Demodulator::new(params),
        }
    }

    fn stats(&self, window: &[Complex64]) -> WindowStats {
        let up = self.demod.dechirp(window).expect("window length checked");
        let down = self.demod.dechirp_down(window).expect("window length checked");
        WindowStats {
            up_bin: peak_of(&up).bin,
            up_ratio: peak_to_mean_ratio(&up),
            down_bin: peak_of(&down).bin,
            down_ratio: peak_to_mean_ratio(&down),
        }
    }

    fn detect(&self, samples: &[Complex64]) -> std::result::Result<SyncResult, SyncFailure> {
        let p = *self.demod.params();
        let sps = p.samples_per_symbol();
        let n = p.num_bins();
        let os = p.oversampling();
        if samples.len() < 2 * sps {
            return Err(SyncFailure::TooShort {
                samples: samples.len(),
                required: 2 * sps,
            });
        }
        let n_windows = samples.len() / sps;
        let window = |j: usize| &samples[j * sps..(j + 1) * sps];

        // coarse: first stable pair of strong up-chirp windows
        let mut prev: Option<WindowStats> = None;
        let mut run_start = None;
        for j in 0..n_windows {
            let st = self.stats(window(j));
            if let Some(pr) = prev {
                if pr.up_ratio >= DETECTION_THRESHOLD
                    && st.up_ratio >= DETECTION_THRESHOLD
                    && bin_distance(pr.up_bin, st.up_bin, n) <= 1
                {
                    run_start = Some(j - 1);
                    break;
                }
            }
            prev = Some(st);
        }
        let j0 = run_start.ok_or(SyncFailure::NoPreamble)?;
        let up_ref = self.stats(window(j0 + 1));
        let up_bin = up_ref.up_bin;

        let down = (j0..n_windows.min(j0 + SFD_SEARCH_WINDOWS))
            .map(|j| self.stats(window(j)))
            .max_by(|a, b| a.down_ratio.total_cmp(&b.down_ratio))
            .ok_or(SyncFailure::NoSfd)?;
        if down.down_ratio < DETECTION_THRESHOLD {
            return Err(SyncFailure::NoSfd);
        }

        // up = tau + cfo, down = cfo - tau (mod n); two solutions n/2 apart
        let diff = (up_bin + n - down.down_bin) % n;
        let candidates = [diff / 2, diff / 2 + n / 2];
        let (tau_chips, cfo) = candidates
            .iter()
            .map(|&tau| (tau, (up_bin + n - tau % n) % n))
            .min_by_key(|&(_, c)| signed_bin(c, n).abs())
            .expect("two candidates");

        let coarse_grid = (sps - (tau_chips * os) % sps) % sps;

        // fine: +-os samples around the coarse grid, scored at the expected bin
        let score = |grid: usize| -> f64 {
            let mut total = 0.0;
            let mut i = 0;
            let first = (j0 * sps).saturating_sub(sps);
            while grid + (i + 1) * sps <= samples.len() && i < 2 * SFD_SEARCH_WINDOWS {
                let start = grid + i * sps;
                if start >= first {
                    let w = &samples[start..start + sps];
                    let up = self.demod.dechirp(w).expect("length");
                    let dn = self.demod.dechirp_down(w).expect("length");
                    total += up[cfo].norm().max(dn[cfo].norm());
                }
                i += 1;
            }
            total
        };
        let mut grid = coarse_grid;
        let mut best = score(coarse_grid);
        for delta in 1..=os as isize {
            for cand in [coarse_grid as isize - delta, coarse_grid as isize + delta] {
                let g = cand.rem_euclid(sps as isize) as usize;
                let s = score(g);
                if s > best + 1e-9 * best.abs() {
                    best = s;
                    grid = g;
                }
            }
        }

        // classify aligned windows: preamble run followed by the SFD
        let is_up = |st: &WindowStats| st.up_ratio >= DETECTION_THRESHOLD && bin_distance(st.up_bin, cfo, n) <= 1;
        let is_down = |st: &WindowStats| st.down_ratio >= DETECTION_THRESHOLD && bin_distance(st.down_bin, cfo, n) <= 1;
        let aligned: Vec<WindowStats> = (0..)
            .map(|i| grid + i * sps)
            .take_while(|start| start + sps <= samples.len())
            .map(|start| self.stats(&samples[start..start + sps]))
            .collect();
        // first aligned window no earlier than one symbol before the stable pair
        let earliest = (j0 * sps).saturating_sub(sps);
        let search_from = earliest.saturating_sub(grid).div_ceil(sps);
        let sfd_idx = (search_from.max(1)..aligned.len())
            .find(|&i| is_down(&aligned[i]) && !is_down(&aligned[i - 1]))
            .ok_or(SyncFailure::NoSfd)?;
        let mut first_up = sfd_idx;
        while first_up > 0 && is_up(&aligned[first_up - 1]) {
            first_up -= 1;
        }
        if first_up == sfd_idx {
            return Err(SyncFailure::NoPreamble);
        }
        Ok(SyncResult {
            offset: grid + first_up * sps,
            sfd_start: grid + sfd_idx * sps,
            cfo_bin: signed_bin(cfo, n),
            preamble_symbols: sfd_idx - first_up,
        })
    }
}

/// Raw dechirped peak of one preamble symbol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreambleObservation {
    pub bin: usize,
    /// radians
    pub peak_phase: f64,
    pub peak_magnitude: f64,
    #[serde(skip)]
    pub value: Complex64,
}

/// Output of [`decode_frame`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFrame {
    pub payload: Vec<Symbol>,
    pub preamble_metadata: Vec<PreambleObservation>,
    pub sync_offset: usize,
    pub ok: bool,
    /// Estimated carrier offset in bins (integer plus fractional part).
    pub cfo_bins: f64,
    pub diagnostics: Option<String>,
}

impl DecodedFrame {
    fn failure(reason: impl Into<String>) -> Self {
        DecodedFrame {
            payload: Vec::new(),
            preamble_metadata: Vec::new(),
            sync_offset: 0,
            ok: false,
            cfo_bins: 0.0,
            diagnostics: Some(reason.into()),
        }
    }
}

/// Circular median of angles: the sample minimizing total circular distance.
fn circular_median(angles: &[f64]) -> Option<f64> {
    angles
        .iter()
        .map(|&a| {
            let cost: f64 = angles.iter().map(|&b| wrap_phase(b - a).abs()).sum();
            (a, cost)
        })
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(a, _)| a)
}

/// Synchronizes, records preamble peaks and demodulates the payload.
///
/// Payload length and preamble size come from `layout_hint`; no header is
/// parsed. Timing is anchored on the SFD, so a phase jump anywhere in the
/// preamble leaves the payload untouched.
pub fn decode_frame(stream: &IqBuffer, layout_hint: &FrameLayout) -> DecodedFrame {
    let p = layout_hint.params;
    let sps = p.samples_per_symbol();
    let n = p.num_bins();
    let sync = match detect_preamble(stream, &p) {
        Ok(s) => s,
        Err(e) => return DecodedFrame::failure(format!("sync failed: {e}")),
    };
    let preamble_len = layout_hint.n_preamble * sps;
    if sync.sfd_start < preamble_len {
        return DecodedFrame::failure(format!(
            "SFD at sample {} leaves no room for {} preamble symbols",
            sync.sfd_start, layout_hint.n_preamble
        ));
    }
    let mut start = sync.sfd_start - preamble_len;
    let needed = start + layout_hint.total_samples();
    if stream.len() < needed {
        return DecodedFrame::failure(format!(
            "truncated stream: frame needs {needed} samples, got {}",
            stream.len()
        ));
    }

    let demod = Demodulator::new(&p);
    let observe = |start: usize, bin: usize| -> Vec<PreambleObservation> {
        (0..layout_hint.n_preamble)
            .map(|i| {
                let w = &stream.samples[start + i * sps..start + (i + 1) * sps];
                let v = demod.dechirp(w).expect("length checked")[bin];
                PreambleObservation {
                    bin,
                    peak_phase: v.arg(),
                    peak_magnitude: v.norm(),
                    value: v,
                }
            })
            .collect()
    };
    let mut metadata = observe(start, sync.cfo_bin.rem_euclid(n as i64) as usize);

    // fractional offset from the per-symbol phase advance; the median
    // discards the jump at an antenna switch
    let advances: Vec<f64> = metadata
        .windows(2)
        .map(|w| (w[1].value * w[0].value.conj()).arg())
        .collect();
    let frac = circular_median(&advances).unwrap_or(0.0) / (2.0 * PI);
    let mut cfo_bins = frac + (sync.cfo_bin as f64 - frac).round();

    // Near half a bin the coarse peaks may trade one bin of offset for one
    // chip of timing. Up-chirps cannot tell these apart; the SFD can.
    let os = p.oversampling() as isize;
    let derotated_energy = |start: usize, cfo: f64| -> f64 {
        let step = -2.0 * PI * cfo * p.bin_spacing() / p.sample_rate;
        (0..layout_hint.payload_start_symbol())
            .map(|i| {
                let s0 = start + i * sps;
                let w: Vec<Complex64> = stream.samples[s0..s0 + sps]
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v * Complex64::from_polar(1.0, step * (s0 - start + k) as f64))
                    .collect();
                let spec = if i < layout_hint.n_preamble {
                    demod.dechirp(&w)
                } else {
                    demod.dechirp_down(&w)
                };
                spec.expect("length checked")[0].norm()
            })
            .sum()
    };
    let mut best = (derotated_energy(start, cfo_bins), start, cfo_bins);
    for chips in [-1isize, 0, 1] {
        let Some(s) = start.checked_add_signed(chips * os) else {
            continue;
        };
        if s + layout_hint.total_samples() > stream.len() {
            continue;
        }
        for bins in [-1.0, 0.0, 1.0] {
            if chips == 0 && bins == 0.0 {
                continue;
            }
            let e = derotated_energy(s, cfo_bins + bins);
            if e > best.0 * (1.0 + 1e-9) {
                best = (e, s, cfo_bins + bins);
            }
        }
    }
    if best.1 != start || best.2 != cfo_bins {
        (_, start, cfo_bins) = best;
        metadata = observe(start, (cfo_bins.round() as i64).rem_euclid(n as i64) as usize);
    }

    let step = -2.0 * PI * cfo_bins * p.bin_spacing() / p.sample_rate;
    let payload_start = start + layout_hint.payload_start_symbol() * sps;
    let payload = (0..layout_hint.payload.len())
        .map(|i| {
            let s0 = payload_start + i * sps;
            let w: Vec<Complex64> = stream.samples[s0..s0 + sps]
                .iter()
                .enumerate()
                .map(|(k, v)| v * Complex64::from_polar(1.0, step * (s0 - start + k) as f64))
                .collect();
            demod.demod(&w).expect("length checked").symbol
        })
        .collect();

    DecodedFrame {
        payload,
        preamble_metadata: metadata,
        sync_offset: start,
        ok: true,
        cfo_bins,
        diagnostics: None,
    }
}
