//! Node-side behaviour: antenna switching inside the preamble, null sensing
//! packets and duty-cycle-aware scheduling.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framing::{build_frame, default_preamble, default_sfd, FrameLayout};
use crate::iq::IqBuffer;
use crate::phy_css::ChirpParams;

/// Regulatory ceiling on the outdoor duty cycle.
pub const MAX_OUTDOOR_DUTY_CYCLE: f64 = 0.01;

/// Payload length of an outdoor data packet when not configured.
pub const DEFAULT_DATA_PAYLOAD_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeMode {
    /// Battery node with two buried antennas; sensing rides on data packets.
    OutdoorSoil,
    /// Mains-powered node sending dedicated null packets for sensing.
    IndoorPresence,
}

/// Per-node configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNodeConfig", into = "RawNodeConfig")]
pub struct NodeConfig {
    pub node_id: u32,
    pub mode: NodeMode,
    pub params: ChirpParams,
    pub duty_cycle_limit: f64,
    /// Preamble symbol at which the RF switch moves to antenna 2.
    pub switch_index: Option<usize>,
    /// Seconds between null packets (indoor).
    pub sensing_packet_interval: Option<f64>,
    /// Requested seconds between data packets (outdoor); `None` takes the
    /// shortest legal interval.
    pub tx_interval: Option<f64>,
    pub freq_channel: usize,
    pub n_preamble: usize,
    pub n_sfd: usize,
    /// Payload symbols per packet.
    pub payload_len: usize,
    /// First transmission time within the schedule, seconds.
    pub slot_offset: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNodeConfig {
    node_id: u32,
    mode: NodeMode,
    #[serde(default)]
    params: ChirpParams,
    #[serde(default = "default_duty")]
    duty_cycle_limit: f64,
    #[serde(default)]
    switch_index: Option<usize>,
    #[serde(default)]
    sensing_packet_interval: Option<f64>,
    #[serde(default)]
    tx_interval: Option<f64>,
    #[serde(default)]
    freq_channel: usize,
    #[serde(default = "default_preamble")]
    n_preamble: usize,
    #[serde(default = "default_sfd")]
    n_sfd: usize,
    #[serde(default)]
    payload_len: Option<usize>,
    #[serde(default)]
    slot_offset: f64,
}

fn default_duty() -> f64 {
    MAX_OUTDOOR_DUTY_CYCLE
}

impl TryFrom<RawNodeConfig> for NodeConfig {
    type Error = Error;
    fn try_from(r: RawNodeConfig) -> Result<Self> {
        let switch_index = match (r.mode, r.switch_index) {
            (NodeMode::OutdoorSoil, None) => Some(r.n_preamble / 2),
            (_, s) => s,
        };
        let payload_len = r.payload_len.unwrap_or(match r.mode {
            NodeMode::OutdoorSoil => DEFAULT_DATA_PAYLOAD_LEN,
            NodeMode::IndoorPresence => 0,
        });
        let cfg = NodeConfig {
            node_id: r.node_id,
            mode: r.mode,
            params: r.params,
            duty_cycle_limit: r.duty_cycle_limit,
            switch_index,
            sensing_packet_interval: r.sensing_packet_interval,
            tx_interval: r.tx_interval,
            freq_channel: r.freq_channel,
            n_preamble: r.n_preamble,
            n_sfd: r.n_sfd,
            payload_len,
            slot_offset: r.slot_offset,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<NodeConfig> for RawNodeConfig {
    fn from(c: NodeConfig) -> Self {
        RawNodeConfig {
            node_id: c.node_id,
            mode: c.mode,
            params: c.params,
            duty_cycle_limit: c.duty_cycle_limit,
            switch_index: c.switch_index,
            sensing_packet_interval: c.sensing_packet_interval,
            tx_interval: c.tx_interval,
            freq_channel: c.freq_channel,
            n_preamble: c.n_preamble,
            n_sfd: c.n_sfd,
            payload_len: Some(c.payload_len),
            slot_offset: c.slot_offset,
        }
    }
}

impl NodeConfig {
    /// Outdoor soil node switching at the middle of the preamble.
    pub fn outdoor(node_id: u32, params: ChirpParams) -> Self {
        let n_preamble = default_preamble();
        NodeConfig {
            node_id,
            mode: NodeMode::OutdoorSoil,
            params,
            duty_cycle_limit: MAX_OUTDOOR_DUTY_CYCLE,
            switch_index: Some(n_preamble / 2),
            sensing_packet_interval: None,
            tx_interval: None,
            freq_channel: 0,
            n_preamble,
            n_sfd: default_sfd(),
            payload_len: DEFAULT_DATA_PAYLOAD_LEN,
            slot_offset: 0.0,
        }
    }

    /// Indoor presence node emitting a null packet every `interval` seconds.
    pub fn indoor(node_id: u32, params: ChirpParams, interval: f64) -> Self {
        NodeConfig {
            node_id,
            mode: NodeMode::IndoorPresence,
            params,
            duty_cycle_limit: MAX_OUTDOOR_DUTY_CYCLE,
            switch_index: None,
            sensing_packet_interval: Some(interval),
            tx_interval: None,
            freq_channel: 0,
            n_preamble: default_preamble(),
            n_sfd: default_sfd(),
            payload_len: 0,
            slot_offset: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_preamble < 2 || self.n_sfd < 1 {
            return Err(Error::Config(format!(
                "node {}: need n_preamble >= 2 and n_sfd >= 1",
                self.node_id
            )));
        }
        if !(self.slot_offset >= 0.0 && self.slot_offset.is_finite()) {
            return Err(Error::Config(format!(
                "node {}: slot_offset must be >= 0",
                self.node_id
            )));
        }
        match self.mode {
            NodeMode::OutdoorSoil => {
                if !(self.duty_cycle_limit > 0.0 && self.duty_cycle_limit <= MAX_OUTDOOR_DUTY_CYCLE) {
                    return Err(Error::Config(format!(
                        "node {}: outdoor duty_cycle_limit {} must lie in (0, {MAX_OUTDOOR_DUTY_CYCLE}]",
                        self.node_id, self.duty_cycle_limit
                    )));
                }
                match self.switch_index {
                    Some(s) if s >= 1 && s < self.n_preamble => {}
                    Some(s) => {
                        return Err(Error::Config(format!(
                            "node {}: switch_index {s} outside preamble [1, {}]",
                            self.node_id,
                            self.n_preamble - 1
                        )))
                    }
                    None => {
                        return Err(Error::Config(format!(
                            "node {}: outdoor nodes need a switch_index",
                            self.node_id
                        )))
                    }
                }
                if let Some(i) = self.tx_interval {
                    if !(i > 0.0 && i.is_finite()) {
                        return Err(Error::Config(format!(
                            "node {}: tx_interval must be positive",
                            self.node_id
                        )));
                    }
                }
            }
            NodeMode::IndoorPresence => {
                if self.switch_index.is_some() {
                    return Err(Error::Config(format!(
                        "node {}: switch_index is only valid for outdoor nodes",
                        self.node_id
                    )));
                }
                match self.sensing_packet_interval {
                    Some(i) if i > 0.0 && i.is_finite() => {}
                    _ => {
                        return Err(Error::Config(format!(
                            "node {}: indoor nodes need a positive sensing_packet_interval",
                            self.node_id
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// Layout of one packet from this node carrying `payload`.
    pub fn layout(&self, payload: &[u32]) -> Result<FrameLayout> {
        FrameLayout::new(self.params, self.n_preamble, self.n_sfd, payload, self.switch_index)
    }

    /// Time on air of one packet.
    pub fn airtime(&self) -> f64 {
        (self.n_preamble + self.n_sfd + self.payload_len) as f64 * self.params.symbol_duration()
    }

    /// Interval between packets this node will actually use.
    pub fn effective_interval(&self) -> Result<f64> {
        let airtime = self.airtime();
        match self.mode {
            NodeMode::OutdoorSoil => {
                let minimal = min_legal_interval(airtime, self.duty_cycle_limit);
                let requested = self.tx_interval.unwrap_or(minimal);
                if requested < minimal * (1.0 - 1e-12) {
                    return Err(Error::ScheduleInfeasible {
                        requested_s: requested,
                        limit: self.duty_cycle_limit,
                        minimal_interval_s: minimal,
                    });
                }
                Ok(requested)
            }
            NodeMode::IndoorPresence => {
                let interval = self.sensing_packet_interval.expect("validated");
                if interval < airtime {
                    return Err(Error::Config(format!(
                        "node {}: interval {interval} s is shorter than the {airtime} s packet",
                        self.node_id
                    )));
                }
                Ok(interval)
            }
        }
    }
}

/// Shortest periodic interval whose airtime never exceeds `limit` of any
/// window at least `airtime / limit` long.
///
/// A window spanning one period plus one packet holds two packets, so the
/// period must satisfy `2 a <= limit (I + a)`; the long-run bound `a / limit`
/// alone is not enough.
pub fn min_legal_interval(airtime: f64, limit: f64) -> f64 {
    airtime * (2.0 - limit) / limit
}

/// Two-antenna emission through a single RF chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub antenna1_samples: IqBuffer,
    pub antenna2_samples: IqBuffer,
    pub t_start: f64,
    pub layout: FrameLayout,
    /// Null packet sent only for sensing.
    pub sensing_only: bool,
}

impl Emission {
    /// Sum of both antenna feeds; equals the unswitched frame.
    pub fn reassembled(&self) -> IqBuffer {
        IqBuffer {
            samples: self
                .antenna1_samples
                .samples
                .iter()
                .zip(&self.antenna2_samples.samples)
                .map(|(a, b)| a + b)
                .collect(),
            sample_rate: self.antenna1_samples.sample_rate,
            start_time: self.t_start,
        }
    }

    /// Number of whole symbols carried by each antenna.
    pub fn symbols_per_antenna(&self) -> (usize, usize) {
        let sps = self.layout.params.samples_per_symbol();
        let count = |b: &IqBuffer| {
            b.samples
                .chunks(sps)
                .filter(|c| c.iter().any(|s| s.norm_sqr() > 0.0))
                .count()
        };
        (count(&self.antenna1_samples), count(&self.antenna2_samples))
    }
}

fn split_at_symbol(frame: IqBuffer, split_symbol: usize, sps: usize, t_start: f64) -> (IqBuffer, IqBuffer) {
    let cut = (split_symbol * sps).min(frame.len());
    let zero = Complex64::new(0.0, 0.0);
    let mut first = frame.samples.clone();
    let mut second = frame.samples;
    first[cut..].iter_mut().for_each(|s| *s = zero);
    second[..cut].iter_mut().for_each(|s| *s = zero);
    let wrap = |samples| IqBuffer {
        samples,
        sample_rate: frame.sample_rate,
        start_time: t_start,
    };
    (wrap(first), wrap(second))
}

/// Data packet whose preamble is split across the two antennas.
///
/// Antenna 1 is selected at the start of every packet and carries preamble
/// symbols `[0, switch_index)`; antenna 2 carries the rest of the preamble,
/// the SFD and the payload.
pub fn emit_switched_frame(cfg: &NodeConfig, payload: &[u32], t_start: f64) -> Result<Emission> {
    if cfg.mode != NodeMode::OutdoorSoil {
        return Err(Error::Config(format!(
            "node {}: switched frames need outdoor_soil mode",
            cfg.node_id
        )));
    }
    let switch = cfg
        .switch_index
        .ok_or_else(|| Error::Config("missing switch_index".into()))?;
    if switch < 1 || switch >= cfg.n_preamble {
        return Err(Error::Config(format!(
            "switch_index {switch} outside preamble [1, {}]",
            cfg.n_preamble - 1
        )));
    }
    let layout = cfg.layout(payload)?;
    let frame = build_frame(&layout);
    let (antenna1_samples, antenna2_samples) = split_at_symbol(frame, switch, cfg.params.samples_per_symbol(), t_start);
    Ok(Emission {
        antenna1_samples,
        antenna2_samples,
        t_start,
        layout,
        sensing_only: false,
    })
}

/// Null sensing packet on antenna 1: preamble, SFD and `payload_len` zero
/// symbols.
pub fn emit_null_frame(cfg: &NodeConfig, t_start: f64) -> Result<Emission> {
    if cfg.mode != NodeMode::IndoorPresence {
        return Err(Error::Config(format!(
            "node {}: null frames need indoor_presence mode",
            cfg.node_id
        )));
    }
    let layout = cfg.layout(&vec![0; cfg.payload_len])?;
    let mut antenna1_samples = build_frame(&layout);
    antenna1_samples.start_time = t_start;
    let antenna2_samples = IqBuffer::zeros(antenna1_samples.len(), antenna1_samples.sample_rate, t_start)?;
    Ok(Emission {
        antenna1_samples,
        antenna2_samples,
        t_start,
        layout,
        sensing_only: true,
    })
}

/// Packet start times in `[0, horizon)` whose airtime ends by `horizon`.
///
/// Outdoor nodes are held to their duty-cycle limit; indoor nodes send every
/// `sensing_packet_interval` regardless of duty cycle.
pub fn schedule_transmissions(cfg: &NodeConfig, horizon: f64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let interval = cfg.effective_interval()?;
    if horizon.is_nan() || horizon <= 0.0 {
        return Ok(Vec::new());
    }
    let airtime = cfg.airtime();
    Ok((0u64..)
        .map(|k| cfg.slot_offset + k as f64 * interval)
        .take_while(|t| t + airtime <= horizon + 1e-12)
        .collect())
}

/// Largest fraction of any window of length `window` spent on air.
pub fn max_window_duty(starts: &[f64], airtime: f64, window: f64) -> f64 {
    let on_air = |w0: f64| -> f64 {
        let w1 = w0 + window;
        starts
            .iter()
            .map(|&t| ((t + airtime).min(w1) - t.max(w0)).max(0.0))
            .sum()
    };
    // the maximum is attained with a window edge on a packet edge
    starts
        .iter()
        .flat_map(|&t| [t, t + airtime - window, t + airtime, t - window])
        .map(on_air)
        .fold(0.0, f64::max)
        / window
}
