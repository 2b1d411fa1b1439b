//! Multi-node network: frequency channels, static time slots, a destructive
//! collision model and per-node delivery and sensing results.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{apply_scene_switched, noise_key, ChannelScene};
use crate::error::{Error, Result};
use crate::framing::decode_frame;
use crate::isac_rx::{antenna_division, estimate_interantenna_phase, receive_two_antennas, RatioSeries};
use crate::isac_tx::{emit_null_frame, emit_switched_frame, schedule_transmissions, NodeConfig, NodeMode};
use crate::sensing::{detect_presence, moisture_from_phase, packet_rate, SensingReport, MIN_PACKET_RATE_HZ};

/// Idle time left between consecutive slots on one channel, seconds.
pub const SLOT_GUARD: f64 = 1e-3;

pub const DEFAULT_PRESENCE_WINDOW: f64 = 1.0;
pub const DEFAULT_PRESENCE_THRESHOLD: f64 = 0.1;

/// A node together with the channel(s) from it to the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkNode {
    pub config: NodeConfig,
    /// Link to gateway antenna 1.
    #[serde(default = "ChannelScene::identity")]
    pub scene: ChannelScene,
    /// Link to gateway antenna 2; its clock impairments are ignored in
    /// favour of antenna 1's (one shared oscillator).
    #[serde(default)]
    pub scene_rx2: Option<ChannelScene>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetworkScenario", into = "RawNetworkScenario")]
pub struct NetworkScenario {
    pub nodes: Vec<NetworkNode>,
    pub n_freq_channels: usize,
    pub gateway_rx_antennas: u8,
    /// seconds
    pub duration: f64,
    pub seed: u64,
    pub presence_window: f64,
    pub presence_threshold: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetworkScenario {
    nodes: Vec<NetworkNode>,
    n_freq_channels: usize,
    #[serde(default = "default_rx_antennas")]
    gateway_rx_antennas: u8,
    duration: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_window")]
    presence_window: f64,
    #[serde(default = "default_threshold")]
    presence_threshold: f64,
}

fn default_rx_antennas() -> u8 {
    1
}
fn default_window() -> f64 {
    DEFAULT_PRESENCE_WINDOW
}
fn default_threshold() -> f64 {
    DEFAULT_PRESENCE_THRESHOLD
}

impl TryFrom<RawNetworkScenario> for NetworkScenario {
    type Error = Error;
    fn try_from(r: RawNetworkScenario) -> Result<Self> {
        let s = NetworkScenario {
            nodes: r.nodes,
            n_freq_channels: r.n_freq_channels,
            gateway_rx_antennas: r.gateway_rx_antennas,
            duration: r.duration,
            seed: r.seed,
            presence_window: r.presence_window,
            presence_threshold: r.presence_threshold,
        };
        s.validate()?;
        Ok(s)
    }
}

impl From<NetworkScenario> for RawNetworkScenario {
    fn from(s: NetworkScenario) -> Self {
        RawNetworkScenario {
            nodes: s.nodes,
            n_freq_channels: s.n_freq_channels,
            gateway_rx_antennas: s.gateway_rx_antennas,
            duration: s.duration,
            seed: s.seed,
            presence_window: s.presence_window,
            presence_threshold: s.presence_threshold,
        }
    }
}

impl NetworkScenario {
    pub fn new(
        nodes: Vec<NetworkNode>,
        n_freq_channels: usize,
        gateway_rx_antennas: u8,
        duration: f64,
        seed: u64,
    ) -> Result<Self> {
        let s = NetworkScenario {
            nodes,
            n_freq_channels,
            gateway_rx_antennas,
            duration,
            seed,
            presence_window: DEFAULT_PRESENCE_WINDOW,
            presence_threshold: DEFAULT_PRESENCE_THRESHOLD,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_freq_channels == 0 {
            return Err(Error::Config("n_freq_channels must be at least 1".into()));
        }
        if !(1..=2).contains(&self.gateway_rx_antennas) {
            return Err(Error::Config(format!(
                "gateway_rx_antennas must be 1 or 2, got {}",
                self.gateway_rx_antennas
            )));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        if !(self.presence_window > 0.0 && self.presence_threshold >= 0.0) {
            return Err(Error::Config(
                "presence window must be positive and threshold >= 0".into(),
            ));
        }
        let mut ids = std::collections::BTreeSet::new();
        for n in &self.nodes {
            n.config.validate()?;
            n.config.effective_interval()?;
            if !ids.insert(n.config.node_id) {
                return Err(Error::Config(format!("duplicate node_id {}", n.config.node_id)));
            }
            if n.config.freq_channel >= self.n_freq_channels {
                return Err(Error::Config(format!(
                    "node {}: freq_channel {} >= n_freq_channels {}",
                    n.config.node_id, n.config.freq_channel, self.n_freq_channels
                )));
            }
        }
        Ok(())
    }
}

fn set_interval(cfg: &mut NodeConfig, interval: f64) {
    match cfg.mode {
        NodeMode::OutdoorSoil => cfg.tx_interval = Some(interval),
        NodeMode::IndoorPresence => cfg.sensing_packet_interval = Some(interval),
    }
}

/// Spreads nodes round-robin over the channels and staggers nodes that share
/// a channel.
///
/// On each channel the shortest interval `P` becomes the frame period, every
/// other interval is rounded up to a multiple of `P`, and nodes take
/// consecutive slots of one airtime plus [`SLOT_GUARD`] inside the period.
/// Fails when the channel's airtime demand exceeds 1, or when the slots do
/// not fit in `P`.
pub fn assign_channels_and_slots(scenario: &NetworkScenario) -> Result<NetworkScenario> {
    scenario.validate()?;
    let mut out = scenario.clone();
    for (i, n) in out.nodes.iter_mut().enumerate() {
        n.config.freq_channel = i % scenario.n_freq_channels;
    }
    for ch in 0..scenario.n_freq_channels {
        let members: Vec<usize> = (0..out.nodes.len())
            .filter(|&i| out.nodes[i].config.freq_channel == ch)
            .collect();
        if members.is_empty() {
            continue;
        }
        let intervals: Vec<f64> = members
            .iter()
            .map(|&i| out.nodes[i].config.effective_interval())
            .collect::<Result<_>>()?;
        let airtimes: Vec<f64> = members.iter().map(|&i| out.nodes[i].config.airtime()).collect();
        let demand: f64 = airtimes.iter().zip(&intervals).map(|(a, i)| a / i).sum();
        if demand > 1.0 {
            return Err(Error::ChannelOverloaded {
                channel: ch,
                required: demand,
                available: 1.0,
            });
        }
        let period = intervals.iter().copied().fold(f64::INFINITY, f64::min);
        let slots: f64 = if members.len() == 1 {
            airtimes[0]
        } else {
            airtimes.iter().map(|a| a + SLOT_GUARD).sum()
        };
        if slots > period + 1e-12 {
            return Err(Error::ChannelOverloaded {
                channel: ch,
                required: slots / period,
                available: 1.0,
            });
        }
        let mut offset = 0.0;
        for (j, &i) in members.iter().enumerate() {
            let cfg = &mut out.nodes[i].config;
            let multiple = (intervals[j] / period - 1e-9).ceil().max(1.0);
            set_interval(cfg, multiple * period);
            cfg.slot_offset = offset;
            offset += airtimes[j] + SLOT_GUARD;
        }
    }
    out.validate()?;
    Ok(out)
}

/// One packet on air.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AirtimeInterval {
    pub node_id: u32,
    pub t_start: f64,
    pub t_end: f64,
    pub freq_channel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionRecord {
    pub node_a: u32,
    pub node_b: u32,
    pub freq_channel: usize,
    pub overlap_start: f64,
    pub overlap_end: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AirtimeLedger {
    /// Sorted by start time, then node id.
    pub intervals: Vec<AirtimeInterval>,
    pub collisions: Vec<CollisionRecord>,
}

impl AirtimeLedger {
    /// Start times of `node_id`'s packets in order.
    pub fn starts_of(&self, node_id: u32) -> Vec<f64> {
        self.intervals
            .iter()
            .filter(|i| i.node_id == node_id)
            .map(|i| i.t_start)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub node_id: u32,
    pub freq_channel: usize,
    pub scheduled: usize,
    pub collided: usize,
    /// Packets decoded with the exact payload.
    pub delivered: usize,
    pub delivery_ratio: f64,
    pub airtime_s: f64,
    pub duty_cycle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkOutcome {
    pub ledger: AirtimeLedger,
    pub stats: Vec<NodeStats>,
    pub reports: Vec<SensingReport>,
    pub ratio_series: Vec<(u32, RatioSeries)>,
}

/// Every packet of every node, sorted by start time then node id.
pub fn build_ledger(scenario: &NetworkScenario) -> Result<AirtimeLedger> {
    let mut intervals = Vec::new();
    for n in &scenario.nodes {
        let airtime = n.config.airtime();
        for t in schedule_transmissions(&n.config, scenario.duration)? {
            intervals.push(AirtimeInterval {
                node_id: n.config.node_id,
                t_start: t,
                t_end: t + airtime,
                freq_channel: n.config.freq_channel,
            });
        }
    }
    intervals.sort_by(|a, b| a.t_start.total_cmp(&b.t_start).then(a.node_id.cmp(&b.node_id)));
    let mut collisions = Vec::new();
    for (i, a) in intervals.iter().enumerate() {
        for b in &intervals[i + 1..] {
            if b.t_start >= a.t_end {
                break;
            }
            if a.freq_channel == b.freq_channel {
                collisions.push(CollisionRecord {
                    node_a: a.node_id,
                    node_b: b.node_id,
                    freq_channel: a.freq_channel,
                    overlap_start: b.t_start,
                    overlap_end: a.t_end.min(b.t_end),
                });
            }
        }
    }
    Ok(AirtimeLedger { intervals, collisions })
}

fn lost_packets(ledger: &AirtimeLedger) -> Vec<bool> {
    let mut lost = vec![false; ledger.intervals.len()];
    for (i, a) in ledger.intervals.iter().enumerate() {
        for (j, b) in ledger.intervals.iter().enumerate().skip(i + 1) {
            if b.t_start >= a.t_end {
                break;
            }
            if a.freq_channel == b.freq_channel {
                lost[i] = true;
                lost[j] = true;
            }
        }
    }
    lost
}

fn reseeded(scene: &ChannelScene, seed: u64, node_id: u32) -> ChannelScene {
    let mut s = scene.clone();
    s.impairments.rng_seed = noise_key(seed ^ scene.impairments.rng_seed, node_id as f64, 0xA5);
    s
}

/// Simulates every scheduled packet. Same-channel overlaps destroy both
/// packets; everything else goes through the node's channel and the
/// gateway receiver, and decoded packets feed the sensing pipelines.
pub fn run_network(scenario: &NetworkScenario) -> Result<NetworkOutcome> {
    scenario.validate()?;
    let ledger = build_ledger(scenario)?;
    let lost = lost_packets(&ledger);
    let mut stats = Vec::new();
    let mut reports = Vec::new();
    let mut ratio_series = Vec::new();

    for node in &scenario.nodes {
        let cfg = &node.config;
        let fc = cfg.params.carrier_freq;
        let scene = reseeded(&node.scene, scenario.seed, cfg.node_id);
        let scene_rx2 = node.scene_rx2.as_ref().map(|s| reseeded(s, scenario.seed, cfg.node_id));
        let mut payload_rng = ChaCha8Rng::seed_from_u64(noise_key(scenario.seed, cfg.node_id as f64, 0x5A));
        let n_bins = cfg.params.num_bins() as u32;
        let mut series = RatioSeries::new();
        let mut prior = None;
        let (mut scheduled, mut collided, mut delivered) = (0, 0, 0);

        for (iv, &is_lost) in ledger.intervals.iter().zip(&lost) {
            if iv.node_id != cfg.node_id {
                continue;
            }
            scheduled += 1;
            let payload: Vec<u32> = (0..cfg.payload_len)
                .map(|_| payload_rng.random_range(0..n_bins))
                .collect();
            if is_lost {
                collided += 1;
                continue;
            }
            match cfg.mode {
                NodeMode::OutdoorSoil => {
                    let e = emit_switched_frame(cfg, &payload, iv.t_start)?;
                    let rx = apply_scene_switched(&e.antenna1_samples, &e.antenna2_samples, &scene, iv.t_start, fc)?;
                    let frame = decode_frame(&rx, &e.layout);
                    if !frame.ok || frame.payload != e.layout.payload {
                        continue;
                    }
                    delivered += 1;
                    let (Some(soil), Some(s)) = (scene.soil, cfg.switch_index) else {
                        continue;
                    };
                    let Ok(est) = estimate_interantenna_phase(&frame, s) else {
                        continue;
                    };
                    if let Ok(reading) = moisture_from_phase(&est, soil.antenna_separation_d, fc, prior) {
                        prior = Some(reading.theta_hat);
                        reports.push(SensingReport::Moisture {
                            node_id: cfg.node_id,
                            timestamp: iv.t_start,
                            reading,
                        });
                    }
                }
                NodeMode::IndoorPresence => {
                    let e = emit_null_frame(cfg, iv.t_start)?;
                    let tx = e.reassembled();
                    let rx2_scene = match (scenario.gateway_rx_antennas, &scene_rx2) {
                        (2, Some(s)) => s,
                        _ => &scene,
                    };
                    let (rx1, rx2) = receive_two_antennas(&tx, &scene, rx2_scene, iv.t_start, fc);
                    let frame = decode_frame(&rx1, &e.layout);
                    if frame.ok && frame.payload == e.layout.payload {
                        delivered += 1;
                    }
                    if scenario.gateway_rx_antennas == 2 && scene_rx2.is_some() {
                        series.append(&antenna_division(&rx1, &rx2, &e.layout)?)?;
                    }
                }
            }
        }

        if series.len() >= 2 && packet_rate(&series) >= MIN_PACKET_RATE_HZ {
            if let Ok(states) = detect_presence(&series, scenario.presence_window, scenario.presence_threshold) {
                reports.extend(states.into_iter().map(|state| SensingReport::Presence {
                    node_id: cfg.node_id,
                    state,
                }));
            }
        }
        if cfg.mode == NodeMode::IndoorPresence && scenario.gateway_rx_antennas == 2 && scene_rx2.is_some() {
            ratio_series.push((cfg.node_id, series));
        }

        let airtime_s = scheduled as f64 * cfg.airtime();
        stats.push(NodeStats {
            node_id: cfg.node_id,
            freq_channel: cfg.freq_channel,
            scheduled,
            collided,
            delivered,
            delivery_ratio: if scheduled == 0 {
                0.0
            } else {
                delivered as f64 / scheduled as f64
            },
            airtime_s,
            duty_cycle: airtime_s / scenario.duration,
        });
    }
    Ok(NetworkOutcome {
        ledger,
        stats,
        reports,
        ratio_series,
    })
}

/// Mean ratio of a series; convenience for reports.
pub fn mean_ratio(series: &RatioSeries) -> Option<Complex64> {
    (!series.is_empty()).then(|| series.values.iter().sum::<Complex64>() / series.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phy_css::ChirpParams;

    fn indoor(id: u32, interval: f64) -> NetworkNode {
        NetworkNode {
            config: NodeConfig::indoor(id, ChirpParams::default(), interval),
            scene: ChannelScene::identity(),
            scene_rx2: None,
        }
    }

    fn outdoor(id: u32) -> NetworkNode {
        NetworkNode {
            config: NodeConfig::outdoor(id, ChirpParams::default()),
            scene: ChannelScene::identity(),
            scene_rx2: None,
        }
    }

    #[test]
    fn one_node_per_channel() {
        let s = NetworkScenario::new((0..4).map(|i| indoor(i, 3.072)).collect(), 4, 1, 10.0, 1).unwrap();
        let a = assign_channels_and_slots(&s).unwrap();
        let chans: Vec<usize> = a.nodes.iter().map(|n| n.config.freq_channel).collect();
        assert_eq!(chans, vec![0, 1, 2, 3]);
        assert!(build_ledger(&a).unwrap().collisions.is_empty());
    }

    #[test]
    fn shared_channel_staggered() {
        let mut nodes = vec![indoor(1, 3.072), indoor(2, 3.072)];
        for n in &mut nodes {
            n.config.payload_len = 20;
        }
        let s = NetworkScenario::new(nodes, 1, 1, 30.0, 1).unwrap();
        let a = assign_channels_and_slots(&s).unwrap();
        let airtime = a.nodes[0].config.airtime();
        assert!((airtime - 0.03072).abs() < 1e-12);
        let gap = (a.nodes[1].config.slot_offset - a.nodes[0].config.slot_offset).abs();
        assert!(gap >= airtime);
        assert!(build_ledger(&a).unwrap().collisions.is_empty());
    }

    #[test]
    fn overloaded_channel() {
        // 20% duty each: interval five airtimes
        let nodes: Vec<NetworkNode> = (0..10).map(|i| indoor(i, 0.01024 * 5.0)).collect();
        let s = NetworkScenario::new(nodes, 1, 1, 10.0, 1).unwrap();
        match assign_channels_and_slots(&s) {
            Err(Error::ChannelOverloaded { channel, required, .. }) => {
                assert_eq!(channel, 0);
                assert!((required - 2.0).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mixed_intervals_round_to_period() {
        let nodes = vec![indoor(1, 1.0), indoor(2, 2.5), outdoor(3)];
        let s = NetworkScenario::new(nodes, 1, 1, 40.0, 1).unwrap();
        let a = assign_channels_and_slots(&s).unwrap();
        assert_eq!(a.nodes[1].config.sensing_packet_interval, Some(3.0));
        assert_eq!(a.nodes[2].config.tx_interval, Some(7.0));
        let ledger = build_ledger(&a).unwrap();
        assert!(ledger.collisions.is_empty());
    }

    #[test]
    fn clean_single_node_delivers_everything() {
        let s = NetworkScenario::new(vec![outdoor(7)], 1, 1, 20.0, 3).unwrap();
        let out = run_network(&s).unwrap();
        assert_eq!(out.stats[0].scheduled, 4);
        assert_eq!(out.stats[0].delivery_ratio, 1.0);
    }

    #[test]
    fn forced_overlap_loses_both() {
        let mut nodes = vec![indoor(1, 1.0), indoor(2, 1.0), indoor(3, 1.0)];
        nodes[1].config.slot_offset = 0.01;
        nodes[2].config.freq_channel = 1;
        let s = NetworkScenario::new(nodes, 2, 1, 5.0, 3).unwrap();
        let out = run_network(&s).unwrap();
        assert_eq!(out.ledger.collisions.len(), 5);
        assert_eq!(out.stats[0].delivered, 0);
        assert_eq!(out.stats[1].delivered, 0);
        assert_eq!(out.stats[2].delivered, 5);
    }

    #[test]
    fn scenario_json_rejects_unknown_keys() {
        let good = r#"{"nodes": [], "n_freq_channels": 1, "duration": 1.0}"#;
        assert!(serde_json::from_str::<NetworkScenario>(good).is_ok());
        let bad = r#"{"nodes": [], "n_freq_channels": 1, "duration": 1.0, "extra": 1}"#;
        assert!(serde_json::from_str::<NetworkScenario>(bad).is_err());
        let zero = r#"{"nodes": [], "n_freq_channels": 0, "duration": 1.0}"#;
        assert!(serde_json::from_str::<NetworkScenario>(zero).is_err());
    }
}
