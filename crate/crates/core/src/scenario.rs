//! Scenario files and the runners behind the command line tool.
//!
//! Every runner computes all outputs in memory and returns them as
//! [`Artifacts`]; nothing touches the output directory unless the whole run
//! succeeded.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{
    apply_scene_switched, human_trajectory, noise_key, ChannelScene, Impairments, MotionKind, PathSpec, SoilProfile,
};
use crate::error::{Error, Result};
use crate::export::{csv_bytes, json_bytes, json_lines_bytes, ratio_rows, Artifacts, RatioRow};
use crate::framing::decode_frame;
use crate::isac_rx::{estimate_interantenna_phase, sense_packet, RatioSeries};
use crate::isac_tx::{emit_null_frame, emit_switched_frame, schedule_transmissions, NodeConfig, NodeMode};
use crate::netsim::{assign_channels_and_slots, run_network as simulate_network, NetworkScenario};
use crate::phy_css::ChirpParams;
use crate::selftest::run_selftest;
use crate::sensing::{calibrate_threshold, detect_presence, moisture_from_phase, Motion, DEFAULT_THRESHOLD_MULTIPLIER};
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioMode {
    Soil,
    Presence,
    Network,
    PhySelftest,
}

impl ScenarioMode {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioMode::Soil => "soil",
            ScenarioMode::Presence => "presence",
            ScenarioMode::Network => "network",
            ScenarioMode::PhySelftest => "phy_selftest",
        }
    }
}

/// Top-level scenario document. Only the section matching `mode` may be
/// present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub mode: ScenarioMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub soil: Option<SoilSweep>,
    #[serde(default)]
    pub presence: Option<PresenceSweep>,
    #[serde(default)]
    pub network: Option<NetworkSection>,
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: ScenarioFile = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let present = [
            ("soil", self.soil.is_some()),
            ("presence", self.presence.is_some()),
            ("network", self.network.is_some()),
        ];
        let wanted = match self.mode {
            ScenarioMode::PhySelftest => None,
            m => Some(m.name()),
        };
        for (name, is_present) in present {
            if is_present && Some(name) != wanted {
                return Err(Error::Config(format!(
                    "section `{name}` is not used by mode `{}`",
                    self.mode.name()
                )));
            }
        }
        match self.mode {
            ScenarioMode::Soil => self.soil.as_ref().map(SoilSweep::validate),
            ScenarioMode::Presence => self.presence.as_ref().map(PresenceSweep::validate),
            ScenarioMode::Network => self.network.as_ref().map(|n| n.network.validate()),
            ScenarioMode::PhySelftest => Some(Ok(())),
        }
        .unwrap_or_else(|| {
            Err(Error::Config(format!(
                "mode `{}` needs a `{}` section",
                self.mode.name(),
                self.mode.name()
            )))
        })
    }

    /// Runs the scenario for its mode.
    pub fn run(&self) -> Result<Artifacts> {
        match self.mode {
            ScenarioMode::Soil => run_soil(self.soil.as_ref().expect("validated"), self.seed),
            ScenarioMode::Presence => run_presence(self.presence.as_ref().expect("validated"), self.seed),
            ScenarioMode::Network => run_network(self.network.as_ref().expect("validated"), self.seed),
            ScenarioMode::PhySelftest => run_phy_selftest(),
        }
    }
}

fn default_outdoor_node() -> NodeConfig {
    NodeConfig::outdoor(1, ChirpParams::default())
}

fn default_distances() -> Vec<f64> {
    vec![10.0]
}

fn default_snrs() -> Vec<Option<f64>> {
    vec![None, Some(20.0), Some(10.0)]
}

fn default_thetas() -> Vec<f64> {
    vec![0.05, 0.15, 0.25, 0.35, 0.45]
}

fn default_separation() -> f64 {
    0.05
}

fn default_packets() -> usize {
    20
}

/// Soil-moisture sweep over link distance, SNR and true moisture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoilSweep {
    #[serde(default = "default_outdoor_node")]
    pub node: NodeConfig,
    /// Node to gateway distance, metres; sets the link delay.
    #[serde(default = "default_distances")]
    pub distances_m: Vec<f64>,
    /// `null` means noise-free.
    #[serde(default = "default_snrs")]
    pub snr_db: Vec<Option<f64>>,
    #[serde(default = "default_thetas")]
    pub thetas: Vec<f64>,
    #[serde(default = "default_separation")]
    pub antenna_separation_d: f64,
    #[serde(default)]
    pub attenuation_per_meter: f64,
    #[serde(default)]
    pub cfo: f64,
    #[serde(default)]
    pub sfo_ppm: f64,
    #[serde(default = "default_packets")]
    pub packets_per_point: usize,
}

impl SoilSweep {
    pub fn validate(&self) -> Result<()> {
        self.node.validate()?;
        if self.node.mode != NodeMode::OutdoorSoil {
            return Err(Error::Config("soil sweep needs an outdoor_soil node".into()));
        }
        if self.distances_m.is_empty() || self.snr_db.is_empty() || self.thetas.is_empty() {
            return Err(Error::Config("soil sweep grid has an empty axis".into()));
        }
        if let Some(d) = self.distances_m.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
            return Err(Error::Config(format!("distance {d} must be >= 0")));
        }
        if self.packets_per_point == 0 {
            return Err(Error::Config("packets_per_point must be at least 1".into()));
        }
        for &theta in &self.thetas {
            SoilProfile::new(theta, self.antenna_separation_d, self.attenuation_per_meter)?;
        }
        let imp = Impairments {
            snr_db: None,
            cfo: self.cfo,
            sfo_ppm: self.sfo_ppm,
            rng_seed: 0,
        };
        imp.validate()?;
        for s in self.snr_db.iter().flatten() {
            Impairments {
                snr_db: Some(*s),
                ..imp
            }
            .validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MoistureRow {
    pub distance_m: f64,
    pub snr_db: Option<f64>,
    pub packet: usize,
    pub theta_true: f64,
    pub theta_hat: Option<f64>,
    pub error: Option<f64>,
    pub decoded_ok: bool,
    pub delta_phi: Option<f64>,
    pub quality: Option<f64>,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoilCondition {
    pub distance_m: f64,
    pub snr_db: Option<f64>,
    pub packets: usize,
    pub decoded: usize,
    pub decode_accuracy: f64,
    pub estimates: usize,
    pub rmse: Option<f64>,
    pub max_abs_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoilSummary {
    pub seed: u64,
    pub packets: usize,
    pub decode_accuracy: f64,
    pub estimate_failures: usize,
    pub max_abs_error: Option<f64>,
    pub conditions: Vec<SoilCondition>,
}

fn rmse(errors: &[f64]) -> Option<f64> {
    (!errors.is_empty()).then(|| (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

fn max_abs(errors: &[f64]) -> Option<f64> {
    errors.iter().map(|e| e.abs()).reduce(f64::max)
}

/// Computes the soil sweep rows and summary without writing anything.
pub fn simulate_soil(sweep: &SoilSweep, seed: u64) -> Result<(Vec<MoistureRow>, SoilSummary)> {
    sweep.validate()?;
    let node = &sweep.node;
    let fc = node.params.carrier_freq;
    let interval = node.effective_interval()?;
    let n_bins = node.params.num_bins() as u32;
    let switch = node.switch_index.expect("validated");
    let mut rows = Vec::new();
    let mut conditions = Vec::new();
    let mut point = 0u64;
    for &distance in &sweep.distances_m {
        for &snr in &sweep.snr_db {
            let mut errors = Vec::new();
            let (mut packets, mut decoded) = (0, 0);
            for &theta in &sweep.thetas {
                point += 1;
                let soil = SoilProfile::new(theta, sweep.antenna_separation_d, sweep.attenuation_per_meter)?;
                let imp = Impairments {
                    snr_db: snr,
                    cfo: sweep.cfo,
                    sfo_ppm: sweep.sfo_ppm,
                    rng_seed: noise_key(seed, point as f64, 0x50),
                };
                let link = PathSpec::fixed(distance / SPEED_OF_LIGHT, Complex64::new(1.0, 0.0))?;
                let scene = ChannelScene::new(vec![link], Some(soil), imp)?;
                let mut payload_rng = ChaCha8Rng::seed_from_u64(imp.rng_seed);
                for k in 0..sweep.packets_per_point {
                    let t = k as f64 * interval;
                    let payload: Vec<u32> = (0..node.payload_len)
                        .map(|_| payload_rng.random_range(0..n_bins))
                        .collect();
                    let e = emit_switched_frame(node, &payload, t)?;
                    let rx = apply_scene_switched(&e.antenna1_samples, &e.antenna2_samples, &scene, t, fc)?;
                    let frame = decode_frame(&rx, &e.layout);
                    let ok = frame.ok && frame.payload == e.layout.payload;
                    packets += 1;
                    decoded += ok as usize;
                    let mut row = MoistureRow {
                        distance_m: distance,
                        snr_db: snr,
                        packet: k,
                        theta_true: theta,
                        theta_hat: None,
                        error: None,
                        decoded_ok: ok,
                        delta_phi: None,
                        quality: None,
                        low_confidence: true,
                    };
                    if let Ok(est) = estimate_interantenna_phase(&frame, switch) {
                        row.delta_phi = Some(est.delta_phi_wrapped);
                        row.quality = Some(est.quality);
                        if let Ok(r) = moisture_from_phase(&est, sweep.antenna_separation_d, fc, None) {
                            row.theta_hat = Some(r.theta_hat);
                            row.error = Some(r.theta_hat - theta);
                            row.low_confidence = r.low_confidence;
                            errors.push(r.theta_hat - theta);
                        }
                    }
                    rows.push(row);
                }
            }
            conditions.push(SoilCondition {
                distance_m: distance,
                snr_db: snr,
                packets,
                decoded,
                decode_accuracy: decoded as f64 / packets as f64,
                estimates: errors.len(),
                rmse: rmse(&errors),
                max_abs_error: max_abs(&errors),
            });
        }
    }
    let packets = rows.len();
    let decoded = rows.iter().filter(|r| r.decoded_ok).count();
    let all_errors: Vec<f64> = rows.iter().filter_map(|r| r.error).collect();
    let summary = SoilSummary {
        seed,
        packets,
        decode_accuracy: decoded as f64 / packets as f64,
        estimate_failures: packets - all_errors.len(),
        max_abs_error: max_abs(&all_errors),
        conditions,
    };
    Ok((rows, summary))
}

/// Writes `moisture_results.csv` and `summary.json`.
pub fn run_soil(sweep: &SoilSweep, seed: u64) -> Result<Artifacts> {
    let (rows, summary) = simulate_soil(sweep, seed)?;
    let mut out = Artifacts::default();
    out.add("moisture_results.csv", csv_bytes(&rows)?);
    out.add("summary.json", json_bytes(&summary)?);
    Ok(out)
}

/// Two receive antennas in one room with a person moving near them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    /// Direct-path gains `[re, im]` at antennas 1 and 2.
    pub static_gain_rx1: [f64; 2],
    pub static_gain_rx2: [f64; 2],
    /// Body-reflection gain magnitude.
    pub human_gain: f64,
    /// Extra path length of the reflection at antenna 2, metres.
    pub rx2_offset_m: f64,
    /// Direct-path delay, seconds.
    pub static_delay: f64,
}

impl Default for RoomSpec {
    fn default() -> Self {
        let g1 = Complex64::from_polar(0.9, 0.0);
        let g2 = Complex64::from_polar(0.9, 1.2);
        RoomSpec {
            static_gain_rx1: [g1.re, g1.im],
            static_gain_rx2: [g2.re, g2.im],
            human_gain: 0.3,
            rx2_offset_m: 0.4,
            static_delay: 5e-8,
        }
    }
}

/// Scenes for both gateway antennas with a person doing `kind`.
pub fn room_scenes(
    room: &RoomSpec,
    kind: MotionKind,
    trajectory_seed: u64,
    imp: Impairments,
) -> Result<(ChannelScene, ChannelScene)> {
    let traj = human_trajectory(kind, trajectory_seed);
    let g = |a: [f64; 2]| Complex64::new(a[0], a[1]);
    let rx1 = ChannelScene::new(
        vec![
            PathSpec::fixed(room.static_delay, g(room.static_gain_rx1))?,
            PathSpec::human(
                room.static_delay,
                Complex64::from_polar(room.human_gain, 0.5),
                traj.clone(),
            )?,
        ],
        None,
        imp,
    )?;
    let rx2 = ChannelScene::new(
        vec![
            PathSpec::fixed(room.static_delay * 1.1, g(room.static_gain_rx2))?,
            PathSpec::human(
                room.static_delay,
                Complex64::from_polar(room.human_gain, -0.4),
                traj.offset_by(room.rx2_offset_m),
            )?,
        ],
        None,
        imp,
    )?;
    Ok((rx1, rx2))
}

fn default_indoor_node() -> NodeConfig {
    NodeConfig::indoor(1, ChirpParams::default(), 0.05)
}
fn default_episodes() -> usize {
    20
}
fn default_episode_duration() -> f64 {
    10.0
}
fn default_presence_snr() -> Option<f64> {
    Some(10.0)
}
fn default_window() -> f64 {
    1.0
}
fn default_multiplier() -> f64 {
    DEFAULT_THRESHOLD_MULTIPLIER
}
fn default_classes() -> Vec<MotionKind> {
    vec![MotionKind::Walking, MotionKind::Still]
}

/// Seeded walking/still episodes through a two-antenna gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresenceSweep {
    #[serde(default = "default_indoor_node")]
    pub node: NodeConfig,
    #[serde(default = "default_episodes")]
    pub episodes_per_class: usize,
    #[serde(default = "default_classes")]
    pub classes: Vec<MotionKind>,
    #[serde(default = "default_episode_duration")]
    pub episode_duration: f64,
    #[serde(default = "default_presence_snr")]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub cfo: f64,
    #[serde(default)]
    pub sfo_ppm: f64,
    #[serde(default = "default_window")]
    pub window: f64,
    /// Fixed threshold; when absent it is calibrated on a separate still
    /// recording.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default = "default_multiplier")]
    pub threshold_multiplier: f64,
    #[serde(default)]
    pub room: RoomSpec,
}

impl PresenceSweep {
    pub fn validate(&self) -> Result<()> {
        self.node.validate()?;
        if self.node.mode != NodeMode::IndoorPresence {
            return Err(Error::Config("presence sweep needs an indoor_presence node".into()));
        }
        self.node.effective_interval()?;
        if self.episodes_per_class == 0 || self.classes.is_empty() {
            return Err(Error::Config("presence sweep needs at least one episode".into()));
        }
        if !(self.episode_duration > 0.0 && self.window > 0.0) {
            return Err(Error::Config("episode_duration and window must be positive".into()));
        }
        if let Some(t) = self.threshold {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("threshold must be >= 0, got {t}")));
            }
        }
        Impairments {
            snr_db: self.snr_db,
            cfo: self.cfo,
            sfo_ppm: self.sfo_ppm,
            rng_seed: 0,
        }
        .validate()?;
        room_scenes(&self.room, MotionKind::Still, 0, Impairments::none())?;
        Ok(())
    }

    fn impairments(&self, seed: u64) -> Impairments {
        Impairments {
            snr_db: self.snr_db,
            cfo: self.cfo,
            sfo_ppm: self.sfo_ppm,
            rng_seed: seed,
        }
    }

    /// Ratio series of one episode.
    pub fn episode(&self, kind: MotionKind, episode_seed: u64) -> Result<RatioSeries> {
        let (rx1, rx2) = room_scenes(&self.room, kind, episode_seed, self.impairments(episode_seed))?;
        let fc = self.node.params.carrier_freq;
        let mut series = RatioSeries::new();
        for t in schedule_transmissions(&self.node, self.episode_duration)? {
            let e = emit_null_frame(&self.node, t)?;
            series.append(&sense_packet(&e, &rx1, &rx2, fc)?)?;
        }
        Ok(series)
    }

    /// Threshold in use: the fixed one, or one calibrated on a still
    /// recording that shares no seed with the episodes.
    pub fn threshold_for(&self, seed: u64) -> Result<f64> {
        match self.threshold {
            Some(t) => Ok(t),
            None => {
                let baseline = self.episode(MotionKind::Still, noise_key(seed, -1.0, 0xCA))?;
                calibrate_threshold(&baseline, self.threshold_multiplier, self.window)
            }
        }
    }
}

fn kind_name(kind: MotionKind) -> &'static str {
    match kind {
        MotionKind::Walking => "walking",
        MotionKind::Still => "still",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRatioRow {
    pub episode: usize,
    pub class: &'static str,
    pub timestamp: f64,
    pub re: f64,
    pub im: f64,
    pub magnitude: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateRow {
    pub episode: usize,
    pub class: &'static str,
    pub window_start: f64,
    pub window_end: f64,
    pub metric: f64,
    pub threshold: f64,
    pub state: Motion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: MotionKind,
    pub episodes: usize,
    /// Episodes whose majority window decision matches the class.
    pub correct_episodes: usize,
    pub episode_accuracy: f64,
    pub windows: usize,
    pub moving_windows: usize,
    pub window_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceSummary {
    pub seed: u64,
    pub threshold: f64,
    pub packet_rate_hz: f64,
    /// Rows: true class; columns: decided moving, decided still.
    pub confusion: Vec<(MotionKind, usize, usize)>,
    pub classes: Vec<ClassResult>,
    pub flagged_packets: usize,
}

/// Episodes, window decisions and the summary, without writing anything.
pub fn simulate_presence(
    sweep: &PresenceSweep,
    seed: u64,
) -> Result<(Vec<EpisodeRatioRow>, Vec<StateRow>, PresenceSummary)> {
    sweep.validate()?;
    let threshold = sweep.threshold_for(seed)?;
    let mut ratio_out = Vec::new();
    let mut state_out = Vec::new();
    let mut classes = Vec::new();
    let mut confusion = Vec::new();
    let mut flagged = 0;
    let mut episode = 0;
    let mut rate = 0.0;
    for &kind in &sweep.classes {
        let (mut correct, mut windows, mut moving_windows) = (0, 0, 0);
        let (mut decided_moving, mut decided_still) = (0, 0);
        for i in 0..sweep.episodes_per_class {
            let ep_seed = noise_key(seed, i as f64, if kind == MotionKind::Walking { 0x57 } else { 0x5C });
            let series = sweep.episode(kind, ep_seed)?;
            flagged += series.flagged.len();
            rate = crate::sensing::packet_rate(&series);
            let states = detect_presence(&series, sweep.window, threshold)?;
            let moving = states.iter().filter(|s| s.state == Motion::Moving).count();
            let episode_moving = 2 * moving > states.len();
            if episode_moving {
                decided_moving += 1;
            } else {
                decided_still += 1;
            }
            correct += (episode_moving == (kind == MotionKind::Walking)) as usize;
            windows += states.len();
            moving_windows += moving;
            ratio_out.extend(
                ratio_rows(sweep.node.node_id, &series)
                    .into_iter()
                    .map(|r| EpisodeRatioRow {
                        episode,
                        class: kind_name(kind),
                        timestamp: r.timestamp,
                        re: r.re,
                        im: r.im,
                        magnitude: r.magnitude,
                        phase: r.phase,
                    }),
            );
            state_out.extend(states.iter().map(|s| StateRow {
                episode,
                class: kind_name(kind),
                window_start: s.window_start,
                window_end: s.window_end,
                metric: s.metric,
                threshold: s.threshold_used,
                state: s.state,
            }));
            episode += 1;
        }
        let right_windows = match kind {
            MotionKind::Walking => moving_windows,
            MotionKind::Still => windows - moving_windows,
        };
        confusion.push((kind, decided_moving, decided_still));
        classes.push(ClassResult {
            class: kind,
            episodes: sweep.episodes_per_class,
            correct_episodes: correct,
            episode_accuracy: correct as f64 / sweep.episodes_per_class as f64,
            windows,
            moving_windows,
            window_accuracy: right_windows as f64 / windows.max(1) as f64,
        });
    }
    let summary = PresenceSummary {
        seed,
        threshold,
        packet_rate_hz: rate,
        confusion,
        classes,
        flagged_packets: flagged,
    };
    Ok((ratio_out, state_out, summary))
}

/// Writes `ratio_series.csv`, `states.csv` and `summary.json`.
pub fn run_presence(sweep: &PresenceSweep, seed: u64) -> Result<Artifacts> {
    let (ratios, states, summary) = simulate_presence(sweep, seed)?;
    let mut out = Artifacts::default();
    out.add("ratio_series.csv", csv_bytes(&ratios)?);
    out.add("states.csv", csv_bytes(&states)?);
    out.add("summary.json", json_bytes(&summary)?);
    Ok(out)
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(rename = "scenario")]
    pub network: NetworkScenario,
    /// Reassign channels and slots before running.
    #[serde(default = "default_true")]
    pub assign_slots: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct NodeAssignment {
    node_id: u32,
    freq_channel: usize,
    slot_offset: f64,
    interval_s: f64,
    airtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct NetworkSummary {
    seed: u64,
    nodes: usize,
    packets: usize,
    collisions: usize,
    delivered: usize,
    delivery_ratio: f64,
    moisture_reports: usize,
    presence_windows: usize,
    moving_windows: usize,
    assignments: Vec<NodeAssignment>,
}

/// Writes `ledger.csv`, `collisions.csv`, `stats.csv`, `reports.jsonl`,
/// `ratio_series.csv` and `summary.json`.
pub fn run_network(section: &NetworkSection, seed: u64) -> Result<Artifacts> {
    let mut scenario = section.network.clone();
    scenario.seed = seed;
    if section.assign_slots {
        scenario = assign_channels_and_slots(&scenario)?;
    }
    let outcome = simulate_network(&scenario)?;
    let assignments = scenario
        .nodes
        .iter()
        .map(|n| {
            Ok(NodeAssignment {
                node_id: n.config.node_id,
                freq_channel: n.config.freq_channel,
                slot_offset: n.config.slot_offset,
                interval_s: n.config.effective_interval()?,
                airtime_s: n.config.airtime(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let packets: usize = outcome.stats.iter().map(|s| s.scheduled).sum();
    let delivered: usize = outcome.stats.iter().map(|s| s.delivered).sum();
    let presence: Vec<&crate::sensing::PresenceState> = outcome
        .reports
        .iter()
        .filter_map(|r| match r {
            crate::sensing::SensingReport::Presence { state, .. } => Some(state),
            _ => None,
        })
        .collect();
    let summary = NetworkSummary {
        seed,
        nodes: scenario.nodes.len(),
        packets,
        collisions: outcome.ledger.collisions.len(),
        delivered,
        delivery_ratio: if packets == 0 {
            0.0
        } else {
            delivered as f64 / packets as f64
        },
        moisture_reports: outcome.reports.len() - presence.len(),
        presence_windows: presence.len(),
        moving_windows: presence.iter().filter(|s| s.state == Motion::Moving).count(),
        assignments,
    };
    let ratios: Vec<RatioRow> = outcome
        .ratio_series
        .iter()
        .flat_map(|(id, s)| ratio_rows(*id, s))
        .collect();
    let mut out = Artifacts::default();
    out.add("ledger.csv", csv_bytes(&outcome.ledger.intervals)?);
    out.add("collisions.csv", csv_bytes(&outcome.ledger.collisions)?);
    out.add("stats.csv", csv_bytes(&outcome.stats)?);
    out.add("reports.jsonl", json_lines_bytes(&outcome.reports)?);
    out.add("ratio_series.csv", csv_bytes(&ratios)?);
    out.add("summary.json", json_bytes(&summary)?);
    Ok(out)
}

/// Writes `selftest.json`; fails if any property fails.
pub fn run_phy_selftest() -> Result<Artifacts> {
    let report = run_selftest();
    let mut out = Artifacts::default();
    out.add("selftest.json", json_bytes(&report)?);
    if !report.all_passed {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        return Err(Error::Estimation(format!("self-test failed: {}", failed.join(", "))));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(ScenarioFile::from_json(r#"{"mode": "phy_selftest"}"#).is_ok());
        assert!(ScenarioFile::from_json(r#"{"mode": "phy_selftest", "sed": 1}"#).is_err());
        assert!(ScenarioFile::from_json(r#"{"mode": "soil", "soil": {"thetaz": [0.1]}}"#).is_err());
    }

    #[test]
    fn section_must_match_mode() {
        assert!(ScenarioFile::from_json(r#"{"mode": "soil"}"#).is_err());
        assert!(ScenarioFile::from_json(r#"{"mode": "presence", "soil": {}}"#).is_err());
        assert!(ScenarioFile::from_json(r#"{"mode": "soil", "soil": {}}"#).is_ok());
    }

    #[test]
    fn bad_values_rejected() {
        assert!(ScenarioFile::from_json(r#"{"mode": "soil", "soil": {"thetas": [0.7]}}"#).is_err());
        let slow = r#"{"mode": "presence", "presence": {"node": {"node_id": 1, "mode": "outdoor_soil"}}}"#;
        assert!(ScenarioFile::from_json(slow).is_err());
    }

    #[test]
    fn json_errors_carry_line_numbers() {
        let err = ScenarioFile::from_json("{\n\"mode\": \"soil\",\n\"bogus\": 1\n}").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn small_soil_sweep_is_exact_without_noise() {
        let sweep = SoilSweep {
            snr_db: vec![None],
            packets_per_point: 2,
            cfo: 180.0,
            ..serde_json::from_str("{}").unwrap()
        };
        let (rows, summary) = simulate_soil(&sweep, 4).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(summary.decode_accuracy, 1.0);
        assert!(summary.max_abs_error.unwrap() <= 1e-4);
    }

    #[test]
    fn small_presence_sweep() {
        let sweep = PresenceSweep {
            episodes_per_class: 2,
            episode_duration: 4.0,
            ..serde_json::from_str("{}").unwrap()
        };
        let (ratios, states, summary) = simulate_presence(&sweep, 9).unwrap();
        assert_eq!(ratios.len(), 4 * 80);
        assert_eq!(states.len(), 4 * 4);
        for c in &summary.classes {
            assert_eq!(c.episode_accuracy, 1.0, "{c:?}");
        }
    }

    #[test]
    fn slow_presence_rate_surfaces() {
        let mut sweep: PresenceSweep = serde_json::from_str("{}").unwrap();
        sweep.node.sensing_packet_interval = Some(0.5);
        sweep.threshold = Some(0.1);
        match simulate_presence(&sweep, 1) {
            Err(Error::SamplingRate { required_hz, .. }) => assert_eq!(required_hz, 4.0),
            other => panic!("{other:?}"),
        }
    }
}
