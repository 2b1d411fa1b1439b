use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// A value lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A buffer does not span exactly one symbol.
    #[error("frame alignment error: expected {expected} samples, got {actual}")]
    FrameAlignment { expected: usize, actual: usize },

    /// Invalid node, layout or scenario configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Requested transmission interval breaks the duty-cycle limit.
    #[error(
        "schedule infeasible: interval {requested_s} s breaks duty cycle limit {limit}; \
         minimal legal interval is {minimal_interval_s} s"
    )]
    ScheduleInfeasible {
        requested_s: f64,
        limit: f64,
        minimal_interval_s: f64,
    },

    /// Same-channel airtime demand exceeds what the channel can carry.
    #[error("channel {channel} overloaded: required capacity {required:.4} exceeds available {available:.4}")]
    ChannelOverloaded {
        channel: usize,
        required: f64,
        available: f64,
    },

    /// Inter-antenna phase could not be estimated.
    #[error("phase estimation error: {0}")]
    Estimation(String),

    /// No dielectric branch maps the measured phase into the physical range.
    #[error("moisture out of range: measured phase {delta_phi} rad has no branch in the physical permittivity range")]
    MoistureOutOfRange { delta_phi: f64 },

    /// Ratio series is sampled too slowly for the motion bandwidth.
    #[error("packet rate {actual_hz:.3} Hz is below the required minimum of {required_hz:.3} Hz")]
    SamplingRate { actual_hz: f64, required_hz: f64 },

    /// Baseline too short to calibrate a detection threshold.
    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable name of the variant, for machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::FrameAlignment { .. } => "frame_alignment",
            Error::Config(_) => "config",
            Error::ScheduleInfeasible { .. } => "schedule_infeasible",
            Error::ChannelOverloaded { .. } => "channel_overloaded",
            Error::Estimation(_) => "estimation",
            Error::MoistureOutOfRange { .. } => "moisture_out_of_range",
            Error::SamplingRate { .. } => "sampling_rate",
            Error::Calibration(_) => "calibration",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
