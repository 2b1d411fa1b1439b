//! Simulator and signal-processing library for LoRa integrated sensing and
//! communication.
//!
//! The crate covers the chirp spread spectrum PHY ([`phy_css`], [`framing`]),
//! propagation and impairments ([`channel`]), the two sensing designs on the
//! node and gateway side ([`isac_tx`], [`isac_rx`], [`sensing`]), multi-node
//! scheduling ([`netsim`]) and the scenario runners behind the command line
//! tool ([`scenario`]).

pub mod channel;
pub mod error;
pub mod export;
pub mod framing;
pub mod iq;
pub mod isac_rx;
pub mod isac_tx;
pub mod netsim;
pub mod phy_css;
pub mod scenario;
pub mod selftest;
pub mod sensing;

pub use error::{Error, Result};
pub use iq::IqBuffer;
pub use phy_css::{ChirpDirection, ChirpParams, Symbol};

/// m/s
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_phase(x: f64) -> f64 {
    use std::f64::consts::PI;
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}
