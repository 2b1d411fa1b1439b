//! Complex baseband buffers and their on-disk format.
//!
//! Files hold little-endian interleaved `f32` I/Q pairs. A sidecar JSON
//! descriptor (`<file>.json`) records the sample rate and chirp parameters.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phy_css::ChirpParams;

/// Complex baseband samples at a fixed rate, anchored at `start_time`.
#[derive(Debug, Clone, PartialEq)]
pub struct IqBuffer {
    pub samples: Vec<Complex64>,
    pub sample_rate: f64,
    pub start_time: f64,
}

impl IqBuffer {
    pub fn new(samples: Vec<Complex64>, sample_rate: f64, start_time: f64) -> Result<Self> {
        if !sample_rate.is_finite() || sample_rate <= 0.0 {
            return Err(Error::Domain(format!(
                "sample rate must be positive, got {sample_rate}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
            start_time,
        })
    }

    pub fn zeros(len: usize, sample_rate: f64, start_time: f64) -> Result<Self> {
        Self::new(vec![Complex64::new(0.0, 0.0); len], sample_rate, start_time)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration()
    }

    /// Mean power `E|x|^2`; zero for an empty buffer.
    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }

    /// Appends `other` after `self`. The result keeps `self.start_time`.
    pub fn concat(&self, other: &IqBuffer) -> Result<IqBuffer> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::Domain(format!(
                "cannot concatenate buffers at {} and {} Hz",
                self.sample_rate, other.sample_rate
            )));
        }
        if other.start_time < self.start_time {
            return Err(Error::Domain("concatenation must preserve start-time ordering".into()));
        }
        let mut samples = Vec::with_capacity(self.len() + other.len());
        samples.extend_from_slice(&self.samples);
        samples.extend_from_slice(&other.samples);
        Ok(IqBuffer {
            samples,
            sample_rate: self.sample_rate,
            start_time: self.start_time,
        })
    }

    /// Samples `[start, start + len)`, or `None` if the range runs past the end.
    pub fn window(&self, start: usize, len: usize) -> Option<&[Complex64]> {
        self.samples.get(start..start.checked_add(len)?)
    }

    pub fn scaled(&self, gain: Complex64) -> IqBuffer {
        IqBuffer {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
            start_time: self.start_time,
        }
    }

    /// Prepends `n` zero samples, moving `start_time` back accordingly.
    pub fn delayed_by_samples(&self, n: usize) -> IqBuffer {
        let mut samples = vec![Complex64::new(0.0, 0.0); n];
        samples.extend_from_slice(&self.samples);
        IqBuffer {
            samples,
            sample_rate: self.sample_rate,
            start_time: self.start_time - n as f64 / self.sample_rate,
        }
    }
}

/// Sidecar descriptor written next to each IQ file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IqDescriptor {
    pub sample_rate: f64,
    pub spreading_factor: u8,
    pub bandwidth: f64,
    #[serde(default)]
    pub carrier_freq: Option<f64>,
    #[serde(default)]
    pub start_time: f64,
    pub num_samples: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn encode_iq(samples: &[Complex64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * 8);
    for s in samples {
        out.extend_from_slice(&(s.re as f32).to_le_bytes());
        out.extend_from_slice(&(s.im as f32).to_le_bytes());
    }
    out
}

pub fn decode_iq(bytes: &[u8]) -> Result<Vec<Complex64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Domain(format!(
            "IQ payload of {} bytes is not a whole number of f32 pairs",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(re as f64, im as f64)
        })
        .collect())
}

/// Writes `buf` to `path` and its descriptor to `<path>.json`.
pub fn write_iq_file(path: &Path, buf: &IqBuffer, params: &ChirpParams) -> Result<()> {
    fs::write(path, encode_iq(&buf.samples))?;
    let desc = IqDescriptor {
        sample_rate: buf.sample_rate,
        spreading_factor: params.spreading_factor,
        bandwidth: params.bandwidth,
        carrier_freq: Some(params.carrier_freq),
        start_time: buf.start_time,
        num_samples: buf.len(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&desc)?)?;
    Ok(())
}

pub fn read_iq_file(path: &Path) -> Result<(IqBuffer, IqDescriptor)> {
    let desc: IqDescriptor = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let samples = decode_iq(&fs::read(path)?)?;
    if samples.len() != desc.num_samples {
        return Err(Error::Domain(format!(
            "descriptor announces {} samples, file holds {}",
            desc.num_samples,
            samples.len()
        )));
    }
    let buf = IqBuffer::new(samples, desc.sample_rate, desc.start_time)?;
    Ok((buf, desc))
}
