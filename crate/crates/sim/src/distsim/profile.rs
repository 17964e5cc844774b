use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Device and link parameters. Times are in ticks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub n_devices: usize,
    /// All-to-All latency per collective.
    pub alpha: f64,
    /// Ticks per byte on device-to-device links.
    pub beta: f64,
    /// Ticks per floating-point operation.
    pub flop_time: f64,
    /// Host-to-device latency per transfer.
    #[serde(default)]
    pub host_alpha: f64,
    /// Ticks per byte on the host link.
    #[serde(default)]
    pub host_beta: f64,
    /// Extra ticks added to every pipelined sub-operation.
    #[serde(default)]
    pub chunk_overhead: f64,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<()> {
        if self.n_devices == 0 {
            return Err(SimError::Strategy("profile needs at least one device".into()));
        }
        for (what, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("flop_time", self.flop_time),
            ("host_alpha", self.host_alpha),
            ("host_beta", self.host_beta),
            ("chunk_overhead", self.chunk_overhead),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(SimError::duration(what, v));
            }
        }
        Ok(())
    }

    /// Eight devices, 1e-4 ticks per flop, free links.
    pub fn reference() -> Self {
        Self {
            n_devices: 8,
            alpha: 0.0,
            beta: 0.0,
            flop_time: 1e-4,
            host_alpha: 0.0,
            host_beta: 0.0,
            chunk_overhead: 0.0,
        }
    }
}

/// Rounds a non-negative real duration to ticks.
pub fn to_ticks(what: &str, v: f64) -> Result<u64> {
    if !v.is_finite() || v < 0.0 {
        return Err(SimError::duration(what, v));
    }
    Ok(v.round() as u64)
}

/// `α + β·bytes·(D−1)/D` before rounding: every device keeps its own shard
/// and exchanges the rest.
pub fn alltoall_time(bytes: f64, prof: &HardwareProfile) -> f64 {
    let d = prof.n_devices as f64;
    prof.alpha + prof.beta * bytes * (d - 1.0) / d
}

pub fn alltoall_duration(bytes: f64, prof: &HardwareProfile) -> Result<u64> {
    if !bytes.is_finite() || bytes < 0.0 {
        return Err(SimError::duration("bytes", bytes));
    }
    to_ticks("all-to-all", alltoall_time(bytes, prof))
}
