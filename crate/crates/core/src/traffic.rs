//! Downlink constant-bit-rate sources behind a fixed-latency core network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::SimTime;
use crate::topology::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub ue: NodeId,
    pub rate_bps: f64,
    pub packet_size: u32,
    pub start: SimTime,
    pub stop: SimTime,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate_bps > 0.0 && self.rate_bps.is_finite()) || self.packet_size == 0 {
            return Err(Error::config("flow rate and packet size must be positive"));
        }
        if self.stop < self.start {
            return Err(Error::config("flow stops before it starts"));
        }
        Ok(())
    }

    /// Creation time of the `k`-th packet, computed without accumulating
    /// rounding error.
    pub fn creation_time(&self, k: u64) -> SimTime {
        let bits = self.packet_size as f64 * 8.0;
        let offset_ns = (k as f64 * bits * 1e9 / self.rate_bps).round() as u64;
        SimTime(self.start.0 + offset_ns)
    }

    pub fn inter_arrival(&self) -> f64 {
        self.packet_size as f64 * 8.0 / self.rate_bps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreConfig {
    pub server_to_donor_latency: SimTime,
}

impl Default for CoreConfig {
    fn default() -> Self {
        CoreConfig { server_to_donor_latency: SimTime::from_millis(11) }
    }
}

/// One packet of a CBR schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledPacket {
    pub seq: u64,
    pub created_at: SimTime,
    pub arrives_at_donor: SimTime,
}

/// Lazy CBR schedule: packets in `[start, stop)` at `packet_size·8 / rate`
/// spacing, each reaching the donor after the core latency.
#[derive(Debug, Clone)]
pub struct CbrSource {
    flow: FlowConfig,
    core: CoreConfig,
    next: u64,
}

impl CbrSource {
    pub fn new(flow: FlowConfig, core: CoreConfig) -> Self {
        CbrSource { flow, core, next: 0 }
    }

    pub fn flow(&self) -> &FlowConfig {
        &self.flow
    }

    pub fn peek(&self) -> Option<ScheduledPacket> {
        let created_at = self.flow.creation_time(self.next);
        (created_at < self.flow.stop).then(|| ScheduledPacket {
            seq: self.next,
            created_at,
            arrives_at_donor: created_at + self.core.server_to_donor_latency,
        })
    }

    /// Packets created so far up to and including `now`.
    pub fn created_by(&self, now: SimTime) -> u64 {
        if now < self.flow.start {
            return 0;
        }
        let bits = self.flow.packet_size as f64 * 8.0;
        let created = |j: u64| {
            let c = self.flow.creation_time(j);
            c <= now && c < self.flow.stop
        };
        let mut k = ((now.0 - self.flow.start.0) as f64 * 1e-9 * self.flow.rate_bps / bits).floor() as u64 + 1;
        while k > 0 && !created(k - 1) {
            k -= 1;
        }
        while created(k) {
            k += 1;
        }
        k
    }
}

impl Iterator for CbrSource {
    type Item = ScheduledPacket;

    fn next(&mut self) -> Option<ScheduledPacket> {
        let p = self.peek()?;
        self.next += 1;
        Some(p)
    }
}

/// Full arrival schedule of a flow at the donor.
pub fn generate_flow(flow: &FlowConfig, core: CoreConfig) -> Result<CbrSource> {
    flow.validate()?;
    Ok(CbrSource::new(flow.clone(), core))
}
