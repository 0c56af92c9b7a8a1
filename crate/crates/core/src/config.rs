//! Simulation configuration, the `paper-manhattan` preset and the flat
//! `key = value` file format.

use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::scheduler::{MacConfig, SchedulerKind};
use crate::stack::StackConfig;
use crate::time::SimTime;
use crate::topology::AttachPolicy;
use crate::traffic::CoreConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub block_side: f64,
    pub street_width: f64,
    pub rows: u32,
    pub cols: u32,
    pub building_height: f64,
    pub gnb_height: f64,
    pub ue_height: f64,
    pub relay_distance: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            block_side: 50.0,
            street_width: 10.0,
            rows: 4,
            cols: 4,
            building_height: 15.0,
            gnb_height: 10.0,
            ue_height: 1.6,
            relay_distance: 85.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub scenario: ScenarioConfig,
    pub channel: ChannelConfig,
    pub mac: MacConfig,
    pub stack: StackConfig,
    pub core: CoreConfig,
    pub attach_policy: AttachPolicy,
    /// Seconds before UEs attach and traffic starts.
    pub attach_delay: f64,
    /// Seconds after `attach_delay` excluded from metrics.
    pub warmup: f64,
    pub n_relays: usize,
    pub n_ues: usize,
    pub rate_bps: f64,
    pub packet_size: u32,
    /// Total simulated seconds, warm-up included.
    pub sim_duration: f64,
    pub seed: u64,
    /// Keep one record per delivered packet in the run result.
    pub record_packets: bool,
    /// Check every allocation against the scheduler constraints.
    pub audit: bool,
    /// Keep the per-subframe allocation log in the run result.
    pub log_allocations: bool,
}

impl SimConfig {
    /// The Manhattan-grid IAB evaluation: 40 UEs, 0–4 relays at 85 m,
    /// 28 GHz / 1 GHz, RR scheduling and 10 s of measured traffic.
    pub fn paper_manhattan() -> Self {
        SimConfig {
            scenario: ScenarioConfig::default(),
            channel: ChannelConfig::default(),
            mac: MacConfig::default(),
            stack: StackConfig::default(),
            core: CoreConfig::default(),
            attach_policy: AttachPolicy::BestHqf,
            attach_delay: 0.1,
            warmup: 0.5,
            n_relays: 4,
            n_ues: 40,
            rate_bps: 224e6,
            packet_size: 1400,
            sim_duration: 10.6,
            seed: 1,
            record_packets: false,
            audit: false,
            log_allocations: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-manhattan" => Ok(Self::paper_manhattan()),
            other => Err(Error::config(format!("unknown preset '{other}'"))),
        }
    }

    pub fn measure_start(&self) -> SimTime {
        SimTime::from_secs(self.attach_delay + self.warmup)
    }

    pub fn end(&self) -> SimTime {
        SimTime::from_secs(self.sim_duration)
    }

    pub fn measured_duration(&self) -> f64 {
        self.sim_duration - self.attach_delay - self.warmup
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.mac.validate()?;
        self.stack.validate()?;
        if !(self.attach_delay >= 0.0) || !(self.warmup >= 0.0) {
            return Err(Error::config("attach delay and warm-up must be non-negative"));
        }
        if !(self.sim_duration > self.attach_delay + self.warmup) {
            return Err(Error::config("simulation must outlast the attach delay and warm-up"));
        }
        if !(self.rate_bps > 0.0) || self.packet_size == 0 {
            return Err(Error::config("rate and packet size must be positive"));
        }
        let s = &self.scenario;
        if !(s.gnb_height >= 0.0 && s.ue_height >= 0.0 && s.relay_distance > 0.0) {
            return Err(Error::config("invalid node heights or relay distance"));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::config(format!("invalid value '{value}' for '{key}'"));
        let f = || value.parse::<f64>().map_err(|_| bad());
        let u = || value.parse::<u64>().map_err(|_| bad());
        match key {
            "block_side" => self.scenario.block_side = f()?,
            "street_width" => self.scenario.street_width = f()?,
            "grid_rows" => self.scenario.rows = u()? as u32,
            "grid_cols" => self.scenario.cols = u()? as u32,
            "building_height" => self.scenario.building_height = f()?,
            "gnb_height" => self.scenario.gnb_height = f()?,
            "ue_height" => self.scenario.ue_height = f()?,
            "relay_distance" => self.scenario.relay_distance = f()?,
            "carrier_freq_ghz" => self.channel.carrier_freq_ghz = f()?,
            "bandwidth_hz" => self.channel.bandwidth_hz = f()?,
            "tx_power_dbm" => self.channel.tx_power_dbm = f()?,
            "gnb_gain_dbi" => self.channel.gnb_gain_dbi = f()?,
            "ue_gain_dbi" => self.channel.ue_gain_dbi = f()?,
            "noise_figure_db" => self.channel.noise_figure_db = f()?,
            "max_phy_rate" => self.channel.max_phy_rate_bps = parse_rate(value)?,
            "shannon_gap" => self.channel.shannon_gap = f()?,
            "snr_min_db" => self.channel.snr_min_db = f()?,
            "shadowing_sigma_los_db" => self.channel.shadowing_sigma_los_db = f()?,
            "shadowing_sigma_nlos_db" => self.channel.shadowing_sigma_nlos_db = f()?,
            "bler_target" => self.channel.bler_target = f()?,
            "bler_db_per_decade" => self.channel.bler_db_per_decade = f()?,
            "symbols_per_subframe" => self.mac.symbols_per_subframe = u()? as u32,
            "subframe_duration" => self.mac.subframe_duration = f()?,
            "dci_delay" => self.mac.dci_delay = u()? as u32,
            "iab_cap_fraction" => self.mac.iab_cap_fraction = f()?,
            "scheduler" => self.mac.scheduler = parse_scheduler(value)?,
            "pf_window" => self.mac.pf_window = f()?,
            "ue_buffer_bytes" => self.stack.ue_buffer_bytes = u()?,
            "iab_buffer_bytes" => self.stack.iab_buffer_bytes = u()?,
            "reordering_timer_ms" => self.stack.reordering_timer = SimTime::from_secs(f()? * 1e-3),
            "poll_retransmit_ms" => self.stack.poll_retransmit_timer = SimTime::from_secs(f()? * 1e-3),
            "max_harq_retx" => self.stack.max_harq_retx = u()? as u32,
            "harq_retx_delay" => self.stack.harq_retx_delay = u()?,
            "rlc_header_bytes" => self.stack.rlc_header_bytes = u()? as u32,
            "tunnel_overhead_bytes" => self.stack.tunnel_overhead_bytes = u()? as u32,
            "core_latency_ms" => self.core.server_to_donor_latency = SimTime::from_secs(f()? * 1e-3),
            "attach_policy" => {
                self.attach_policy = match value {
                    "closest_wired" => AttachPolicy::ClosestWired,
                    "best_hqf" => AttachPolicy::BestHqf,
                    _ => return Err(bad()),
                }
            }
            "attach_delay" => self.attach_delay = f()?,
            "warmup" => self.warmup = f()?,
            "n_relays" => self.n_relays = u()? as usize,
            "n_ues" => self.n_ues = u()? as usize,
            "rate" => self.rate_bps = parse_rate(value)?,
            "packet_size" => self.packet_size = u()? as u32,
            "sim_duration" => self.sim_duration = f()?,
            "seed" => self.seed = u()?,
            "audit" => self.audit = value.parse().map_err(|_| bad())?,
            "record_packets" => self.record_packets = value.parse().map_err(|_| bad())?,
            "log_allocations" => self.log_allocations = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }
}

pub fn parse_scheduler(value: &str) -> Result<SchedulerKind> {
    match value {
        "rr" => Ok(SchedulerKind::RoundRobin),
        "pf" => Ok(SchedulerKind::ProportionalFair),
        _ => Err(Error::config(format!("unknown scheduler '{value}' (expected rr or pf)"))),
    }
}

/// Parses a bit rate such as `28M`, `224Mbps`, `1.5G` or `28000000`.
pub fn parse_rate(value: &str) -> Result<f64> {
    let v = value.trim();
    let v = v.strip_suffix("bps").or_else(|| v.strip_suffix("bit/s")).unwrap_or(v);
    let (num, mult) = match v.char_indices().last() {
        Some((i, 'k' | 'K')) => (&v[..i], 1e3),
        Some((i, 'M')) => (&v[..i], 1e6),
        Some((i, 'G')) => (&v[..i], 1e9),
        _ => (v, 1.0),
    };
    match num.trim().parse::<f64>() {
        Ok(x) if x > 0.0 && x.is_finite() => Ok(x * mult),
        _ => Err(Error::config(format!("invalid rate '{value}'"))),
    }
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected 'key = value'", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}
