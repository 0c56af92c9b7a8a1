//! Scalar link abstraction: urban-micro path loss, Shannon-gap link
//! adaptation and an exponential block error model.

use serde::{Deserialize, Serialize};

use crate::topology::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub carrier_freq_ghz: f64,
    pub bandwidth_hz: f64,
    pub tx_power_dbm: f64,
    /// Beamforming gain of a gNB array (donor or relay).
    pub gnb_gain_dbi: f64,
    pub ue_gain_dbi: f64,
    pub noise_figure_db: f64,
    pub max_phy_rate_bps: f64,
    /// Fraction of the Shannon bound achieved by link adaptation.
    pub shannon_gap: f64,
    /// Below this SNR a link is in outage and carries nothing.
    pub snr_min_db: f64,
    pub shadowing_sigma_los_db: f64,
    pub shadowing_sigma_nlos_db: f64,
    /// First-transmission BLER at the SNR where an efficiency is selected.
    pub bler_target: f64,
    /// SNR increase (dB) that lowers the BLER by one decade.
    pub bler_db_per_decade: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            carrier_freq_ghz: 28.0,
            bandwidth_hz: 1e9,
            tx_power_dbm: 30.0,
            gnb_gain_dbi: 18.0,
            ue_gain_dbi: 12.0,
            noise_figure_db: 5.0,
            max_phy_rate_bps: 3.2e9,
            shannon_gap: 0.75,
            snr_min_db: -5.0,
            shadowing_sigma_los_db: 4.0,
            shadowing_sigma_nlos_db: 7.8,
            bler_target: 0.1,
            bler_db_per_decade: 1.0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.bandwidth_hz > 0.0
            && self.max_phy_rate_bps > 0.0
            && self.carrier_freq_ghz > 0.0
            && self.shannon_gap > 0.0
            && self.bler_target > 0.0
            && self.bler_target < 1.0
            && self.bler_db_per_decade > 0.0
            && self.shadowing_sigma_los_db >= 0.0
            && self.shadowing_sigma_nlos_db >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::config("invalid channel configuration"))
        }
    }

    /// Spectral efficiency ceiling implied by the PHY rate cap.
    pub fn max_efficiency(&self) -> f64 {
        self.max_phy_rate_bps / self.bandwidth_hz
    }

    pub fn noise_dbm(&self) -> f64 {
        -174.0 + 10.0 * self.bandwidth_hz.log10() + self.noise_figure_db
    }

    pub fn shadowing_sigma(&self, los: bool) -> f64 {
        if los {
            self.shadowing_sigma_los_db
        } else {
            self.shadowing_sigma_nlos_db
        }
    }
}

/// Urban-micro street-canyon path loss in dB. Distances below 1 m are clamped.
pub fn path_loss_db(carrier_freq_ghz: f64, distance: f64, los: bool) -> f64 {
    let d = distance.max(1.0);
    let exponent = if los { 21.0 } else { 31.9 };
    32.4 + exponent * d.log10() + 20.0 * carrier_freq_ghz.log10()
}

/// Receive SNR in dB for a link with the given antenna gains.
pub fn compute_snr(
    config: &ChannelConfig,
    tx_gain_dbi: f64,
    rx_gain_dbi: f64,
    distance: f64,
    los: bool,
    shadowing_db: f64,
) -> f64 {
    config.tx_power_dbm + tx_gain_dbi + rx_gain_dbi
        - path_loss_db(config.carrier_freq_ghz, distance, los)
        - shadowing_db
        - config.noise_dbm()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkAdaptation {
    /// bits/s/Hz; zero in outage.
    pub spectral_efficiency: f64,
    /// bits carried by one OFDM symbol of the subframe; zero in outage.
    pub per_symbol_capacity: u64,
}

pub fn link_adapt(config: &ChannelConfig, snr_db: f64, symbols_per_subframe: u32, subframe_duration: f64) -> LinkAdaptation {
    if !(snr_db >= config.snr_min_db) {
        return LinkAdaptation { spectral_efficiency: 0.0, per_symbol_capacity: 0 };
    }
    let shannon = config.shannon_gap * (1.0 + db_to_linear(snr_db)).log2();
    let se = shannon.min(config.max_efficiency());
    let bits = se * config.bandwidth_hz * subframe_duration / symbols_per_subframe as f64;
    // Floor keeps the subframe total at or below the PHY cap.
    let per_symbol_capacity = bits.floor() as u64;
    if per_symbol_capacity == 0 {
        return LinkAdaptation { spectral_efficiency: 0.0, per_symbol_capacity: 0 };
    }
    LinkAdaptation { spectral_efficiency: se, per_symbol_capacity }
}

/// SNR (dB) at which `link_adapt` would select `spectral_efficiency`.
pub fn selection_snr_db(config: &ChannelConfig, spectral_efficiency: f64) -> f64 {
    linear_to_db((spectral_efficiency / config.shannon_gap).exp2() - 1.0)
}

/// Transport block error probability: `bler_target` at the selection SNR of
/// the efficiency, falling one decade per `bler_db_per_decade` above it.
pub fn tb_error_prob(config: &ChannelConfig, snr_db: f64, spectral_efficiency: f64) -> f64 {
    if spectral_efficiency <= 0.0 {
        return 1.0;
    }
    let margin = snr_db - selection_snr_db(config, spectral_efficiency);
    (config.bler_target * 10f64.powf(-margin / config.bler_db_per_decade)).clamp(0.0, 1.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

/// Directed radio link between a transmitting gNB and a receiver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkState {
    pub tx: NodeId,
    pub rx: NodeId,
    pub distance_3d: f64,
    pub los: bool,
    pub snr_db: f64,
    pub spectral_efficiency: f64,
    pub per_symbol_capacity: u64,
}

impl LinkState {
    pub fn in_outage(&self) -> bool {
        self.per_symbol_capacity == 0
    }
}
