//! Per-group end-to-end throughput and latency, and their aggregation over
//! independent runs.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::engine::RunResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    DonorUes,
    IabUes,
    AllUes,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::DonorUes, Group::IabUes, Group::AllUes];

    pub fn name(self) -> &'static str {
        match self {
            Group::DonorUes => "donor_ues",
            Group::IabUes => "iab_ues",
            Group::AllUes => "all_ues",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: Group,
    pub n_ues: usize,
    /// Application bytes delivered in the measurement window, in Mbit/s.
    pub sum_throughput_mbps: f64,
    /// Mean over window packets; absent when none were delivered.
    pub mean_latency_ms: Option<f64>,
    pub delivered_packets: u64,
    pub dropped_packets: u64,
    /// Sum of window latencies, kept so groups can be merged exactly.
    latency_sum_s: f64,
}

impl GroupMetrics {
    fn empty(group: Group) -> Self {
        GroupMetrics {
            group,
            n_ues: 0,
            sum_throughput_mbps: 0.0,
            mean_latency_ms: None,
            delivered_packets: 0,
            dropped_packets: 0,
            latency_sum_s: 0.0,
        }
    }

    fn finalize(mut self) -> Self {
        self.mean_latency_ms = (self.delivered_packets > 0).then(|| self.latency_sum_s / self.delivered_packets as f64 * 1e3);
        self
    }
}

/// Metrics of the donor, IAB and all-UE groups of one run. Groups without
/// UEs (the IAB group with no relays) are left out.
pub fn compute_metrics(result: &RunResult) -> Vec<GroupMetrics> {
    let mut groups: BTreeMap<Group, GroupMetrics> = BTreeMap::new();
    let dur = result.measured_duration;
    for f in &result.flows {
        let g = if f.via_iab(result.donor) { Group::IabUes } else { Group::DonorUes };
        for group in [g, Group::AllUes] {
            let m = groups.entry(group).or_insert_with(|| GroupMetrics::empty(group));
            m.n_ues += 1;
            m.sum_throughput_mbps += f.window_bytes as f64 * 8.0 / dur / 1e6;
            m.delivered_packets += f.window_packets;
            m.dropped_packets += f.dropped;
            m.latency_sum_s += f.window_latency_sum;
        }
    }
    groups.into_values().map(GroupMetrics::finalize).collect()
}

/// Sample mean with a Student-t 95 % confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Option<Self> {
        let n = xs.len();
        if n == 0 {
            return None;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let half_width = if n < 2 {
            0.0
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).unwrap().inverse_cdf(0.975);
            t * (var / n as f64).sqrt()
        };
        Some(Estimate { mean, half_width, samples: n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub rate_mbps: f64,
    pub n_relays: usize,
    pub group: Group,
    pub runs: usize,
    pub throughput_mbps: Estimate,
    pub latency_ms: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CampaignSummary {
    /// Ordered by rate, relay count, then group.
    pub cells: Vec<SummaryCell>,
}

impl CampaignSummary {
    pub fn cell(&self, rate_mbps: f64, n_relays: usize, group: Group) -> Option<&SummaryCell> {
        self.cells.iter().find(|c| c.rate_mbps == rate_mbps && c.n_relays == n_relays && c.group == group)
    }
}

/// Mean and confidence half-width over runs for every `(R, relays, group)`.
pub fn aggregate_runs(results: &[RunResult]) -> CampaignSummary {
    // Rates as integer bit/s keep the map ordered without float keys.
    let mut cells: BTreeMap<(u64, usize, Group), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in results {
        for m in compute_metrics(r) {
            let e = cells.entry((r.rate_bps.round() as u64, r.n_relays, m.group)).or_default();
            e.0.push(m.sum_throughput_mbps);
            if let Some(l) = m.mean_latency_ms {
                e.1.push(l);
            }
        }
    }
    CampaignSummary {
        cells: cells
            .into_iter()
            .map(|((rate, n_relays, group), (thr, lat))| SummaryCell {
                rate_mbps: rate as f64 / 1e6,
                n_relays,
                group,
                runs: thr.len(),
                throughput_mbps: Estimate::from_samples(&thr).unwrap(),
                latency_ms: Estimate::from_samples(&lat),
            })
            .collect(),
    }
}
