//! Discrete-event simulator for mmWave cellular networks with integrated
//! access and backhaul (IAB).
//!
//! A run builds a Manhattan-grid deployment, attaches wireless relays and
//! UEs to a single wired donor, and then steps a subframe-synchronous MAC
//! pipeline in which every gNB schedules `η = N + 1` subframes ahead so that
//! its children learn about their backhaul reservations before they commit
//! their own access allocations. Downlink CBR traffic is carried through
//! RLC-AM bearers with HARQ and forwarded hop by hop on tunnel identifiers.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: grid, node placement and line-of-sight tests
//! * [`channel`]: path loss, link adaptation and block error model
//! * [`topology`]: IAB tree, look-ahead depths, tunnel routing
//! * [`scheduler`]: look-ahead backhaul-aware RR / PF MAC schedulers
//! * [`stack`]: RLC-AM, HARQ and per-node forwarding
//! * [`traffic`]: constant-bit-rate sources and core latency
//! * [`engine`]: event queue, per-subframe pipeline, campaigns
//! * [`metrics`]: per-group throughput/latency and campaign aggregation
//! * [`config`] and [`cli`]: presets, key-value configs and output files

pub mod channel;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod scheduler;
pub mod stack;
pub mod time;
pub mod topology;
pub mod traffic;

pub use config::SimConfig;
pub use engine::{run_campaign, run_once, RunResult};
pub use error::{Error, Result};
