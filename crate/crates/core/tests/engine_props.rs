//! End-to-end runs: look-ahead timing, stack invariants and determinism.

use std::collections::BTreeMap;

use iabsim::channel::LinkState;
use iabsim::engine::{run_campaign, run_campaign_serial, run_deployment, run_once, Deployment, RunResult, Simulation};
use iabsim::time::SimTime;
use iabsim::topology::{compute_lookahead, IabTree, LinkTable, NodeId, Role, TunnelId};
use iabsim::SimConfig;
use proptest::prelude::*;

fn assert_clean(r: &RunResult) {
    let c = &r.checks;
    assert_eq!(c.time_regressions, 0);
    assert_eq!(c.scheduler_violations, 0, "{:?}", c.first_violations);
    assert_eq!(c.half_duplex_violations, 0);
    assert_eq!(c.lookahead_mismatches, 0);
    assert_eq!(c.latency_floor_violations, 0);
    assert_eq!(c.duplicate_deliveries, 0);
    assert_eq!(c.hop_trace_mismatches, 0);
    assert_eq!(c.buffer_overflows, 0);
    assert_eq!(c.conservation_mismatches, 0);
    assert!(c.peak_access_buffer <= 10_000_000);
    assert!(c.peak_backhaul_buffer <= 40_000_000);
    for f in &r.flows {
        assert_eq!(f.generated, f.delivered + f.dropped + f.in_network + f.in_core, "{f:?}");
    }
}

fn synthetic_link(tx: u32, rx: u32, capacity: u64) -> LinkState {
    LinkState {
        tx: NodeId(tx),
        rx: NodeId(rx),
        distance_3d: 80.0,
        los: true,
        snr_db: 40.0,
        spectral_efficiency: capacity as f64 * 24.0 / 1e6,
        per_symbol_capacity: capacity,
    }
}

/// donor 0 → {1, 4}, 1 → 2 → 3; UEs 11 and 12 on node 3, 13 on node 4 and
/// 14 on the donor.
fn reference_tree() -> Deployment {
    let mut tree = IabTree::new(NodeId(0));
    let mut links = LinkTable::default();
    for (c, p) in [(1, 0), (4, 0), (2, 1), (3, 2)] {
        tree.attach(NodeId(c), Role::Iab, NodeId(p)).unwrap();
        links.insert(synthetic_link(p, c, 120_000));
    }
    for (i, (ue, g)) in [(11, 3), (12, 3), (13, 4), (14, 0)].into_iter().enumerate() {
        tree.attach(NodeId(ue), Role::Ue, NodeId(g)).unwrap();
        tree.nodes.get_mut(&NodeId(ue)).unwrap().tunnel = Some(TunnelId(i as u32 + 1));
        links.insert(synthetic_link(g, ue, 40_000));
    }
    tree.ue_attach_time = SimTime::from_secs(0.1);
    compute_lookahead(&mut tree).unwrap();
    Deployment { tree, links, scenario: None, positions: BTreeMap::new() }
}

fn short(rate: f64, secs: f64) -> SimConfig {
    SimConfig {
        rate_bps: rate,
        sim_duration: secs,
        warmup: 0.05,
        audit: true,
        record_packets: true,
        ..SimConfig::paper_manhattan()
    }
}

#[test]
fn reference_tree_schedules_at_its_lookahead() {
    let cfg = SimConfig { log_allocations: true, ..short(150e6, 0.4) };
    let r = run_deployment(&cfg, reference_tree()).unwrap();
    assert_clean(&r);
    let expected: BTreeMap<NodeId, u32> = [(0, 4), (1, 3), (2, 2), (3, 1), (4, 1)].map(|(n, e)| (NodeId(n), e)).into();
    assert_eq!(r.lookahead, expected);
    assert!(!r.allocation_log.is_empty());
    for e in &r.allocation_log {
        assert_eq!(e.subframe - e.computed_at, expected[&e.node] as u64, "{e:?}");
    }
    // Every multi-hop UE got traffic through three relays, with hop traces
    // checked against the tree inside the run.
    let deep: Vec<_> = r.records.iter().filter(|d| d.ue == NodeId(11)).collect();
    assert!(!deep.is_empty());
    assert_eq!(deep[0].hop_trace, vec![NodeId(0), NodeId(1), NodeId(2), NodeId(3), NodeId(11)]);
    // Five radio hops at 1 ms each plus the 11 ms core is the floor.
    let min = deep.iter().map(|d| d.delivered_at - d.created_at).min().unwrap();
    assert!(min >= SimTime::from_millis(15), "{min}");
}

#[test]
fn relays_respect_parent_reservations_in_the_log() {
    let cfg = SimConfig { log_allocations: true, ..short(300e6, 0.3) };
    let r = run_deployment(&cfg, reference_tree()).unwrap();
    assert_clean(&r);
    // Backhaul grants stay within the half cap and nothing is granted on
    // symbols the parent reserved.
    for e in &r.allocation_log {
        let used = e.grants.iter().fold(iabsim::scheduler::SymbolSet::EMPTY, |a, g| a.union(g.1));
        assert!(used.intersection(e.busy).is_empty(), "{e:?}");
        for (flow, syms, _) in &e.grants {
            if e.backhaul_flows.contains(flow) {
                assert!(syms.len() <= 12, "half cap exceeded: {e:?}");
            }
        }
    }
    assert!(r.checks.audited_allocations > 0);
    assert_eq!(r.checks.half_duplex_violations, 0);
}

#[test]
fn uncongested_single_ue_sees_core_latency() {
    let cfg = SimConfig { n_relays: 0, n_ues: 1, ..short(2e6, 0.5) };
    let r = run_once(&cfg).unwrap();
    assert_clean(&r);
    let f = &r.flows[0];
    assert!(f.delivered > 0);
    assert_eq!(f.dropped, 0);
    // Everything created more than ~25 ms before the end arrived.
    assert!(f.in_network + f.in_core <= 20, "{f:?}");
    for d in &r.records {
        let ms = (d.delivered_at - d.created_at).as_millis_f64();
        assert!((12.0..=30.0).contains(&ms), "{ms}");
    }
}

#[test]
fn same_seed_same_result() {
    let cfg = SimConfig { n_relays: 2, n_ues: 6, ..short(80e6, 0.3) };
    assert_eq!(run_once(&cfg).unwrap(), run_once(&cfg).unwrap());
    let other = SimConfig { seed: cfg.seed + 1, ..cfg.clone() };
    assert_ne!(run_once(&cfg).unwrap(), run_once(&other).unwrap());
}

#[test]
fn serial_and_parallel_campaigns_agree() {
    let cfg = SimConfig { n_relays: 1, n_ues: 5, ..short(100e6, 0.25) };
    let a = run_campaign_serial(&cfg, 3).unwrap();
    let b = run_campaign(&cfg, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![cfg.seed, cfg.seed + 1, cfg.seed + 2]);
    assert_eq!(run_campaign(&cfg, 1).unwrap().len(), 1);
    assert!(run_campaign(&cfg, 0).is_err());
}

#[test]
fn conservation_holds_mid_run() {
    let mut cfg = SimConfig { n_relays: 3, n_ues: 8, ..short(300e6, 0.4) };
    cfg.stack.ue_buffer_bytes = 200_000;
    cfg.stack.iab_buffer_bytes = 800_000;
    cfg.channel.bler_target = 0.4;
    let deployment = iabsim::engine::deploy(&cfg).unwrap();
    let mut sim = Simulation::new(cfg.clone(), deployment).unwrap();
    for ms in [50u64, 113, 180, 251, 333] {
        sim.run_until(SimTime::from_millis(ms) + SimTime(417)).unwrap();
        assert_eq!(sim.check_conservation(), 0, "at {ms} ms");
    }
    sim.run().unwrap();
    let r = sim.finish();
    assert_clean(&r);
    assert!(r.flows.iter().map(|f| f.dropped).sum::<u64>() > 0, "small buffers must overflow");
    assert!(r.tb_failed > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stack_invariants_hold_on_random_runs(seed in 0u64..1000, relays in 0usize..=4, ues in 1usize..10,
                                          rate in prop_oneof![Just(5e6), Just(60e6), Just(400e6)],
                                          small_buffers: bool, lossy: bool, pf: bool) {
        let mut cfg = SimConfig { seed, n_relays: relays, n_ues: ues, ..short(rate, 0.3) };
        if small_buffers {
            cfg.stack.ue_buffer_bytes = 100_000;
            cfg.stack.iab_buffer_bytes = 400_000;
        }
        if lossy {
            cfg.channel.bler_target = 0.5;
        }
        if pf {
            cfg.mac.scheduler = iabsim::scheduler::SchedulerKind::ProportionalFair;
        }
        let r = run_once(&cfg).unwrap();
        assert_clean(&r);
        let floor = SimTime::from_millis(11);
        for d in &r.records {
            let hops = d.hop_trace.len() as u64 - 1;
            prop_assert!(d.delivered_at - d.created_at >= floor + SimTime::from_millis(hops));
        }
        // No packet delivered twice.
        let mut seen = std::collections::HashSet::new();
        for d in &r.records {
            prop_assert!(seen.insert((d.ue, d.packet)));
        }
    }
}
