//! Scheduler invariants over random demands and backhaul reservations.

use iabsim::scheduler::{
    audit_allocation, Dci, FlowDemand, FlowId, MacConfig, MacScheduler, RetxRequest, SchedulerKind, SymbolSet,
};
use iabsim::topology::NodeId;
use proptest::prelude::*;
use smallvec::SmallVec;

fn kind(pf: bool) -> SchedulerKind {
    if pf {
        SchedulerKind::ProportionalFair
    } else {
        SchedulerKind::RoundRobin
    }
}

prop_compose! {
    fn demand(id: u32)(bits in prop_oneof![Just(0u64), 1u64..2_000_000, Just(u64::MAX / 4)],
                       cap in prop_oneof![Just(0u64), 1_000u64..140_000],
                       iab in any::<bool>(),
                       retx in proptest::collection::vec(1_000u64..400_000, 0..3)) -> FlowDemand {
        FlowDemand {
            flow: FlowId(id),
            queued_bits: bits,
            per_symbol_capacity: cap,
            spectral_efficiency: cap as f64 / 41_666.0,
            is_iab_child: iab,
            retx: retx.iter().enumerate().map(|(i, b)| RetxRequest { process: i as u32, tb_bits: *b }).collect::<SmallVec<_>>(),
        }
    }
}

fn demands() -> impl Strategy<Value = Vec<FlowDemand>> {
    (1usize..8).prop_flat_map(|k| (0..k as u32).map(demand).collect::<Vec<_>>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn every_allocation_passes_the_audit(flows in demands(), busy in any::<u32>(), pf: bool, eta in 1u64..5) {
        let cfg = MacConfig { scheduler: kind(pf), ..MacConfig::default() };
        let mut m = MacScheduler::new(NodeId(1), cfg.clone());
        let target = 100 + eta;
        let mask = SymbolSet::full(24);
        let mut reserved = SymbolSet::EMPTY;
        for s in mask.iter().filter(|s| busy >> s & 1 == 1) {
            reserved.insert(s);
        }
        // The parent issued the reservation early enough.
        let dci = Dci { subframe: target, flow: FlowId(99), symbols: reserved, tb_bits: 0, spectral_efficiency: 1.0,
                        issued_at: 98, available_at: 99 };
        m.ingest_parent_dci(&dci, 99).unwrap();
        let out = m.schedule(100, target, &flows).unwrap();
        prop_assert_eq!(out.busy, reserved);
        let v = audit_allocation(&cfg, out.busy, &flows, &out.allocation);
        prop_assert!(v.is_empty(), "{:?}", v);
        // DCIs go only to IAB children and mirror their grants.
        for d in &out.dcis {
            prop_assert!(flows.iter().any(|f| f.flow == d.flow && f.is_iab_child));
            prop_assert_eq!(d.subframe, target);
            prop_assert_eq!(d.available_at, 101);
            prop_assert!(d.symbols.intersection(reserved).is_empty());
        }
    }

    #[test]
    fn rr_is_fair_over_backlogged_windows(k in 2usize..10, s in 2u32..40, subframes in 1usize..60,
                                          busy in proptest::collection::vec(any::<u64>(), 60)) {
        let cfg = MacConfig { symbols_per_subframe: s, ..MacConfig::default() };
        let mut m = MacScheduler::new(NodeId(1), cfg);
        let flows: Vec<FlowDemand> = (0..k as u32)
            .map(|i| FlowDemand { flow: FlowId(i), queued_bits: u64::MAX / 4, per_symbol_capacity: 1000,
                                  spectral_efficiency: 1.0, is_iab_child: false, retx: SmallVec::new() })
            .collect();
        let mut totals = vec![0u32; k];
        for t in 0..subframes as u64 {
            let mut reserved = SymbolSet::EMPTY;
            for sym in 0..s.min(64) {
                // Sparse reservations so access symbols remain.
                if busy[t as usize] >> sym & 3 == 3 {
                    reserved.insert(sym);
                }
            }
            let dci = Dci { subframe: t + 2, flow: FlowId(99), symbols: reserved, tb_bits: 0, spectral_efficiency: 1.0,
                            issued_at: t, available_at: t + 1 };
            m.ingest_parent_dci(&dci, t + 1).unwrap();
            let out = m.schedule(t + 1, t + 2, &flows).unwrap();
            prop_assert_eq!(out.allocation.used().len(), s - reserved.len());
            for (i, tot) in totals.iter_mut().enumerate() {
                *tot += out.allocation.symbols_for(FlowId(i as u32));
            }
            let (lo, hi) = (totals.iter().min().unwrap(), totals.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "counts {:?} after subframe {}", totals, t);
        }
    }

    #[test]
    fn parent_and_child_never_collide(child_bits in 0u64..4_000_000, ue_bits in 0u64..4_000_000,
                                      access in proptest::collection::vec(0u64..3_000_000, 1..5), pf: bool) {
        // Donor (η = 2) with one IAB child (η = 1) serving a few UEs.
        let cfg = MacConfig { scheduler: kind(pf), ..MacConfig::default() };
        let mut donor = MacScheduler::new(NodeId(0), cfg.clone());
        let mut relay = MacScheduler::new(NodeId(1), cfg.clone());
        let donor_flows = vec![
            FlowDemand { flow: FlowId(0), queued_bits: child_bits, per_symbol_capacity: 100_000, spectral_efficiency: 2.4,
                         is_iab_child: true, retx: SmallVec::new() },
            FlowDemand { flow: FlowId(1), queued_bits: ue_bits, per_symbol_capacity: 50_000, spectral_efficiency: 1.2,
                         is_iab_child: false, retx: SmallVec::new() },
        ];
        let relay_flows: Vec<FlowDemand> = access
            .iter()
            .enumerate()
            .map(|(i, b)| FlowDemand { flow: FlowId(10 + i as u32), queued_bits: *b, per_symbol_capacity: 60_000,
                                        spectral_efficiency: 1.4, is_iab_child: false, retx: SmallVec::new() })
            .collect();
        let mut donor_plans = std::collections::BTreeMap::new();
        let mut relay_plans = std::collections::BTreeMap::new();
        for t in 0..20u64 {
            let d = donor.schedule(t, t + 2, &donor_flows).unwrap();
            prop_assert!(audit_allocation(&cfg, d.busy, &donor_flows, &d.allocation).is_empty());
            for dci in &d.dcis {
                relay.ingest_parent_dci(dci, dci.available_at).unwrap();
            }
            donor_plans.insert(t + 2, d.allocation);
            let r = relay.schedule(t, t + 1, &relay_flows).unwrap();
            prop_assert!(audit_allocation(&cfg, r.busy, &relay_flows, &r.allocation).is_empty());
            relay_plans.insert(t + 1, r.allocation);
        }
        for (sf, r) in &relay_plans {
            if let Some(d) = donor_plans.get(sf) {
                let to_child: SymbolSet = d.grants.iter().filter(|g| g.flow == FlowId(0))
                    .fold(SymbolSet::EMPTY, |a, g| a.union(g.symbols));
                prop_assert!(to_child.len() <= 12);
                prop_assert!(r.used().intersection(to_child).is_empty());
            }
        }
    }
}

#[test]
fn late_dci_is_rejected() {
    let mut m = MacScheduler::new(NodeId(2), MacConfig::default());
    m.schedule(10, 11, &[]).unwrap();
    let dci = Dci { subframe: 11, flow: FlowId(0), symbols: SymbolSet::range(0, 4), tb_bits: 0, spectral_efficiency: 1.0,
                    issued_at: 9, available_at: 10 };
    assert!(m.ingest_parent_dci(&dci, 10).is_err());
    // Scheduling the same subframe twice is refused too.
    assert!(m.schedule(10, 11, &[]).is_err());
    // A subframe in the past cannot be scheduled.
    assert!(m.schedule(20, 20, &[]).is_err());
}

#[test]
fn pf_shares_converge_for_equal_links() {
    let cfg = MacConfig { scheduler: SchedulerKind::ProportionalFair, ..MacConfig::default() };
    let mut m = MacScheduler::new(NodeId(0), cfg);
    let flows: Vec<FlowDemand> = (0..3)
        .map(|i| FlowDemand { flow: FlowId(i), queued_bits: u64::MAX / 4, per_symbol_capacity: 10_000,
                              spectral_efficiency: 1.0, is_iab_child: false, retx: SmallVec::new() })
        .collect();
    let mut totals = [0u32; 3];
    for t in 0..300 {
        let out = m.schedule(t, t + 1, &flows).unwrap();
        for (i, tot) in totals.iter_mut().enumerate() {
            *tot += out.allocation.symbols_for(FlowId(i as u32));
        }
    }
    assert!(totals.iter().all(|&x| (x as i64 - 2400).abs() <= 24), "{totals:?}");
}
