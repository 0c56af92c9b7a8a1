//! Look-ahead, backhaul-aware TDMA schedulers.
//!
//! Every gNB owns one [`MacScheduler`]. At subframe `t` it allocates the
//! symbols of subframe `t + η` among its flows (access bearers toward UEs and
//! backhaul bearers toward IAB children). Symbols that the gNB's parent has
//! reserved for the gNB's own backhaul reception arrive as [`Dci`]s and are
//! held in a per-subframe busy mask; they are never used for access. The
//! grants toward IAB children are turned into DCIs for those children, which
//! run the same procedure one or more subframes later.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::time::Subframe;
use crate::topology::NodeId;

pub const MAX_SYMBOLS: u32 = 128;

/// Set of symbol indices within one subframe.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SymbolSet(u128);

impl SymbolSet {
    pub const EMPTY: SymbolSet = SymbolSet(0);

    pub fn full(symbols: u32) -> Self {
        debug_assert!(symbols <= MAX_SYMBOLS);
        if symbols == MAX_SYMBOLS {
            SymbolSet(u128::MAX)
        } else {
            SymbolSet((1u128 << symbols) - 1)
        }
    }

    pub fn range(start: u32, count: u32) -> Self {
        SymbolSet(Self::full(count).0 << start)
    }

    pub fn insert(&mut self, symbol: u32) {
        self.0 |= 1u128 << symbol;
    }

    pub fn contains(&self, symbol: u32) -> bool {
        self.0 >> symbol & 1 == 1
    }

    pub fn len(&self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: SymbolSet) -> SymbolSet {
        SymbolSet(self.0 | other.0)
    }

    pub fn intersection(self, other: SymbolSet) -> SymbolSet {
        SymbolSet(self.0 & other.0)
    }

    pub fn difference(self, other: SymbolSet) -> SymbolSet {
        SymbolSet(self.0 & !other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = u32> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                return None;
            }
            let i = bits.trailing_zeros();
            bits &= bits - 1;
            Some(i)
        })
    }

    /// Maximal runs of consecutive symbols as `(start, count)`.
    pub fn ranges(self) -> Vec<(u32, u32)> {
        let mut out: Vec<(u32, u32)> = Vec::new();
        for s in self.iter() {
            match out.last_mut() {
                Some((start, count)) if *start + *count == s => *count += 1,
                _ => out.push((s, 1)),
            }
        }
        out
    }

    /// The `n` lowest symbols of the set.
    fn take_lowest(&mut self, n: u32) -> SymbolSet {
        let mut taken = SymbolSet::EMPTY;
        for s in self.iter().take(n as usize) {
            taken.insert(s);
        }
        self.0 &= !taken.0;
        taken
    }
}

impl fmt::Debug for SymbolSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.ranges().iter().map(|&(s, c)| s..s + c)).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedulerKind {
    RoundRobin,
    ProportionalFair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacConfig {
    pub symbols_per_subframe: u32,
    pub subframe_duration: f64,
    /// ε, subframes between issuing a DCI and the child being able to use it.
    pub dci_delay: u32,
    pub iab_cap_fraction: f64,
    pub scheduler: SchedulerKind,
    /// Averaging window of the PF served-rate filter, in subframes.
    pub pf_window: f64,
}

impl Default for MacConfig {
    fn default() -> Self {
        MacConfig {
            symbols_per_subframe: 24,
            subframe_duration: 1e-3,
            dci_delay: 1,
            iab_cap_fraction: 0.5,
            scheduler: SchedulerKind::RoundRobin,
            pf_window: 100.0,
        }
    }
}

impl MacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_SYMBOLS).contains(&self.symbols_per_subframe) {
            return Err(Error::config(format!("symbols per subframe must be in 2..={MAX_SYMBOLS}")));
        }
        if self.dci_delay < 1 {
            return Err(Error::config("DCI delay must be at least one subframe"));
        }
        if !(self.subframe_duration > 0.0) || !(self.pf_window >= 1.0) {
            return Err(Error::config("invalid subframe duration or PF window"));
        }
        if !(self.iab_cap_fraction > 0.0 && self.iab_cap_fraction <= 1.0) {
            return Err(Error::config("IAB cap fraction must be in (0, 1]"));
        }
        Ok(())
    }

    /// Most symbols a single IAB child may receive in one subframe.
    pub fn iab_cap_symbols(&self) -> u32 {
        (self.symbols_per_subframe as f64 * self.iab_cap_fraction).floor() as u32
    }
}

/// Identifies a transmit bearer across the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetxRequest {
    pub process: u32,
    pub tb_bits: u64,
}

/// What a gNB knows about one of its bearers when scheduling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDemand {
    pub flow: FlowId,
    /// Bits waiting for a first transmission, net of earlier grants.
    pub queued_bits: u64,
    pub per_symbol_capacity: u64,
    pub spectral_efficiency: f64,
    pub is_iab_child: bool,
    /// Transport blocks awaiting a HARQ retransmission.
    pub retx: SmallVec<[RetxRequest; 2]>,
}

impl FlowDemand {
    pub fn new_data_symbols(&self) -> u32 {
        if self.per_symbol_capacity == 0 {
            0
        } else {
            self.queued_bits.div_ceil(self.per_symbol_capacity).min(MAX_SYMBOLS as u64) as u32
        }
    }

    fn retx_symbols(&self, tb_bits: u64) -> u32 {
        tb_bits.div_ceil(self.per_symbol_capacity) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrantKind {
    NewData,
    HarqRetx { process: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grant {
    pub flow: FlowId,
    pub kind: GrantKind,
    pub symbols: SymbolSet,
    pub tb_bits: u64,
    pub spectral_efficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SubframeAllocation {
    pub subframe: Subframe,
    pub grants: Vec<Grant>,
}

impl SubframeAllocation {
    pub fn used(&self) -> SymbolSet {
        self.grants.iter().fold(SymbolSet::EMPTY, |acc, g| acc.union(g.symbols))
    }

    pub fn symbols_for(&self, flow: FlowId) -> u32 {
        self.grants.iter().filter(|g| g.flow == flow).map(|g| g.symbols.len()).sum()
    }

    /// `(symbol_start, symbol_count, flow, efficiency, tb_bits)` per
    /// contiguous run.
    pub fn assignments(&self) -> Vec<(u32, u32, FlowId, f64, u64)> {
        let mut out = Vec::new();
        for g in &self.grants {
            for (s, c) in g.symbols.ranges() {
                out.push((s, c, g.flow, g.spectral_efficiency, g.tb_bits));
            }
        }
        out.sort_by_key(|a| a.0);
        out
    }
}

/// Downlink control information toward an IAB child.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dci {
    pub subframe: Subframe,
    pub flow: FlowId,
    pub symbols: SymbolSet,
    pub tb_bits: u64,
    pub spectral_efficiency: f64,
    pub issued_at: Subframe,
    pub available_at: Subframe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusyMask {
    pub subframe: Subframe,
    pub symbols: SymbolSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleOutcome {
    pub allocation: SubframeAllocation,
    pub dcis: Vec<Dci>,
    /// Busy mask the allocation was computed against.
    pub busy: SymbolSet,
}

#[derive(Debug, Clone, Copy)]
struct Reservation {
    symbols: SymbolSet,
    available_at: Subframe,
}

/// Scheduler state of one gNB.
#[derive(Debug, Clone)]
pub struct MacScheduler {
    node: NodeId,
    config: MacConfig,
    reservations: BTreeMap<Subframe, Vec<Reservation>>,
    last_scheduled: Option<Subframe>,
    rr_last: Option<FlowId>,
    pf_avg: HashMap<FlowId, f64>,
}

impl MacScheduler {
    pub fn new(node: NodeId, config: MacConfig) -> Self {
        MacScheduler {
            node,
            config,
            reservations: BTreeMap::new(),
            last_scheduled: None,
            rr_last: None,
            pf_avg: HashMap::new(),
        }
    }

    pub fn config(&self) -> &MacConfig {
        &self.config
    }

    /// Registers the backhaul reservation carried by a parent DCI. `now` is
    /// the receiving node's current subframe.
    pub fn ingest_parent_dci(&mut self, dci: &Dci, now: Subframe) -> Result<BusyMask> {
        if dci.subframe < now + 1 {
            return Err(self.causality(format!("DCI for subframe {} received at {now}", dci.subframe)));
        }
        if self.last_scheduled.is_some_and(|s| dci.subframe <= s) {
            return Err(self.causality(format!("DCI for subframe {} arrived after it was scheduled", dci.subframe)));
        }
        let entry = self.reservations.entry(dci.subframe).or_default();
        let r = Reservation { symbols: dci.symbols, available_at: dci.available_at };
        if !entry.iter().any(|e| e.symbols == r.symbols && e.available_at == r.available_at) {
            entry.push(r);
        }
        Ok(self.busy_mask(dci.subframe))
    }

    pub fn busy_mask(&self, subframe: Subframe) -> BusyMask {
        let symbols = self
            .reservations
            .get(&subframe)
            .map(|v| v.iter().fold(SymbolSet::EMPTY, |a, r| a.union(r.symbols)))
            .unwrap_or_default();
        BusyMask { subframe, symbols }
    }

    pub fn pf_average(&self, flow: FlowId) -> f64 {
        self.pf_avg.get(&flow).copied().unwrap_or(0.0)
    }

    pub fn schedule(&mut self, now: Subframe, target: Subframe, flows: &[FlowDemand]) -> Result<ScheduleOutcome> {
        match self.config.scheduler {
            SchedulerKind::RoundRobin => self.schedule_rr(now, target, flows),
            SchedulerKind::ProportionalFair => self.schedule_pf(now, target, flows),
        }
    }

    /// Round robin over backlogged flows, one symbol at a time, resuming
    /// after the last flow served.
    pub fn schedule_rr(&mut self, now: Subframe, target: Subframe, flows: &[FlowDemand]) -> Result<ScheduleOutcome> {
        self.allocate(now, target, flows, Policy::RoundRobin)
    }

    /// Proportional fair: each symbol goes to the flow with the highest
    /// achievable-rate / averaged-served-rate ratio.
    pub fn schedule_pf(&mut self, now: Subframe, target: Subframe, flows: &[FlowDemand]) -> Result<ScheduleOutcome> {
        self.allocate(now, target, flows, Policy::ProportionalFair)
    }

    fn causality(&self, detail: String) -> Error {
        Error::Causality { node: self.node, detail }
    }

    fn take_busy(&mut self, now: Subframe, target: Subframe) -> Result<SymbolSet> {
        if target < now + 1 {
            return Err(self.causality(format!("allocation for subframe {target} computed at {now}")));
        }
        if self.last_scheduled.is_some_and(|s| target <= s) {
            return Err(self.causality(format!("subframe {target} scheduled twice")));
        }
        let mut busy = SymbolSet::EMPTY;
        if let Some(rs) = self.reservations.remove(&target) {
            for r in rs {
                if r.available_at > now {
                    return Err(self.causality(format!(
                        "DCI for subframe {target} not available until {} but needed at {now}",
                        r.available_at
                    )));
                }
                busy = busy.union(r.symbols);
            }
        }
        // Reservations for subframes already scheduled can never be honoured.
        if let Some((&stale, _)) = self.reservations.range(..target).next() {
            return Err(self.causality(format!("stale reservation for subframe {stale}")));
        }
        self.last_scheduled = Some(target);
        Ok(busy)
    }

    fn allocate(&mut self, now: Subframe, target: Subframe, flows: &[FlowDemand], policy: Policy) -> Result<ScheduleOutcome> {
        let busy = self.take_busy(now, target)?;
        let s = self.config.symbols_per_subframe;
        let cap = self.config.iab_cap_symbols();
        let mut free = SymbolSet::full(s).difference(busy);

        let mut order: Vec<usize> = (0..flows.len()).collect();
        order.sort_by_key(|&i| flows[i].flow);

        let mut grants = Vec::new();
        let mut used = vec![0u32; flows.len()];

        // HARQ retransmissions first.
        for &i in &order {
            let f = &flows[i];
            if f.per_symbol_capacity == 0 {
                continue;
            }
            for r in &f.retx {
                let need = f.retx_symbols(r.tb_bits);
                let within_cap = !f.is_iab_child || used[i] + need <= cap;
                if need <= free.len() && within_cap {
                    let symbols = free.take_lowest(need);
                    used[i] += need;
                    grants.push(Grant {
                        flow: f.flow,
                        kind: GrantKind::HarqRetx { process: r.process },
                        symbols,
                        tb_bits: r.tb_bits,
                        spectral_efficiency: f.spectral_efficiency,
                    });
                }
            }
        }

        let want: Vec<u32> = flows
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let d = f.new_data_symbols();
                if f.is_iab_child {
                    d.min(cap.saturating_sub(used[i]))
                } else {
                    d
                }
            })
            .collect();

        let counts = match policy {
            Policy::RoundRobin => self.distribute_rr(flows, &order, &want, free.len()),
            Policy::ProportionalFair => self.distribute_pf(flows, &order, &want, free.len()),
        };

        for &i in &order {
            if counts[i] == 0 {
                continue;
            }
            let f = &flows[i];
            let symbols = free.take_lowest(counts[i]);
            grants.push(Grant {
                flow: f.flow,
                kind: GrantKind::NewData,
                symbols,
                tb_bits: counts[i] as u64 * f.per_symbol_capacity,
                spectral_efficiency: f.spectral_efficiency,
            });
        }

        if policy == Policy::ProportionalFair {
            self.update_pf_averages(flows, &grants);
        }

        let dcis = grants
            .iter()
            .filter(|g| flows.iter().any(|f| f.flow == g.flow && f.is_iab_child))
            .map(|g| Dci {
                subframe: target,
                flow: g.flow,
                symbols: g.symbols,
                tb_bits: g.tb_bits,
                spectral_efficiency: g.spectral_efficiency,
                issued_at: now,
                available_at: now + self.config.dci_delay as u64,
            })
            .collect();

        Ok(ScheduleOutcome { allocation: SubframeAllocation { subframe: target, grants }, dcis, busy })
    }

    fn distribute_rr(&mut self, flows: &[FlowDemand], order: &[usize], want: &[u32], mut symbols: u32) -> Vec<u32> {
        let mut counts = vec![0u32; flows.len()];
        if order.is_empty() {
            return counts;
        }
        let start = match self.rr_last {
            Some(last) => order.iter().position(|&i| flows[i].flow > last).unwrap_or(0),
            None => 0,
        };
        let n = order.len();
        let mut k = start;
        let mut idle = 0;
        while symbols > 0 && idle < n {
            let i = order[k % n];
            if counts[i] < want[i] {
                counts[i] += 1;
                symbols -= 1;
                self.rr_last = Some(flows[i].flow);
                idle = 0;
            } else {
                idle += 1;
            }
            k += 1;
        }
        counts
    }

    fn distribute_pf(&self, flows: &[FlowDemand], order: &[usize], want: &[u32], symbols: u32) -> Vec<u32> {
        let t = self.config.subframe_duration;
        let w = self.config.pf_window;
        let s = self.config.symbols_per_subframe as f64;
        let mut counts = vec![0u32; flows.len()];
        for _ in 0..symbols {
            let mut best: Option<(f64, usize)> = None;
            for &i in order {
                if counts[i] >= want[i] {
                    continue;
                }
                let f = &flows[i];
                let achievable = f.per_symbol_capacity as f64 * s / t;
                let served = counts[i] as f64 * f.per_symbol_capacity as f64 / t;
                let provisional = (1.0 - 1.0 / w) * self.pf_average(f.flow) + served / w;
                let metric = achievable / provisional.max(1.0);
                // `order` is sorted by flow id, so strict comparison keeps ties
                // on the lower id.
                if best.map_or(true, |(m, _)| metric > m) {
                    best = Some((metric, i));
                }
            }
            match best {
                Some((_, i)) => counts[i] += 1,
                None => break,
            }
        }
        counts
    }

    fn update_pf_averages(&mut self, flows: &[FlowDemand], grants: &[Grant]) {
        let t = self.config.subframe_duration;
        let w = self.config.pf_window;
        for f in flows {
            let served: u64 = grants.iter().filter(|g| g.flow == f.flow).map(|g| g.tb_bits).sum();
            let avg = self.pf_avg.entry(f.flow).or_insert(0.0);
            *avg = (1.0 - 1.0 / w) * *avg + served as f64 / t / w;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Policy {
    RoundRobin,
    ProportionalFair,
}

/// Constraint violated by an allocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    BusyOverlap { subframe: Subframe },
    GrantOverlap { subframe: Subframe },
    OutOfRange { subframe: Subframe },
    HalfCap { subframe: Subframe, flow: FlowId, symbols: u32 },
    WorkConservation { subframe: Subframe, flow: FlowId, free: u32 },
    TbSize { subframe: Subframe, flow: FlowId },
}

/// Checks an allocation against the busy mask it was computed with and the
/// demands it served. Independent of the allocation code path.
pub fn audit_allocation(config: &MacConfig, busy: SymbolSet, flows: &[FlowDemand], alloc: &SubframeAllocation) -> Vec<Violation> {
    let sf = alloc.subframe;
    let mut out = Vec::new();
    let all = SymbolSet::full(config.symbols_per_subframe);
    let mut seen = SymbolSet::EMPTY;
    for g in &alloc.grants {
        if !g.symbols.intersection(seen).is_empty() {
            out.push(Violation::GrantOverlap { subframe: sf });
        }
        if !g.symbols.difference(all).is_empty() {
            out.push(Violation::OutOfRange { subframe: sf });
        }
        if !g.symbols.intersection(busy).is_empty() {
            out.push(Violation::BusyOverlap { subframe: sf });
        }
        seen = seen.union(g.symbols);
        if let Some(f) = flows.iter().find(|f| f.flow == g.flow) {
            if g.kind == GrantKind::NewData && g.tb_bits != g.symbols.len() as u64 * f.per_symbol_capacity {
                out.push(Violation::TbSize { subframe: sf, flow: g.flow });
            }
        }
    }
    let cap = config.iab_cap_symbols();
    let free_left = all.difference(busy).difference(seen).len();
    for f in flows {
        let got = alloc.symbols_for(f.flow);
        if f.is_iab_child && got > cap {
            out.push(Violation::HalfCap { subframe: sf, flow: f.flow, symbols: got });
        }
        let new_got: u32 = alloc
            .grants
            .iter()
            .filter(|g| g.flow == f.flow && g.kind == GrantKind::NewData)
            .map(|g| g.symbols.len())
            .sum();
        let capped = f.is_iab_child && got >= cap;
        if free_left > 0 && new_got < f.new_data_symbols() && !capped {
            out.push(Violation::WorkConservation { subframe: sf, flow: f.flow, free: free_left });
        }
    }
    out
}
