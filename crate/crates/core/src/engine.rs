//! Discrete-event core: deployment setup, the event queue and the
//! per-subframe MAC pipeline.
//!
//! Within a subframe tick `t` every gNB, in decreasing η order, computes the
//! allocation of subframe `t + η` and hands the DCIs for its IAB children to
//! their schedulers. Then the allocations planned for `t` are executed;
//! receptions and HARQ feedback land at the end of the subframe.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::channel::{compute_snr, link_adapt, tb_error_prob, LinkState};
use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::geometry::{build_manhattan_grid_with_height, is_los, place_nodes, NodeHeights, Position, Scenario};
use crate::scheduler::{audit_allocation, FlowDemand, FlowId, GrantKind, MacScheduler, SubframeAllocation, SymbolSet, Violation};
use crate::stack::{
    route_at_node, sdu_len, BearerKind, Enqueue, HarqFeedback, Packet, PacketId, RlcRx, Segment, StatusReport, TxBearer,
};
use crate::time::{SimTime, Subframe};
use crate::topology::{
    attach_iab_nodes, attach_ues, build_routing_tables, compute_lookahead, GnbSite, IabTree, LinkTable, NodeId, Role, Route,
    TunnelId,
};
use crate::traffic::{generate_flow, CbrSource, FlowConfig};

/// Random substreams of a run.
const STREAM_PLACEMENT: u64 = 1;
const STREAM_SHADOWING: u64 = 2;
const STREAM_HARQ: u64 = 3;

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stable identity of a radio endpoint across relay counts: gNBs by site
/// index (donor 0, relays by direction), UEs by placement order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Endpoint {
    Gnb(u64),
    Ue(u64),
}

impl Endpoint {
    fn key(self) -> u64 {
        match self {
            Endpoint::Gnb(i) => i,
            Endpoint::Ue(i) => 16 + i,
        }
    }
}

/// Log-normal shadowing of one link, unit normal scaled by σ. Every link owns
/// a fixed block of the shadowing substream, so the draw does not depend on
/// which other links exist.
fn shadowing_db(seed: u64, a: Endpoint, b: Endpoint, sigma: f64) -> f64 {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let mut rng = substream(seed, STREAM_SHADOWING);
    rng.set_word_pos(((lo.key() << 24) | hi.key()) as u128 * 256);
    let z: f64 = StandardNormal.sample(&mut rng);
    sigma * z
}

/// Radio deployment of one run: the attached tree and the link states of
/// its edges (and of every other evaluated gNB→node pair).
#[derive(Debug, Clone)]
pub struct Deployment {
    pub tree: IabTree,
    pub links: LinkTable,
    pub scenario: Option<Scenario>,
    pub positions: BTreeMap<NodeId, Position>,
}

#[allow(clippy::too_many_arguments)]
fn make_link(
    cfg: &SimConfig,
    scenario: &Scenario,
    tx: (NodeId, Endpoint, &Position),
    rx: (NodeId, Endpoint, &Position),
    rx_gain: f64,
) -> LinkState {
    let ch = &cfg.channel;
    let d = tx.2.distance_3d(rx.2);
    let los = is_los(scenario, tx.2, rx.2);
    let shadow = shadowing_db(cfg.seed, tx.1, rx.1, ch.shadowing_sigma(los));
    let snr = compute_snr(ch, ch.gnb_gain_dbi, rx_gain, d, los, shadow);
    let la = link_adapt(ch, snr, cfg.mac.symbols_per_subframe, cfg.mac.subframe_duration);
    LinkState {
        tx: tx.0,
        rx: rx.0,
        distance_3d: d,
        los,
        snr_db: snr,
        spectral_efficiency: la.spectral_efficiency,
        per_symbol_capacity: la.per_symbol_capacity,
    }
}

/// Geometry, channel, attachment and look-ahead depths for `cfg`.
///
/// Node ids: donor 0, relays `1..=n_relays`, UEs after them.
pub fn deploy(cfg: &SimConfig) -> Result<Deployment> {
    cfg.validate()?;
    let s = &cfg.scenario;
    let scenario = build_manhattan_grid_with_height(s.block_side, s.street_width, s.rows, s.cols, s.building_height)?;
    let heights = NodeHeights { gnb: s.gnb_height, ue: s.ue_height };
    let mut rng = substream(cfg.seed, STREAM_PLACEMENT);
    let placement = place_nodes(&scenario, heights, s.relay_distance, cfg.n_relays, cfg.n_ues, &mut rng)?;

    let mut sites = vec![GnbSite { id: NodeId(0), position: placement.donor, wired: true }];
    for (i, p) in placement.relays.iter().enumerate() {
        sites.push(GnbSite { id: NodeId(i as u32 + 1), position: *p, wired: false });
    }
    let first_ue = sites.len() as u32;
    let ues: Vec<(NodeId, Position)> =
        placement.ues.iter().enumerate().map(|(i, p)| (NodeId(first_ue + i as u32), *p)).collect();

    let mut links = LinkTable::default();
    for a in &sites {
        let ea = Endpoint::Gnb(a.id.0 as u64);
        for b in &sites {
            if a.id != b.id {
                let eb = Endpoint::Gnb(b.id.0 as u64);
                links.insert(make_link(cfg, &scenario, (a.id, ea, &a.position), (b.id, eb, &b.position), cfg.channel.gnb_gain_dbi));
            }
        }
        for (i, (ue, pos)) in ues.iter().enumerate() {
            let eu = Endpoint::Ue(i as u64);
            links.insert(make_link(cfg, &scenario, (a.id, ea, &a.position), (*ue, eu, pos), cfg.channel.ue_gain_dbi));
        }
    }

    let mut tree = attach_iab_nodes(&sites, &links, cfg.attach_policy)?;
    attach_ues(&mut tree, &sites, &ues, SimTime::from_secs(cfg.attach_delay))?;
    compute_lookahead(&mut tree)?;

    let mut positions: BTreeMap<NodeId, Position> = sites.iter().map(|s| (s.id, s.position)).collect();
    positions.extend(ues.iter().copied());
    Ok(Deployment { tree, links, scenario: Some(scenario), positions })
}

/// Counters of one downlink flow (one UE).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub ue: NodeId,
    pub tunnel: TunnelId,
    pub serving: NodeId,
    /// Radio hops from the donor to the UE.
    pub hops: u32,
    pub generated: u64,
    pub arrived: u64,
    pub delivered: u64,
    pub dropped: u64,
    /// Packets (or pieces of them) inside the RAN when the run ended.
    pub in_network: u64,
    /// Packets created but still crossing the core network at the end.
    pub in_core: u64,
    pub window_bytes: u64,
    pub window_packets: u64,
    /// Sum of end-to-end latencies of window packets, seconds.
    pub window_latency_sum: f64,
    pub min_latency: Option<SimTime>,
}

impl FlowStats {
    pub fn via_iab(&self, donor: NodeId) -> bool {
        self.serving != donor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub ue: NodeId,
    pub packet: PacketId,
    pub created_at: SimTime,
    pub delivered_at: SimTime,
    pub hop_trace: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationLogEntry {
    pub node: NodeId,
    pub computed_at: Subframe,
    pub subframe: Subframe,
    pub busy: SymbolSet,
    /// `(flow, symbols, is_harq_retx)`.
    pub grants: Vec<(FlowId, SymbolSet, bool)>,
    /// Flow ids that are backhaul bearers toward IAB children.
    pub backhaul_flows: Vec<FlowId>,
}

/// Invariant checks gathered during a run. All counters are zero on a
/// correct run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunChecks {
    pub events_processed: u64,
    pub time_regressions: u64,
    pub audited_allocations: u64,
    pub scheduler_violations: u64,
    pub first_violations: Vec<Violation>,
    /// A node transmitting on a symbol on which its parent sends to it.
    pub half_duplex_violations: u64,
    /// Allocations not computed exactly η subframes ahead.
    pub lookahead_mismatches: u64,
    pub latency_floor_violations: u64,
    pub duplicate_deliveries: u64,
    pub hop_trace_mismatches: u64,
    pub buffer_overflows: u64,
    pub conservation_mismatches: u64,
    pub peak_access_buffer: u64,
    pub peak_backhaul_buffer: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub n_relays: usize,
    pub rate_bps: f64,
    pub donor: NodeId,
    pub measured_duration: f64,
    pub lookahead: BTreeMap<NodeId, u32>,
    pub parents: BTreeMap<NodeId, NodeId>,
    pub setup_complete: BTreeMap<NodeId, SimTime>,
    pub flows: Vec<FlowStats>,
    pub checks: RunChecks,
    pub tb_sent: u64,
    pub tb_failed: u64,
    pub records: Vec<DeliveryRecord>,
    pub allocation_log: Vec<AllocationLogEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Gnb(usize),
    Ue(usize),
}

#[derive(Debug)]
enum Event {
    FlowStart { flow: usize },
    Arrival { flow: usize },
    Reception { gnb: usize, bearer: usize, segments: Vec<Segment> },
    Feedback { gnb: usize, bearer: usize, feedback: HarqFeedback, tx_subframe: Subframe },
    Status { gnb: usize, bearer: usize, report: StatusReport },
    Reordering { at: Slot },
    Poll { gnb: usize, bearer: usize },
    Tick { subframe: Subframe },
}

impl Event {
    /// Tie-break between events at the same instant.
    fn priority(&self) -> u8 {
        match self {
            Event::FlowStart { .. } => 0,
            Event::Arrival { .. } => 1,
            Event::Reception { .. } => 2,
            Event::Feedback { .. } => 3,
            Event::Status { .. } => 4,
            Event::Reordering { .. } => 5,
            Event::Poll { .. } => 6,
            Event::Tick { .. } => 7,
        }
    }
}

struct Queued {
    time: SimTime,
    priority: u8,
    seq: u64,
    event: Event,
}

impl Queued {
    fn key(&self) -> (SimTime, u8, u64) {
        (self.time, self.priority, self.seq)
    }
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

struct Gnb {
    id: NodeId,
    eta: u64,
    sched: MacScheduler,
    bearers: Vec<TxBearer>,
    peers: Vec<Slot>,
    bearer_by_peer: HashMap<NodeId, usize>,
    plans: VecDeque<SubframeAllocation>,
    /// Receiving side of the backhaul bearer from the parent.
    rx: Option<RlcRx>,
    /// `(parent gNB, bearer)` feeding `rx`.
    uplink: Option<(usize, usize)>,
    routing: crate::topology::RoutingTable,
}

struct Ue {
    id: NodeId,
    gnb: usize,
    bearer: usize,
    rx: RlcRx,
    flow: usize,
}

struct Flow {
    source: CbrSource,
    path: SmallVec<[NodeId; 6]>,
    last_delivered: Option<u64>,
    stats: FlowStats,
}

/// One simulation run in progress.
pub struct Simulation {
    cfg: SimConfig,
    tree: IabTree,
    sf_ns: u64,
    end: SimTime,
    measure_start: SimTime,
    gnbs: Vec<Gnb>,
    donor: usize,
    ues: Vec<Ue>,
    flows: Vec<Flow>,
    flow_of_tunnel: HashMap<TunnelId, usize>,
    /// FlowId → (gNB, bearer).
    bearer_of_flow: Vec<(usize, usize)>,
    order: Vec<usize>,
    queue: BinaryHeap<Queued>,
    seq: u64,
    now: SimTime,
    harq_rng: ChaCha8Rng,
    checks: RunChecks,
    records: Vec<DeliveryRecord>,
    allocation_log: Vec<AllocationLogEntry>,
    setup_complete: BTreeMap<NodeId, SimTime>,
    demands: Vec<FlowDemand>,
}

impl Simulation {
    pub fn new(cfg: SimConfig, deployment: Deployment) -> Result<Self> {
        cfg.validate()?;
        let Deployment { tree, links, .. } = deployment;
        let mut tree = tree;
        compute_lookahead(&mut tree)?;
        let routing = build_routing_tables(&tree)?;
        let sf_ns = (cfg.mac.subframe_duration * 1e9).round() as u64;

        let mut slots: HashMap<NodeId, Slot> = HashMap::new();
        let gnb_ids: Vec<NodeId> = tree.gnbs().map(|n| n.id).collect();
        for (i, id) in gnb_ids.iter().enumerate() {
            slots.insert(*id, Slot::Gnb(i));
        }
        let ue_ids: Vec<NodeId> = tree.ues().map(|n| n.id).collect();
        for (i, id) in ue_ids.iter().enumerate() {
            slots.insert(*id, Slot::Ue(i));
        }

        let mut gnbs = Vec::new();
        let mut bearer_of_flow = Vec::new();
        for (gi, id) in gnb_ids.iter().enumerate() {
            let node = tree.node(*id);
            let mut bearers = Vec::new();
            let mut peers = Vec::new();
            let mut bearer_by_peer = HashMap::new();
            let mut children = node.children.clone();
            children.sort();
            for c in children {
                let kind = match tree.role(c) {
                    Role::Ue => BearerKind::Access { ue: c },
                    _ => BearerKind::Backhaul { child: c },
                };
                let link = *links
                    .get(*id, c)
                    .ok_or_else(|| Error::Structure(format!("no link state for {id} -> {c}")))?;
                let flow = FlowId(bearer_of_flow.len() as u32);
                bearer_of_flow.push((gi, bearers.len()));
                bearer_by_peer.insert(c, bearers.len());
                peers.push(slots[&c]);
                bearers.push(TxBearer::new(flow, kind, link, &cfg.stack));
            }
            gnbs.push(Gnb {
                id: *id,
                eta: node.lookahead_depth as u64,
                sched: MacScheduler::new(*id, cfg.mac.clone()),
                bearers,
                peers,
                bearer_by_peer,
                plans: VecDeque::new(),
                rx: None,
                uplink: None,
                routing: routing.get(id).cloned().unwrap_or_default(),
            });
        }
        for gi in 0..gnbs.len() {
            if let Some(parent) = tree.node(gnbs[gi].id).parent {
                let Slot::Gnb(pi) = slots[&parent] else {
                    return Err(Error::Structure(format!("parent of {} is not a gNB", gnbs[gi].id)));
                };
                let bi = gnbs[pi].bearer_by_peer[&gnbs[gi].id];
                gnbs[gi].uplink = Some((pi, bi));
                gnbs[gi].rx = Some(RlcRx::new(cfg.stack.reordering_timer));
            }
        }

        // Relays become operational after a fixed control-plane setup time.
        let core = cfg.core.server_to_donor_latency;
        let mut setup_complete = BTreeMap::new();
        for id in &gnb_ids {
            let depth = tree.depth(*id).unwrap_or(0) as u64;
            let t = if depth == 0 { SimTime::ZERO } else { SimTime(2 * core.0 + depth * sf_ns) };
            setup_complete.insert(*id, t);
        }

        let end = cfg.end();
        let mut ues = Vec::new();
        let mut flows = Vec::new();
        let mut flow_of_tunnel = HashMap::new();
        for (ui, id) in ue_ids.iter().enumerate() {
            let node = tree.node(*id);
            let serving = node.parent.ok_or_else(|| Error::Structure(format!("UE {id} is not attached")))?;
            let tunnel = node.tunnel.ok_or_else(|| Error::Structure(format!("UE {id} has no tunnel")))?;
            let Slot::Gnb(gi) = slots[&serving] else {
                return Err(Error::Structure(format!("UE {id} is served by a non-gNB")));
            };
            let path: SmallVec<[NodeId; 6]> = tree
                .path_from_donor(*id)
                .ok_or_else(|| Error::Structure(format!("UE {id} unreachable")))?
                .into_iter()
                .collect();
            let start = tree.ue_attach_time.max(setup_complete[&serving]).max(SimTime::from_secs(cfg.attach_delay));
            let source = generate_flow(
                &FlowConfig { ue: *id, rate_bps: cfg.rate_bps, packet_size: cfg.packet_size, start, stop: end.max(start) },
                cfg.core,
            )?;
            flow_of_tunnel.insert(tunnel, flows.len());
            flows.push(Flow {
                source,
                last_delivered: None,
                stats: FlowStats {
                    ue: *id,
                    tunnel,
                    serving,
                    hops: path.len() as u32 - 1,
                    generated: 0,
                    arrived: 0,
                    delivered: 0,
                    dropped: 0,
                    in_network: 0,
                    in_core: 0,
                    window_bytes: 0,
                    window_packets: 0,
                    window_latency_sum: 0.0,
                    min_latency: None,
                },
                path,
            });
            ues.push(Ue { id: *id, gnb: gi, bearer: gnbs[gi].bearer_by_peer[id], rx: RlcRx::new(cfg.stack.reordering_timer), flow: ui });
        }

        let mut order: Vec<usize> = (0..gnbs.len()).collect();
        order.sort_by(|&a, &b| gnbs[b].eta.cmp(&gnbs[a].eta).then(gnbs[a].id.cmp(&gnbs[b].id)));

        let mut sim = Simulation {
            harq_rng: substream(cfg.seed, STREAM_HARQ),
            measure_start: cfg.measure_start(),
            end,
            sf_ns,
            donor: match slots[&tree.donor_id] {
                Slot::Gnb(i) => i,
                Slot::Ue(_) => return Err(Error::Structure("donor is a UE".into())),
            },
            tree,
            gnbs,
            ues,
            flows,
            flow_of_tunnel,
            bearer_of_flow,
            order,
            queue: BinaryHeap::new(),
            seq: 0,
            now: SimTime::ZERO,
            checks: RunChecks::default(),
            records: Vec::new(),
            allocation_log: Vec::new(),
            setup_complete,
            demands: Vec::new(),
            cfg,
        };
        for f in 0..sim.flows.len() {
            let start = sim.flows[f].source.flow().start;
            sim.push(start, Event::FlowStart { flow: f });
        }
        sim.push(SimTime::ZERO, Event::Tick { subframe: 0 });
        Ok(sim)
    }

    fn push(&mut self, time: SimTime, event: Event) {
        // Frames still on the air at the end stay queued so the census sees
        // them; nothing at or past `end` is ever processed.
        if time >= self.end && !matches!(event, Event::Reception { .. }) {
            return;
        }
        self.seq += 1;
        self.queue.push(Queued { time, priority: event.priority(), seq: self.seq, event });
    }

    fn subframe_start(&self, t: Subframe) -> SimTime {
        SimTime(t * self.sf_ns)
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn tree(&self) -> &IabTree {
        &self.tree
    }

    /// Processes events up to (excluding) `until`, or to the end of the run.
    pub fn run_until(&mut self, until: SimTime) -> Result<()> {
        while let Some(top) = self.queue.peek() {
            if top.time >= until {
                break;
            }
            let q = self.queue.pop().unwrap();
            if q.time < self.now {
                self.checks.time_regressions += 1;
            }
            self.now = q.time;
            self.checks.events_processed += 1;
            self.handle(q.event)?;
        }
        if until >= self.end {
            self.now = self.end;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.end)
    }

    fn handle(&mut self, event: Event) -> Result<()> {
        match event {
            Event::FlowStart { flow } => {
                if let Some(p) = self.flows[flow].source.peek() {
                    self.push(p.arrives_at_donor, Event::Arrival { flow });
                }
            }
            Event::Arrival { flow } => self.on_arrival(flow)?,
            Event::Reception { gnb, bearer, segments } => self.on_reception(gnb, bearer, segments)?,
            Event::Feedback { gnb, bearer, feedback, tx_subframe } => {
                let poll = self.cfg.stack.poll_retransmit_timer;
                let now = self.now;
                let b = &mut self.gnbs[gnb].bearers[bearer];
                if let Some(segs) = b.on_feedback(feedback, tx_subframe) {
                    if let Some(d) = b.rlc.on_harq_exhausted(segs, now, poll) {
                        self.push(d, Event::Poll { gnb, bearer });
                    }
                }
            }
            Event::Status { gnb, bearer, report } => self.gnbs[gnb].bearers[bearer].rlc.on_status_report(&report),
            Event::Poll { gnb, bearer } => self.gnbs[gnb].bearers[bearer].rlc.on_poll_expiry(self.now),
            Event::Reordering { at } => {
                let now = self.now;
                let (fired, sender) = match at {
                    Slot::Ue(u) => (self.ues[u].rx.on_reordering_timer(now), Some((self.ues[u].gnb, self.ues[u].bearer))),
                    Slot::Gnb(g) => (self.gnbs[g].rx.as_mut().and_then(|rx| rx.on_reordering_timer(now)), self.gnbs[g].uplink),
                };
                if let (Some((report, restart)), Some((gnb, bearer))) = (fired, sender) {
                    self.push(now + SimTime(self.sf_ns), Event::Status { gnb, bearer, report });
                    if let Some(d) = restart {
                        self.push(d, Event::Reordering { at });
                    }
                }
            }
            Event::Tick { subframe } => self.on_tick(subframe)?,
        }
        Ok(())
    }

    /// Moves every packet of `flow` reaching the donor by the next subframe
    /// boundary into the donor; they are all first scheduled at that tick.
    fn on_arrival(&mut self, flow: usize) -> Result<()> {
        let boundary = SimTime(self.now.0.div_ceil(self.sf_ns) * self.sf_ns);
        let donor = self.tree.donor_id;
        let dg = self.donor;
        loop {
            let f = &mut self.flows[flow];
            let Some(p) = f.source.peek() else { break };
            if p.arrives_at_donor > boundary {
                self.push(p.arrives_at_donor, Event::Arrival { flow });
                break;
            }
            f.source.next();
            f.stats.arrived += 1;
            let mut hop_trace = SmallVec::new();
            hop_trace.push(donor);
            let packet = Packet {
                id: PacketId(p.seq),
                payload_bytes: self.cfg.packet_size,
                tunnel: f.stats.tunnel,
                created_at: p.created_at,
                delivered_at: None,
                hop_trace,
            };
            self.forward(dg, packet)?;
        }
        Ok(())
    }

    /// Routes a packet present at gNB `gi` onto the matching bearer.
    fn forward(&mut self, gi: usize, packet: Packet) -> Result<()> {
        let g = &mut self.gnbs[gi];
        let next = match route_at_node(g.id, &g.routing, &packet)? {
            Route::Forward(c) | Route::Local(c) => c,
        };
        let bi = *g
            .bearer_by_peer
            .get(&next)
            .ok_or_else(|| Error::Structure(format!("{} has no bearer toward {next}", g.id)))?;
        let bearer = &mut g.bearers[bi];
        let len = sdu_len(&self.cfg.stack, bearer.kind, packet.payload_bytes);
        let tunnel = packet.tunnel;
        if bearer.rlc.enqueue(packet, len) == Enqueue::Dropped {
            let f = self.flow_of_tunnel[&tunnel];
            self.flows[f].stats.dropped += 1;
        }
        Ok(())
    }

    fn on_reception(&mut self, gi: usize, bi: usize, segments: Vec<Segment>) -> Result<()> {
        let now = self.now;
        match self.gnbs[gi].peers[bi] {
            Slot::Ue(u) => {
                let (packets, timer) = self.ues[u].rx.receive(segments, now);
                if let Some(d) = timer {
                    self.push(d, Event::Reordering { at: Slot::Ue(u) });
                }
                for p in packets {
                    self.deliver(u, p);
                }
            }
            Slot::Gnb(c) => {
                let rx = self.gnbs[c].rx.as_mut().ok_or_else(|| Error::Structure("backhaul without receiver".into()))?;
                let (packets, timer) = rx.receive(segments, now);
                if let Some(d) = timer {
                    self.push(d, Event::Reordering { at: Slot::Gnb(c) });
                }
                let id = self.gnbs[c].id;
                for mut p in packets {
                    p.hop_trace.push(id);
                    self.forward(c, p)?;
                }
            }
        }
        Ok(())
    }

    fn deliver(&mut self, u: usize, mut p: Packet) {
        let now = self.now;
        let ue = &self.ues[u];
        p.hop_trace.push(ue.id);
        p.delivered_at = Some(now);
        let floor = self.cfg.core.server_to_donor_latency;
        let f = &mut self.flows[ue.flow];
        let latency = now - p.created_at;
        if f.last_delivered.is_some_and(|last| p.id.0 <= last) {
            self.checks.duplicate_deliveries += 1;
            return;
        }
        f.last_delivered = Some(p.id.0);
        if latency < floor + SimTime(f.stats.hops as u64 * self.sf_ns) {
            self.checks.latency_floor_violations += 1;
        }
        if p.hop_trace.as_slice() != f.path.as_slice() {
            self.checks.hop_trace_mismatches += 1;
        }
        f.stats.delivered += 1;
        f.stats.min_latency = Some(f.stats.min_latency.map_or(latency, |m| m.min(latency)));
        if now >= self.measure_start && now < self.end {
            f.stats.window_bytes += p.payload_bytes as u64;
            f.stats.window_packets += 1;
            f.stats.window_latency_sum += latency.as_secs();
        }
        if self.cfg.record_packets {
            self.records.push(DeliveryRecord {
                ue: p.hop_trace[p.hop_trace.len() - 1],
                packet: p.id,
                created_at: p.created_at,
                delivered_at: now,
                hop_trace: p.hop_trace.to_vec(),
            });
        }
    }

    fn on_tick(&mut self, t: Subframe) -> Result<()> {
        self.plan(t)?;
        self.transmit(t)?;
        let next = self.subframe_start(t + 1);
        self.push(next, Event::Tick { subframe: t + 1 });
        Ok(())
    }

    /// Every gNB, deepest look-ahead first, allocates subframe `t + η`.
    fn plan(&mut self, t: Subframe) -> Result<()> {
        for k in 0..self.order.len() {
            let gi = self.order[k];
            let mut demands = std::mem::take(&mut self.demands);
            demands.clear();
            let g = &mut self.gnbs[gi];
            let target = t + g.eta;
            for b in &g.bearers {
                demands.push(FlowDemand {
                    flow: b.flow,
                    queued_bits: b.unscheduled_bits(),
                    per_symbol_capacity: b.link.per_symbol_capacity,
                    spectral_efficiency: b.link.spectral_efficiency,
                    is_iab_child: b.is_backhaul(),
                    retx: b.retx_requests(target),
                });
            }
            let out = g.sched.schedule(t, target, &demands)?;
            if out.allocation.subframe != t + g.eta {
                self.checks.lookahead_mismatches += 1;
            }
            if self.cfg.audit {
                self.checks.audited_allocations += 1;
                let v = audit_allocation(&self.cfg.mac, out.busy, &demands, &out.allocation);
                self.checks.scheduler_violations += v.len() as u64;
                let room = 16usize.saturating_sub(self.checks.first_violations.len());
                self.checks.first_violations.extend(v.into_iter().take(room));
            }
            if self.cfg.log_allocations {
                self.allocation_log.push(AllocationLogEntry {
                    node: g.id,
                    computed_at: t,
                    subframe: target,
                    busy: out.busy,
                    grants: out
                        .allocation
                        .grants
                        .iter()
                        .map(|gr| (gr.flow, gr.symbols, matches!(gr.kind, GrantKind::HarqRetx { .. })))
                        .collect(),
                    backhaul_flows: g.bearers.iter().filter(|b| b.is_backhaul()).map(|b| b.flow).collect(),
                });
            }
            for grant in &out.allocation.grants {
                let (_, bi) = self.bearer_of_flow[grant.flow.0 as usize];
                g.bearers[bi].on_granted(grant, target);
            }
            g.plans.push_back(out.allocation);
            for dci in &out.dcis {
                let (pg, bi) = self.bearer_of_flow[dci.flow.0 as usize];
                let Slot::Gnb(child) = self.gnbs[pg].peers[bi] else {
                    return Err(Error::Structure("DCI toward a UE".into()));
                };
                self.gnbs[child].sched.ingest_parent_dci(dci, dci.available_at)?;
            }
            self.demands = demands;
        }
        Ok(())
    }

    /// Executes the allocations planned for subframe `t`.
    fn transmit(&mut self, t: Subframe) -> Result<()> {
        let rx_at = self.subframe_start(t + 1);
        let mut tx_used = vec![SymbolSet::EMPTY; self.gnbs.len()];
        let mut rx_used = vec![SymbolSet::EMPTY; self.gnbs.len()];
        let mut outcomes = Vec::new();
        for gi in 0..self.gnbs.len() {
            let g = &mut self.gnbs[gi];
            if g.plans.front().is_some_and(|a| a.subframe < t) {
                return Err(Error::Causality { node: g.id, detail: format!("allocation for subframe {} never executed", t) });
            }
            if g.plans.front().map_or(true, |a| a.subframe != t) {
                continue;
            }
            let alloc = g.plans.pop_front().unwrap();
            tx_used[gi] = alloc.used();
            for grant in &alloc.grants {
                let (_, bi) = self.bearer_of_flow[grant.flow.0 as usize];
                let bearer = &mut g.bearers[bi];
                if let Slot::Gnb(c) = g.peers[bi] {
                    rx_used[c] = rx_used[c].union(grant.symbols);
                }
                let p = tb_error_prob(&self.cfg.channel, bearer.link.snr_db, grant.spectral_efficiency);
                if let Some(o) = bearer.serve_allocation(grant, p, &mut self.harq_rng) {
                    outcomes.push((gi, bi, o));
                }
            }
        }
        for gi in 0..self.gnbs.len() {
            if !tx_used[gi].intersection(rx_used[gi]).is_empty() {
                self.checks.half_duplex_violations += 1;
            }
        }
        for (gnb, bearer, o) in outcomes {
            if let Some(segments) = o.delivered {
                self.push(rx_at, Event::Reception { gnb, bearer, segments });
            }
            self.push(rx_at, Event::Feedback { gnb, bearer, feedback: o.feedback, tx_subframe: t });
        }
        Ok(())
    }

    /// Per-flow count of distinct packets held anywhere in the RAN: RLC
    /// queues, HARQ processes, reassembly buffers and frames on the air.
    pub fn census(&self) -> Vec<u64> {
        let mut sets: Vec<HashSet<PacketId>> = vec![HashSet::new(); self.flows.len()];
        let mut add = |(tunnel, id): (TunnelId, PacketId)| {
            if let Some(&f) = self.flow_of_tunnel.get(&tunnel) {
                sets[f].insert(id);
            }
        };
        for g in &self.gnbs {
            g.bearers.iter().flat_map(|b| b.packet_ids()).for_each(&mut add);
            if let Some(rx) = &g.rx {
                rx.packet_ids().for_each(&mut add);
            }
        }
        for u in &self.ues {
            u.rx.packet_ids().for_each(&mut add);
        }
        for q in self.queue.iter() {
            if let Event::Reception { segments, .. } = &q.event {
                segments.iter().map(|s| (s.packet.tunnel, s.packet.id)).for_each(&mut add);
            }
        }
        sets.into_iter().map(|s| s.len() as u64).collect()
    }

    /// Checks `generated = delivered + dropped + in RAN + in core` for every
    /// flow at the current instant. Returns the number of flows violating it.
    pub fn check_conservation(&mut self) -> u64 {
        let census = self.census();
        let mut bad = 0;
        for (f, in_net) in self.flows.iter_mut().zip(census) {
            let generated = f.source.created_by(self.now);
            let in_core = generated - f.stats.arrived.min(generated);
            f.stats.generated = generated;
            f.stats.in_network = in_net;
            f.stats.in_core = in_core;
            if f.stats.delivered + f.stats.dropped + in_net + in_core != generated || f.stats.arrived > generated {
                bad += 1;
            }
        }
        bad
    }

    pub fn finish(mut self) -> RunResult {
        // Packets created exactly at `end` are outside the run.
        let last = SimTime(self.end.0.saturating_sub(1));
        self.now = self.now.min(last);
        let bad = self.check_conservation();
        self.checks.conservation_mismatches += bad;
        let (mut tb_sent, mut tb_failed) = (0, 0);
        for g in &self.gnbs {
            for b in &g.bearers {
                tb_sent += b.tb_sent;
                tb_failed += b.tb_failed;
                let peak = b.rlc.peak_occupancy();
                if peak > b.rlc.capacity() {
                    self.checks.buffer_overflows += 1;
                }
                if b.is_backhaul() {
                    self.checks.peak_backhaul_buffer = self.checks.peak_backhaul_buffer.max(peak);
                } else {
                    self.checks.peak_access_buffer = self.checks.peak_access_buffer.max(peak);
                }
            }
        }
        let tree = &self.tree;
        RunResult {
            seed: self.cfg.seed,
            n_relays: tree.gnbs().filter(|n| n.role == Role::Iab).count(),
            rate_bps: self.cfg.rate_bps,
            donor: tree.donor_id,
            measured_duration: (self.end - self.measure_start).as_secs(),
            lookahead: tree.gnbs().map(|n| (n.id, n.lookahead_depth)).collect(),
            parents: tree.nodes.values().filter_map(|n| n.parent.map(|p| (n.id, p))).collect(),
            setup_complete: self.setup_complete,
            flows: self.flows.into_iter().map(|f| f.stats).collect(),
            checks: self.checks,
            tb_sent,
            tb_failed,
            records: self.records,
            allocation_log: self.allocation_log,
        }
    }
}

/// Builds the deployment for `cfg` and simulates it to the end.
pub fn run_once(cfg: &SimConfig) -> Result<RunResult> {
    let deployment = deploy(cfg)?;
    run_deployment(cfg, deployment)
}

/// Simulates a prepared deployment (e.g. a hand-built tree).
pub fn run_deployment(cfg: &SimConfig, deployment: Deployment) -> Result<RunResult> {
    let mut sim = Simulation::new(cfg.clone(), deployment)?;
    sim.run()?;
    Ok(sim.finish())
}

fn campaign_configs(cfg: &SimConfig, n_runs: usize) -> Result<Vec<SimConfig>> {
    if n_runs == 0 {
        return Err(Error::config("a campaign needs at least one run"));
    }
    Ok((0..n_runs as u64).map(|i| SimConfig { seed: cfg.seed.wrapping_add(i), ..cfg.clone() }).collect())
}

/// Runs seeds `seed, seed + 1, …` in parallel on the current rayon pool.
/// Results are in seed order.
pub fn run_campaign(cfg: &SimConfig, n_runs: usize) -> Result<Vec<RunResult>> {
    campaign_configs(cfg, n_runs)?.par_iter().map(run_once).collect()
}

pub fn run_campaign_serial(cfg: &SimConfig, n_runs: usize) -> Result<Vec<RunResult>> {
    campaign_configs(cfg, n_runs)?.iter().map(run_once).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rate: f64, relays: usize, ues: usize, secs: f64) -> SimConfig {
        SimConfig {
            n_relays: relays,
            n_ues: ues,
            rate_bps: rate,
            sim_duration: secs,
            warmup: 0.05,
            audit: true,
            record_packets: true,
            ..SimConfig::paper_manhattan()
        }
    }

    #[test]
    fn uncongested_single_ue() {
        let cfg = small(1e6, 0, 1, 0.5);
        let r = run_once(&cfg).unwrap();
        let f = &r.flows[0];
        assert!(f.delivered > 0);
        assert_eq!(r.checks, RunChecks { peak_access_buffer: r.checks.peak_access_buffer, events_processed: r.checks.events_processed, audited_allocations: r.checks.audited_allocations, ..Default::default() });
        for rec in &r.records {
            let ms = (rec.delivered_at - rec.created_at).as_millis_f64();
            assert!((12.0..20.0).contains(&ms), "latency {ms} ms");
        }
    }

    #[test]
    fn shadowing_is_stable_per_link() {
        let a = shadowing_db(5, Endpoint::Gnb(0), Endpoint::Ue(3), 7.8);
        let b = shadowing_db(5, Endpoint::Ue(3), Endpoint::Gnb(0), 7.8);
        assert_eq!(a, b);
        assert_ne!(a, shadowing_db(5, Endpoint::Gnb(1), Endpoint::Ue(3), 7.8));
        assert_ne!(a, shadowing_db(6, Endpoint::Gnb(0), Endpoint::Ue(3), 7.8));
    }

    #[test]
    fn deterministic() {
        let cfg = small(50e6, 2, 6, 0.3);
        assert_eq!(run_once(&cfg).unwrap(), run_once(&cfg).unwrap());
    }
}
