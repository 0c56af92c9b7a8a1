//! Per-node data plane: RLC acknowledged mode, HARQ and tunnel forwarding.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::channel::LinkState;
use crate::error::{Error, Result};
use crate::scheduler::{FlowId, Grant, GrantKind, RetxRequest};
use crate::time::{SimTime, Subframe};
use crate::topology::{NodeId, Route, RoutingTable, TunnelId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PacketId(pub u64);

/// Application datagram travelling from the remote server to a UE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Packet {
    pub id: PacketId,
    pub payload_bytes: u32,
    pub tunnel: TunnelId,
    /// Creation time at the server.
    pub created_at: SimTime,
    pub delivered_at: Option<SimTime>,
    /// gNBs that forwarded the packet, donor first.
    pub hop_trace: SmallVec<[NodeId; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub ue_buffer_bytes: u64,
    pub iab_buffer_bytes: u64,
    pub reordering_timer: SimTime,
    /// Sender fallback for HARQ-exhausted data nobody NACKed.
    pub poll_retransmit_timer: SimTime,
    pub max_harq_retx: u32,
    /// Subframes between a failed transmission and its earliest retransmission.
    pub harq_retx_delay: u64,
    pub rlc_header_bytes: u32,
    /// Encapsulation overhead added to every packet on backhaul bearers.
    pub tunnel_overhead_bytes: u32,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            ue_buffer_bytes: 10_000_000,
            iab_buffer_bytes: 40_000_000,
            reordering_timer: SimTime::from_millis(2),
            poll_retransmit_timer: SimTime::from_millis(8),
            max_harq_retx: 3,
            harq_retx_delay: 4,
            rlc_header_bytes: 2,
            tunnel_overhead_bytes: 60,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ue_buffer_bytes == 0 || self.iab_buffer_bytes == 0 {
            return Err(Error::config("RLC buffers must be non-empty"));
        }
        if self.harq_retx_delay < 2 {
            return Err(Error::config("HARQ retransmission delay must exceed the feedback delay"));
        }
        if self.reordering_timer == SimTime::ZERO || self.poll_retransmit_timer == SimTime::ZERO {
            return Err(Error::config("RLC timers must be positive"));
        }
        Ok(())
    }
}

/// Byte range of one RLC SDU carried in a transport block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub sn: u64,
    pub offset: u32,
    pub len: u32,
    pub sdu_len: u32,
    pub packet: Packet,
}

#[derive(Debug, Clone, PartialEq)]
struct Sdu {
    sn: u64,
    len: u32,
    sent: u32,
    packet: Packet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enqueue {
    Accepted,
    Dropped,
}

/// RLC-AM transmitting entity of one bearer.
#[derive(Debug, Clone)]
pub struct RlcTx {
    capacity: u64,
    header_bytes: u32,
    queue: VecDeque<Sdu>,
    retx: VecDeque<Segment>,
    held: Vec<Segment>,
    poll_deadline: Option<SimTime>,
    next_sn: u64,
    queued_bytes: u64,
    in_flight_bytes: u64,
    dropped: u64,
    peak_occupancy: u64,
}

impl RlcTx {
    pub fn new(capacity: u64, header_bytes: u32) -> Self {
        RlcTx {
            capacity,
            header_bytes,
            queue: VecDeque::new(),
            retx: VecDeque::new(),
            held: Vec::new(),
            poll_deadline: None,
            next_sn: 0,
            queued_bytes: 0,
            in_flight_bytes: 0,
            dropped: 0,
            peak_occupancy: 0,
        }
    }

    /// Tail-drop enqueue of an SDU of `sdu_len` bytes.
    pub fn enqueue(&mut self, packet: Packet, sdu_len: u32) -> Enqueue {
        if self.occupancy() + sdu_len as u64 > self.capacity {
            self.dropped += 1;
            return Enqueue::Dropped;
        }
        self.queue.push_back(Sdu { sn: self.next_sn, len: sdu_len, sent: 0, packet });
        self.next_sn += 1;
        self.queued_bytes += sdu_len as u64;
        self.peak_occupancy = self.peak_occupancy.max(self.occupancy());
        Enqueue::Accepted
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Bytes held by this entity: not yet sent plus sent and unacknowledged.
    pub fn occupancy(&self) -> u64 {
        self.queued_bytes + self.in_flight_bytes
    }

    pub fn peak_occupancy(&self) -> u64 {
        self.peak_occupancy
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Bits, headers included, that a new-data grant could carry now.
    pub fn pending_bits(&self) -> u64 {
        let hdr = self.header_bytes as u64;
        let fresh = self.queued_bytes + hdr * self.queue.len() as u64;
        let retx: u64 = self.retx.iter().map(|s| s.len as u64 + hdr).sum();
        (fresh + retx) * 8
    }

    /// Fills a transport block of `tb_bits`, ARQ retransmissions first.
    pub fn build_tb(&mut self, tb_bits: u64) -> Vec<Segment> {
        let hdr = self.header_bytes as u64;
        let mut room = tb_bits / 8;
        let mut out = Vec::new();
        while room > hdr {
            let Some(front) = self.retx.front_mut() else { break };
            let take = (room - hdr).min(front.len as u64) as u32;
            if take == front.len {
                out.push(self.retx.pop_front().unwrap());
            } else {
                let mut piece = front.clone();
                piece.len = take;
                front.offset += take;
                front.len -= take;
                out.push(piece);
            }
            room -= take as u64 + hdr;
        }
        while room > hdr {
            let Some(front) = self.queue.front_mut() else { break };
            let take = (room - hdr).min((front.len - front.sent) as u64) as u32;
            out.push(Segment { sn: front.sn, offset: front.sent, len: take, sdu_len: front.len, packet: front.packet.clone() });
            front.sent += take;
            self.queued_bytes -= take as u64;
            self.in_flight_bytes += take as u64;
            if front.sent == front.len {
                self.queue.pop_front();
            }
            room -= take as u64 + hdr;
        }
        out
    }

    pub fn on_delivery_confirmed(&mut self, bytes: u64) {
        debug_assert!(bytes <= self.in_flight_bytes);
        self.in_flight_bytes -= bytes;
    }

    /// Segments whose HARQ process gave up wait here for a status report
    /// (or the poll timer) before being retransmitted. Returns the new poll
    /// deadline if the timer was started.
    pub fn on_harq_exhausted(&mut self, segments: Vec<Segment>, now: SimTime, poll_timer: SimTime) -> Option<SimTime> {
        self.held.extend(segments);
        if self.poll_deadline.is_none() {
            let d = now + poll_timer;
            self.poll_deadline = Some(d);
            Some(d)
        } else {
            None
        }
    }

    /// Moves held segments of the NACKed sequence numbers to the
    /// retransmission queue.
    pub fn on_status_report(&mut self, report: &StatusReport) {
        let (nacked, kept): (Vec<_>, Vec<_>) = self.held.drain(..).partition(|s| report.missing.binary_search(&s.sn).is_ok());
        self.held = kept;
        self.retx.extend(nacked);
        if self.held.is_empty() {
            self.poll_deadline = None;
        }
    }

    pub fn poll_deadline(&self) -> Option<SimTime> {
        self.poll_deadline
    }

    pub fn on_poll_expiry(&mut self, now: SimTime) {
        if self.poll_deadline.is_some_and(|d| d <= now) {
            self.retx.extend(self.held.drain(..));
            self.poll_deadline = None;
        }
    }

    /// Ids of packets (fully or partially) held by this entity.
    pub fn packet_ids(&self) -> impl Iterator<Item = (TunnelId, PacketId)> + '_ {
        self.queue
            .iter()
            .map(|s| &s.packet)
            .chain(self.retx.iter().map(|s| &s.packet))
            .chain(self.held.iter().map(|s| &s.packet))
            .map(|p| (p.tunnel, p.id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReport {
    /// Sorted sequence numbers with missing bytes.
    pub missing: Vec<u64>,
}

#[derive(Debug, Clone)]
struct PartialSdu {
    packet: Packet,
    sdu_len: u32,
    /// Sorted, disjoint received byte ranges `[start, end)`.
    ranges: SmallVec<[(u32, u32); 2]>,
}

impl PartialSdu {
    fn add(&mut self, start: u32, end: u32) {
        let mut merged: SmallVec<[(u32, u32); 2]> = SmallVec::new();
        let (mut s, mut e) = (start, end);
        for &(a, b) in &self.ranges {
            if b < s || a > e {
                merged.push((a, b));
            } else {
                s = s.min(a);
                e = e.max(b);
            }
        }
        merged.push((s, e));
        merged.sort_unstable();
        self.ranges = merged;
    }

    fn complete(&self) -> bool {
        self.ranges.len() == 1 && self.ranges[0] == (0, self.sdu_len)
    }
}

/// RLC-AM receiving entity: reassembly and in-order delivery.
#[derive(Debug, Clone)]
pub struct RlcRx {
    reordering_timer: SimTime,
    next_expected: u64,
    partial: BTreeMap<u64, PartialSdu>,
    deadline: Option<SimTime>,
    delivered: u64,
}

impl RlcRx {
    pub fn new(reordering_timer: SimTime) -> Self {
        RlcRx { reordering_timer, next_expected: 0, partial: BTreeMap::new(), deadline: None, delivered: 0 }
    }

    pub fn next_expected(&self) -> u64 {
        self.next_expected
    }

    pub fn reordering_deadline(&self) -> Option<SimTime> {
        self.deadline
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    fn has_gap(&self) -> bool {
        self.partial.range(self.next_expected + 1..).next().is_some()
    }

    /// Accepts segments and returns the packets that became deliverable in
    /// sequence. Starts the reordering timer when a gap appears; the new
    /// deadline is returned in that case.
    pub fn receive(&mut self, segments: Vec<Segment>, now: SimTime) -> (Vec<Packet>, Option<SimTime>) {
        for seg in segments {
            if seg.sn < self.next_expected {
                continue;
            }
            let entry = self
                .partial
                .entry(seg.sn)
                .or_insert_with(|| PartialSdu { packet: seg.packet, sdu_len: seg.sdu_len, ranges: SmallVec::new() });
            entry.add(seg.offset, seg.offset + seg.len);
        }
        let mut out = Vec::new();
        while let Some(entry) = self.partial.first_entry() {
            if *entry.key() != self.next_expected || !entry.get().complete() {
                break;
            }
            out.push(entry.remove().packet);
            self.next_expected += 1;
        }
        self.delivered += out.len() as u64;
        let mut started = None;
        if self.has_gap() {
            if self.deadline.is_none() {
                let d = now + self.reordering_timer;
                self.deadline = Some(d);
                started = Some(d);
            }
        } else {
            self.deadline = None;
        }
        (out, started)
    }

    /// Fires the reordering timer if `now` is its deadline. Returns the status
    /// report to send and, if gaps remain, the restarted deadline.
    pub fn on_reordering_timer(&mut self, now: SimTime) -> Option<(StatusReport, Option<SimTime>)> {
        if self.deadline != Some(now) {
            return None;
        }
        self.deadline = None;
        if !self.has_gap() {
            return None;
        }
        let highest = *self.partial.keys().next_back().unwrap();
        let missing = (self.next_expected..highest)
            .filter(|sn| self.partial.get(sn).map_or(true, |p| !p.complete()))
            .collect();
        let d = now + self.reordering_timer;
        self.deadline = Some(d);
        Some((StatusReport { missing }, Some(d)))
    }

    pub fn packet_ids(&self) -> impl Iterator<Item = (TunnelId, PacketId)> + '_ {
        self.partial.values().map(|p| (p.packet.tunnel, p.packet.id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HarqState {
    AwaitingFeedback,
    PendingRetx { ready_at: Subframe },
    Scheduled { subframe: Subframe },
}

#[derive(Debug, Clone)]
pub struct HarqProcess {
    pub id: u32,
    pub segments: Vec<Segment>,
    pub tb_bits: u64,
    pub transmissions: u32,
    pub max_retx: u32,
    pub state: HarqState,
}

impl HarqProcess {
    fn data_bytes(&self) -> u64 {
        self.segments.iter().map(|s| s.len as u64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HarqFeedback {
    /// Delivered; carries the data bytes now acknowledged.
    Ack { bytes: u64 },
    Nack { process: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BearerKind {
    Access { ue: NodeId },
    Backhaul { child: NodeId },
}

/// Transmit side of one radio bearer at a gNB.
#[derive(Debug, Clone)]
pub struct TxBearer {
    pub flow: FlowId,
    pub kind: BearerKind,
    pub link: LinkState,
    pub rlc: RlcTx,
    harq: BTreeMap<u32, HarqProcess>,
    next_process: u32,
    max_retx: u32,
    harq_retx_delay: u64,
    granted_pending_bits: u64,
    pub tb_sent: u64,
    pub tb_failed: u64,
}

/// Result of executing one grant.
#[derive(Debug)]
pub struct TxOutcome {
    /// Segments received by the peer at the end of the subframe.
    pub delivered: Option<Vec<Segment>>,
    pub feedback: HarqFeedback,
}

impl TxBearer {
    pub fn new(flow: FlowId, kind: BearerKind, link: LinkState, config: &StackConfig) -> Self {
        let capacity = match kind {
            BearerKind::Access { .. } => config.ue_buffer_bytes,
            BearerKind::Backhaul { .. } => config.iab_buffer_bytes,
        };
        TxBearer {
            flow,
            kind,
            link,
            rlc: RlcTx::new(capacity, config.rlc_header_bytes),
            harq: BTreeMap::new(),
            next_process: 0,
            max_retx: config.max_harq_retx,
            harq_retx_delay: config.harq_retx_delay,
            granted_pending_bits: 0,
            tb_sent: 0,
            tb_failed: 0,
        }
    }

    pub fn is_backhaul(&self) -> bool {
        matches!(self.kind, BearerKind::Backhaul { .. })
    }

    pub fn peer(&self) -> NodeId {
        match self.kind {
            BearerKind::Access { ue } => ue,
            BearerKind::Backhaul { child } => child,
        }
    }

    /// New-data bits not yet covered by an outstanding grant.
    pub fn unscheduled_bits(&self) -> u64 {
        self.rlc.pending_bits().saturating_sub(self.granted_pending_bits)
    }

    /// HARQ processes eligible for retransmission in `target`.
    pub fn retx_requests(&self, target: Subframe) -> SmallVec<[RetxRequest; 2]> {
        self.harq
            .values()
            .filter(|p| matches!(p.state, HarqState::PendingRetx { ready_at } if ready_at <= target))
            .map(|p| RetxRequest { process: p.id, tb_bits: p.tb_bits })
            .collect()
    }

    /// Records that a grant for `subframe` was issued to this bearer.
    pub fn on_granted(&mut self, grant: &Grant, subframe: Subframe) {
        match grant.kind {
            GrantKind::NewData => self.granted_pending_bits += grant.tb_bits,
            GrantKind::HarqRetx { process } => {
                if let Some(p) = self.harq.get_mut(&process) {
                    p.state = HarqState::Scheduled { subframe };
                }
            }
        }
    }

    /// Executes a grant in its subframe. `error_prob` is the block error
    /// probability of the link at the granted efficiency.
    pub fn serve_allocation<R: Rng>(&mut self, grant: &Grant, error_prob: f64, rng: &mut R) -> Option<TxOutcome> {
        let mut process = match grant.kind {
            GrantKind::NewData => {
                self.granted_pending_bits = self.granted_pending_bits.saturating_sub(grant.tb_bits);
                let segments = self.rlc.build_tb(grant.tb_bits);
                if segments.is_empty() {
                    return None;
                }
                let id = self.next_process;
                self.next_process = self.next_process.wrapping_add(1);
                HarqProcess {
                    id,
                    segments,
                    tb_bits: grant.tb_bits,
                    transmissions: 0,
                    max_retx: self.max_retx,
                    state: HarqState::AwaitingFeedback,
                }
            }
            GrantKind::HarqRetx { process } => self.harq.remove(&process)?,
        };
        process.transmissions += 1;
        self.tb_sent += 1;
        let failed = error_prob > 0.0 && rng.gen::<f64>() < error_prob;
        if failed {
            self.tb_failed += 1;
            process.state = HarqState::AwaitingFeedback;
            let id = process.id;
            self.harq.insert(id, process);
            Some(TxOutcome { delivered: None, feedback: HarqFeedback::Nack { process: id } })
        } else {
            let bytes = process.data_bytes();
            Some(TxOutcome { delivered: Some(process.segments), feedback: HarqFeedback::Ack { bytes } })
        }
    }

    /// Applies HARQ feedback for a transmission made in `tx_subframe`.
    /// Returns segments handed over to RLC ARQ when retransmissions are
    /// exhausted.
    pub fn on_feedback(&mut self, feedback: HarqFeedback, tx_subframe: Subframe) -> Option<Vec<Segment>> {
        match feedback {
            HarqFeedback::Ack { bytes } => {
                self.rlc.on_delivery_confirmed(bytes);
                None
            }
            HarqFeedback::Nack { process } => {
                let p = self.harq.get_mut(&process)?;
                if p.transmissions <= p.max_retx {
                    p.state = HarqState::PendingRetx { ready_at: tx_subframe + self.harq_retx_delay };
                    None
                } else {
                    Some(self.harq.remove(&process).unwrap().segments)
                }
            }
        }
    }

    pub fn harq_processes(&self) -> impl Iterator<Item = &HarqProcess> {
        self.harq.values()
    }

    pub fn packet_ids(&self) -> impl Iterator<Item = (TunnelId, PacketId)> + '_ {
        self.rlc
            .packet_ids()
            .chain(self.harq.values().flat_map(|p| p.segments.iter().map(|s| (s.packet.tunnel, s.packet.id))))
    }
}

/// Forwarding decision for a packet at a gNB.
pub fn route_at_node(node: NodeId, table: &RoutingTable, packet: &Packet) -> Result<Route> {
    table.lookup(packet.tunnel).ok_or(Error::Routing { node, tunnel: packet.tunnel })
}

/// RLC SDU size of a packet on a bearer of the given kind.
pub fn sdu_len(config: &StackConfig, kind: BearerKind, payload_bytes: u32) -> u32 {
    match kind {
        BearerKind::Access { .. } => payload_bytes,
        BearerKind::Backhaul { .. } => payload_bytes + config.tunnel_overhead_bytes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pkt(id: u64) -> Packet {
        Packet {
            id: PacketId(id),
            payload_bytes: 1400,
            tunnel: TunnelId(1),
            created_at: SimTime::ZERO,
            delivered_at: None,
            hop_trace: SmallVec::new(),
        }
    }

    fn link() -> LinkState {
        LinkState {
            tx: NodeId(0),
            rx: NodeId(1),
            distance_3d: 10.0,
            los: true,
            snr_db: 30.0,
            spectral_efficiency: 3.2,
            per_symbol_capacity: 133_333,
        }
    }

    fn grant(bits: u64) -> Grant {
        Grant {
            flow: FlowId(0),
            kind: GrantKind::NewData,
            symbols: crate::scheduler::SymbolSet::range(0, 1),
            tb_bits: bits,
            spectral_efficiency: 3.2,
        }
    }

    #[test]
    fn enqueue_and_tail_drop() {
        let mut tx = RlcTx::new(10_000_000, 2);
        assert_eq!(tx.enqueue(pkt(0), 1400), Enqueue::Accepted);
        let mut full = RlcTx::new(3000, 2);
        assert_eq!(full.enqueue(pkt(0), 1400), Enqueue::Accepted);
        assert_eq!(full.enqueue(pkt(1), 1400), Enqueue::Accepted);
        assert_eq!(full.enqueue(pkt(2), 1400), Enqueue::Dropped);
        assert_eq!(full.dropped(), 1);
        assert!(full.occupancy() <= full.capacity());
    }

    #[test]
    fn iab_bearer_holds_four_times_more() {
        let cfg = StackConfig::default();
        let fill = |kind| {
            let mut b = TxBearer::new(FlowId(0), kind, link(), &cfg);
            let len = sdu_len(&cfg, BearerKind::Access { ue: NodeId(1) }, 1400);
            let mut n = 0u64;
            while b.rlc.enqueue(pkt(n), len) == Enqueue::Accepted {
                n += 1;
            }
            n * len as u64
        };
        let ue = fill(BearerKind::Access { ue: NodeId(1) });
        let iab = fill(BearerKind::Backhaul { child: NodeId(1) });
        assert!(ue <= 10_000_000 && ue > 10_000_000 - 1400);
        assert!(iab <= 40_000_000 && iab > 40_000_000 - 1400);
    }

    #[test]
    fn one_symbol_carries_many_packets() {
        let mut tx = RlcTx::new(10_000_000, 2);
        for i in 0..20 {
            tx.enqueue(pkt(i), 1400);
        }
        let segs = tx.build_tb(133_333);
        // 16_666 bytes of room: 11 whole packets (1402 B each) and a piece.
        let whole = segs.iter().filter(|s| s.offset == 0 && s.len == 1400).count();
        assert_eq!(whole, 11);
        assert_eq!(segs.len(), 12);
        let used: u64 = segs.iter().map(|s| s.len as u64 + 2).sum();
        assert!(used <= 133_333 / 8);
        assert_eq!(tx.occupancy(), 20 * 1400);
    }

    #[test]
    fn in_order_delivery() {
        let mut tx = RlcTx::new(1_000_000, 2);
        let mut rx = RlcRx::new(SimTime::from_millis(2));
        for i in 0..5 {
            tx.enqueue(pkt(i), 1400);
        }
        let mut got = Vec::new();
        for _ in 0..10 {
            let (p, timer) = rx.receive(tx.build_tb(8 * 1000), SimTime::ZERO);
            assert!(timer.is_none());
            got.extend(p);
        }
        let ids: Vec<_> = got.iter().map(|p| p.id.0).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn gap_starts_timer_and_reports_missing() {
        let mut tx = RlcTx::new(1_000_000, 2);
        let mut rx = RlcRx::new(SimTime::from_millis(2));
        for i in 0..3 {
            tx.enqueue(pkt(i), 1400);
        }
        let first = tx.build_tb(8 * 1402);
        let lost = tx.build_tb(8 * 1402);
        let third = tx.build_tb(8 * 1402);
        let (p, _) = rx.receive(first, SimTime::ZERO);
        assert_eq!(p.len(), 1);
        let t = SimTime::from_millis(1);
        let (p, timer) = rx.receive(third, t);
        assert!(p.is_empty());
        let deadline = timer.unwrap();
        assert!(deadline <= t + SimTime::from_millis(2));
        assert!(rx.on_reordering_timer(deadline - SimTime(1)).is_none());
        let (report, restarted) = rx.on_reordering_timer(deadline).unwrap();
        assert_eq!(report.missing, vec![1]);
        assert!(restarted.is_some());

        // Sender recovers the lost segment through ARQ.
        tx.on_harq_exhausted(lost, t, SimTime::from_millis(8));
        tx.on_status_report(&report);
        let (p, _) = rx.receive(tx.build_tb(8 * 1402), deadline);
        assert_eq!(p.iter().map(|p| p.id.0).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(rx.reordering_deadline(), None);
        // Late duplicate is ignored.
        let mut dup = pkt(1);
        dup.hop_trace.push(NodeId(9));
        let (p, _) = rx.receive(vec![Segment { sn: 1, offset: 0, len: 1400, sdu_len: 1400, packet: dup }], deadline);
        assert!(p.is_empty());
        assert_eq!(rx.delivered(), 3);
    }

    #[test]
    fn resegmented_retx_reassembles() {
        let mut tx = RlcTx::new(1_000_000, 2);
        let mut rx = RlcRx::new(SimTime::from_millis(2));
        tx.enqueue(pkt(0), 1400);
        let seg = tx.build_tb(8 * 1402);
        tx.on_harq_exhausted(seg, SimTime::ZERO, SimTime::from_millis(8));
        tx.on_poll_expiry(SimTime::from_millis(8));
        let mut out = Vec::new();
        for _ in 0..3 {
            out.extend(rx.receive(tx.build_tb(8 * 600), SimTime::ZERO).0);
        }
        assert_eq!(out.len(), 1);
        assert_eq!(tx.occupancy(), 1400);
        tx.on_delivery_confirmed(1400);
        assert_eq!(tx.occupancy(), 0);
    }

    #[test]
    fn harq_exhaustion_hands_over_to_arq() {
        let cfg = StackConfig::default();
        let mut b = TxBearer::new(FlowId(0), BearerKind::Access { ue: NodeId(1) }, link(), &cfg);
        b.rlc.enqueue(pkt(0), 1400);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = grant(133_333);
        b.on_granted(&g, 10);
        let out = b.serve_allocation(&g, 1.0, &mut rng).unwrap();
        let HarqFeedback::Nack { process } = out.feedback else { panic!() };
        let mut sf = 10;
        for attempt in 1..=cfg.max_harq_retx {
            assert!(b.on_feedback(out_nack(process), sf).is_none());
            let reqs = b.retx_requests(sf + cfg.harq_retx_delay);
            assert_eq!(reqs.len(), 1, "attempt {attempt}");
            sf += cfg.harq_retx_delay;
            let rg = Grant { kind: GrantKind::HarqRetx { process }, ..g.clone() };
            b.on_granted(&rg, sf);
            assert!(b.retx_requests(sf).is_empty());
            let o = b.serve_allocation(&rg, 1.0, &mut rng).unwrap();
            assert!(o.delivered.is_none());
        }
        assert!(b.harq_processes().all(|p| p.transmissions <= p.max_retx + 1));
        let handed = b.on_feedback(out_nack(process), sf).unwrap();
        assert_eq!(handed.len(), 1);
        assert_eq!(b.harq_processes().count(), 0);
    }

    fn out_nack(process: u32) -> HarqFeedback {
        HarqFeedback::Nack { process }
    }

    #[test]
    fn success_delivers_and_ack_releases() {
        let cfg = StackConfig::default();
        let mut b = TxBearer::new(FlowId(0), BearerKind::Access { ue: NodeId(1) }, link(), &cfg);
        b.rlc.enqueue(pkt(0), 1400);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = b.serve_allocation(&grant(133_333), 0.0, &mut rng).unwrap();
        assert_eq!(out.delivered.as_ref().unwrap().len(), 1);
        assert_eq!(out.feedback, HarqFeedback::Ack { bytes: 1400 });
        assert_eq!(b.rlc.occupancy(), 1400);
        b.on_feedback(out.feedback, 0);
        assert_eq!(b.rlc.occupancy(), 0);
    }

    #[test]
    fn routing_decisions() {
        let mut table = RoutingTable::default();
        table.routes.insert(TunnelId(1), Route::Forward(NodeId(5)));
        table.routes.insert(TunnelId(2), Route::Local(NodeId(9)));
        let mut p = pkt(0);
        assert_eq!(route_at_node(NodeId(0), &table, &p), Ok(Route::Forward(NodeId(5))));
        p.tunnel = TunnelId(2);
        assert_eq!(route_at_node(NodeId(0), &table, &p), Ok(Route::Local(NodeId(9))));
        p.tunnel = TunnelId(3);
        assert_eq!(route_at_node(NodeId(0), &table, &p), Err(Error::Routing { node: NodeId(0), tunnel: TunnelId(3) }));
    }
}
