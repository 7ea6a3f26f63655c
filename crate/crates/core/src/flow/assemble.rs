use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{cmp_time, BidirectionalFlow, FlowKey, PacketRecord};
use crate::error::{Error, Result};

/// Packets held back for timestamp sorting before assembly.
pub const DEFAULT_REORDER_WINDOW: usize = 10_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub accepted: u64,
    pub rejected_malformed: u64,
    /// Packets older than the reorder window allows.
    pub rejected_late: u64,
}

impl IngestStats {
    pub fn rejected(&self) -> u64 {
        self.rejected_malformed + self.rejected_late
    }
}

/// Heap entry; the ordering is a total order on packet content so that ties
/// resolve identically whatever the arrival order.
struct Pending(PacketRecord);

impl Pending {
    fn sort_key(&self) -> (FlowKeyOrd, u32) {
        (FlowKeyOrd(self.0.src, self.0.dst), self.0.payload_size)
    }
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct FlowKeyOrd(super::Endpoint, super::Endpoint);

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        cmp_time(self.0.timestamp, other.0.timestamp)
            .then_with(|| self.sort_key().cmp(&other.sort_key()))
    }
}

struct Segment {
    start: f64,
    packets: Vec<PacketRecord>,
}

/// Streaming assembler of bidirectional flows.
///
/// A packet opens a new segment of its connection when its timestamp is more
/// than `timeout` seconds past the current segment's first packet. Segments
/// are emitted once they can no longer grow, ordered by start time and then
/// key. Not meant to be shared between threads; use one instance per stream.
pub struct FlowAssembler {
    timeout: f64,
    reorder_window: usize,
    pending: BinaryHeap<Reverse<Pending>>,
    watermark: Option<f64>,
    active: HashMap<FlowKey, Segment>,
    open_order: VecDeque<(f64, FlowKey)>,
    ready: Vec<BidirectionalFlow>,
    next_id: u64,
    stats: IngestStats,
}

impl FlowAssembler {
    pub fn new(timeout: f64) -> Result<Self> {
        Self::with_reorder_window(timeout, DEFAULT_REORDER_WINDOW)
    }

    pub fn with_reorder_window(timeout: f64, reorder_window: usize) -> Result<Self> {
        if !(timeout.is_finite() && timeout > 0.0) {
            return Err(Error::param(format!("timeout must be > 0, got {timeout}")));
        }
        Ok(FlowAssembler {
            timeout,
            reorder_window,
            pending: BinaryHeap::new(),
            watermark: None,
            active: HashMap::new(),
            open_order: VecDeque::new(),
            ready: Vec::new(),
            next_id: 0,
            stats: IngestStats::default(),
        })
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    /// Feeds one packet. Invalid or too-late packets are tallied and dropped.
    pub fn push(&mut self, packet: PacketRecord) {
        if packet.validate().is_err() {
            self.stats.rejected_malformed += 1;
            return;
        }
        if self.watermark.is_some_and(|w| packet.timestamp < w) {
            self.stats.rejected_late += 1;
            return;
        }
        self.stats.accepted += 1;
        self.pending.push(Reverse(Pending(packet)));
        while self.pending.len() > self.reorder_window {
            self.release_one();
        }
    }

    /// Counts a record that failed to parse upstream.
    pub fn reject_malformed(&mut self) {
        self.stats.rejected_malformed += 1;
    }

    /// Takes the flows completed so far.
    pub fn drain_ready(&mut self) -> Vec<BidirectionalFlow> {
        std::mem::take(&mut self.ready)
    }

    /// Flushes every buffered packet and open segment.
    pub fn finish(mut self) -> (Vec<BidirectionalFlow>, IngestStats) {
        while !self.pending.is_empty() {
            self.release_one();
        }
        let mut rest: Vec<(f64, FlowKey)> = self.open_order.drain(..).collect();
        rest.sort_by(|x, y| cmp_time(x.0, y.0).then_with(|| x.1.cmp(&y.1)));
        for (_, key) in rest {
            self.emit(key);
        }
        (self.ready, self.stats)
    }

    fn release_one(&mut self) {
        let Some(Reverse(Pending(packet))) = self.pending.pop() else {
            return;
        };
        self.expire_before(packet.timestamp);
        let key = packet.key();
        let seg = self.active.entry(key).or_insert_with(|| {
            self.open_order.push_back((packet.timestamp, key));
            Segment {
                start: packet.timestamp,
                packets: Vec::new(),
            }
        });
        seg.packets.push(packet);
        self.watermark = Some(packet.timestamp);
    }

    /// Closes every segment that a packet at `now` can no longer join.
    fn expire_before(&mut self, now: f64) {
        let mut expired = Vec::new();
        while let Some(&(start, key)) = self.open_order.front() {
            if now - start > self.timeout {
                self.open_order.pop_front();
                expired.push((start, key));
            } else {
                break;
            }
        }
        expired.sort_by(|x, y| cmp_time(x.0, y.0).then_with(|| x.1.cmp(&y.1)));
        for (_, key) in expired {
            self.emit(key);
        }
    }

    fn emit(&mut self, key: FlowKey) {
        let Some(seg) = self.active.remove(&key) else {
            return;
        };
        debug_assert!(seg
            .packets
            .iter()
            .all(|p| p.timestamp - seg.start <= self.timeout));
        let initiator = seg.packets[0].src;
        self.ready.push(BidirectionalFlow {
            id: self.next_id,
            key,
            initiator,
            packets: seg.packets,
        });
        self.next_id += 1;
    }
}

/// Assembles a finite packet sequence in one call.
pub fn assemble<I>(packets: I, timeout: f64) -> Result<(Vec<BidirectionalFlow>, IngestStats)>
where
    I: IntoIterator<Item = PacketRecord>,
{
    let mut asm = FlowAssembler::new(timeout)?;
    for p in packets {
        asm.push(p);
    }
    Ok(asm.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{Direction, Endpoint};
    use proptest::prelude::*;
    use std::net::Ipv4Addr;

    fn client() -> Endpoint {
        Endpoint::new(Ipv4Addr::new(192, 168, 1, 10), 40000)
    }

    fn server() -> Endpoint {
        Endpoint::new(Ipv4Addr::new(93, 184, 216, 34), 443)
    }

    fn pkt(t: f64, size: u32) -> PacketRecord {
        PacketRecord::new(t, client(), server(), size).unwrap()
    }

    #[test]
    fn single_segment() {
        let (flows, stats) = assemble(vec![pkt(0.0, 1), pkt(1.0, 2), pkt(2.0, 3)], 60.0).unwrap();
        assert_eq!(flows.len(), 1);
        assert_eq!(flows[0].packets.len(), 3);
        assert_eq!(stats.accepted, 3);
    }

    #[test]
    fn timeout_splits_from_segment_start() {
        let (flows, _) = assemble(vec![pkt(0.0, 1), pkt(30.0, 2), pkt(70.0, 3)], 60.0).unwrap();
        assert_eq!(flows.len(), 2);
        let times: Vec<Vec<f64>> = flows
            .iter()
            .map(|f| f.packets.iter().map(|p| p.timestamp).collect())
            .collect();
        assert_eq!(times, vec![vec![0.0, 30.0], vec![70.0]]);
    }

    #[test]
    fn boundary_is_inclusive() {
        let (flows, _) = assemble(vec![pkt(0.0, 1), pkt(60.0, 2)], 60.0).unwrap();
        assert_eq!(flows.len(), 1);
    }

    #[test]
    fn empty_stream() {
        let (flows, stats) = assemble(Vec::new(), 60.0).unwrap();
        assert!(flows.is_empty());
        assert_eq!(stats, IngestStats::default());
    }

    #[test]
    fn rejects_bad_timeout() {
        assert!(FlowAssembler::new(0.0).is_err());
        assert!(FlowAssembler::new(-3.0).is_err());
    }

    #[test]
    fn second_segment_direction_follows_its_first_packet() {
        let packets = vec![pkt(0.0, 10), pkt(100.0, 20).reversed(), pkt(101.0, 30)];
        let (flows, _) = assemble(packets, 60.0).unwrap();
        assert_eq!(flows.len(), 2);
        assert_eq!(flows[0].initiator, client());
        assert_eq!(flows[1].initiator, server());
        assert_eq!(flows[1].packets_in(Direction::Sent).count(), 1);
    }

    #[test]
    fn late_packets_beyond_window_are_rejected() {
        let mut asm = FlowAssembler::with_reorder_window(60.0, 2).unwrap();
        for t in [5.0, 6.0, 7.0, 8.0] {
            asm.push(pkt(t, 1));
        }
        asm.push(pkt(1.0, 1));
        let (flows, stats) = asm.finish();
        assert_eq!(stats.rejected_late, 1);
        assert_eq!(flows.iter().map(|f| f.packets.len()).sum::<usize>(), 4);
    }

    #[test]
    fn malformed_packets_are_tallied() {
        let mut asm = FlowAssembler::new(60.0).unwrap();
        asm.push(PacketRecord {
            timestamp: -1.0,
            src: client(),
            dst: server(),
            payload_size: 0,
        });
        asm.push(pkt(0.0, 1));
        let (flows, stats) = asm.finish();
        assert_eq!(stats.rejected_malformed, 1);
        assert_eq!(flows.len(), 1);
    }

    #[test]
    fn flows_emitted_by_start_time() {
        let other = Endpoint::new(Ipv4Addr::new(192, 168, 1, 11), 40001);
        let packets = vec![
            pkt(0.0, 1),
            PacketRecord::new(10.0, other, server(), 1).unwrap(),
            pkt(200.0, 1),
        ];
        let (flows, _) = assemble(packets, 60.0).unwrap();
        let starts: Vec<f64> = flows.iter().map(|f| f.start_time()).collect();
        assert_eq!(starts, vec![0.0, 10.0, 200.0]);
        assert_eq!(
            flows.iter().map(|f| f.id).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    fn arb_packets() -> impl Strategy<Value = Vec<PacketRecord>> {
        let eps: Vec<Endpoint> = (1..=4)
            .map(|i| Endpoint::new(Ipv4Addr::new(10, 0, 0, i), 1000 + i as u16))
            .collect();
        prop::collection::vec((0usize..4, 0usize..4, 0u32..600_000, 0u32..1500), 0..80).prop_map(
            move |raw| {
                let mut seen = std::collections::HashSet::new();
                raw.into_iter()
                    .filter(|(s, d, t, _)| s != d && seen.insert(*t))
                    .map(|(s, d, t, size)| {
                        PacketRecord::new(t as f64 / 1000.0, eps[s], eps[d], size).unwrap()
                    })
                    .collect()
            },
        )
    }

    fn shape(flows: &[BidirectionalFlow]) -> Vec<(FlowKey, Endpoint, Vec<(u64, u32, Endpoint)>)> {
        flows
            .iter()
            .map(|f| {
                (
                    f.key,
                    f.initiator,
                    f.packets
                        .iter()
                        .map(|p| (p.timestamp.to_bits(), p.payload_size, p.src))
                        .collect(),
                )
            })
            .collect()
    }

    proptest! {
        #[test]
        fn partition_and_duration(packets in arb_packets(), timeout in 1.0f64..300.0) {
            let (flows, stats) = assemble(packets.clone(), timeout).unwrap();
            prop_assert_eq!(stats.accepted as usize, packets.len());
            prop_assert_eq!(flows.iter().map(|f| f.packets.len()).sum::<usize>(), packets.len());
            for f in &flows {
                prop_assert!(!f.packets.is_empty());
                prop_assert!(f.duration() <= timeout);
                prop_assert!(f.packets.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
                prop_assert!(f.packets.iter().all(|p| p.key() == f.key));
            }
        }

        #[test]
        fn larger_timeout_never_more_flows(packets in arb_packets(), t1 in 1.0f64..100.0, extra in 0.0f64..500.0) {
            let (small, _) = assemble(packets.clone(), t1).unwrap();
            let (large, _) = assemble(packets, t1 + extra).unwrap();
            prop_assert!(large.len() <= small.len());
        }

        #[test]
        fn order_independent(packets in arb_packets(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = packets.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (a, _) = assemble(packets, 60.0).unwrap();
            let (b, _) = assemble(shuffled, 60.0).unwrap();
            prop_assert_eq!(shape(&a), shape(&b));
        }

        #[test]
        fn swapping_directions_swaps_roles(packets in arb_packets()) {
            // The initiator flips with the packets, so the endpoint playing the
            // "sent" role swaps while the per-role sequences stay identical.
            let swapped: Vec<PacketRecord> = packets.iter().map(|p| p.reversed()).collect();
            let (a, _) = assemble(packets, 60.0).unwrap();
            let (b, _) = assemble(swapped, 60.0).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for (fa, fb) in a.iter().zip(&b) {
                prop_assert_eq!(fa.key, fb.key);
                prop_assert_eq!(fa.initiator, fb.responder());
                for dir in [Direction::Sent, Direction::Received] {
                    let xa: Vec<(u64, u32)> = fa.packets_in(dir).map(|p| (p.timestamp.to_bits(), p.payload_size)).collect();
                    let xb: Vec<(u64, u32)> = fb.packets_in(dir).map(|p| (p.timestamp.to_bits(), p.payload_size)).collect();
                    prop_assert_eq!(xa, xb);
                }
            }
        }
    }
}
