//! Packet records, bidirectional flow keys and the timeout-based flow assembler.

mod assemble;
pub mod csv;
pub mod pcap;

use std::cmp::Ordering;
use std::fmt;
use std::net::{IpAddr, SocketAddr};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use assemble::{assemble, FlowAssembler, IngestStats, DEFAULT_REORDER_WINDOW};

/// Default split timeout in seconds.
pub const DEFAULT_TIMEOUT_SECS: f64 = 60.0;

/// One observed TCP segment.
///
/// `payload_size` is the TCP payload length; IP and TCP headers are excluded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub timestamp: f64,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub payload_size: u32,
}

impl PacketRecord {
    pub fn new(timestamp: f64, src: Endpoint, dst: Endpoint, payload_size: u32) -> Result<Self> {
        let record = PacketRecord {
            timestamp,
            src,
            dst,
            payload_size,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.timestamp.is_finite() || self.timestamp < 0.0 {
            return Err(Error::param(format!(
                "packet timestamp must be finite and non-negative, got {}",
                self.timestamp
            )));
        }
        Ok(())
    }

    pub fn key(&self) -> FlowKey {
        FlowKey::new(self.src, self.dst)
    }

    /// The same packet travelling the other way.
    pub fn reversed(&self) -> Self {
        PacketRecord {
            src: self.dst,
            dst: self.src,
            ..*self
        }
    }
}

/// An (address, port) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub ip: IpAddr,
    pub port: u16,
}

impl Endpoint {
    pub fn new(ip: impl Into<IpAddr>, port: u16) -> Self {
        Endpoint {
            ip: ip.into(),
            port,
        }
    }
}

impl From<SocketAddr> for Endpoint {
    fn from(addr: SocketAddr) -> Self {
        Endpoint::new(addr.ip(), addr.port())
    }
}

impl From<Endpoint> for SocketAddr {
    fn from(ep: Endpoint) -> Self {
        SocketAddr::new(ep.ip, ep.port)
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        SocketAddr::from(*self).fmt(f)
    }
}

impl std::str::FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.parse::<SocketAddr>()
            .map(Endpoint::from)
            .map_err(|e| Error::param(format!("bad endpoint {s:?}: {e}")))
    }
}

/// Direction-agnostic connection key: the smaller endpoint is always `a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub a: Endpoint,
    pub b: Endpoint,
}

impl FlowKey {
    pub fn new(x: Endpoint, y: Endpoint) -> Self {
        if x <= y {
            FlowKey { a: x, b: y }
        } else {
            FlowKey { a: y, b: x }
        }
    }

    pub fn contains(&self, ep: &Endpoint) -> bool {
        self.a == *ep || self.b == *ep
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} <-> {}", self.a, self.b)
    }
}

/// Direction of a packet relative to the flow initiator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Sent,
    Received,
}

impl Direction {
    pub fn as_char(self) -> char {
        match self {
            Direction::Sent => 'S',
            Direction::Received => 'R',
        }
    }
}

/// A timeout-bounded segment of one TCP connection, both directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidirectionalFlow {
    pub id: u64,
    pub key: FlowKey,
    /// Sender of the segment's first packet; its packets are "sent".
    pub initiator: Endpoint,
    pub packets: Vec<PacketRecord>,
}

impl BidirectionalFlow {
    /// Builds a flow from packets of one connection, sorting them by timestamp.
    pub fn from_packets(id: u64, mut packets: Vec<PacketRecord>) -> Result<Self> {
        let first = packets
            .first()
            .ok_or_else(|| Error::param("a flow needs at least one packet"))?;
        let key = first.key();
        if let Some(p) = packets.iter().find(|p| p.key() != key) {
            return Err(Error::param(format!(
                "packet {} -> {} does not belong to flow {key}",
                p.src, p.dst
            )));
        }
        packets.sort_by(|x, y| x.timestamp.total_cmp(&y.timestamp));
        let initiator = packets[0].src;
        Ok(BidirectionalFlow {
            id,
            key,
            initiator,
            packets,
        })
    }

    pub fn start_time(&self) -> f64 {
        self.packets.first().map_or(0.0, |p| p.timestamp)
    }

    pub fn end_time(&self) -> f64 {
        self.packets.last().map_or(0.0, |p| p.timestamp)
    }

    pub fn duration(&self) -> f64 {
        self.end_time() - self.start_time()
    }

    pub fn direction_of(&self, packet: &PacketRecord) -> Direction {
        if packet.src == self.initiator {
            Direction::Sent
        } else {
            Direction::Received
        }
    }

    /// Packets travelling in `dir`, in time order.
    pub fn packets_in(&self, dir: Direction) -> impl Iterator<Item = &PacketRecord> + '_ {
        self.packets
            .iter()
            .filter(move |p| self.direction_of(p) == dir)
    }

    pub fn responder(&self) -> Endpoint {
        if self.key.a == self.initiator {
            self.key.b
        } else {
            self.key.a
        }
    }
}

pub(crate) fn cmp_time(a: f64, b: f64) -> Ordering {
    a.total_cmp(&b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn ep(last: u8, port: u16) -> Endpoint {
        Endpoint::new(Ipv4Addr::new(10, 0, 0, last), port)
    }

    #[test]
    fn key_is_direction_agnostic() {
        assert_eq!(
            FlowKey::new(ep(1, 5000), ep(2, 80)),
            FlowKey::new(ep(2, 80), ep(1, 5000))
        );
    }

    #[test]
    fn endpoint_parses_v4_and_v6() {
        let v4: Endpoint = "10.0.0.1:443".parse().unwrap();
        assert_eq!(v4, ep(1, 443));
        let v6: Endpoint = "[fe80::1]:8080".parse().unwrap();
        assert_eq!(v6.to_string(), "[fe80::1]:8080");
        assert!("10.0.0.1".parse::<Endpoint>().is_err());
    }

    #[test]
    fn rejects_negative_timestamp() {
        assert!(PacketRecord::new(-1.0, ep(1, 1), ep(2, 2), 0).is_err());
        assert!(PacketRecord::new(f64::NAN, ep(1, 1), ep(2, 2), 0).is_err());
    }

    #[test]
    fn flow_from_packets_sorts_and_picks_initiator() {
        let a = ep(1, 40000);
        let b = ep(2, 80);
        let flow = BidirectionalFlow::from_packets(
            7,
            vec![
                PacketRecord::new(2.0, b, a, 10).unwrap(),
                PacketRecord::new(1.0, a, b, 5).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(flow.initiator, a);
        assert_eq!(flow.responder(), b);
        assert_eq!(flow.packets_in(Direction::Received).count(), 1);
        assert_eq!(flow.duration(), 1.0);
    }

    #[test]
    fn flow_rejects_foreign_packet() {
        let r = BidirectionalFlow::from_packets(
            0,
            vec![
                PacketRecord::new(0.0, ep(1, 1), ep(2, 2), 0).unwrap(),
                PacketRecord::new(0.0, ep(1, 1), ep(3, 2), 0).unwrap(),
            ],
        );
        assert!(r.is_err());
    }
}
