//! Minimal reader for classic libpcap captures (not pcapng), plus a writer
//! used to produce fixtures.

use std::io::{self, BufReader, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::path::Path;

use log::warn;

use super::{Endpoint, PacketRecord};
use crate::error::{Error, Result};

const LINKTYPE_NULL: u32 = 0;
const LINKTYPE_ETHERNET: u32 = 1;
const LINKTYPE_RAW_BSD: u32 = 12;
const LINKTYPE_RAW_OPENBSD: u32 = 14;
const LINKTYPE_RAW: u32 = 101;
const LINKTYPE_LINUX_SLL: u32 = 113;
const LINKTYPE_LINUX_SLL2: u32 = 276;

const IPPROTO_TCP: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn u32(self, b: [u8; 4]) -> u32 {
        match self {
            ByteOrder::Little => u32::from_le_bytes(b),
            ByteOrder::Big => u32::from_be_bytes(b),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PcapStats {
    pub frames: u64,
    pub tcp_segments: u64,
    pub skipped_non_tcp: u64,
    /// TCP frames whose headers were cut short or inconsistent.
    pub skipped_malformed: u64,
    /// The final record was cut off mid-way.
    pub truncated: bool,
}

/// Streams one [`PacketRecord`] per TCP segment in a capture.
pub struct PcapReader<R> {
    inner: R,
    order: ByteOrder,
    nanos: bool,
    linktype: u32,
    stats: PcapStats,
    done: bool,
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut header = [0u8; 24];
        inner
            .read_exact(&mut header)
            .map_err(|e| Error::Data(format!("pcap global header: {e}")))?;
        let (order, nanos) = match header[..4] {
            [0xd4, 0xc3, 0xb2, 0xa1] => (ByteOrder::Little, false),
            [0xa1, 0xb2, 0xc3, 0xd4] => (ByteOrder::Big, false),
            [0x4d, 0x3c, 0xb2, 0xa1] => (ByteOrder::Little, true),
            [0xa1, 0xb2, 0x3c, 0x4d] => (ByteOrder::Big, true),
            _ => {
                return Err(Error::Data(format!(
                    "not a pcap capture (magic {:02x?})",
                    &header[..4]
                )))
            }
        };
        let linktype = order.u32(header[20..24].try_into().unwrap()) & 0x0fff_ffff;
        match linktype {
            LINKTYPE_NULL | LINKTYPE_ETHERNET | LINKTYPE_RAW_BSD | LINKTYPE_RAW_OPENBSD
            | LINKTYPE_RAW | LINKTYPE_LINUX_SLL | LINKTYPE_LINUX_SLL2 => {}
            other => return Err(Error::Data(format!("unsupported pcap link type {other}"))),
        }
        Ok(PcapReader {
            inner,
            order,
            nanos,
            linktype,
            stats: PcapStats::default(),
            done: false,
        })
    }

    pub fn stats(&self) -> PcapStats {
        self.stats
    }

    /// Reads the next raw frame; `None` at end of file or after truncation.
    fn next_frame(&mut self) -> Option<(f64, Vec<u8>)> {
        if self.done {
            return None;
        }
        let mut rec = [0u8; 16];
        match read_full(&mut self.inner, &mut rec) {
            Ok(0) => {
                self.done = true;
                return None;
            }
            Ok(16) => {}
            Ok(_) | Err(_) => return self.truncate("record header"),
        }
        let sec = self.order.u32(rec[0..4].try_into().unwrap());
        let frac = self.order.u32(rec[4..8].try_into().unwrap());
        let incl = self.order.u32(rec[8..12].try_into().unwrap()) as usize;
        let mut data = vec![0u8; incl];
        match read_full(&mut self.inner, &mut data) {
            Ok(n) if n == incl => {}
            _ => return self.truncate("record body"),
        }
        let scale = if self.nanos { 1e-9 } else { 1e-6 };
        self.stats.frames += 1;
        Some((sec as f64 + frac as f64 * scale, data))
    }

    fn truncate(&mut self, what: &str) -> Option<(f64, Vec<u8>)> {
        warn!("pcap capture truncated inside a {what}; stopping");
        self.stats.truncated = true;
        self.done = true;
        None
    }

    fn ip_payload<'a>(&self, frame: &'a [u8]) -> Option<&'a [u8]> {
        match self.linktype {
            LINKTYPE_ETHERNET => {
                let mut off = 12;
                let mut ethertype = u16::from_be_bytes(frame.get(off..off + 2)?.try_into().ok()?);
                while ethertype == 0x8100 || ethertype == 0x88a8 {
                    off += 4;
                    ethertype = u16::from_be_bytes(frame.get(off..off + 2)?.try_into().ok()?);
                }
                match ethertype {
                    0x0800 | 0x86dd => frame.get(off + 2..),
                    _ => None,
                }
            }
            LINKTYPE_LINUX_SLL => frame.get(16..),
            LINKTYPE_LINUX_SLL2 => frame.get(20..),
            LINKTYPE_NULL => frame.get(4..),
            _ => Some(frame),
        }
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

enum Decoded {
    Tcp(Endpoint, Endpoint, u32),
    NotTcp,
    Malformed,
}

/// Extracts addresses, ports and TCP payload length from an IP packet.
fn decode_ip(ip: &[u8]) -> Decoded {
    let Some(&first) = ip.first() else {
        return Decoded::NotTcp;
    };
    match first >> 4 {
        4 => decode_v4(ip),
        6 => decode_v6(ip),
        _ => Decoded::NotTcp,
    }
}

fn decode_v4(ip: &[u8]) -> Decoded {
    if ip.len() < 20 {
        return Decoded::Malformed;
    }
    if ip[9] != IPPROTO_TCP {
        return Decoded::NotTcp;
    }
    let frag_offset = u16::from_be_bytes([ip[6], ip[7]]) & 0x1fff;
    if frag_offset != 0 {
        return Decoded::NotTcp;
    }
    let ihl = ((ip[0] & 0x0f) as usize) * 4;
    let total = u16::from_be_bytes([ip[2], ip[3]]) as usize;
    let src = IpAddr::V4(Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]));
    let dst = IpAddr::V4(Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]));
    if ihl < 20 || total < ihl {
        return Decoded::Malformed;
    }
    tcp_segment(ip.get(ihl..), src, dst, total - ihl)
}

fn decode_v6(ip: &[u8]) -> Decoded {
    if ip.len() < 40 {
        return Decoded::Malformed;
    }
    let payload_len = u16::from_be_bytes([ip[4], ip[5]]) as usize;
    let src = IpAddr::V6(Ipv6Addr::from(<[u8; 16]>::try_from(&ip[8..24]).unwrap()));
    let dst = IpAddr::V6(Ipv6Addr::from(<[u8; 16]>::try_from(&ip[24..40]).unwrap()));
    let mut next = ip[6];
    let mut off = 40;
    let mut ext = 0usize;
    loop {
        match next {
            IPPROTO_TCP => break,
            0 | 43 | 60 | 51 => {
                let Some(h) = ip.get(off..off + 2) else {
                    return Decoded::Malformed;
                };
                let len = if next == 51 {
                    (h[1] as usize + 2) * 4
                } else {
                    (h[1] as usize + 1) * 8
                };
                next = h[0];
                off += len;
                ext += len;
            }
            _ => return Decoded::NotTcp,
        }
    }
    if payload_len < ext {
        return Decoded::Malformed;
    }
    tcp_segment(ip.get(off..), src, dst, payload_len - ext)
}

fn tcp_segment(tcp: Option<&[u8]>, src: IpAddr, dst: IpAddr, segment_len: usize) -> Decoded {
    let Some(tcp) = tcp.filter(|t| t.len() >= 20) else {
        return Decoded::Malformed;
    };
    let sport = u16::from_be_bytes([tcp[0], tcp[1]]);
    let dport = u16::from_be_bytes([tcp[2], tcp[3]]);
    let doff = ((tcp[12] >> 4) as usize) * 4;
    if doff < 20 || segment_len < doff {
        return Decoded::Malformed;
    }
    Decoded::Tcp(
        Endpoint::new(src, sport),
        Endpoint::new(dst, dport),
        (segment_len - doff) as u32,
    )
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = PacketRecord;

    fn next(&mut self) -> Option<PacketRecord> {
        loop {
            let (ts, frame) = self.next_frame()?;
            let decoded = match self.ip_payload(&frame) {
                Some(ip) => decode_ip(ip),
                None => Decoded::NotTcp,
            };
            match decoded {
                Decoded::Tcp(src, dst, size) => match PacketRecord::new(ts, src, dst, size) {
                    Ok(rec) => {
                        self.stats.tcp_segments += 1;
                        return Some(rec);
                    }
                    Err(_) => self.stats.skipped_malformed += 1,
                },
                Decoded::NotTcp => self.stats.skipped_non_tcp += 1,
                Decoded::Malformed => self.stats.skipped_malformed += 1,
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PcapCapture {
    pub records: Vec<PacketRecord>,
    pub stats: PcapStats,
}

/// Reads every TCP segment of the capture at `path`.
pub fn read_pcap(path: impl AsRef<Path>) -> Result<PcapCapture> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = PcapReader::new(BufReader::new(file)).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    let records: Vec<PacketRecord> = reader.by_ref().collect();
    Ok(PcapCapture {
        records,
        stats: reader.stats(),
    })
}

/// Writes little-endian, microsecond-resolution Ethernet captures.
pub struct PcapWriter<W: Write> {
    inner: W,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W) -> io::Result<Self> {
        inner.write_all(&[0xd4, 0xc3, 0xb2, 0xa1])?;
        inner.write_all(&2u16.to_le_bytes())?;
        inner.write_all(&4u16.to_le_bytes())?;
        inner.write_all(&0i32.to_le_bytes())?;
        inner.write_all(&0u32.to_le_bytes())?;
        inner.write_all(&65535u32.to_le_bytes())?;
        inner.write_all(&LINKTYPE_ETHERNET.to_le_bytes())?;
        Ok(PcapWriter { inner })
    }

    pub fn write_frame(&mut self, timestamp: f64, frame: &[u8]) -> io::Result<()> {
        let micros = (timestamp * 1e6).round() as u64;
        self.inner
            .write_all(&((micros / 1_000_000) as u32).to_le_bytes())?;
        self.inner
            .write_all(&((micros % 1_000_000) as u32).to_le_bytes())?;
        self.inner.write_all(&(frame.len() as u32).to_le_bytes())?;
        self.inner.write_all(&(frame.len() as u32).to_le_bytes())?;
        self.inner.write_all(frame)
    }

    /// Encodes the record as an Ethernet/IP/TCP frame with a zero-filled payload.
    pub fn write_record(&mut self, rec: &PacketRecord) -> io::Result<()> {
        let frame = tcp_frame(rec, &vec![0u8; rec.payload_size as usize]);
        self.write_frame(rec.timestamp, &frame)
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Builds an Ethernet frame carrying a TCP segment (ACK flag, no options).
/// Checksums are left zero.
pub fn tcp_frame(rec: &PacketRecord, payload: &[u8]) -> Vec<u8> {
    let mut tcp = Vec::with_capacity(20 + payload.len());
    tcp.extend_from_slice(&rec.src.port.to_be_bytes());
    tcp.extend_from_slice(&rec.dst.port.to_be_bytes());
    tcp.extend_from_slice(&[0, 0, 0, 1, 0, 0, 0, 1]);
    tcp.extend_from_slice(&[5 << 4, 0x10, 0xff, 0xff, 0, 0, 0, 0]);
    tcp.extend_from_slice(payload);
    ip_frame(rec.src.ip, rec.dst.ip, IPPROTO_TCP, &tcp)
}

/// Builds an Ethernet frame around an IP packet with the given transport bytes.
pub fn ip_frame(src: IpAddr, dst: IpAddr, protocol: u8, transport: &[u8]) -> Vec<u8> {
    let mut frame = vec![0x02, 0, 0, 0, 0, 1, 0x02, 0, 0, 0, 0, 2];
    match (src, dst) {
        (IpAddr::V4(s), IpAddr::V4(d)) => {
            frame.extend_from_slice(&[0x08, 0x00]);
            let total = (20 + transport.len()) as u16;
            frame.extend_from_slice(&[0x45, 0]);
            frame.extend_from_slice(&total.to_be_bytes());
            frame.extend_from_slice(&[0, 0, 0x40, 0, 64, protocol, 0, 0]);
            frame.extend_from_slice(&s.octets());
            frame.extend_from_slice(&d.octets());
        }
        (s, d) => {
            let to_v6 = |ip: IpAddr| match ip {
                IpAddr::V4(v4) => v4.to_ipv6_mapped(),
                IpAddr::V6(v6) => v6,
            };
            frame.extend_from_slice(&[0x86, 0xdd]);
            frame.extend_from_slice(&[0x60, 0, 0, 0]);
            frame.extend_from_slice(&(transport.len() as u16).to_be_bytes());
            frame.extend_from_slice(&[protocol, 64]);
            frame.extend_from_slice(&to_v6(s).octets());
            frame.extend_from_slice(&to_v6(d).octets());
        }
    }
    frame.extend_from_slice(transport);
    frame
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(s: &str) -> Endpoint {
        s.parse().unwrap()
    }

    fn udp_bytes(len: usize) -> Vec<u8> {
        let mut u = vec![0x13, 0x88, 0x00, 0x35];
        u.extend_from_slice(&((8 + len) as u16).to_be_bytes());
        u.extend_from_slice(&[0, 0]);
        u.extend(std::iter::repeat_n(0u8, len));
        u
    }

    fn capture(build: impl FnOnce(&mut PcapWriter<Vec<u8>>)) -> Vec<u8> {
        let mut w = PcapWriter::new(Vec::new()).unwrap();
        build(&mut w);
        w.into_inner()
    }

    #[test]
    fn filters_tcp_from_udp() {
        let a = ep("10.0.0.1:40000");
        let b = ep("10.0.0.2:80");
        let bytes = capture(|w| {
            for i in 0..10 {
                let rec = PacketRecord::new(i as f64, a, b, i * 10).unwrap();
                w.write_record(&rec).unwrap();
                if i % 2 == 0 {
                    let frame = ip_frame(a.ip, b.ip, 17, &udp_bytes(12));
                    w.write_frame(i as f64 + 0.5, &frame).unwrap();
                }
            }
        });
        let mut r = PcapReader::new(bytes.as_slice()).unwrap();
        let recs: Vec<_> = r.by_ref().collect();
        assert_eq!(recs.len(), 10);
        assert_eq!(r.stats().skipped_non_tcp, 5);
        assert_eq!(recs[3].payload_size, 30);
        assert_eq!(recs[0].payload_size, 0);
        assert_eq!(recs[3].src, a);
    }

    #[test]
    fn ipv6_segments() {
        let a = ep("[2001:db8::1]:5555");
        let b = ep("[2001:db8::2]:443");
        let bytes = capture(|w| {
            w.write_record(&PacketRecord::new(1.5, a, b, 517).unwrap())
                .unwrap();
        });
        let recs: Vec<_> = PcapReader::new(bytes.as_slice()).unwrap().collect();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].payload_size, 517);
        assert_eq!(recs[0].dst, b);
        assert!((recs[0].timestamp - 1.5).abs() < 1e-9);
    }

    #[test]
    fn truncated_tail_stops_stream() {
        let a = ep("10.0.0.1:1");
        let b = ep("10.0.0.2:2");
        let mut bytes = capture(|w| {
            w.write_record(&PacketRecord::new(0.0, a, b, 5).unwrap())
                .unwrap();
            w.write_record(&PacketRecord::new(1.0, a, b, 5).unwrap())
                .unwrap();
        });
        bytes.truncate(bytes.len() - 3);
        let mut r = PcapReader::new(bytes.as_slice()).unwrap();
        assert_eq!(r.by_ref().count(), 1);
        assert!(r.stats().truncated);
    }

    #[test]
    fn big_endian_nanosecond_header() {
        let a = ep("10.0.0.1:1");
        let b = ep("10.0.0.2:2");
        let frame = tcp_frame(&PacketRecord::new(0.0, a, b, 3).unwrap(), &[1, 2, 3]);
        let mut bytes = vec![0xa1, 0xb2, 0x3c, 0x4d, 0, 2, 0, 4];
        bytes.extend_from_slice(&[0; 8]);
        bytes.extend_from_slice(&65535u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&7u32.to_be_bytes());
        bytes.extend_from_slice(&500_000_000u32.to_be_bytes());
        bytes.extend_from_slice(&(frame.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&(frame.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&frame);
        let recs: Vec<_> = PcapReader::new(bytes.as_slice()).unwrap().collect();
        assert_eq!(recs[0].timestamp, 7.5);
        assert_eq!(recs[0].payload_size, 3);
    }

    #[test]
    fn rejects_non_pcap() {
        assert!(PcapReader::new(&b"0123456789abcdef0123456789"[..]).is_err());
        assert!(PcapReader::new(&b"short"[..]).is_err());
    }
}
