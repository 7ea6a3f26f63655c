//! Packet CSV ingestion and flow CSV export/import.
//!
//! Packet CSV: `timestamp,src_ip,src_port,dst_ip,dst_port,payload_size`.
//! Flow CSV: `flow_id,key_a,key_b,initiator,start_time,end_time,packet_count`,
//! with a per-packet sidecar `flow_id,offset_seconds,direction,payload_size`
//! stored next to it as `<stem>.packets.csv`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use super::{BidirectionalFlow, Endpoint, PacketRecord};
use crate::error::{Error, Result};

pub const PACKET_CSV_HEADER: [&str; 6] = [
    "timestamp",
    "src_ip",
    "src_port",
    "dst_ip",
    "dst_port",
    "payload_size",
];

pub const FLOW_CSV_HEADER: [&str; 7] = [
    "flow_id",
    "key_a",
    "key_b",
    "initiator",
    "start_time",
    "end_time",
    "packet_count",
];

pub const FLOW_PACKETS_CSV_HEADER: [&str; 4] =
    ["flow_id", "offset_seconds", "direction", "payload_size"];

#[derive(Debug, Clone, Default)]
pub struct PacketCsv {
    pub records: Vec<PacketRecord>,
    /// Rows that failed to parse or violated a record invariant.
    pub rejected: u64,
}

pub fn read_packet_csv(path: impl AsRef<Path>) -> Result<PacketCsv> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_packet_csv_from(file).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        Error::Csv { source, .. } => Error::csv(path, source),
        other => other,
    })
}

pub fn read_packet_csv_from<R: Read>(reader: R) -> Result<PacketCsv> {
    let mut rdr = ::csv::ReaderBuilder::new()
        .flexible(true)
        .trim(::csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::csv("<packet csv>", e))?;
    check_header(headers, &PACKET_CSV_HEADER)?;

    let mut out = PacketCsv::default();
    for row in rdr.records() {
        match row.ok().and_then(|r| parse_packet_row(&r)) {
            Some(rec) => out.records.push(rec),
            None => out.rejected += 1,
        }
    }
    Ok(out)
}

fn parse_packet_row(row: &::csv::StringRecord) -> Option<PacketRecord> {
    if row.len() != PACKET_CSV_HEADER.len() {
        return None;
    }
    let timestamp: f64 = row[0].parse().ok()?;
    let src_ip: IpAddr = row[1].parse().ok()?;
    let src_port: u16 = row[2].parse().ok()?;
    let dst_ip: IpAddr = row[3].parse().ok()?;
    let dst_port: u16 = row[4].parse().ok()?;
    let payload_size: u32 = row[5].parse().ok()?;
    PacketRecord::new(
        timestamp,
        Endpoint::new(src_ip, src_port),
        Endpoint::new(dst_ip, dst_port),
        payload_size,
    )
    .ok()
}

pub fn write_packet_csv<W: Write>(writer: W, packets: &[PacketRecord]) -> Result<()> {
    let mut w = ::csv::Writer::from_writer(writer);
    let wrap = |e| Error::csv("<packet csv>", e);
    w.write_record(PACKET_CSV_HEADER).map_err(wrap)?;
    for p in packets {
        w.write_record([
            p.timestamp.to_string(),
            p.src.ip.to_string(),
            p.src.port.to_string(),
            p.dst.ip.to_string(),
            p.dst.port.to_string(),
            p.payload_size.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io("<packet csv>", e))
}

fn check_header(headers: &::csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers
        .iter()
        .map(|h| h.trim_start_matches('\u{feff}'))
        .collect();
    if got != expected {
        return Err(Error::Data(format!(
            "expected header `{}`, found `{}`",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

/// `flows.csv` -> `flows.packets.csv`.
pub fn sidecar_path(flow_csv: &Path) -> PathBuf {
    let stem = flow_csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    flow_csv.with_file_name(format!("{stem}.packets.csv"))
}

pub fn write_flow_csv<W: Write, P: Write>(
    flows_out: W,
    packets_out: P,
    flows: &[BidirectionalFlow],
) -> Result<()> {
    let wrap = |e| Error::csv("<flow csv>", e);
    let mut fw = ::csv::Writer::from_writer(flows_out);
    let mut pw = ::csv::Writer::from_writer(packets_out);
    fw.write_record(FLOW_CSV_HEADER).map_err(wrap)?;
    pw.write_record(FLOW_PACKETS_CSV_HEADER).map_err(wrap)?;
    for f in flows {
        let start = f.start_time();
        fw.write_record([
            f.id.to_string(),
            f.key.a.to_string(),
            f.key.b.to_string(),
            f.initiator.to_string(),
            start.to_string(),
            f.end_time().to_string(),
            f.packets.len().to_string(),
        ])
        .map_err(wrap)?;
        for p in &f.packets {
            pw.write_record([
                f.id.to_string(),
                (p.timestamp - start).to_string(),
                f.direction_of(p).as_char().to_string(),
                p.payload_size.to_string(),
            ])
            .map_err(wrap)?;
        }
    }
    fw.flush().map_err(|e| Error::io("<flow csv>", e))?;
    pw.flush().map_err(|e| Error::io("<flow csv>", e))
}

/// Writes `path` and its sidecar.
pub fn save_flows(path: &Path, flows: &[BidirectionalFlow]) -> Result<PathBuf> {
    let side = sidecar_path(path);
    let fw = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let pw = std::fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
    write_flow_csv(
        std::io::BufWriter::new(fw),
        std::io::BufWriter::new(pw),
        flows,
    )?;
    Ok(side)
}

/// Reads a flow CSV and its sidecar back into flows.
pub fn load_flows(path: &Path) -> Result<Vec<BidirectionalFlow>> {
    let side = sidecar_path(path);
    let fr = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let pr = std::fs::File::open(&side).map_err(|e| Error::io(&side, e))?;
    read_flow_csv(fr, pr)
}

struct FlowHeader {
    initiator: Endpoint,
    responder: Endpoint,
    start: f64,
    count: usize,
}

pub fn read_flow_csv<F: Read, P: Read>(
    flows_in: F,
    packets_in: P,
) -> Result<Vec<BidirectionalFlow>> {
    let wrap = |e| Error::csv("<flow csv>", e);
    let bad = |what: &str, v: &str| Error::Data(format!("flow csv: bad {what} {v:?}"));

    let mut fr = ::csv::ReaderBuilder::new()
        .trim(::csv::Trim::All)
        .from_reader(flows_in);
    check_header(fr.headers().map_err(wrap)?, &FLOW_CSV_HEADER)?;
    let mut headers: BTreeMap<u64, FlowHeader> = BTreeMap::new();
    let mut order = Vec::new();
    for row in fr.records() {
        let row = row.map_err(wrap)?;
        let id: u64 = row[0].parse().map_err(|_| bad("flow_id", &row[0]))?;
        let a: Endpoint = row[1].parse()?;
        let b: Endpoint = row[2].parse()?;
        let initiator: Endpoint = row[3].parse()?;
        if initiator != a && initiator != b {
            return Err(bad("initiator", &row[3]));
        }
        let responder = if initiator == a { b } else { a };
        let start: f64 = row[4].parse().map_err(|_| bad("start_time", &row[4]))?;
        let count: usize = row[6].parse().map_err(|_| bad("packet_count", &row[6]))?;
        if headers
            .insert(
                id,
                FlowHeader {
                    initiator,
                    responder,
                    start,
                    count,
                },
            )
            .is_some()
        {
            return Err(bad("duplicate flow_id", &row[0]));
        }
        order.push(id);
    }

    let mut pr = ::csv::ReaderBuilder::new()
        .trim(::csv::Trim::All)
        .from_reader(packets_in);
    check_header(pr.headers().map_err(wrap)?, &FLOW_PACKETS_CSV_HEADER)?;
    let mut packets: BTreeMap<u64, Vec<PacketRecord>> = BTreeMap::new();
    for row in pr.records() {
        let row = row.map_err(wrap)?;
        let id: u64 = row[0].parse().map_err(|_| bad("flow_id", &row[0]))?;
        let h = headers
            .get(&id)
            .ok_or_else(|| bad("sidecar flow_id", &row[0]))?;
        let offset: f64 = row[1].parse().map_err(|_| bad("offset_seconds", &row[1]))?;
        let (src, dst) = match &row[2] {
            "S" => (h.initiator, h.responder),
            "R" => (h.responder, h.initiator),
            other => return Err(bad("direction", other)),
        };
        let size: u32 = row[3].parse().map_err(|_| bad("payload_size", &row[3]))?;
        packets
            .entry(id)
            .or_default()
            .push(PacketRecord::new(h.start + offset, src, dst, size)?);
    }

    let mut flows = Vec::with_capacity(order.len());
    for id in order {
        let h = &headers[&id];
        let pk = packets.remove(&id).unwrap_or_default();
        if pk.len() != h.count {
            return Err(Error::Data(format!(
                "flow {id}: header says {} packets, sidecar has {}",
                h.count,
                pk.len()
            )));
        }
        let mut flow = BidirectionalFlow::from_packets(id, pk)?;
        // Equal-timestamp ties could otherwise flip the recorded initiator.
        flow.initiator = h.initiator;
        flows.push(flow);
    }
    Ok(flows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::assemble;

    const GOOD: &str = "timestamp,src_ip,src_port,dst_ip,dst_port,payload_size\n\
        0.0,10.0.0.1,40000,10.0.0.2,80,100\n\
        0.5,10.0.0.2,80,10.0.0.1,40000,0\n\
        1.25,10.0.0.1,40000,10.0.0.2,80,300\n";

    #[test]
    fn reads_well_formed_rows_in_order() {
        let out = read_packet_csv_from(GOOD.as_bytes()).unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.rejected, 0);
        assert_eq!(out.records[2].timestamp, 1.25);
        assert_eq!(out.records[1].payload_size, 0);
    }

    #[test]
    fn crlf_matches_lf() {
        let crlf = GOOD.replace('\n', "\r\n");
        let a = read_packet_csv_from(GOOD.as_bytes()).unwrap();
        let b = read_packet_csv_from(crlf.as_bytes()).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn negative_size_and_bad_port_rejected() {
        let text = "timestamp,src_ip,src_port,dst_ip,dst_port,payload_size\n\
            0.0,10.0.0.1,40000,10.0.0.2,80,-5\n\
            0.0,10.0.0.1,70000,10.0.0.2,80,5\n\
            x,10.0.0.1,1,10.0.0.2,80,5\n\
            1.0,10.0.0.1,1,10.0.0.2,80,5\n";
        let out = read_packet_csv_from(text.as_bytes()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.rejected, 3);
    }

    #[test]
    fn missing_header_is_fatal() {
        let text = "0.0,10.0.0.1,40000,10.0.0.2,80,100\n";
        assert!(matches!(
            read_packet_csv_from(text.as_bytes()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(
            sidecar_path(Path::new("/x/flows.csv")),
            PathBuf::from("/x/flows.packets.csv")
        );
    }

    #[test]
    fn flow_csv_round_trip() {
        let recs = read_packet_csv_from(GOOD.as_bytes()).unwrap().records;
        let (flows, _) = assemble(recs, 60.0).unwrap();
        let mut f = Vec::new();
        let mut p = Vec::new();
        write_flow_csv(&mut f, &mut p, &flows).unwrap();
        let text = String::from_utf8(f.clone()).unwrap();
        assert_eq!(
            text,
            "flow_id,key_a,key_b,initiator,start_time,end_time,packet_count\n\
             0,10.0.0.1:40000,10.0.0.2:80,10.0.0.1:40000,0,1.25,3\n"
        );
        let side = String::from_utf8(p.clone()).unwrap();
        assert!(side.contains("0,0.5,R,0\n"));
        let back = read_flow_csv(f.as_slice(), p.as_slice()).unwrap();
        assert_eq!(back, flows);
    }
}
