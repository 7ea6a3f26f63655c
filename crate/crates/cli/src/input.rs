use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;

use saeids::flow::csv::{load_flows, read_packet_csv, FLOW_CSV_HEADER, PACKET_CSV_HEADER};
use saeids::flow::pcap::{read_pcap, PcapStats};
use saeids::flow::{BidirectionalFlow, FlowAssembler, IngestStats};

use crate::Usage;

const PCAP_MAGICS: [[u8; 4]; 4] = [
    [0xd4, 0xc3, 0xb2, 0xa1],
    [0xa1, 0xb2, 0xc3, 0xd4],
    [0x4d, 0x3c, 0xb2, 0xa1],
    [0xa1, 0xb2, 0x3c, 0x4d],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Pcap,
    PacketCsv,
    FlowCsv,
    FeatureCsv,
}

pub fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!(Usage(format!("input not found: {}", path.display())));
    }
    Ok(())
}

pub fn detect(path: &Path) -> Result<InputKind> {
    require_file(path)?;
    let mut file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut magic = [0u8; 4];
    let got = file.read(&mut magic)?;
    if got == 4 && PCAP_MAGICS.contains(&magic) {
        return Ok(InputKind::Pcap);
    }
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    let cols: Vec<&str> = first
        .trim_start_matches('\u{feff}')
        .trim_end()
        .split(',')
        .map(str::trim)
        .collect();
    if cols == PACKET_CSV_HEADER {
        Ok(InputKind::PacketCsv)
    } else if cols == FLOW_CSV_HEADER {
        Ok(InputKind::FlowCsv)
    } else if cols.starts_with(&["flow_id", "n"]) {
        Ok(InputKind::FeatureCsv)
    } else {
        Err(saeids::Error::Data(format!(
            "{}: not a pcap capture, packet CSV, flow CSV or feature CSV",
            path.display()
        ))
        .into())
    }
}

/// Flows plus what was dropped on the way in.
pub struct Extracted {
    pub flows: Vec<BidirectionalFlow>,
    pub ingest: IngestStats,
    pub pcap: Option<PcapStats>,
}

pub fn read_flows(path: &Path, kind: InputKind, timeout: f64) -> Result<Extracted> {
    let (records, rejected, pcap) = match kind {
        InputKind::Pcap => {
            let cap = read_pcap(path)?;
            (cap.records, 0, Some(cap.stats))
        }
        InputKind::PacketCsv => {
            let csv = read_packet_csv(path)?;
            (csv.records, csv.rejected, None)
        }
        InputKind::FlowCsv => {
            let flows = load_flows(path)?;
            info!("loaded {} flows from {}", flows.len(), path.display());
            return Ok(Extracted {
                flows,
                ingest: IngestStats::default(),
                pcap: None,
            });
        }
        InputKind::FeatureCsv => bail!(Usage(format!(
            "{} holds feature vectors; packets or flows are needed here",
            path.display()
        ))),
    };
    let mut asm = FlowAssembler::new(timeout).map_err(|e| Usage(e.to_string()))?;
    for _ in 0..rejected {
        asm.reject_malformed();
    }
    for r in records {
        asm.push(r);
    }
    let (flows, ingest) = asm.finish();
    Ok(Extracted {
        flows,
        ingest,
        pcap,
    })
}
