//! Seeded generator of labeled IoT-like TCP flows.
//!
//! Each flow is a run of request/response rounds between a device and its
//! server: the device sends a payload, the server answers, and with some
//! probability the device acknowledges with an empty segment. Payload sizes
//! are truncated log-normal draws, gaps between packets are exponential.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{IpAddr, Ipv4Addr};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Label;
use crate::flow::{BidirectionalFlow, Endpoint, PacketRecord, DEFAULT_TIMEOUT_SECS};

pub const MAX_PAYLOAD: u32 = 1500;
pub const MIN_FLOWS_PER_DEVICE: usize = 50;

/// Log-normal in natural-log space: `ln(size) ~ N(mu, sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalSpec {
    pub mu: f64,
    pub sigma: f64,
}

impl LogNormalSpec {
    /// Log-normal whose median is `median` bytes.
    pub fn around(median: f64, sigma: f64) -> Self {
        LogNormalSpec {
            mu: median.ln(),
            sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDeviceProfile {
    pub name: String,
    pub sent_size: LogNormalSpec,
    pub recv_size: LogNormalSpec,
    /// Rate (1/s) of the exponential gap between consecutive packets.
    pub iat_rate: f64,
    /// Success probability of the geometric round count (mean rounds = 1/p).
    pub rounds_p: f64,
    /// Probability that a round ends with an empty acknowledgement.
    pub ack_probability: f64,
    pub server_port: u16,
    pub seed: u64,
}

impl SyntheticDeviceProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(Error::param(format!(
                "profile {:?}: {what} must be strictly positive",
                self.name
            )))
        };
        for (what, v) in [
            ("sent size sigma", self.sent_size.sigma),
            ("received size sigma", self.recv_size.sigma),
            ("inter-arrival rate", self.iat_rate),
            ("round probability", self.rounds_p),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(what);
            }
        }
        if !(self.sent_size.mu.is_finite() && self.recv_size.mu.is_finite()) {
            return Err(Error::param(format!(
                "profile {:?}: non-finite size mu",
                self.name
            )));
        }
        if self.rounds_p > 1.0 || !(0.0..=1.0).contains(&self.ack_probability) {
            return Err(Error::param(format!(
                "profile {:?}: probabilities must lie in [0, 1]",
                self.name
            )));
        }
        Ok(())
    }

    fn draw_flow(
        &self,
        rng: &mut ChaCha8Rng,
        id: u64,
        device: Endpoint,
        server: Endpoint,
        start: f64,
        timeout: f64,
    ) -> BidirectionalFlow {
        let sent = LogNormal::new(self.sent_size.mu, self.sent_size.sigma).unwrap();
        let recv = LogNormal::new(self.recv_size.mu, self.recv_size.sigma).unwrap();
        let gap = Exp::new(self.iat_rate).unwrap();
        let rounds = 1 + Geometric::new(self.rounds_p).unwrap().sample(rng);
        let size = |d: &LogNormal<f64>, rng: &mut ChaCha8Rng| -> u32 {
            (d.sample(rng).round() as u32).clamp(1, MAX_PAYLOAD)
        };

        let mut packets = Vec::new();
        let mut t = start;
        for _ in 0..rounds {
            packets.push(PacketRecord::new(t, device, server, size(&sent, rng)).unwrap());
            t += gap.sample(rng);
            if t - start > timeout {
                break;
            }
            packets.push(PacketRecord::new(t, server, device, size(&recv, rng)).unwrap());
            if rng.random_bool(self.ack_probability) {
                t += gap.sample(rng) * 0.1;
                if t - start > timeout {
                    break;
                }
                packets.push(PacketRecord::new(t, device, server, 0).unwrap());
            }
            t += gap.sample(rng);
            if t - start > timeout {
                break;
            }
        }
        BidirectionalFlow {
            id,
            key: crate::flow::FlowKey::new(device, server),
            initiator: device,
            packets,
        }
    }
}

/// Four legitimate smart-home devices. Their size and timing parameters sit
/// close together, the way small vendor firmwares talking to cloud endpoints do.
pub fn default_legit_profiles() -> Vec<SyntheticDeviceProfile> {
    vec![
        SyntheticDeviceProfile {
            name: "motion_sensor".into(),
            sent_size: LogNormalSpec::around(74.0, 0.9),
            recv_size: LogNormalSpec::around(82.0, 0.9),
            iat_rate: 5.0,
            rounds_p: 0.12,
            ack_probability: 0.4,
            server_port: 443,
            seed: 11,
        },
        SyntheticDeviceProfile {
            name: "security_camera".into(),
            sent_size: LogNormalSpec::around(78.0, 0.9),
            recv_size: LogNormalSpec::around(86.0, 0.9),
            iat_rate: 6.0,
            rounds_p: 0.12,
            ack_probability: 0.4,
            server_port: 443,
            seed: 12,
        },
        SyntheticDeviceProfile {
            name: "smart_bulb".into(),
            sent_size: LogNormalSpec::around(82.0, 0.9),
            recv_size: LogNormalSpec::around(90.0, 0.9),
            iat_rate: 7.0,
            rounds_p: 0.12,
            ack_probability: 0.4,
            server_port: 9999,
            seed: 13,
        },
        SyntheticDeviceProfile {
            name: "smart_plug".into(),
            sent_size: LogNormalSpec::around(86.0, 0.9),
            recv_size: LogNormalSpec::around(95.0, 0.9),
            iat_rate: 8.0,
            rounds_p: 0.12,
            ack_probability: 0.4,
            server_port: 9999,
            seed: 14,
        },
    ]
}

/// Botnet-style traffic: large, heavy-tailed uploads with short gaps.
pub fn default_malicious_profiles() -> Vec<SyntheticDeviceProfile> {
    vec![SyntheticDeviceProfile {
        name: "botnet".into(),
        sent_size: LogNormalSpec::around(1300.0, 1.0),
        recv_size: LogNormalSpec::around(60.0, 0.6),
        iat_rate: 50.0,
        rounds_p: 0.1,
        ack_probability: 0.2,
        server_port: 23,
        seed: 99,
    }]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub legit_profiles: Vec<SyntheticDeviceProfile>,
    pub flows_per_device: usize,
    pub malicious_profiles: Vec<SyntheticDeviceProfile>,
    pub malicious_flows: usize,
    pub seed: u64,
    pub timeout: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            legit_profiles: default_legit_profiles(),
            flows_per_device: 500,
            malicious_profiles: default_malicious_profiles(),
            malicious_flows: 625,
            seed: 2019,
            timeout: DEFAULT_TIMEOUT_SECS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFlow {
    pub flow: BidirectionalFlow,
    /// Generating profile (device type for legitimate flows).
    pub source: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub flows: Vec<LabeledFlow>,
    /// Legitimate device types in profile order.
    pub devices: Vec<String>,
}

impl Corpus {
    pub fn legit_of<'a>(&'a self, device: &'a str) -> impl Iterator<Item = &'a LabeledFlow> + 'a {
        self.flows
            .iter()
            .filter(move |f| f.label == Label::Legit && f.source == device)
    }

    pub fn malicious(&self) -> impl Iterator<Item = &LabeledFlow> {
        self.flows.iter().filter(|f| f.label == Label::Malicious)
    }

    pub fn count(&self, label: Label) -> usize {
        self.flows.iter().filter(|f| f.label == label).count()
    }

    /// Groups flows of an arbitrary labeled set by source.
    pub fn from_flows(flows: Vec<LabeledFlow>) -> Self {
        let mut devices: Vec<String> = Vec::new();
        for f in &flows {
            if f.label == Label::Legit && !devices.contains(&f.source) {
                devices.push(f.source.clone());
            }
        }
        Corpus { flows, devices }
    }
}

/// Deterministic 64-bit mixing of several seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<Corpus> {
    if cfg.legit_profiles.is_empty() {
        return Err(Error::param("at least one legitimate profile is required"));
    }
    if cfg.flows_per_device < MIN_FLOWS_PER_DEVICE {
        return Err(Error::param(format!(
            "flows_per_device must be at least {MIN_FLOWS_PER_DEVICE}"
        )));
    }
    if cfg.malicious_flows > 0 && cfg.malicious_profiles.is_empty() {
        return Err(Error::param(
            "malicious flows requested without a malicious profile",
        ));
    }
    if !(cfg.timeout.is_finite() && cfg.timeout > 0.0) {
        return Err(Error::param("timeout must be > 0"));
    }
    let mut names = std::collections::BTreeSet::new();
    for p in cfg.legit_profiles.iter().chain(&cfg.malicious_profiles) {
        p.validate()?;
        if !names.insert(p.name.as_str()) {
            return Err(Error::param(format!("duplicate profile name {:?}", p.name)));
        }
    }

    let mut flows = Vec::new();
    let mut next_id = 0u64;
    // Start times are spaced beyond the timeout so flows never interleave per key.
    let spacing = cfg.timeout * 2.0 + 1.0;
    let mut emit = |profile: &SyntheticDeviceProfile, host: u8, i: usize, label: Label| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, profile.seed, i as u64]));
        let device = Endpoint::new(Ipv4Addr::new(192, 168, 1, host), 49152 + (i % 16000) as u16);
        let server_ip = match label {
            Label::Malicious => IpAddr::V4(Ipv4Addr::new(203, 0, 113, host)),
            _ => IpAddr::V4(Ipv4Addr::new(52, 20, host, 7)),
        };
        let server = Endpoint::new(server_ip, profile.server_port);
        let start = 1_600_000_000.0 + i as f64 * spacing + rng.random_range(0.0..1.0);
        let flow = profile.draw_flow(&mut rng, next_id, device, server, start, cfg.timeout);
        next_id += 1;
        flows.push(LabeledFlow {
            flow,
            source: profile.name.clone(),
            label,
        });
    };

    for (d, profile) in cfg.legit_profiles.iter().enumerate() {
        for i in 0..cfg.flows_per_device {
            emit(profile, 10 + d as u8, i, Label::Legit);
        }
    }
    let mal = cfg.malicious_profiles.len();
    for i in 0..cfg.malicious_flows {
        let profile = &cfg.malicious_profiles[i % mal];
        emit(profile, 200 + (i % mal) as u8, i / mal, Label::Malicious);
    }
    Ok(Corpus {
        flows,
        devices: cfg.legit_profiles.iter().map(|p| p.name.clone()).collect(),
    })
}

pub const LABELS_CSV_HEADER: [&str; 3] = ["flow_id", "device_type", "label"];

pub fn write_labels_csv<W: Write>(writer: W, flows: &[LabeledFlow]) -> Result<()> {
    let wrap = |e| Error::csv("<labels csv>", e);
    let mut w = ::csv::Writer::from_writer(writer);
    w.write_record(LABELS_CSV_HEADER).map_err(wrap)?;
    for f in flows {
        w.write_record([
            f.flow.id.to_string(),
            f.source.clone(),
            f.label.as_str().to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io("<labels csv>", e))
}

/// Maps flow id to (source, label).
pub fn read_labels_csv<R: Read>(reader: R) -> Result<BTreeMap<u64, (String, Label)>> {
    let wrap = |e| Error::csv("<labels csv>", e);
    let mut rdr = ::csv::ReaderBuilder::new()
        .trim(::csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(wrap)?
        .iter()
        .map(String::from)
        .collect();
    if header != LABELS_CSV_HEADER {
        return Err(Error::Data(format!(
            "expected labels header `{}`",
            LABELS_CSV_HEADER.join(",")
        )));
    }
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(wrap)?;
        let id: u64 = row[0]
            .parse()
            .map_err(|_| Error::Data(format!("labels: bad flow_id {:?}", &row[0])))?;
        out.insert(id, (row[1].to_string(), row[2].parse()?));
    }
    Ok(out)
}

/// Writes `flows.csv`, its packet sidecar and `labels.csv` into `dir`.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let flows: Vec<BidirectionalFlow> = corpus.flows.iter().map(|f| f.flow.clone()).collect();
    crate::flow::csv::save_flows(&dir.join("flows.csv"), &flows)?;
    let lp = dir.join("labels.csv");
    let f = std::fs::File::create(&lp).map_err(|e| Error::io(&lp, e))?;
    write_labels_csv(std::io::BufWriter::new(f), &corpus.flows)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let flows = crate::flow::csv::load_flows(&dir.join("flows.csv"))?;
    let lp = dir.join("labels.csv");
    let f = std::fs::File::open(&lp).map_err(|e| Error::io(&lp, e))?;
    let mut labels = read_labels_csv(f)?;
    let labeled = flows
        .into_iter()
        .map(|flow| {
            let (source, label) = labels
                .remove(&flow.id)
                .ok_or_else(|| Error::Data(format!("flow {} has no label", flow.id)))?;
            Ok(LabeledFlow {
                flow,
                source,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus::from_flows(labeled))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            flows_per_device: 60,
            malicious_flows: 30,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_and_labels() {
        let c = generate_dataset(&small()).unwrap();
        assert_eq!(c.flows.len(), 4 * 60 + 30);
        assert_eq!(c.count(Label::Legit), 240);
        assert_eq!(c.count(Label::Malicious), 30);
        assert_eq!(c.devices.len(), 4);
        assert_eq!(c.legit_of("smart_bulb").count(), 60);
        let ids: std::collections::BTreeSet<u64> = c.flows.iter().map(|f| f.flow.id).collect();
        assert_eq!(ids.len(), c.flows.len());
    }

    #[test]
    fn flows_respect_timeout_and_order() {
        let c = generate_dataset(&small()).unwrap();
        for f in &c.flows {
            assert!(!f.flow.packets.is_empty());
            assert!(f.flow.duration() <= 60.0);
            assert!(f
                .flow
                .packets
                .windows(2)
                .all(|w| w[0].timestamp <= w[1].timestamp));
            assert!(f.flow.packets.iter().all(|p| p.payload_size <= MAX_PAYLOAD));
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            generate_dataset(&small()).unwrap(),
            generate_dataset(&small()).unwrap()
        );
        let other = SynthConfig { seed: 7, ..small() };
        assert_ne!(
            generate_dataset(&small()).unwrap(),
            generate_dataset(&other).unwrap()
        );
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small();
        cfg.flows_per_device = 10;
        assert!(generate_dataset(&cfg).is_err());
        let mut cfg = small();
        cfg.legit_profiles.clear();
        assert!(generate_dataset(&cfg).is_err());
        let mut cfg = small();
        cfg.legit_profiles[0].sent_size.sigma = 0.0;
        cfg.legit_profiles[0].recv_size.sigma = 0.0;
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn corpus_round_trips_through_files() {
        let c = generate_dataset(&SynthConfig {
            flows_per_device: 50,
            malicious_flows: 10,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &c).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.devices, c.devices);
        assert_eq!(back.flows.len(), c.flows.len());
        for (a, b) in back.flows.iter().zip(&c.flows) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.flow.packets.len(), b.flow.packets.len());
            for (p, q) in a.flow.packets.iter().zip(&b.flow.packets) {
                assert!((p.timestamp - q.timestamp).abs() < 1e-6);
                assert_eq!(p.payload_size, q.payload_size);
            }
        }
    }
}
