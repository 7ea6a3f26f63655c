//! The 16-value flow descriptor and its z-score normalization.
//!
//! Layout: sent sizes (mean, median, min, max, std, count), received sizes
//! (same six), sent IAT (mean, std), received IAT (mean, std). Statistics are
//! taken over the first `n` data packets of each direction, where a data
//! packet carries a non-empty payload unless `include_empty_packets` is set.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{BidirectionalFlow, Direction};
use crate::stats::{mean, median, pop_std};

pub const FEATURE_COUNT: usize = 16;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "sent_mean",
    "sent_median",
    "sent_min",
    "sent_max",
    "sent_std",
    "sent_count",
    "recv_mean",
    "recv_median",
    "recv_min",
    "recv_max",
    "recv_std",
    "recv_count",
    "sent_iat_mean",
    "sent_iat_std",
    "recv_iat_mean",
    "recv_iat_std",
];

pub const SENT_COUNT: usize = 5;
pub const RECV_COUNT: usize = 11;

/// Smallest packet window for which inter-arrival times exist.
pub const MIN_PACKETS: usize = 2;

/// Std entries below this are replaced by 1.0 when fitting normalization.
pub const STD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Packets per direction to describe.
    pub n: usize,
    /// Let zero-payload packets occupy window slots.
    pub include_empty_packets: bool,
}

impl FeatureConfig {
    pub fn new(n: usize) -> Self {
        FeatureConfig {
            n,
            include_empty_packets: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub flow_id: u64,
    pub n: usize,
    pub values: [f64; FEATURE_COUNT],
}

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

pub fn featurize(flow: &BidirectionalFlow, n: usize) -> Result<FeatureVector> {
    featurize_with(flow, &FeatureConfig::new(n))
}

pub fn featurize_with(flow: &BidirectionalFlow, cfg: &FeatureConfig) -> Result<FeatureVector> {
    if cfg.n < MIN_PACKETS {
        return Err(Error::param(format!(
            "N must be at least {MIN_PACKETS}, got {}",
            cfg.n
        )));
    }
    let mut values = [0.0; FEATURE_COUNT];
    let sent = direction_stats(flow, Direction::Sent, cfg);
    let recv = direction_stats(flow, Direction::Received, cfg);
    values[0..6].copy_from_slice(&sent.sizes);
    values[6..12].copy_from_slice(&recv.sizes);
    values[12..14].copy_from_slice(&sent.iat);
    values[14..16].copy_from_slice(&recv.iat);
    Ok(FeatureVector {
        flow_id: flow.id,
        n: cfg.n,
        values,
    })
}

struct DirectionStats {
    sizes: [f64; 6],
    iat: [f64; 2],
}

fn direction_stats(
    flow: &BidirectionalFlow,
    dir: Direction,
    cfg: &FeatureConfig,
) -> DirectionStats {
    let window: Vec<_> = flow
        .packets_in(dir)
        .filter(|p| cfg.include_empty_packets || p.payload_size > 0)
        .take(cfg.n)
        .collect();
    let sizes: Vec<f64> = window.iter().map(|p| p.payload_size as f64).collect();
    let count = window.iter().filter(|p| p.payload_size > 0).count() as f64;

    let size_stats = if sizes.is_empty() {
        [0.0; 6]
    } else {
        let min = sizes.iter().copied().fold(f64::INFINITY, f64::min);
        let max = sizes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        [
            mean(&sizes),
            median(&sizes),
            min,
            max,
            pop_std(&sizes),
            count,
        ]
    };

    let gaps: Vec<f64> = window
        .windows(2)
        .map(|w| w[1].timestamp - w[0].timestamp)
        .collect();
    let iat = if gaps.is_empty() {
        [0.0; 2]
    } else {
        [mean(&gaps), pop_std(&gaps)]
    };
    DirectionStats {
        sizes: size_stats,
        iat,
    }
}

/// Per-feature z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationParams {
    /// Fits mean and population std per feature; near-zero std becomes 1.0.
    pub fn fit<V: AsRef<[f64]>>(rows: &[V]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::param("cannot fit normalization on an empty set"))?;
        let dim = first.as_ref().len();
        if rows.iter().any(|r| r.as_ref().len() != dim) {
            return Err(Error::param("rows have differing lengths"));
        }
        let count = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r.as_ref()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s < STD_FLOOR {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(NormalizationParams { mean, std })
    }

    pub fn fit_vectors(vectors: &[FeatureVector]) -> Result<Self> {
        let rows: Vec<&[f64]> = vectors.iter().map(|v| v.as_slice()).collect();
        Self::fit(&rows)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::param(format!(
                "expected {} features, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::param("normalization mean/std lengths differ"));
        }
        if self.mean.iter().any(|m| !m.is_finite())
            || self.std.iter().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::param(
                "normalization parameters must be finite with std > 0",
            ));
        }
        Ok(())
    }
}

/// Ground-truth class of a flow, when known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Legit,
    Malicious,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Legit => "legit",
            Label::Malicious => "malicious",
            Label::Unknown => "unknown",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "legit" => Ok(Label::Legit),
            "malicious" => Ok(Label::Malicious),
            "unknown" | "" => Ok(Label::Unknown),
            other => Err(Error::Data(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub vector: FeatureVector,
    pub label: Label,
}

fn feature_csv_header() -> Vec<&'static str> {
    let mut h = vec!["flow_id", "n"];
    h.extend_from_slice(&FEATURE_NAMES);
    h.push("label");
    h
}

pub fn write_feature_csv<W: Write>(writer: W, rows: &[LabeledFeatures]) -> Result<()> {
    let wrap = |e| Error::csv("<feature csv>", e);
    let mut w = ::csv::Writer::from_writer(writer);
    w.write_record(feature_csv_header()).map_err(wrap)?;
    for r in rows {
        let mut rec = vec![r.vector.flow_id.to_string(), r.vector.n.to_string()];
        rec.extend(r.vector.values.iter().map(|v| v.to_string()));
        rec.push(r.label.as_str().to_string());
        w.write_record(&rec).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io("<feature csv>", e))
}

pub fn read_feature_csv<R: Read>(reader: R) -> Result<Vec<LabeledFeatures>> {
    let wrap = |e| Error::csv("<feature csv>", e);
    let mut rdr = ::csv::ReaderBuilder::new()
        .trim(::csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(wrap)?
        .iter()
        .map(String::from)
        .collect();
    if header != feature_csv_header() {
        return Err(Error::Data(format!(
            "expected feature header `{}`",
            feature_csv_header().join(",")
        )));
    }
    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(wrap)?;
        let bad = |col: &str| Error::Data(format!("feature row {}: bad {col}", line + 1));
        let flow_id: u64 = row[0].parse().map_err(|_| bad("flow_id"))?;
        let n: usize = row[1].parse().map_err(|_| bad("n"))?;
        let mut values = [0.0f64; FEATURE_COUNT];
        for (i, v) in values.iter_mut().enumerate() {
            *v = row[2 + i].parse().map_err(|_| bad(FEATURE_NAMES[i]))?;
            if !v.is_finite() {
                return Err(bad(FEATURE_NAMES[i]));
            }
        }
        let label: Label = row[2 + FEATURE_COUNT].parse()?;
        out.push(LabeledFeatures {
            vector: FeatureVector { flow_id, n, values },
            label,
        });
    }
    Ok(out)
}

pub fn load_feature_csv(path: &Path) -> Result<Vec<LabeledFeatures>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_feature_csv(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_feature_csv(path: &Path, rows: &[LabeledFeatures]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_feature_csv(std::io::BufWriter::new(f), rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{Endpoint, PacketRecord};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn a() -> Endpoint {
        "10.0.0.1:40000".parse().unwrap()
    }
    fn b() -> Endpoint {
        "10.0.0.2:443".parse().unwrap()
    }

    fn flow(sent: &[(f64, u32)], recv: &[(f64, u32)]) -> BidirectionalFlow {
        let mut pk: Vec<PacketRecord> = sent
            .iter()
            .map(|&(t, s)| PacketRecord::new(t, a(), b(), s).unwrap())
            .collect();
        pk.extend(
            recv.iter()
                .map(|&(t, s)| PacketRecord::new(t, b(), a(), s).unwrap()),
        );
        let mut f = BidirectionalFlow::from_packets(1, pk).unwrap();
        f.initiator = a();
        f
    }

    #[test]
    fn hand_computed_sent_only() {
        let f = flow(&[(0.0, 100), (0.5, 200), (1.5, 300)], &[]);
        let v = featurize(&f, 5).unwrap().values;
        assert_abs_diff_eq!(v[0], 200.0);
        assert_abs_diff_eq!(v[1], 200.0);
        assert_abs_diff_eq!(v[2], 100.0);
        assert_abs_diff_eq!(v[3], 300.0);
        assert_abs_diff_eq!(v[4], 81.64965809277261, epsilon = 1e-9);
        assert_abs_diff_eq!(v[5], 3.0);
        assert_eq!(&v[6..12], &[0.0; 6]);
        assert_abs_diff_eq!(v[12], 0.75);
        assert_abs_diff_eq!(v[13], 0.25);
        assert_eq!(&v[14..16], &[0.0, 0.0]);
    }

    #[test]
    fn single_packet_zero_fills_iat() {
        let f = flow(&[(3.0, 500)], &[]);
        let v = featurize(&f, 2).unwrap().values;
        assert_eq!(&v[0..6], &[500.0, 500.0, 500.0, 500.0, 0.0, 1.0]);
        assert_eq!(&v[12..14], &[0.0, 0.0]);
    }

    #[test]
    fn constant_sizes() {
        let f = flow(&[(0.0, 60), (1.0, 60), (2.0, 60), (3.0, 60)], &[(0.5, 7)]);
        let v = featurize(&f, 3).unwrap().values;
        assert_eq!(&v[0..5], &[60.0, 60.0, 60.0, 60.0, 0.0]);
        assert_eq!(v[SENT_COUNT], 3.0);
        assert_eq!(v[RECV_COUNT], 1.0);
    }

    #[test]
    fn empty_payloads_skipped_by_default() {
        let f = flow(&[(0.0, 0), (1.0, 100), (2.0, 0), (4.0, 300)], &[(0.5, 0)]);
        let v = featurize(&f, 5).unwrap().values;
        assert_eq!(v[SENT_COUNT], 2.0);
        assert_eq!(v[0], 200.0);
        assert_eq!(v[12], 3.0);
        assert_eq!(&v[6..12], &[0.0; 6]);

        let cfg = FeatureConfig {
            n: 2,
            include_empty_packets: true,
        };
        let v = featurize_with(&f, &cfg).unwrap().values;
        assert_eq!(v[SENT_COUNT], 1.0);
        assert_eq!(v[0], 50.0);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[12], 1.0);
    }

    #[test]
    fn n_below_two_rejected() {
        let f = flow(&[(0.0, 1)], &[]);
        assert!(matches!(featurize(&f, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn fit_hand_example() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let p = NormalizationParams::fit(&rows).unwrap();
        assert_eq!(p.mean, vec![2.0, 5.0]);
        assert_eq!(p.std, vec![1.0, 1.0]);
        assert_eq!(p.normalize(&[3.0, 5.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(p.normalize(&p.mean.clone()).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn fit_single_row_and_empty() {
        let p = NormalizationParams::fit(&[vec![4.0, -1.0]]).unwrap();
        assert_eq!(p.mean, vec![4.0, -1.0]);
        assert_eq!(p.std, vec![1.0, 1.0]);
        let none: Vec<Vec<f64>> = Vec::new();
        assert!(NormalizationParams::fit(&none).is_err());
    }

    #[test]
    fn feature_csv_round_trip() {
        let f = flow(&[(0.0, 100), (0.5, 200), (1.5, 300)], &[(0.2, 40)]);
        let rows = vec![LabeledFeatures {
            vector: featurize(&f, 3).unwrap(),
            label: Label::Malicious,
        }];
        let mut buf = Vec::new();
        write_feature_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("flow_id,n,sent_mean,sent_median,sent_min,sent_max,sent_std,sent_count,recv_mean,recv_median,recv_min,recv_max,recv_std,recv_count,sent_iat_mean,sent_iat_std,recv_iat_mean,recv_iat_std,label\n"));
        assert_eq!(read_feature_csv(buf.as_slice()).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn self_normalized_is_standard(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..40)) {
            let p = NormalizationParams::fit(&rows).unwrap();
            let z: Vec<Vec<f64>> = rows.iter().map(|r| p.normalize(r).unwrap()).collect();
            for j in 0..3 {
                let col: Vec<f64> = z.iter().map(|r| r[j]).collect();
                prop_assert!(mean(&col).abs() < 1e-9);
                let s = pop_std(&col);
                prop_assert!((s - 1.0).abs() < 1e-9 || s < 1e-6);
            }
            for (r, zr) in rows.iter().zip(&z) {
                for (x, y) in r.iter().zip(p.denormalize(zr)) {
                    prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
                }
            }
        }

        #[test]
        fn append_invariance(sizes in prop::collection::vec(1u32..1500, 3..12), extra in prop::collection::vec(1u32..1500, 1..5), n in 2usize..4) {
            let sent: Vec<(f64, u32)> = sizes.iter().enumerate().map(|(i, &s)| (i as f64, s)).collect();
            let mut longer = sent.clone();
            longer.extend(extra.iter().enumerate().map(|(i, &s)| (100.0 + i as f64, s)));
            let base = featurize(&flow(&sent, &sent), n).unwrap();
            let ext = featurize(&flow(&longer, &longer), n).unwrap();
            prop_assert_eq!(base.values, ext.values);
        }

        #[test]
        fn time_shift_invariance(sizes in prop::collection::vec(1u32..1500, 1..8), shift in 0.0f64..1e6) {
            let sent: Vec<(f64, u32)> = sizes.iter().enumerate().map(|(i, &s)| (i as f64 * 0.25, s)).collect();
            let shifted: Vec<(f64, u32)> = sent.iter().map(|&(t, s)| (t + shift, s)).collect();
            let a = featurize(&flow(&sent, &[]), 4).unwrap().values;
            let b = featurize(&flow(&shifted, &[]), 4).unwrap().values;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
