//! Cross-validated evaluation of the ensemble over a labeled flow corpus.
//!
//! Legitimate flows of every device are split into k folds. For each fold the
//! remaining folds are divided into training and calibration sets per device,
//! one model per device is fitted, and the ensemble is scored on the held-out
//! legitimate fold (negatives) plus the whole malicious pool (positives).

pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::ModelSet;
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::features::{featurize_with, FeatureConfig, FeatureVector, Label};
use crate::flow::{BidirectionalFlow, Direction};
use crate::model::fit_device_model;
use crate::sae::Hyperparams;

pub use synth::{generate_dataset, Corpus, LabeledFlow, SynthConfig, SyntheticDeviceProfile};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// TP / (TP + FN); `None` without positives.
    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// FP / (FP + TN); `None` without negatives.
    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Confusion counts with "anomalous" as the positive class.
pub fn confusion_counts(predicted: &[bool], actual: &[bool]) -> Result<Confusion> {
    if predicted.len() != actual.len() {
        return Err(Error::param(format!(
            "{} verdicts but {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p, a) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Overwrites one sent payload in a share of the legitimate test flows, so
/// only windows longer than `packet_index` see it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub fraction: f64,
    /// Zero-based index among the flow's sent data packets.
    pub packet_index: usize,
    pub payload_size: u32,
    pub seed: u64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation {
            fraction: 0.05,
            packet_index: 7,
            payload_size: 1500,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k_folds: usize,
    /// Share of the non-test legitimate flows used for training; the rest calibrates.
    pub train_fraction: f64,
    pub hyperparams: Hyperparams,
    pub include_empty_packets: bool,
    pub seed: u64,
    pub perturbation: Option<Perturbation>,
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_folds: 5,
            train_fraction: 0.8,
            hyperparams: Hyperparams::default(),
            include_empty_packets: false,
            seed: 42,
            perturbation: None,
            exec: ExecMode::default(),
        }
    }
}

/// Indices into `Corpus::flows` for one device within one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceSplit {
    pub device: String,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub fold: usize,
    pub devices: Vec<DeviceSplit>,
}

impl FoldPlan {
    pub fn test_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.devices.iter().flat_map(|d| d.test.iter().copied())
    }
}

/// Assigns every legitimate flow to exactly one test fold per device, then
/// splits the other folds into training and validation sets.
pub fn plan_folds(corpus: &Corpus, cfg: &EvalConfig) -> Result<Vec<FoldPlan>> {
    let k = cfg.k_folds;
    if k < 2 {
        return Err(Error::Config("k_folds must be at least 2".into()));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
    }
    if corpus.devices.is_empty() {
        return Err(Error::Config("corpus has no legitimate devices".into()));
    }
    let mut per_device_folds = Vec::new();
    for (d, device) in corpus.devices.iter().enumerate() {
        let mut idx: Vec<usize> = corpus
            .flows
            .iter()
            .enumerate()
            .filter(|(_, f)| f.label == Label::Legit && &f.source == device)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < k {
            return Err(Error::Config(format!(
                "device {device:?} has {} legitimate flows, fewer than {k} folds",
                idx.len()
            )));
        }
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(synth::mix_seed(&[
            cfg.seed, 1, d as u64,
        ])));
        let mut folds = vec![Vec::new(); k];
        for (pos, i) in idx.into_iter().enumerate() {
            folds[pos % k].push(i);
        }
        per_device_folds.push(folds);
    }

    let mut plans = Vec::with_capacity(k);
    for fold in 0..k {
        let mut devices = Vec::new();
        for (d, device) in corpus.devices.iter().enumerate() {
            let folds = &per_device_folds[d];
            let mut rest: Vec<usize> = (0..k)
                .filter(|&f| f != fold)
                .flat_map(|f| folds[f].iter().copied())
                .collect();
            rest.sort_unstable();
            rest.shuffle(&mut ChaCha8Rng::seed_from_u64(synth::mix_seed(&[
                cfg.seed,
                2,
                fold as u64,
                d as u64,
            ])));
            let n_train = ((rest.len() as f64) * cfg.train_fraction).round() as usize;
            let n_train = n_train.clamp(1, rest.len().saturating_sub(1));
            if n_train == 0 || n_train >= rest.len() {
                return Err(Error::Config(format!(
                    "device {device:?} has too few flows for a train/validation split"
                )));
            }
            let validation = rest.split_off(n_train);
            let mut test = folds[fold].clone();
            test.sort_unstable();
            devices.push(DeviceSplit {
                device: device.clone(),
                train: rest,
                validation,
                test,
            });
        }
        plans.push(FoldPlan { fold, devices });
    }
    Ok(plans)
}

/// Per-model diagnostics of one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub device: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub threshold: f64,
    pub outliers_removed: usize,
    pub mean_hidden_activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub n: usize,
    pub fold: usize,
    pub counts: Confusion,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub models: Vec<ModelSummary>,
}

/// Returns a copy of `flow` with the sent data packet at `index` resized, or
/// `None` when the flow has too few sent data packets.
pub fn perturb_flow(
    flow: &BidirectionalFlow,
    index: usize,
    payload_size: u32,
) -> Option<BidirectionalFlow> {
    let pos = flow
        .packets
        .iter()
        .enumerate()
        .filter(|(_, p)| flow.direction_of(p) == Direction::Sent && p.payload_size > 0)
        .map(|(i, _)| i)
        .nth(index)?;
    let mut out = flow.clone();
    out.packets[pos].payload_size = payload_size;
    Some(out)
}

/// Flows that receive the perturbation, with their perturbed copies.
fn perturbed_flows(corpus: &Corpus, p: &Perturbation) -> BTreeMap<usize, BidirectionalFlow> {
    let legit = corpus
        .flows
        .iter()
        .filter(|f| f.label == Label::Legit)
        .count();
    let mut eligible: Vec<(usize, BidirectionalFlow)> = corpus
        .flows
        .iter()
        .enumerate()
        .filter(|(_, f)| f.label == Label::Legit)
        .filter_map(|(i, f)| {
            perturb_flow(&f.flow, p.packet_index, p.payload_size).map(|pf| (i, pf))
        })
        .collect();
    eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(p.seed));
    let want = ((legit as f64) * p.fraction).round() as usize;
    eligible.into_iter().take(want).collect()
}

struct FeatureTable {
    original: Vec<FeatureVector>,
    perturbed: BTreeMap<usize, FeatureVector>,
}

fn feature_table(corpus: &Corpus, fc: &FeatureConfig, cfg: &EvalConfig) -> Result<FeatureTable> {
    let original = exec::try_map(cfg.exec, &corpus.flows, |f| featurize_with(&f.flow, fc))?;
    let mut perturbed = BTreeMap::new();
    if let Some(p) = &cfg.perturbation {
        for (i, flow) in perturbed_flows(corpus, p) {
            perturbed.insert(i, featurize_with(&flow, fc)?);
        }
    }
    Ok(FeatureTable {
        original,
        perturbed,
    })
}

/// Cross-validates the ensemble at window size `n`.
pub fn run_cv(corpus: &Corpus, n: usize, cfg: &EvalConfig) -> Result<Vec<FoldMetrics>> {
    let plans = plan_folds(corpus, cfg)?;
    let fc = FeatureConfig {
        n,
        include_empty_packets: cfg.include_empty_packets,
    };
    let table = feature_table(corpus, &fc, cfg)?;
    let malicious: Vec<usize> = corpus
        .flows
        .iter()
        .enumerate()
        .filter(|(_, f)| f.label == Label::Malicious)
        .map(|(i, _)| i)
        .collect();

    let jobs: Vec<(usize, usize)> = (0..plans.len())
        .flat_map(|f| (0..corpus.devices.len()).map(move |d| (f, d)))
        .collect();
    let fitted = exec::try_map(cfg.exec, &jobs, |&(f, d)| {
        let split = &plans[f].devices[d];
        let pick = |idx: &[usize]| {
            idx.iter()
                .map(|&i| table.original[i].clone())
                .collect::<Vec<_>>()
        };
        let seed = synth::mix_seed(&[cfg.seed, 3, f as u64, d as u64]);
        fit_device_model(
            &split.device,
            &pick(&split.train),
            &pick(&split.validation),
            fc,
            &cfg.hyperparams,
            seed,
        )
    })?;

    let mut fitted_by_fold: Vec<Vec<_>> = (0..plans.len()).map(|_| Vec::new()).collect();
    for ((f, _), m) in jobs.iter().zip(fitted) {
        fitted_by_fold[*f].push(m);
    }

    let mut out = Vec::with_capacity(plans.len());
    for (plan, fitted) in plans.iter().zip(fitted_by_fold) {
        let models: Vec<ModelSummary> = fitted
            .iter()
            .map(|fm| ModelSummary {
                device: fm.model.device_type.clone(),
                epochs_run: fm.train_report.epochs_run,
                best_epoch: fm.train_report.best_epoch,
                threshold: fm.threshold_report.threshold,
                outliers_removed: fm.threshold_report.n_outliers_removed,
                mean_hidden_activation: fm.train_report.overall_mean_activation(),
            })
            .collect();
        let set = ModelSet::new(fitted.into_iter().map(|fm| fm.model).collect())?;

        let mut vectors = Vec::new();
        let mut actual = Vec::new();
        for i in plan.test_indices() {
            vectors.push(
                table
                    .perturbed
                    .get(&i)
                    .unwrap_or(&table.original[i])
                    .clone(),
            );
            actual.push(false);
        }
        for &i in &malicious {
            vectors.push(table.original[i].clone());
            actual.push(true);
        }
        let verdicts = set.decide_batch_with(&vectors, cfg.exec)?;
        let predicted: Vec<bool> = verdicts.iter().map(|v| v.anomalous).collect();
        let counts = confusion_counts(&predicted, &actual)?;
        out.push(FoldMetrics {
            n,
            fold: plan.fold,
            counts,
            tpr: counts.tpr(),
            fpr: counts.fpr(),
            models,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<SummaryRow>,
    pub folds: Vec<FoldMetrics>,
    pub config: EvalConfig,
    pub corpus_legit: usize,
    pub corpus_malicious: usize,
    pub devices: Vec<String>,
}

impl EvaluationReport {
    pub fn row(&self, n: usize) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.n == n)
    }
}

/// Runs [`run_cv`] for every window size and aggregates counts over folds.
pub fn sweep_n(corpus: &Corpus, n_values: &[usize], cfg: &EvalConfig) -> Result<EvaluationReport> {
    if n_values.is_empty() {
        return Err(Error::Config("no window sizes to evaluate".into()));
    }
    if let Some(bad) = n_values.iter().find(|&&n| n < crate::features::MIN_PACKETS) {
        return Err(Error::Config(format!("window size {bad} is below 2")));
    }
    let unique: BTreeSet<usize> = n_values.iter().copied().collect();
    if unique.len() != n_values.len() {
        return Err(Error::Config("window sizes must be distinct".into()));
    }
    let per_n = exec::try_map(cfg.exec, n_values, |&n| run_cv(corpus, n, cfg))?;
    let mut rows = Vec::new();
    let mut folds = Vec::new();
    for (&n, fold_metrics) in n_values.iter().zip(per_n) {
        let mut total = Confusion::default();
        for m in &fold_metrics {
            total.add(&m.counts);
        }
        rows.push(SummaryRow {
            n,
            tp: total.tp,
            tn: total.tn,
            fp: total.fp,
            fn_: total.fn_,
            tpr: total.tpr(),
            fpr: total.fpr(),
        });
        folds.extend(fold_metrics);
    }
    Ok(EvaluationReport {
        rows,
        folds,
        config: cfg.clone(),
        corpus_legit: corpus.count(Label::Legit),
        corpus_malicious: corpus.count(Label::Malicious),
        devices: corpus.devices.clone(),
    })
}

fn fmt_rate(r: Option<f64>) -> String {
    r.map(|v| v.to_string()).unwrap_or_default()
}

/// `n,fold,tp,tn,fp,fn,tpr,fpr`; per-fold rows followed by one `all` row per
/// window size. Undefined rates are left empty.
pub fn write_report_csv<W: Write>(writer: W, report: &EvaluationReport) -> Result<()> {
    let wrap = |e| Error::csv("<report csv>", e);
    let mut w = ::csv::Writer::from_writer(writer);
    w.write_record(["n", "fold", "tp", "tn", "fp", "fn", "tpr", "fpr"])
        .map_err(wrap)?;
    for m in &report.folds {
        let c = m.counts;
        w.write_record([
            m.n.to_string(),
            m.fold.to_string(),
            c.tp.to_string(),
            c.tn.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            fmt_rate(m.tpr),
            fmt_rate(m.fpr),
        ])
        .map_err(wrap)?;
    }
    for r in &report.rows {
        w.write_record([
            r.n.to_string(),
            "all".to_string(),
            r.tp.to_string(),
            r.tn.to_string(),
            r.fp.to_string(),
            r.fn_.to_string(),
            fmt_rate(r.tpr),
            fmt_rate(r.fpr),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io("<report csv>", e))
}

/// Whitespace-separated `n tpr fpr` table for plotting.
pub fn write_plot_data<W: Write>(mut w: W, report: &EvaluationReport) -> Result<()> {
    let io = |e| Error::io("<plot data>", e);
    writeln!(w, "# n tpr fpr").map_err(io)?;
    for r in &report.rows {
        let f = |v: Option<f64>| v.map_or("NaN".to_string(), |x| format!("{x:.6}"));
        writeln!(w, "{} {} {}", r.n, f(r.tpr), f(r.fpr)).map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_hand_count() {
        let c = confusion_counts(&[true, false, true, false], &[true, true, false, false]).unwrap();
        assert_eq!(
            c,
            Confusion {
                tp: 1,
                tn: 1,
                fp: 1,
                fn_: 1
            }
        );
        assert_eq!(c.tpr(), Some(0.5));
        assert_eq!(c.fpr(), Some(0.5));
    }

    #[test]
    fn confusion_extremes() {
        let labels = [true, false, true, true, false];
        let c = confusion_counts(&labels, &labels).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inverted: Vec<bool> = labels.iter().map(|l| !l).collect();
        let c = confusion_counts(&inverted, &labels).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion_counts(&[true], &[]).is_err());
    }

    #[test]
    fn undefined_rates() {
        let c = confusion_counts(&[false, true], &[false, false]).unwrap();
        assert_eq!(c.tpr(), None);
        assert_eq!(c.fpr(), Some(0.5));
    }

    #[test]
    fn perturb_targets_sent_data_packets() {
        let a: crate::flow::Endpoint = "10.0.0.1:1".parse().unwrap();
        let b: crate::flow::Endpoint = "10.0.0.2:2".parse().unwrap();
        let mut pk = Vec::new();
        for i in 0..10 {
            pk.push(
                crate::flow::PacketRecord::new(i as f64, a, b, if i == 1 { 0 } else { 100 })
                    .unwrap(),
            );
            pk.push(crate::flow::PacketRecord::new(i as f64 + 0.5, b, a, 50).unwrap());
        }
        let flow = BidirectionalFlow::from_packets(0, pk).unwrap();
        let p = perturb_flow(&flow, 7, 1500).unwrap();
        let sent: Vec<u32> = p
            .packets_in(Direction::Sent)
            .filter(|p| p.payload_size > 0)
            .map(|p| p.payload_size)
            .collect();
        assert_eq!(sent[7], 1500);
        assert_eq!(sent.iter().filter(|&&s| s == 1500).count(), 1);
        assert!(perturb_flow(&flow, 9, 1500).is_none());
    }
}
