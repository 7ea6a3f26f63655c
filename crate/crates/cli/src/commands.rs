use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use saeids::ensemble::{write_verdicts_jsonl, ModelSet};
use saeids::eval::synth::{load_corpus, read_labels_csv, save_corpus};
use saeids::eval::{generate_dataset, sweep_n, write_plot_data, write_report_csv, SynthConfig};
use saeids::features::{
    featurize_with, load_feature_csv, save_feature_csv, FeatureVector, Label, LabeledFeatures,
};
use saeids::flow::csv::save_flows;
use saeids::model::fit_device_model;

use crate::config::PipelineConfig;
use crate::input::{self, InputKind};
use crate::{
    DetectArgs, EvaluateArgs, ExtractArgs, FeaturizeArgs, SynthArgs, TrainArgs, Usage, EXIT_ANOMALY,
};

/// Fewest legitimate samples `train` accepts.
pub const MIN_TRAIN_SAMPLES: usize = 50;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn extract(mut cfg: PipelineConfig, args: ExtractArgs) -> Result<u8> {
    if let Some(t) = args.timeout {
        cfg.timeout_seconds = t;
    }
    cfg.validate()?;
    let kind = input::detect(&args.input)?;
    if !matches!(kind, InputKind::Pcap | InputKind::PacketCsv) {
        bail!(Usage(format!(
            "{}: extract needs a pcap capture or packet CSV",
            args.input.display()
        )));
    }
    let got = input::read_flows(&args.input, kind, cfg.timeout_seconds)?;
    let sidecar = save_flows(&args.out, &got.flows)?;
    let s = got.ingest;
    println!(
        "{} flows from {} packets; rejected {} malformed, {} late",
        got.flows.len(),
        s.accepted,
        s.rejected_malformed,
        s.rejected_late
    );
    if let Some(p) = got.pcap {
        println!(
            "capture: {} frames, {} TCP segments, {} non-TCP skipped, {} malformed{}",
            p.frames,
            p.tcp_segments,
            p.skipped_non_tcp,
            p.skipped_malformed,
            if p.truncated { ", truncated tail" } else { "" }
        );
    }
    println!("wrote {} and {}", args.out.display(), sidecar.display());
    Ok(0)
}

pub fn featurize(mut cfg: PipelineConfig, args: FeaturizeArgs) -> Result<u8> {
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(t) = args.timeout {
        cfg.timeout_seconds = t;
    }
    cfg.include_empty_packets |= args.include_empty_packets;
    cfg.validate()?;
    let kind = input::detect(&args.input)?;
    let flows = input::read_flows(&args.input, kind, cfg.timeout_seconds)?.flows;
    let labels = match &args.labels {
        Some(path) => {
            input::require_file(path)?;
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            Some(read_labels_csv(f).with_context(|| format!("reading {}", path.display()))?)
        }
        None => None,
    };
    let fc = cfg.features();
    let mut rows = Vec::new();
    for flow in &flows {
        let (device, label) = match labels.as_ref().and_then(|l| l.get(&flow.id)) {
            Some((d, l)) => (Some(d.as_str()), *l),
            None => (None, Label::Unknown),
        };
        if args
            .device
            .as_deref()
            .is_some_and(|want| device != Some(want))
        {
            continue;
        }
        rows.push(LabeledFeatures {
            vector: featurize_with(flow, &fc)?,
            label,
        });
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_feature_csv(&args.out, &rows)?;
    println!(
        "{} feature vectors (N={}) written to {}",
        rows.len(),
        cfg.n,
        args.out.display()
    );
    Ok(0)
}

pub fn train(mut cfg: PipelineConfig, args: TrainArgs) -> Result<u8> {
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(e) = args.max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(h) = args.hidden_size {
        cfg.hidden_size = h;
    }
    if let Some(m) = args.models {
        cfg.models_dir = m;
    }
    cfg.include_empty_packets |= args.include_empty_packets;
    cfg.validate()?;
    input::require_file(&args.features)?;

    let rows = load_feature_csv(&args.features)?;
    let skipped = rows.iter().filter(|r| r.label == Label::Malicious).count();
    if skipped > 0 {
        warn!("ignoring {skipped} rows labeled malicious");
    }
    let mut vectors: Vec<FeatureVector> = rows
        .into_iter()
        .filter(|r| r.label != Label::Malicious)
        .map(|r| r.vector)
        .collect();
    if vectors.len() < MIN_TRAIN_SAMPLES {
        bail!(saeids::Error::Data(format!(
            "{} usable samples in {}; training needs at least {MIN_TRAIN_SAMPLES}",
            vectors.len(),
            args.features.display()
        )));
    }
    let data_n = vectors[0].n;
    if let Some(v) = vectors.iter().find(|v| v.n != data_n) {
        bail!(saeids::Error::Data(format!(
            "mixed window sizes in {}: N={data_n} and N={}",
            args.features.display(),
            v.n
        )));
    }
    if args.n.is_some() && data_n != cfg.n {
        bail!(Usage(format!(
            "--n {} disagrees with the feature file (N={data_n})",
            cfg.n
        )));
    }
    cfg.n = data_n;

    vectors.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_val = ((vectors.len() as f64) * cfg.validation_fraction)
        .round()
        .max(1.0) as usize;
    let validation = vectors.split_off(vectors.len() - n_val);
    let fitted = fit_device_model(
        &args.device_type,
        &vectors,
        &validation,
        cfg.features(),
        &cfg.hyperparams(),
        cfg.seed,
    )?;
    let mut model = fitted.model;
    model.stamp_now();

    let out = args
        .out
        .unwrap_or_else(|| cfg.models_dir.join(format!("{}.json", args.device_type)));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    model.save(&out)?;

    let tr = &fitted.train_report;
    let th = &fitted.threshold_report;
    println!(
        "{}: {} train / {} validation samples, N={}",
        args.device_type,
        vectors.len(),
        validation.len(),
        cfg.n
    );
    println!(
        "training: {} epochs, best epoch {}, validation RE {:.6} (initial {:.6}), mean hidden activation {:.4}",
        tr.epochs_run,
        tr.best_epoch,
        tr.best_val_re(),
        tr.initial_val_re,
        tr.overall_mean_activation()
    );
    println!(
        "threshold: {:.6} (mean {:.6} + std {:.6}; {} of {} validation errors above {} dropped)",
        th.threshold,
        th.re_mean,
        th.re_std,
        th.n_outliers_removed,
        th.n_validation,
        th.outlier_cutoff
    );
    println!("model written to {}", out.display());
    Ok(0)
}

pub fn detect(mut cfg: PipelineConfig, args: DetectArgs) -> Result<u8> {
    if let Some(t) = args.timeout {
        cfg.timeout_seconds = t;
    }
    if let Some(m) = args.models {
        cfg.models_dir = m;
    }
    cfg.validate()?;
    let kind = input::detect(&args.input)?;
    if !cfg.models_dir.is_dir() {
        bail!(Usage(format!(
            "models directory not found: {}",
            cfg.models_dir.display()
        )));
    }
    let set = ModelSet::load_dir(&cfg.models_dir)?;
    if let Some(n) = args.n.filter(|&n| n != set.n()) {
        bail!(Usage(format!(
            "--n {n} disagrees with the models (N={})",
            set.n()
        )));
    }
    let expected: Vec<&str> = args.expect_device.iter().map(String::as_str).collect();
    set.coverage_gaps(&expected);

    let vectors: Vec<FeatureVector> = if kind == InputKind::FeatureCsv {
        let rows = load_feature_csv(&args.input)?;
        if let Some(r) = rows.iter().find(|r| r.vector.n != set.n()) {
            bail!(Usage(format!(
                "{}: features have N={}, models expect N={}",
                args.input.display(),
                r.vector.n,
                set.n()
            )));
        }
        rows.into_iter().map(|r| r.vector).collect()
    } else {
        let fc = set.models()[0].features;
        input::read_flows(&args.input, kind, cfg.timeout_seconds)?
            .flows
            .iter()
            .map(|f| featurize_with(f, &fc))
            .collect::<saeids::Result<_>>()?
    };

    let verdicts = set.decide_batch(&vectors)?;
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            write_verdicts_jsonl(&mut w, &verdicts)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            write_verdicts_jsonl(&mut w, &verdicts)?;
            w.flush()?;
        }
    }
    let flagged = verdicts.iter().filter(|v| v.anomalous).count();
    eprintln!(
        "{flagged} of {} flows anomalous ({} models, N={})",
        verdicts.len(),
        set.len(),
        set.n()
    );
    Ok(if args.fail_on_anomaly && flagged > 0 {
        EXIT_ANOMALY
    } else {
        0
    })
}

pub fn evaluate(mut cfg: PipelineConfig, args: EvaluateArgs) -> Result<u8> {
    if let Some(ns) = args.n_values {
        cfg.n_values = ns;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.max_epochs {
        cfg.max_epochs = e;
    }
    cfg.include_empty_packets |= args.include_empty_packets;
    cfg.validate()?;
    let corpus = match &args.corpus {
        Some(dir) => {
            if !dir.is_dir() {
                bail!(Usage(format!(
                    "corpus directory not found: {}",
                    dir.display()
                )));
            }
            load_corpus(dir)?
        }
        None => generate_dataset(&synth_config(&cfg))?,
    };
    let report = sweep_n(&corpus, &cfg.n_values, &cfg.eval())?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = create(&args.out.join("report.csv"))?;
    write_report_csv(&mut w, &report)?;
    w.flush()?;
    let mut w = create(&args.out.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.flush()?;
    let mut w = create(&args.out.join("plot.dat"))?;
    write_plot_data(&mut w, &report)?;
    w.flush()?;

    println!(" N      tp      tn     fp     fn     TPR     FPR");
    for r in &report.rows {
        let f = |v: Option<f64>| v.map_or("   n/a".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:2} {:7} {:7} {:6} {:6}  {}  {}",
            r.n,
            r.tp,
            r.tn,
            r.fp,
            r.fn_,
            f(r.tpr),
            f(r.fpr)
        );
    }
    println!("reports written to {}", args.out.display());
    Ok(0)
}

fn synth_config(cfg: &PipelineConfig) -> SynthConfig {
    SynthConfig {
        flows_per_device: cfg.flows_per_device,
        malicious_flows: cfg.malicious_flows,
        seed: cfg.synth_seed,
        timeout: cfg.timeout_seconds,
        ..SynthConfig::default()
    }
}

pub fn synth(mut cfg: PipelineConfig, args: SynthArgs) -> Result<u8> {
    if let Some(f) = args.flows_per_device {
        cfg.flows_per_device = f;
    }
    if let Some(m) = args.malicious_flows {
        cfg.malicious_flows = m;
    }
    if let Some(s) = args.seed {
        cfg.synth_seed = s;
    }
    cfg.validate()?;
    let corpus = generate_dataset(&synth_config(&cfg))?;
    save_corpus(&args.out, &corpus)?;
    println!(
        "{} legitimate flows over {} devices and {} malicious flows written to {}",
        corpus.count(Label::Legit),
        corpus.devices.len(),
        corpus.count(Label::Malicious),
        args.out.display()
    );
    Ok(0)
}
