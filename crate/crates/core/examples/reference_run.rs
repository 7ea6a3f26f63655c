//! Runs the reference synthetic experiment and prints the per-N table.
//!
//! cargo run --release -p saeids-core --example reference_run -- 3 10

use std::time::Instant;

use saeids::eval::{generate_dataset, sweep_n, EvalConfig, Perturbation, SynthConfig};

fn main() -> saeids::Result<()> {
    let mut ns: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    if ns.is_empty() {
        ns = (2..=10).collect();
    }
    let perturb = std::env::var_os("PERTURB").is_some();
    let corpus = generate_dataset(&SynthConfig::default())?;
    let mut cfg = EvalConfig {
        perturbation: perturb.then(Perturbation::default),
        ..EvalConfig::default()
    };
    let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<f64>().ok());
    if let Some(lr) = env("LR") {
        cfg.hyperparams.learning_rate = lr;
    }
    if let Some(e) = env("EPOCHS") {
        cfg.hyperparams.max_epochs = e as usize;
    }
    if let Some(b) = env("BATCH") {
        cfg.hyperparams.batch_size = b as usize;
    }
    let t0 = Instant::now();
    let report = sweep_n(&corpus, &ns, &cfg)?;
    for f in &report.folds {
        let acts: Vec<String> = f
            .models
            .iter()
            .map(|m| {
                format!(
                    "{}:{}ep thr={:.2} act={:.3}",
                    &m.device[..4],
                    m.epochs_run,
                    m.threshold,
                    m.mean_hidden_activation
                )
            })
            .collect();
        println!(
            "n={} fold={} {:?} {}",
            f.n,
            f.fold,
            f.counts,
            acts.join(" ")
        );
    }
    for r in &report.rows {
        println!(
            "N={:2} tpr={:.4} fpr={:.4}",
            r.n,
            r.tpr.unwrap_or(f64::NAN),
            r.fpr.unwrap_or(f64::NAN)
        );
    }
    println!("elapsed {:.1?}", t0.elapsed());
    Ok(())
}
