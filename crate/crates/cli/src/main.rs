use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod input;

/// Bad invocation or configuration; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub const EXIT_ANOMALY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(
    name = "saeids",
    version,
    about = "Per-device sparse autoencoder detector for IoT TCP flows"
)]
struct Cli {
    /// Flat TOML file with pipeline settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a pcap capture or packet CSV into bidirectional TCP flows.
    Extract(ExtractArgs),
    /// Compute feature vectors for flows.
    Featurize(FeaturizeArgs),
    /// Train and calibrate one device-type model from a feature CSV.
    Train(TrainArgs),
    /// Run the model ensemble over traffic and print JSON-lines verdicts.
    Detect(DetectArgs),
    /// Cross-validate the ensemble over a range of window sizes.
    Evaluate(EvaluateArgs),
    /// Generate a labeled synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
pub struct ExtractArgs {
    /// pcap capture or packet CSV.
    pub input: PathBuf,
    /// Flow CSV to write; the packet sidecar goes next to it.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Flow split timeout in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
}

#[derive(Args)]
pub struct FeaturizeArgs {
    /// pcap capture, packet CSV or flow CSV.
    pub input: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Packets per direction to describe.
    #[arg(short, long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Let zero-payload packets count towards the window.
    #[arg(long)]
    pub include_empty_packets: bool,
    /// Labels CSV (`flow_id,device_type,label`) to attach.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Keep only flows of this device type (needs --labels).
    #[arg(long, requires = "labels")]
    pub device: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Feature CSV of legitimate flows for one device type.
    pub features: PathBuf,
    #[arg(long)]
    pub device_type: String,
    /// Model file; defaults to `<models dir>/<device type>.json`.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "SAEIDS_MODELS_DIR")]
    pub models: Option<PathBuf>,
    /// Expected window size of the feature rows.
    #[arg(short, long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub include_empty_packets: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
}

#[derive(Args)]
pub struct DetectArgs {
    /// pcap capture, packet CSV, flow CSV or feature CSV.
    pub input: PathBuf,
    /// Directory holding one `.json` model per device type.
    #[arg(long, env = "SAEIDS_MODELS_DIR")]
    pub models: Option<PathBuf>,
    /// Window size the models must have been trained with.
    #[arg(short, long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Write verdicts here instead of stdout.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Exit with status 1 when any flow is anomalous.
    #[arg(long)]
    pub fail_on_anomaly: bool,
    /// Device type expected on the network; warns when no model covers it.
    #[arg(long = "expect-device")]
    pub expect_device: Vec<String>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Corpus directory written by `synth`; the default corpus is generated when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Directory for report.csv, summary.json and plot.dat.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Window sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub n_values: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub include_empty_packets: bool,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Directory for flows.csv, flows.packets.csv and labels.csv.
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long)]
    pub flows_per_device: Option<usize>,
    #[arg(long)]
    pub malicious_flows: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<saeids::Error>() {
            return match e {
                saeids::Error::Config(_) | saeids::Error::Parameter(_) => EXIT_USAGE,
                saeids::Error::Io { source, .. }
                    if source.kind() == std::io::ErrorKind::NotFound =>
                {
                    EXIT_USAGE
                }
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result =
        config::PipelineConfig::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
            Command::Extract(a) => commands::extract(cfg, a),
            Command::Featurize(a) => commands::featurize(cfg, a),
            Command::Train(a) => commands::train(cfg, a),
            Command::Detect(a) => commands::detect(cfg, a),
            Command::Evaluate(a) => commands::evaluate(cfg, a),
            Command::Synth(a) => commands::synth(cfg, a),
        });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
