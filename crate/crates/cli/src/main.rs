mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use diffdyg_core::encoder::AttentionKind;
use diffdyg_core::events::{Mode, Protocol};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "diffdyg", version, about = "Differential-attention link prediction on temporal interaction graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-community stream with a community shift.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        events: Option<usize>,
        /// Fraction of nodes whose community is permuted late in the stream.
        #[arg(long)]
        shift: Option<f64>,
    },
    /// Train a model and write its checkpoint and per-epoch history.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint (AP / AUC over the evaluation seeds).
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Shift measurement, attention dispersion metrics and attention dumps.
    Diagnose {
        #[command(flatten)]
        common: Common,
    },
    /// Critical-node and random-node masking sweeps.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Retention ratios to sweep (repeatable).
        #[arg(long = "retention")]
        retentions: Vec<f64>,
    },
    /// Convert a benchmark CSV (`user,item,timestamp,label,features...`) to an event CSV.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
pub(crate) struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    #[arg(long, value_enum)]
    attention: Option<AttentionArg>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    hops: Option<u8>,
    /// Event CSV (`src,dst,ts[,features...]`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    node_features: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Transductive,
    Inductive,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtocolArg {
    Random,
    Historical,
    Inductive,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AttentionArg {
    Differential,
    Standard,
}

impl Common {
    pub(crate) fn resolve(&self, base: RunConfig) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => base,
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(m) = self.mode {
            c.mode = match m {
                ModeArg::Transductive => Mode::Transductive,
                ModeArg::Inductive => Mode::Inductive,
            };
        }
        if let Some(p) = self.protocol {
            c.protocol = match p {
                ProtocolArg::Random => Protocol::Random,
                ProtocolArg::Historical => Protocol::Historical,
                ProtocolArg::Inductive => Protocol::Inductive,
            };
        }
        if let Some(a) = self.attention {
            c.attention = match a {
                AttentionArg::Differential => AttentionKind::Differential,
                AttentionArg::Standard => AttentionKind::Standard,
            };
        }
        if let Some(h) = self.hops {
            c.hops = usize::from(h);
            if c.hops == 2 && c.k2 == 0 {
                c.k2 = 5;
            }
        }
        if let Some(p) = &self.data {
            c.data = Some(p.clone());
        }
        if let Some(p) = &self.node_features {
            c.node_features = Some(p.clone());
        }
        if let Some(p) = &self.checkpoint {
            c.checkpoint = Some(p.clone());
        }
        if let Some(p) = &self.out {
            c.out = p.clone();
        }
        Ok(c)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            common,
            nodes,
            events,
            shift,
        } => {
            let mut c = common.resolve(RunConfig::default())?;
            c.synth_nodes = nodes.unwrap_or(c.synth_nodes);
            c.synth_events = events.unwrap_or(c.synth_events);
            c.synth_shift = shift.unwrap_or(c.synth_shift);
            commands::synth(&c)
        }
        Command::Train { common, epochs } => {
            let mut c = common.resolve(RunConfig::default())?;
            c.epochs = epochs.unwrap_or(c.epochs);
            commands::train(&c)
        }
        Command::Eval { common } => {
            let (c, model) = commands::resolve_with_checkpoint(&common)?;
            commands::eval(&c, &model)
        }
        Command::Diagnose { common } => {
            let (c, model) = commands::resolve_with_checkpoint(&common)?;
            commands::diagnose(&c, &model)
        }
        Command::Ablate { common, retentions } => {
            let (mut c, model) = commands::resolve_with_checkpoint(&common)?;
            if !retentions.is_empty() {
                c.retentions = retentions;
            }
            commands::ablate(&c, &model)
        }
        Command::Convert { input, output } => commands::convert(&input, &output),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<diffdyg_core::Error>()
                .map_or("cli", diffdyg_core::Error::kind);
            let report = serde_json::json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
