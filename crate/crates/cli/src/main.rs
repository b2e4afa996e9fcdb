use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sinklab_cli::commands::{self, OracleRequest, ProbeRequest};
use sinklab_cli::config::MetricSpec;
use sinklab_core::analysis::Aggregation;
use sinklab_core::data::ProbeKind;
use sinklab_core::model::write_atomic;
use sinklab_core::positional::PeKind;
use sinklab_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sinklab", version, about = "Attention-sink experiments on small transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Natural,
    Random,
    Repeat,
}

#[derive(Clone, Copy, ValueEnum)]
enum Agg {
    PerSequence,
    MeanAlpha,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pe {
    Nope,
    RelativeT5,
    Alibi,
    Rotary,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to `output.dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run known-unstable attention variants without flagging.
        #[arg(long)]
        allow_unstable: bool,
    },
    /// Measure attention sinks and activations of a checkpoint.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "natural")]
        kind: Kind,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        t: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.3")]
        eps: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        k: Vec<usize>,
        #[arg(long, value_enum, default_value = "per-sequence")]
        aggregation: Agg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Experiment config for natural probes; defaults to the one beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write query/key grids for the first sequence.
        #[arg(long)]
        qk: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit closed-form repeated-token attention as CSV.
    Oracle {
        #[arg(long, value_enum)]
        pe: Pe,
        #[arg(long = "t-max")]
        t_max: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
        xi: Vec<f64>,
        #[arg(long, default_value_t = 32)]
        buckets: usize,
        #[arg(long, default_value_t = 128)]
        max_distance: usize,
        /// Take the relative bias table from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        layer: usize,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Consolidate run directories; with --plots, also emit SVG charts.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        run: Vec<PathBuf>,
        #[arg(long)]
        plots: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            allow_unstable,
        } => {
            let mut cfg = commands::load_config(&config)?;
            cfg.allow_unstable |= allow_unstable;
            let summary = commands::run_train(&cfg, out.as_deref(), &mut |line| eprintln!("{line}"))?;
            if summary.record.flagged_unstable {
                eprintln!("run flagged: known-unstable attention variant");
            }
            println!("{}", summary.out_dir.display());
        }
        Command::Probe {
            ckpt,
            kind,
            n,
            t,
            eps,
            k,
            aggregation,
            seed,
            config,
            qk,
            out,
        } => {
            let metrics = k
                .iter()
                .flat_map(|&k| eps.iter().map(move |&eps| MetricSpec { k, eps }))
                .collect();
            let kind = match kind {
                Kind::Natural => ProbeKind::Natural,
                Kind::Random => ProbeKind::Random,
                Kind::Repeat => ProbeKind::Repeat,
            };
            let req = ProbeRequest {
                kind,
                n,
                t,
                seed,
                metrics,
                aggregation: match aggregation {
                    Agg::PerSequence => Aggregation::PerSequence,
                    Agg::MeanAlpha => Aggregation::MeanAlpha,
                },
                qk_grids: qk,
            };
            let out = out.unwrap_or_else(|| {
                let spec = sinklab_cli::config::ProbeSpec { kind, n, t, seed };
                ckpt.parent()
                    .unwrap_or(std::path::Path::new("."))
                    .join(commands::probe_dir_name(&spec))
            });
            let report = commands::run_probe(&ckpt, config.as_deref(), &req, &out)?;
            for m in &report.sink.metrics {
                println!("sink_{}@{} = {}", m.k, m.eps, m.value);
            }
            eprintln!("written to {}", out.display());
        }
        Command::Oracle {
            pe,
            t_max,
            heads,
            xi,
            buckets,
            max_distance,
            ckpt,
            layer,
            out,
        } => {
            let pe = match pe {
                Pe::Nope => PeKind::NoPe,
                Pe::RelativeT5 => PeKind::RelativeT5 {
                    buckets,
                    max_distance,
                },
                Pe::Alibi => PeKind::Alibi,
                Pe::Rotary => PeKind::Rotary,
            };
            let csv = commands::run_oracle(&OracleRequest {
                pe,
                t_max,
                heads,
                xi,
                ckpt,
                layer,
            })?;
            match out {
                Some(p) => write_atomic(&p, csv.as_bytes())?,
                None => print!("{csv}"),
            }
        }
        Command::Report { run, plots, out } => {
            let summary = commands::run_report(&run, plots, out.as_deref())?;
            for f in &summary.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if let Error::NumericAbort {
                last_checkpoint: Some(p),
                ..
            } = &err
            {
                eprintln!("last checkpoint: {}", p.display());
            }
            ExitCode::from(sinklab_cli::exit_code(&err) as u8)
        }
    }
}
