use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use morphsnn_cli::commands::{
    self, DiffusionArgs, EnergyArgs, GenerateArgs, GraphKind, OodArgs, PerturbArgs, SignalKind, TrainArgs,
};
use morphsnn_core::ood::Method;
use morphsnn_core::training::{DatasetKind, PerturbKind};

const DEFAULT_SEED: u64 = 2020;

#[derive(Parser)]
#[command(name = "morphsnn", version, about = "Dynamic-graph spiking network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: morphsnn_core::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<PerturbKind, String> {
    s.parse().map_err(|e: morphsnn_core::Error| e.to_string())
}

fn parse_dataset(s: &str) -> Result<DatasetKind, String> {
    s.parse().map_err(|e: morphsnn_core::Error| e.to_string())
}

fn parse_graph(s: &str) -> Result<GraphKind, String> {
    s.parse().map_err(|e: anyhow::Error| e.to_string())
}

fn parse_signal(s: &str) -> Result<SignalKind, String> {
    s.parse().map_err(|e: anyhow::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic event-frame dataset.
    Generate {
        #[arg(long, value_parser = parse_dataset, default_value = "moving-bar")]
        kind: DatasetKind,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        per_class: usize,
        #[arg(long, default_value_t = 5)]
        timesteps: usize,
        #[arg(long, default_value_t = 2)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network; writes checkpoint, metrics and energy-trend CSVs.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed (2020 when neither is set).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dirichlet-energy decay and spectral bounds on an example graph.
    DiffusionAnalyze {
        #[arg(long)]
        nodes: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, value_parser = parse_graph, default_value = "random")]
        graph: GraphKind,
        #[arg(long, value_parser = parse_signal, default_value = "random")]
        signal: SignalKind,
        #[arg(long, default_value_t = 1)]
        features: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score ID and OOD sets and report AUROC, AUPR-Out and FPR95.
    Ood {
        /// Training set used to fit prototypes, neighbors and the threshold.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        id: PathBuf,
        #[arg(long)]
        ood: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_method, default_value = "dgp")]
        method: Method,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy under perturbation across intensity levels.
    PerturbEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second model evaluated on the same perturbed streams.
        #[arg(long)]
        static_checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_kind, num_args = 1.., default_value = "salt-pepper")]
        kind: Vec<PerturbKind>,
        #[arg(long, default_value = "0..9")]
        rho_range: String,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Operation counts and energy estimate as JSON.
    EnergyReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { kind, classes, per_class, timesteps, channels, height, width, seed, out } => {
            let args = GenerateArgs { kind, classes, per_class, dims: [timesteps, channels, height, width], seed, out };
            let f = commands::generate(&args)?;
            println!("wrote {} samples to {}", f.samples.len(), args.out.display());
        }
        Command::Train { config, data, test, out, seed } => {
            let args = TrainArgs { config, data, test, out_dir: out, seed };
            let (_, history) = commands::train(&args, |m| {
                let test = m.test_acc.map(|a| format!(" test_acc {a:.4}")).unwrap_or_default();
                eprintln!("epoch {:>3} loss {:.4} train_acc {:.4}{test}", m.epoch, m.loss, m.train_acc);
            })?;
            if let Some(last) = history.last() {
                println!("trained {} epochs; final loss {:.4}; artifacts in {}", last.epoch, last.loss, args.out_dir.display());
            }
        }
        Command::DiffusionAnalyze { nodes, steps, graph, signal, features, seed, out } => {
            let args = DiffusionArgs { nodes, steps, graph, signal, features, seed, out };
            let a = commands::diffusion_analyze(&args)?;
            if args.out.is_none() {
                print!("{}", a.csv);
            }
            println!("{}", a.verdict());
            return Ok(a.passed());
        }
        Command::Ood { train, id, ood, checkpoint, method, out } => {
            let o = commands::ood(&OodArgs { train, id, ood, checkpoint, method, out })?;
            for w in &o.warnings {
                eprintln!("warning: {w}");
            }
            let m = o.metrics;
            println!("method {method}: auroc {:.4} aupr_out {:.4} fpr95 {:.4}", m.auroc, m.aupr_out, m.fpr95);
        }
        Command::PerturbEval { checkpoint, static_checkpoint, data, kind, rho_range, seed, out } => {
            let rhos = commands::parse_rho_range(&rho_range).context("invalid --rho-range")?;
            let print = out.is_none();
            let rows = commands::perturb_eval(&PerturbArgs { checkpoint, static_checkpoint, data, kinds: kind, rhos, seed, out })?;
            if print {
                for r in rows {
                    match r.static_accuracy {
                        Some(s) => println!("{},{},{},{}", r.kind, r.rho, r.accuracy, s),
                        None => println!("{},{},{}", r.kind, r.rho, r.accuracy),
                    }
                }
            }
        }
        Command::EnergyReport { checkpoint, data, out } => {
            let print = out.is_none();
            let r = commands::energy_report(&EnergyArgs { checkpoint, data, out })?;
            if print {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                println!("total {:.6} mJ per sample ({} samples)", r.total_energy_mj, r.samples);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
