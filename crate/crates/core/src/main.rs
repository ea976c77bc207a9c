use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use snr_core::data::{generate_synthetic_domains, CorpusSpec, DatasetManifest};
use snr_core::harness::{
    divergence_from_checkpoint, evaluate_checkpoint, run_ablation, train_run, AblationMatrix,
    TrainConfig, DIVERGENCE_SAMPLES,
};
use snr_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "snr",
    version,
    about = "Style normalization and restitution at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-domain corpus.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval metrics of a checkpoint on a target domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        target_domain: usize,
        #[arg(long)]
        report: PathBuf,
        /// Also compute per-stage divergence between two domains.
        #[arg(long, value_parser = domain_pair)]
        divergence_domains: Option<[usize; 2]>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate every (scheme, seed) cell of a matrix.
    Ablate {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-stage feature divergence between two domains.
    Divergence {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = domain_pair)]
        domains: [usize; 2],
        /// Defaults to the dataset recorded in the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: String) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)?)
}

/// Parses `A,B`.
fn domain_pair(s: &str) -> std::result::Result<[usize; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok([
            a.parse().map_err(|e| format!("{a}: {e}"))?,
            b.parse().map_err(|e| format!("{b}: {e}"))?,
        ]),
        _ => Err(format!(
            "expected two comma-separated domain ids, got {s:?}"
        )),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec: CorpusSpec = read_json(&spec)?;
            let m = generate_synthetic_domains(&spec, &out)?;
            println!("{} samples written to {}", m.samples.len(), out.display());
        }
        Command::Train { config, out } => {
            let cfg: TrainConfig = read_json(&config)?;
            let record = train_run(&cfg, &out)?;
            if let Some(e) = &record.final_eval {
                println!("mAP {:.4} rank-1 {:.4}", e.map, e.rank1());
            }
            println!("checkpoint: {}", out.join(&record.checkpoint).display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            target_domain,
            report,
            divergence_domains,
            csv,
        } => {
            let m = DatasetManifest::read(&manifest)?;
            let mut r = evaluate_checkpoint(&checkpoint, &m, target_domain)?;
            if let Some(d) = divergence_domains {
                let div = divergence_from_checkpoint(&checkpoint, &m, d, DIVERGENCE_SAMPLES)?;
                r.divergence_per_stage = Some(div.per_stage());
            }
            write_json(&report, &r)?;
            if let Some(p) = csv {
                write(&p, r.to_csv())?;
            }
            println!("mAP {:.4} rank-1 {:.4}", r.map, r.rank1());
        }
        Command::Ablate { matrix, out } => {
            let matrix: AblationMatrix = read_json(&matrix)?;
            let table = run_ablation(&matrix, &out)?;
            print!("{}", table.to_csv());
        }
        Command::Divergence {
            checkpoint,
            domains,
            manifest,
            report,
            csv,
        } => {
            let path = match manifest {
                Some(p) => p,
                None => {
                    snr_core::harness::load_checkpoint(&checkpoint)?
                        .1
                        .train
                        .dataset
                }
            };
            let m = DatasetManifest::read(&path)?;
            let r = divergence_from_checkpoint(&checkpoint, &m, domains, DIVERGENCE_SAMPLES)?;
            write_json(&report, &r)?;
            if let Some(p) = csv {
                write(&p, r.to_csv())?;
            }
            print!("{}", r.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
