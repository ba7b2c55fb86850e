//! Command line: `gssl <verb> [--config FILE] [--set key=value]... [--out DIR]`.
//!
//! Exit status is 0 on success, 1 when a run fails and 2 for usage or
//! configuration errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gssl_core::metrics::{cross_domain, sweep, threshold_protocols, CrossDomain, PixelRecord, ProtocolReport};
use gssl_core::train::Ablation;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{RunConfig, DOMAINS};
use crate::dataset::{save_dataset, write_json};
use crate::error::{IoError, Result};
use crate::report::{read_records, write_curves, write_log, write_records, Summary};
use crate::run::{domain, evaluate, generate, Bench};

pub const OUT_ENV: &str = "GSSL_OUT";
pub const RESOLVED: &str = "resolved_config.json";

#[derive(Debug, Parser)]
#[command(name = "gssl", version, about = "Semi-supervised segmentation with learnt pixel-wise uncertainty")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply to anything it leaves out.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dotted override such as `train.lr=0.02`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, env = OUT_ENV, default_value = "gssl-out")]
    pub out: PathBuf,
    /// Read datasets from this directory (as written by generate-data)
    /// instead of generating them.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write every benchmark domain as a dataset directory.
    GenerateData(Common),
    /// Supervised pretraining on the source domain.
    Pretrain(Common),
    /// Pretraining (or a pretrained checkpoint) followed by the curriculum.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from this pretrained checkpoint.
        #[arg(long, value_name = "DIR")]
        from: Option<PathBuf>,
    },
    /// Per-pixel records and a summary on the test domain.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// Also report metrics at the threshold learnt in training.
        #[arg(long)]
        use_trained_threshold: bool,
    },
    /// Threshold curves on the test domain.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
    },
    /// Validation-size and cross-domain threshold studies.
    Protocols {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// Labelled domain whose optimal threshold is carried to the test domain.
        #[arg(long, default_value = "b_test")]
        cross_from: String,
    },
    /// Train and evaluate one ablation end to end.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(value_parser = parse_ablation)]
        ablation: Ablation,
    },
    /// Curves and summary from a record dump.
    ExportCurves {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        records: PathBuf,
    },
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
        format!("unknown ablation `{s}`; expected one of {}", names.join(", "))
    })
}

/// Parses `args` (program name first), runs the command and returns the exit
/// status.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::GenerateData(c) | Command::Pretrain(c) => c,
        Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Sweep { common, .. }
        | Command::Protocols { common, .. }
        | Command::Ablate { common, .. }
        | Command::ExportCurves { common, .. } => common,
    }
}

fn create(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| IoError::path(dir, e))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("report serialises"));
}

#[derive(Serialize)]
struct Protocols {
    test: String,
    report: ProtocolReport,
    cross_domain: CrossDomain,
    cross_from: String,
}

pub fn dispatch(cmd: Command) -> Result<()> {
    let c = common(&cmd);
    let cfg = RunConfig::load(c.config.as_deref(), &c.overrides)?;
    let out = c.out.clone();
    let data = c.data.clone();
    let data = data.as_deref();
    create(&out)?;
    write_json(&out.join(RESOLVED), &cfg)?;
    let hash = cfg.sha256();
    match cmd {
        Command::GenerateData(_) => {
            for name in DOMAINS {
                let d = generate(&cfg.benchmark, name)?;
                save_dataset(&out.join(name), &d)?;
                eprintln!("wrote {} ({} images)", out.join(name).display(), d.len());
            }
        }
        Command::Pretrain(_) => {
            let source = domain(&cfg.benchmark, data, "a")?;
            let (state, log) = gssl_core::train::pretrain(&cfg.train, &source)?;
            save_checkpoint(&out.join("checkpoint"), &state, &hash)?;
            write_log(&out.join("log.csv"), &log)?;
        }
        Command::Train { from, .. } => {
            let out_run = match from {
                None => Bench::new(&cfg, data)?.run(cfg.train.ablation, &cfg.curriculum)?,
                Some(dir) => {
                    let (pretrained, _) = load_checkpoint(&dir)?;
                    let source = domain(&cfg.benchmark, data, "a")?;
                    let stages = cfg
                        .curriculum
                        .iter()
                        .map(|n| domain(&cfg.benchmark, data, n))
                        .collect::<Result<Vec<_>>>()?;
                    let refs: Vec<_> = stages.iter().collect();
                    gssl_core::train::train_from(pretrained, &cfg.train, &source, &refs)?
                }
            };
            save_checkpoint(&out.join("checkpoint"), &out_run.state, &hash)?;
            write_log(&out.join("log.csv"), &out_run.log)?;
        }
        Command::Eval {
            checkpoint,
            use_trained_threshold,
            ..
        } => {
            let (state, _) = load_checkpoint(&checkpoint)?;
            if use_trained_threshold && state.gamma.is_none() {
                return Err(IoError::Invalid(format!(
                    "{} holds no trained threshold",
                    checkpoint.display()
                )));
            }
            let test = domain(&cfg.benchmark, data, &cfg.test)?;
            let ev = evaluate(&state, &test, &cfg, use_trained_threshold)?;
            write_records(&out.join("records.csv"), &ev.records)?;
            write_json(&out.join("summary.json"), &ev.summary)?;
            print_json(&ev.summary);
        }
        Command::Sweep { checkpoint, .. } => {
            let (state, _) = load_checkpoint(&checkpoint)?;
            let test = domain(&cfg.benchmark, data, &cfg.test)?;
            let ev = evaluate(&state, &test, &cfg, state.gamma.is_some())?;
            write_curves(&out.join("curves.csv"), &ev.sweep)?;
            write_json(&out.join("summary.json"), &ev.summary)?;
            print_json(&ev.summary);
        }
        Command::Protocols {
            checkpoint,
            cross_from,
            ..
        } => {
            let (state, _) = load_checkpoint(&checkpoint)?;
            let test = domain(&cfg.benchmark, data, &cfg.test)?;
            let other = domain(&cfg.benchmark, data, &cross_from)?;
            let records = gssl_core::train::evaluate_records(&state, &test, cfg.eval.chunk)?;
            let other_records = gssl_core::train::evaluate_records(&state, &other, cfg.eval.chunk)?;
            let flat = |r: &[Vec<PixelRecord>]| r.iter().flatten().copied().collect::<Vec<_>>();
            let mut pcfg = cfg.eval.protocol.clone();
            pcfg.beta = cfg.eval.beta;
            let report = Protocols {
                test: cfg.test.clone(),
                report: threshold_protocols(&records, state.gamma, &pcfg)?,
                cross_domain: cross_domain(&flat(&other_records), &flat(&records), cfg.eval.beta)?,
                cross_from,
            };
            write_json(&out.join("protocols.json"), &report)?;
            print_json(&report.cross_domain);
        }
        Command::Ablate { ablation, .. } => {
            let bench = Bench::new(&cfg, data)?;
            let run = bench.run(ablation, &cfg.curriculum)?;
            let ev = bench.evaluate(&run.state, &cfg.test, run.state.gamma.is_some())?;
            save_checkpoint(&out.join("checkpoint"), &run.state, &hash)?;
            write_log(&out.join("log.csv"), &run.log)?;
            write_records(&out.join("records.csv"), &ev.records)?;
            write_curves(&out.join("curves.csv"), &ev.sweep)?;
            write_json(&out.join("summary.json"), &ev.summary)?;
            print_json(&ev.summary);
        }
        Command::ExportCurves { records, .. } => {
            let images = read_records(&records)?;
            let (summary, _) = Summary::new(&images, cfg.eval.beta, None)?;
            let all: Vec<PixelRecord> = images.iter().flatten().copied().collect();
            write_curves(&out.join("curves.csv"), &sweep(&all, cfg.eval.beta)?)?;
            write_json(&out.join("summary.json"), &summary)?;
            print_json(&summary);
        }
    }
    Ok(())
}
