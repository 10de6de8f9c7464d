//! Command-line harness: point-cloud IO, forward runs, attention dumps,
//! gradient checks, attention benchmarks and the overfitting demo.

pub mod cloudfile;
pub mod commands;
pub mod error;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use pointformer::gradsuite::Scope;
use pointformer::Precision;

use commands::attn_dump::{AttnDumpArgs, HeadSel, Stage};
use commands::bench::{BenchArgs, Mode};
use commands::forward::ForwardArgs;
use commands::grad_check::GradCheckArgs;
use commands::overfit::OverfitArgs;
use commands::{to_json, write_text, Globals};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "pointformer", version, about = "Point-cloud transformer backbone toolkit")]
pub struct Cli {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; every command runs single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Scalar width, overriding the config.
    #[arg(long, global = true, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "32" => Ok(Precision::F32),
        "64" => Ok(Precision::F64),
        _ => Err(format!("precision must be 32 or 64, got {s}")),
    }
}

fn parse_scope(s: &str) -> Result<Vec<Scope>, String> {
    match s {
        "all" => Ok(vec![Scope::Op, Scope::Block, Scope::Backbone]),
        other => other.parse().map(|s| vec![s]).map_err(|e: pointformer::Error| e.to_string()),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the backbone on a cloud and write every stage.
    Forward {
        /// Config file or bundled preset name.
        #[arg(long)]
        config: String,
        #[arg(long)]
        input: PathBuf,
        /// Output directory for stage files and manifest.json.
        #[arg(long)]
        output: PathBuf,
        /// Keep attention maps and summarize them in the manifest.
        #[arg(long)]
        retain_attn: bool,
    },
    /// Top-k attention weights of one query.
    AttnDump {
        #[arg(long)]
        config: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        block: usize,
        /// lt, lgt or gt.
        #[arg(long, default_value = "gt")]
        stage: Stage,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Head index or "mean".
        #[arg(long, default_value = "mean")]
        head: HeadSel,
        #[arg(long, default_value_t = 0)]
        query: usize,
        #[arg(long, default_value_t = 50)]
        topk: usize,
        /// Write JSON here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Finite-difference gradient verification.
    GradCheck {
        #[arg(long, default_value_t = pointformer::gradcheck::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = pointformer::gradcheck::DEFAULT_TOL)]
        tolerance: f64,
        /// op, block, backbone or all.
        #[arg(long, default_value = "op")]
        scope: String,
        /// Print JSON reports instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Time full against low-rank attention.
    Bench {
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        r: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        repeat: usize,
        /// full, linformer or both.
        #[arg(long, default_value = "both")]
        mode: Mode,
        /// Include the positional-encoding network in the timed kernel.
        #[arg(long)]
        pe: bool,
        /// Use identity key/value projections.
        #[arg(long)]
        identity_proj: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fit per-point targets on the bundled synthetic scene.
    Overfit {
        #[arg(long, default_value = "overfit_tiny")]
        config: String,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        /// Learning rate, or "auto" to halve from the default on divergence.
        #[arg(long, default_value = "auto")]
        lr: String,
        /// Train only the output head.
        #[arg(long)]
        head_only: bool,
        /// Print every n-th step.
        #[arg(long, default_value_t = 100)]
        print_every: usize,
        /// Write the full loss trace as JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn emit(out: &mut dyn Write, text: &str, file: Option<&PathBuf>) -> CliResult<()> {
    match file {
        Some(p) => write_text(p, text),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io("<stdout>", e)),
    }
}

/// Runs one parsed command, writing its report to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    if cli.threads > 1 {
        log::warn!("--threads {} requested; running single-threaded", cli.threads);
    }
    let globals = Globals {
        seed: cli.seed,
        threads: cli.threads,
        precision: cli.precision,
    };
    match cli.command {
        Command::Forward {
            config,
            input,
            output,
            retain_attn,
        } => {
            let args = ForwardArgs {
                config,
                input,
                output,
                retain_attn,
            };
            let m = commands::forward::run(&args, &globals)?;
            let mut text = String::new();
            for s in &m.stages {
                text.push_str(&format!(
                    "stage {:>2} {:<4} {:>7} points {:>5} channels  {}\n",
                    s.index,
                    format!("{:?}", s.kind).to_lowercase(),
                    s.points,
                    s.channels,
                    s.file
                ));
            }
            text.push_str(&format!("checksum {}\n", m.checksum));
            emit(out, &text, None)
        }
        Command::AttnDump {
            config,
            input,
            block,
            stage,
            layer,
            head,
            query,
            topk,
            output,
        } => {
            let args = AttnDumpArgs {
                config,
                input,
                block,
                stage,
                layer,
                head,
                query,
                topk,
            };
            let dump = commands::attn_dump::run(&args, &globals)?;
            emit(out, &to_json(&dump), output.as_ref())
        }
        Command::GradCheck {
            eps,
            tolerance,
            scope,
            json,
        } => {
            let args = GradCheckArgs {
                eps,
                tolerance,
                scopes: parse_scope(&scope).map_err(CliError::Usage)?,
            };
            let reports = commands::grad_check::run(&args)?;
            let text = if json {
                to_json(&reports)
            } else {
                commands::grad_check::render(&reports)
            };
            emit(out, &text, None)?;
            commands::grad_check::verdict(&reports, tolerance)
        }
        Command::Bench {
            n,
            r,
            heads,
            dim,
            repeat,
            mode,
            pe,
            identity_proj,
            output,
        } => {
            let args = BenchArgs {
                n,
                r,
                heads,
                dim,
                repeat,
                mode,
                pe,
                identity_proj,
                seed: globals.seed.unwrap_or(0),
                precision: globals.precision.unwrap_or(Precision::F32),
            };
            let outcome = commands::bench::run(&args)?;
            emit(out, &to_json(&outcome), output.as_ref())
        }
        Command::Overfit {
            config,
            steps,
            lr,
            head_only,
            print_every,
            trace,
        } => {
            let lr = match lr.as_str() {
                "auto" => None,
                s => Some(
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| *v > 0.0 && v.is_finite())
                        .ok_or_else(|| CliError::Usage(format!("--lr must be \"auto\" or a positive number, got {s}")))?,
                ),
            };
            let args = OverfitArgs {
                config,
                steps,
                lr,
                head_only,
            };
            let t = commands::overfit::run(&args, &globals)?;
            emit(out, &commands::overfit::render(&t, print_every), None)?;
            if let Some(p) = trace {
                write_text(&p, &to_json(&t))?;
            }
            commands::overfit::verdict(&t)
        }
    }
}
