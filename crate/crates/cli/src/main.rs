use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use skillformer::checkpoint::Checkpoint;
use skillformer::config::{ConfigFile, Preset, RunConfig};
use skillformer::data::{bayes_oracle, generate, Dataset, SyntheticSpec};
use skillformer::diagnostics::{gradcheck_suite, GRADCHECK_TOLERANCE};
use skillformer::exec::{set_thread_limit, Exec};
use skillformer::training::{evaluate, train_with, EpochRecord, EvalOptions, TrainOptions};
use skillformer::{Error, Result};

const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_NUMERIC: u8 = 5;
const EXIT_INTERNAL: u8 = 6;

#[derive(Parser)]
#[command(name = "skillformer", version, about = "Multi-view skill proficiency classifier")]
struct Cli {
    /// Worker threads for data generation, training and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset.
    GenData {
        /// Generator spec (TOML); defaults to the built-in 5-view spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fine-tune on a dataset and write the best-validation checkpoint.
    Train {
        /// Run config (TOML: preset plus overrides).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSON lines; defaults to `<out>.metrics.jsonl`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Dataset views to feed the model, e.g. `0,2`.
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        /// Print the resolved config and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Report accuracy, per-scenario accuracy and the confusion matrix.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Fold adapters into the base weights before evaluating.
        #[arg(long)]
        merged: bool,
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        /// Print the metrics as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Fold adapters into the base weights.
    Merge {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Run config; defaults to the desk preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Monte-Carlo Bayes accuracy when only some views are visible.
    Oracle {
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Visible views, e.g. `0,3`; defaults to all.
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        #[arg(long, default_value_t = 200_000)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } => EXIT_CONFIG,
        Error::Data(_) | Error::Io(_) => EXIT_DATA,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Dimension(_) | Error::Contract(_) => EXIT_INTERNAL,
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    ConfigFile::parse(&read_text(path)?)?.resolve()
}

fn load_spec(path: Option<&Path>) -> Result<SyntheticSpec> {
    match path {
        Some(p) => SyntheticSpec::parse(&read_text(p)?),
        None => Ok(SyntheticSpec::default()),
    }
}

/// Malformed dataset and checkpoint files are data errors, not config errors.
fn as_data_error(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { location, message } => Error::Data(format!("{}: {message} at {location}", path.display())),
        Error::Io(e) => Error::Data(format!("cannot read {}: {e}", path.display())),
        other => other,
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    File::open(path)
        .map_err(Error::from)
        .and_then(|f| Dataset::read(BufReader::new(f)))
        .map_err(|e| as_data_error(path, e))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| as_data_error(path, e))
}

fn echo(title: &str, body: &str) {
    println!("# {title}");
    for line in body.lines() {
        if line.is_empty() {
            println!("#");
        } else {
            println!("#   {line}");
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        set_thread_limit(t);
    }
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::GenData { spec, out, n, seed } => {
            let spec = load_spec(spec.as_deref())?;
            echo("spec", &spec.to_toml());
            let data = generate(&spec, n, seed, exec)?;
            let mut w = BufWriter::new(File::create(&out)?);
            data.write(&mut w)?;
            w.flush()?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            metrics,
            views,
            dry_run,
        } => {
            let cfg = load_config(&config)?;
            echo("resolved config", &cfg.to_toml());
            if dry_run {
                return Ok(ExitCode::SUCCESS);
            }
            let dataset = load_data(&data)?;
            let metrics = metrics.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".metrics.jsonl");
                p.into()
            });
            let mut sidecar = BufWriter::new(File::create(&metrics)?);
            let mut write_err = None;
            let start = Instant::now();
            let outcome = train_with(
                &cfg,
                &dataset,
                TrainOptions {
                    exec,
                    views,
                    on_epoch: Some(Box::new(|r: &EpochRecord| {
                        println!(
                            "epoch {:>3}  lr {:.3e}  train loss {:.4}  val acc {:.2}%",
                            r.epoch,
                            r.lr,
                            r.train_loss,
                            100.0 * r.val_acc
                        );
                        if let Err(e) = writeln!(sidecar, "{}", r.to_json_line()) {
                            write_err.get_or_insert(e);
                        }
                    })),
                },
            )?;
            if let Some(e) = write_err {
                return Err(e.into());
            }
            sidecar.flush()?;
            outcome.checkpoint.save(&out)?;
            println!(
                "best epoch {} of {}; {:.1}s; checkpoint {}; metrics {}",
                outcome.best_epoch,
                cfg.train.epochs,
                start.elapsed().as_secs_f64(),
                out.display(),
                metrics.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            merged,
            views,
            json,
        } => {
            let checkpoint = load_checkpoint(&ckpt)?;
            echo("checkpoint config", &checkpoint.run_config().to_toml());
            let dataset = load_data(&data)?;
            let m = evaluate(&checkpoint, &dataset, &EvalOptions { merge: merged, exec, views })?;
            if json {
                println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
            } else {
                print!("{}", m.report());
            }
        }
        Command::Merge { ckpt, out } => {
            let checkpoint = load_checkpoint(&ckpt)?;
            echo("checkpoint config", &checkpoint.run_config().to_toml());
            if checkpoint.header.merged {
                println!("checkpoint has no adapters; copying unchanged");
            }
            let merged = checkpoint.merge()?;
            merged.save(&out)?;
            println!("wrote merged checkpoint ({} tensors) to {}", merged.tensors.len(), out.display());
        }
        Command::Gradcheck { config, seed, seeds } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => RunConfig::preset(Preset::Desk),
            };
            echo("resolved config", &cfg.to_toml());
            let mut worst: f64 = 0.0;
            for s in seed..seed + seeds.max(1) {
                let report = gradcheck_suite(&cfg.model, s)?;
                for c in &report.cases {
                    println!(
                        "seed {s:>3}  {:<18} max rel error {:.3e}  ({} coords)",
                        c.case, c.report.max_rel_error, c.report.coords_checked
                    );
                }
                worst = worst.max(report.max_rel_error());
            }
            let ok = worst < GRADCHECK_TOLERANCE;
            println!(
                "max relative error {worst:.3e} ({} tolerance {GRADCHECK_TOLERANCE:e})",
                if ok { "within" } else { "EXCEEDS" }
            );
            if !ok {
                return Ok(ExitCode::from(EXIT_NUMERIC));
            }
        }
        Command::Oracle { spec, views, m, seed } => {
            let spec = load_spec(spec.as_deref())?;
            let subset = views.unwrap_or_else(|| (0..spec.views).collect());
            echo("spec", &spec.to_toml());
            let est = bayes_oracle(spec.views, &subset, m, seed, exec)?;
            println!(
                "visible views {subset:?} of {}: bayes accuracy {:.4} +/- {:.4} ({} draws)",
                spec.views, est.accuracy, est.std_error, est.samples
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
