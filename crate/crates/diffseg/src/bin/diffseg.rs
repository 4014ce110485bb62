use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffseg::dataset::{self, Split, Splits};
use diffseg::sweep::{self, SweepKind, SweepOptions};
use diffseg::{eval, fit, predict, report, Error, ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "diffseg", version, about = "Diffusion-based class-agnostic segmentation")]
struct Cli {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and sampling seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for `eval`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Datagen {
        #[arg(long, default_value_t = 4000)]
        train: u64,
        #[arg(long, default_value_t = 200)]
        val: u64,
        #[arg(long, default_value_t = 200)]
        test: u64,
    },
    /// Train a network; the log and checkpoints go to the output directory.
    Train {
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Segment every PNG image in a directory.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value_t = 1)]
        num_samples: usize,
    },
    /// Score predicted label maps against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
    /// Run a sweep and write `{out}/{kind}.csv`.
    Sweep {
        kind: SweepKind,
        /// Network for the timesteps, guidance and best_of_n sweeps.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train grid points whose checkpoints are missing.
        #[arg(long)]
        train: bool,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Grid values, comma separated; defaults to the standard grid.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
        /// Evaluate at most this many images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Check the directional experiment from sweep tables in the output directory.
    Report,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    gw: f64,
    /// Use posterior means instead of ancestral noise.
    #[arg(long)]
    deterministic: bool,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}; expected train, val or test")),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.sampler.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cfg.out_dir.clone();
    match cli.command {
        Command::Datagen { train, val, test } => {
            let dir = cli.out.clone().unwrap_or_else(|| cfg.dataset.clone());
            dataset::generate(&dir, &cfg.scene, &Splits::with_counts(train, val, test))?;
            println!("wrote {} scenes to {}", train + val + test, dir.display());
        }
        Command::Train { resume } => {
            let summary = fit::fit(&cfg, &out, resume, cli.verbose)?;
            if let Some(last) = summary.rows.last() {
                println!("iter {} loss {:.5} ari {:.4} iou {:.4}", last.iter, last.loss, last.ari, last.iou);
            }
            println!("checkpoint {}", summary.checkpoint.display());
        }
        Command::Sample { checkpoint, images, sampler, num_samples } => {
            let mut sc = cfg.sampler;
            sc.steps = sampler.steps;
            sc.guidance_weight = sampler.gw;
            sc.stochastic = !sampler.deterministic;
            let written = predict::sample_dir(&checkpoint, &images, &out, &sc, num_samples)?;
            println!("wrote {} label maps to {}", written.len(), out.display());
        }
        Command::Eval { gt, pred } => {
            let report = eval::evaluate_dirs(&gt, &pred)?;
            let path = match &cli.out {
                Some(p) if p.extension().is_some_and(|e| e == "csv") => p.clone(),
                Some(p) => {
                    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
                    p.join("eval.csv")
                }
                None => PathBuf::from("eval.csv"),
            };
            eval::write_report(&path, &report)?;
            println!("mean ari {:.6} iou {:.6} over {} images -> {}", report.mean_ari, report.mean_iou, report.rows.len(), path.display());
        }
        Command::Sweep { kind, checkpoint, train, seeds, values, split, limit } => {
            let opts = SweepOptions { kind, base: cfg, out: out.clone(), checkpoint, train, seeds, values, split, limit, verbose: cli.verbose };
            let rows = sweep::run(&opts)?;
            println!("{},ari,iou", kind.column());
            for r in rows {
                println!("{},{:.4},{:.4}", r.value, r.ari, r.iou);
            }
        }
        Command::Report => {
            let mut all_pass = true;
            let mut checks = report::directional(&out)?;
            checks.push(report::best_of_n(&out)?);
            for c in checks {
                all_pass &= c.pass;
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if !all_pass {
                return Err(Error::Config("directional checks failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
