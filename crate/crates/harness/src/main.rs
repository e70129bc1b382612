use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scrapl_core::scattering::Scattering;
use scrapl_harness::ablate::ablate;
use scrapl_harness::benchmark::{benchmark, write_bench_csv};
use scrapl_harness::config::ExperimentConfig;
use scrapl_harness::dataset::{self, Split};
use scrapl_harness::eval::eval_checkpoint;
use scrapl_harness::experiment::{build_problem, importance, run_experiment, write_importance};
use scrapl_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "scrapl", version, about = "Sound-matching experiments with path-sampled scattering losses")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, global = true, env = "SCRAPL_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset into the output directory.
    GenData,
    /// Compute the path distribution at the initial weights.
    ThetaIs {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train one encoder.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Path distribution written by `theta-is`.
        #[arg(long)]
        pi: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write WAV renders of targets and reconstructions.
        #[arg(long)]
        render: bool,
    },
    /// Time one optimization step per loss.
    Benchmark {
        /// Dataset to draw examples from; a fresh one is rendered otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the cumulative ablation over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write the path table of the configured filterbank.
    DumpPaths,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    let cfg = load_config(c)?;
    let out = c.out.as_path();
    match cli.command {
        Command::GenData => {
            let ds = dataset::generate(&cfg, cfg.seed)?;
            dataset::save(&ds, out)?;
            let counts = [Split::Train, Split::Val, Split::Test].map(|s| ds.ids(s).len());
            println!("wrote {} examples to {} (train {}, val {}, test {})", ds.examples.len(), out.display(), counts[0], counts[1], counts[2]);
        }
        Command::ThetaIs { data } => {
            let ds = dataset::load(&data, &cfg)?;
            let problem = build_problem(&cfg, &ds)?;
            let w0 = problem.encoder.init_weights(cfg.seed);
            let (m, pi) = importance(&cfg, &problem, &ds, &w0, cfg.seed)?;
            write_importance(out, &problem, &m, &pi)?;
            for w in &pi.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote importance for {} paths to {}", problem.num_paths(), out.display());
        }
        Command::Train { data, pi } => {
            let ds = dataset::load(&data, &cfg)?;
            let mut cfg = cfg;
            if pi.is_some() {
                cfg.train.pi_file = pi;
            }
            let r = run_experiment(&cfg, &ds, cfg.seed, Some(out))?;
            let s = &r.summary;
            println!(
                "steps {}, convergence {}, final val θ L1 {:.1}‰",
                s.steps_run,
                s.convergence_step.map_or("none".into(), |k| k.to_string()),
                s.final_val_l1.unwrap_or(f64::NAN)
            );
        }
        Command::Eval { data, checkpoint, split, render } => {
            let ds = dataset::load(&data, &cfg)?;
            let split = Split::parse(&split).ok_or_else(|| HarnessError::Config(format!("unknown split {split}")))?;
            let (rows, m) = eval_checkpoint(&cfg, &ds, &checkpoint, split, Some(out), render)?;
            println!("{} examples, mean θ L1 {:.1}‰", rows.len(), m.mean_l1);
        }
        Command::Benchmark { data } => {
            let ds = match data {
                Some(d) => dataset::load(&d, &cfg)?,
                None => {
                    let mut small = cfg.clone();
                    small.data.n = small.benchmark.batch_size.max(4);
                    small.data.split = [1.0, 0.0, 0.0];
                    dataset::generate(&small, cfg.seed)?
                }
            };
            let problem = build_problem(&cfg, &ds)?;
            let ids: Vec<usize> = (0..ds.examples.len().min(4)).collect();
            let report = benchmark(&problem, &ids, &cfg.benchmark, cfg.seed)?;
            fs::create_dir_all(out)?;
            write_bench_csv(BufWriter::new(fs::File::create(out.join("benchmark.csv"))?), &report)?;
            fs::write(out.join("benchmark.json"), serde_json::to_string_pretty(&report)?)?;
            for r in &report.rows {
                println!("{:?}: median {:.2} ms, IQR {:.2} ms", r.loss, r.median_ms, r.iqr_ms);
            }
        }
        Command::Ablate { data } => {
            let ds = dataset::load(&data, &cfg)?;
            let (_, summaries) = ablate(&cfg, &ds, Some(out))?;
            for s in &summaries {
                println!(
                    "{:<10} converged {}/{}, median steps {}",
                    s.row.label(),
                    s.converged,
                    s.runs,
                    s.median_convergence.map_or("none".into(), |v| v.to_string())
                );
            }
        }
        Command::DumpPaths => {
            let setup = cfg.setup()?;
            let s = Scattering::new(&setup.spec)?;
            fs::create_dir_all(out)?;
            s.table.write_csv(BufWriter::new(fs::File::create(out.join("paths.csv"))?))?;
            println!("wrote {} paths to {}", s.num_paths(), Path::new(out).join("paths.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
