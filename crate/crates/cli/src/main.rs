use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prefopt_cli::{
    cmd_analyze, cmd_gen, cmd_report, cmd_sweep, cmd_train, exit_code, Overrides, EXIT_RUNTIME,
};
use prefopt_core::Result;

#[derive(Parser)]
#[command(
    name = "prefopt",
    version,
    about = "Iterative preference-optimization lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory; overrides the manifest's `out_dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Root seed; overrides the manifest's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            out_dir: self.out_dir.clone(),
            workers: self.workers,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate one round of preference pairs from a checkpoint.
    Gen {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run pretraining and all preference-optimization iterations.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Continue from the last completed iteration.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run every configuration of a hyperparameter grid.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Correlation, similarity and reward-trend reports for one run.
    Analyze {
        run_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score and length per iteration across runs.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Gen { manifest, common } => {
            let path = cmd_gen(&manifest, &common.overrides())?;
            println!("wrote {}", path.display());
        }
        Command::Train {
            manifest,
            resume,
            common,
        } => {
            let s = cmd_train(&manifest, &common.overrides(), resume, &mut io::stdout())?;
            println!(
                "done: {} iterations, manifest {}",
                s.iterations.len(),
                s.content_hash
            );
        }
        Command::Sweep { grid, common } => {
            let (out, report) = cmd_sweep(&grid, &common.overrides())?;
            for r in &report.rows {
                println!(
                    "{:<28} score {:.4} length {:.2} agreement {:.3}",
                    r.label, r.score, r.length, r.agreement_rate
                );
            }
            for f in &report.failures {
                eprintln!("failed {}: {}", f.label, f.error);
            }
            println!("wrote {}", out.join("sweep.json").display());
            if !report.failures.is_empty() {
                return Ok(EXIT_RUNTIME);
            }
        }
        Command::Analyze { run_dir, out_dir } => {
            let r = cmd_analyze(&run_dir, &out_dir)?;
            println!(
                "rho(length, logp) = {:.4} (n {}), rho(s_ref, len_diff) = {:.4} (n {}), s_ref weaker: {}",
                r.length_logprob.rho, r.length_logprob.n, r.sref_lengthdiff.rho, r.sref_lengthdiff.n, r.finding.sref_weaker
            );
            for s in &r.similarity {
                println!(
                    "{:<13} similarity {:.3} logp_norm chosen {:.3} rejected {:.3}",
                    s.source, s.similarity, s.chosen_logp_norm, s.rejected_logp_norm
                );
            }
        }
        Command::Report { run_dirs, out_dir } => {
            let rows = cmd_report(&run_dirs, &out_dir)?;
            println!(
                "wrote {} rows to {}",
                rows.len(),
                out_dir.join("comparison.csv").display()
            );
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
