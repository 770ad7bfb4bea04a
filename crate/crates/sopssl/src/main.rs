use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sopssl::commands::{self, SweepKind};
use sopssl::{exit, CliError, CliResult, Overrides, RunConfig};
use sopssl_core::model::GrlSpec;
use sopssl_core::train::Mode;

#[derive(Parser)]
#[command(
    name = "sopssl",
    version,
    about = "Adversarial entropy SSL on second-order pooled features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Training seed (overrides `train.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Data generation seed (overrides `data.seed`).
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
}

impl Common {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        cfg.apply(&Overrides {
            out_dir: self.out.clone(),
            seed: self.seed,
            data_seed: self.data_seed,
            mode: self.mode,
            lambda: self.lambda,
            iterations: self.iterations,
        });
        Ok(cfg)
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (sup, sup_cov, ent_cov, ours_no_cov, ours)"))
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the output directory.
    Generate(Common),
    /// Train one model; writes metrics.csv, best/final checkpoints and summary.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Report validation and test accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run a lambda or label-rate sweep into sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: SweepKind,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare every parameter gradient with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Replace the gradient reversal with the identity.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Time Newton-Schulz against the eigendecomposition square root.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Matrix sizes (overrides `bench.d_list`).
        #[arg(long, value_delimiter = ',')]
        d: Option<Vec<usize>>,
    },
    /// Write pooled test-split features of a checkpoint to features.csv.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn to_stdout<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = common.resolve()?;
            let manifest = commands::generate_cmd(&cfg)?;
            to_stdout(&manifest.counts);
        }
        Command::Train { common, data } => {
            let cfg = common.resolve()?;
            to_stdout(&commands::train_cmd(&cfg, data.as_deref())?);
        }
        Command::Eval {
            common,
            checkpoint,
            data,
        } => {
            let cfg = common.resolve()?;
            to_stdout(&commands::eval_cmd(&cfg, &checkpoint, data.as_deref())?);
        }
        Command::Sweep { common, kind, data } => {
            let cfg = common.resolve()?;
            let rows = commands::sweep_cmd(&cfg, kind, data.as_deref())?;
            println!(
                "{rows} rows -> {}",
                cfg.out_dir.join(sopssl::artifacts::SWEEP_CSV).display()
            );
        }
        Command::Gradcheck { common, inject_fault } => {
            let cfg = common.resolve()?;
            let reversal = if inject_fault {
                GrlSpec { backward_factor: 1.0 }
            } else {
                GrlSpec::default()
            };
            let rows = commands::gradcheck_cmd(&cfg, reversal)?;
            let tol = cfg.gradcheck.tolerance;
            let mut worst: f64 = 0.0;
            for r in &rows {
                let flag = if r.max_rel_err <= tol { "ok" } else { "FAIL" };
                println!(
                    "{:<16} {:<18} n={:<5} max={:.3e} mean={:.3e} {flag}",
                    r.name, r.group, r.count, r.max_rel_err, r.mean_rel_err
                );
                worst = worst.max(r.max_rel_err);
            }
            if worst.is_nan() || worst > tol {
                return Err(CliError::CheckFailed(format!(
                    "max relative error {worst:.3e} exceeds {tol:.0e}"
                )));
            }
            println!("gradcheck passed: max relative error {worst:.3e}");
        }
        Command::Bench { common, d } => {
            let mut cfg = common.resolve()?;
            if let Some(d) = d {
                cfg.bench.d_list = d;
            }
            for r in commands::bench_cmd(&cfg)? {
                println!(
                    "d={:<3} ns={:>10.2}us jacobi={:>10.2}us err(N={})={:.3e} err(N=1)={:.3e}",
                    r.d, r.ns_us, r.jacobi_us, r.iterations, r.rel_err, r.rel_err_n1
                );
            }
        }
        Command::ExportFeatures {
            common,
            checkpoint,
            data,
        } => {
            let cfg = common.resolve()?;
            let (rows, m) = commands::export_features_cmd(&cfg, &checkpoint, data.as_deref())?;
            println!("{rows} rows x {} columns", m + 1);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
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
