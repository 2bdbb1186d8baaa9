use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dcl_cli::commands::{self, CliError, StudyScale, Suite, SweepAxis};
use dcl_cli::config::RunConfig;
use dcl_cli::presets::train_preset;
use dcl_core::losses::LossKind;

#[derive(Parser)]
#[command(name = "dcl", version, about = "Contrastive identifiability experiments")]
struct Cli {
    /// Worker threads for sweeps and presets.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a run directory.
    Train {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        /// `<scenario>-beta<β>-<loss>`, e.g. `box-simple-beta1-nce`.
        #[arg(long)]
        preset: Option<String>,
        /// Overrides both the training and the mixer seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate a finished run from its checkpoint.
    Eval { run: PathBuf },
    /// Train over a grid of one config axis.
    Sweep {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma separated axis values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "nce,ince,scl,nwj")]
        losses: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Run a verification suite.
    Oracle {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "oracle")]
        out: PathBuf,
        /// Use the published budget for the figure2 suite.
        #[arg(long)]
        full: bool,
    },
    /// Run a named experiment bundle.
    Reproduce {
        #[arg(long, value_enum)]
        preset: Bundle,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Published scale instead of desk scale.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    N,
    Sigma,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Lemma1,
    Figure2,
    Samplers,
    Gradcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum Bundle {
    #[value(name = "table1-desk")]
    Table1Desk,
    #[value(name = "table2-desk")]
    Table2Desk,
    Figure2,
}

fn base_config(config: Option<&Path>, preset: Option<&str>) -> Result<RunConfig, CliError> {
    match (config, preset) {
        (Some(path), _) => commands::load_config(path),
        (None, Some(name)) => train_preset(name).map_err(CliError::Config),
        (None, None) => Err(CliError::Config("either --config or --preset is required".into())),
    }
}

fn print_suite(report: &commands::SuiteReport) -> Result<(), CliError> {
    for line in &report.summary {
        println!("{line}");
    }
    if report.failures > 0 {
        return Err(CliError::Check(format!("{} check(s) failed", report.failures)));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = commands::thread_count(cli.threads);
    match cli.command {
        Command::Train { config, preset, seed, out } => {
            let mut cfg = base_config(config.as_deref(), preset.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.mixer_seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let outcome = commands::cmd_train(&cfg)?;
            println!("{}: mcc {:.4} r2 {:.4}", cfg.out_dir.display(), outcome.report.mcc_mean, outcome.report.r2_mean);
        }
        Command::Eval { run } => {
            let v = commands::cmd_eval(&run)?;
            println!("{}: mcc {:.4} r2 {:.4}", run.display(), v["mcc"].as_f64().unwrap_or(f64::NAN), v["r2_mean"].as_f64().unwrap_or(f64::NAN));
        }
        Command::Sweep { config, preset, axis, values, losses, seeds, out } => {
            let base = base_config(config.as_deref(), preset.as_deref())?;
            let losses = losses
                .iter()
                .map(|l| LossKind::parse(l).ok_or_else(|| CliError::Config(format!("--losses: unknown loss `{l}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            let axis = match axis {
                Axis::N => SweepAxis::N,
                Axis::Sigma => SweepAxis::Sigma,
            };
            print!("{}", commands::cmd_sweep(&base, axis, &values, &losses, &seeds, &out, threads)?);
        }
        Command::Oracle { suite, seed, out, full } => {
            let suite = match suite {
                SuiteArg::Lemma1 => Suite::Lemma1,
                SuiteArg::Figure2 => Suite::Figure2,
                SuiteArg::Samplers => Suite::Samplers,
                SuiteArg::Gradcheck => Suite::Gradcheck,
            };
            let scale = if full { StudyScale::full() } else { StudyScale::desk() };
            print_suite(&commands::cmd_oracle(suite, seed, &out, scale, threads)?)?;
        }
        Command::Reproduce { preset, seed, out, full } => match preset {
            Bundle::Table1Desk | Bundle::Table2Desk => {
                let constant = matches!(preset, Bundle::Table2Desk);
                let default = if constant { "table2" } else { "table1" };
                let out = out.unwrap_or_else(|| PathBuf::from(default));
                print!("{}", commands::cmd_table(constant, full, seed, &out, threads)?);
            }
            Bundle::Figure2 => {
                let scale = if full { StudyScale::full() } else { StudyScale::desk() };
                let out = out.unwrap_or_else(|| PathBuf::from("figure2"));
                print_suite(&commands::cmd_oracle(Suite::Figure2, seed, &out, scale, threads)?)?;
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    // Training allocates and frees the same large buffers every step; keep
    // them in the heap instead of round-tripping through mmap.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 512 << 20);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
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
