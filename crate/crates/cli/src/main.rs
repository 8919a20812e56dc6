use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cellmech::model::{MeshSource, SurfaceUnit};
use cellmech_cli::commands::{self, CliError};
use cellmech_cli::config::{parse_shape, RunConfig};

#[derive(Parser)]
#[command(name = "cellmech", version, about = "FAK/RhoA signalling coupled to cell mechanics")]
struct Cli {
    /// INI configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// worker threads (defaults to all cores)
    #[arg(long, global = true, env = "CELLMECH_THREADS")]
    threads: Option<usize>,
    /// output directory, overrides [output] dir
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// parameter preset, overrides [params] preset
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Unit {
    /// molecules per μm²
    Count,
    /// μmol/dm²
    Micromol,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write snapshots and a time series
    Run,
    /// Run the E × C₁ × E_c-mode grid and write a summary table
    Sweep,
    /// Percentage change of the steady means under parameter perturbations
    Sensitivity,
    /// Convergence study against a manufactured solution on the unit ball
    Benchmark {
        /// refinement levels, overrides [sweep] levels
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
    },
    /// Convert a surface concentration between μmol/dm² and #/μm²
    ConvertUnits {
        value: f64,
        /// target unit
        #[arg(long, value_enum)]
        to: Unit,
    },
    /// Print size, geometry and tagged regions of a mesh
    MeshInfo {
        /// dome, ball, ball:<level> or a .msh path; defaults to the configured mesh
        shape: Option<String>,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, cli.preset.as_deref())?,
        None => RunConfig::from_ini("", cli.preset.as_deref())?,
    };
    if let Some(dir) = cli.output {
        cfg.output.dir = dir;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set up {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Run => {
            let traj = commands::cmd_run(&cfg)?;
            println!("steady: {}", traj.steady());
        }
        Command::Sweep => {
            let rows = commands::cmd_sweep(&cfg)?;
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            println!("{} cells, {failed} failed", rows.len());
        }
        Command::Sensitivity => {
            let rows = commands::cmd_sensitivity(&cfg)?;
            println!("{} perturbed runs", rows.len());
        }
        Command::Benchmark { levels } => {
            if let Some(l) = levels {
                cfg.sweep.levels = l;
            }
            let report = commands::cmd_benchmark(&cfg)?;
            print!("{}", report.table());
        }
        Command::ConvertUnits { value, to } => {
            let to = match to {
                Unit::Count => SurfaceUnit::CountPerUm2,
                Unit::Micromol => SurfaceUnit::MicromolPerDm2,
            };
            println!("{}", commands::convert_units(value, to));
        }
        Command::MeshInfo { shape } => {
            let source: MeshSource = match shape {
                Some(s) => parse_shape(&s).map_err(CliError::Usage)?,
                None => cfg.scenario.mesh.clone(),
            };
            print!("{}", commands::mesh_info(&commands::build_mesh(&source)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
