use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sst_cli::commands::{self, Context};
use sst_cli::config::RunConfig;
use sst_core::voxelizer::Cell;
use sst_core::{NumericMode, Result, SstError};

#[derive(Debug, Parser)]
#[command(name = "sst", version, about = "Sparse single-stride transformer on LiDAR pillars")]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Point cloud (SSTP binary or x,y,z,intensity CSV). A synthetic scene is used when absent.
    #[arg(long, global = true, value_name = "PATH")]
    points: Option<PathBuf>,
    /// SSTW weight file. Seeded random weights are used when absent.
    #[arg(long, global = true, value_name = "PATH")]
    weights: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides run.workers.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u64).range(1..=1024))]
    workers: Option<u64>,
    /// Run in float64.
    #[arg(long, global = true)]
    f64: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Token and region statistics of a point cloud.
    Voxelize,
    /// Full pass; writes detections CSV.
    Forward {
        /// Also dump the dense map, head outputs and tokens as SSTW.
        #[arg(long, value_name = "PATH")]
        dense_out: Option<PathBuf>,
    },
    /// Finite-difference check of the attention module and backbone gradients.
    Gradcheck,
    /// Measured MAC counters next to the analytic cost model.
    Flops,
    /// Attention weights of one query cell in one module, as CSV.
    AttnDump {
        /// Query cell as IX,IY.
        #[arg(long, value_name = "IX,IY", value_parser = parse_cell)]
        query: Cell,
        /// Module index: block * 2, plus 1 for the shifted half.
        #[arg(long, default_value_t = 0)]
        module: usize,
    },
    /// Timing sweep over synthetic scenes of increasing occupancy.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.02, 0.045, 0.09])]
        sparsity: Vec<f64>,
    },
    /// Runs every property suite; exits 2 on failure.
    Selftest,
    /// Writes seeded random weights to --out.
    InitWeights,
}

fn parse_cell(s: &str) -> std::result::Result<Cell, String> {
    let (x, y) = s.split_once(',').ok_or("expected IX,IY")?;
    let ix = x.trim().parse().map_err(|_| format!("bad column {x:?}"))?;
    let iy = y.trim().parse().map_err(|_| format!("bad row {y:?}"))?;
    Ok(Cell::new(ix, iy))
}

fn context(cli: &Cli) -> Result<Context> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::parse("")?,
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    if let Some(w) = cli.workers {
        config.workers = w as usize;
    }
    if cli.f64 {
        config.numeric = NumericMode::F64;
    }
    Ok(Context { config, points: cli.points.clone(), weights: cli.weights.clone(), out: cli.out.clone() })
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = context(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.config.workers)
        .build()
        .map_err(|e| SstError::Config(format!("cannot start {} workers: {e}", ctx.config.workers)))?;
    pool.install(|| match &cli.command {
        Command::Voxelize => commands::voxelize(&ctx),
        Command::Forward { dense_out } => commands::forward(&ctx, dense_out.as_deref()),
        Command::Gradcheck => commands::gradcheck(&ctx),
        Command::Flops => commands::flops(&ctx),
        Command::AttnDump { query, module } => commands::attn_dump(&ctx, *query, *module),
        Command::Bench { sparsity } => commands::bench(&ctx, sparsity),
        Command::Selftest => commands::selftest(&ctx),
        Command::InitWeights => commands::init_weights(&ctx),
    })
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
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
