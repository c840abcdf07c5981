use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metro_core::coverage::CoverageMode;
use metro_core::pipeline::{self, PipelineError, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "metro",
    version,
    about = "Metro station placement and line layout by genetic algorithm"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rasterize the districts and write grid.csv plus a summary.
    Grid,
    /// Stage one only: place stations.
    OptimizeStations,
    /// Stage two only: lay out lines over an existing stations file.
    OptimizeLines {
        /// Stations GeoJSON; defaults to stations.geojson in the output directory.
        #[arg(long, value_name = "FILE")]
        stations: Option<PathBuf>,
    },
    /// Both stages and every artifact.
    Run,
    /// Check a stations and a lines artifact.
    Validate { stations: PathBuf, lines: PathBuf },
}

/// Flags override values read from `--config`.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "FILE")]
    boundaries: Option<PathBuf>,
    #[arg(long, global = true, value_name = "FILE")]
    densities: Option<PathBuf>,
    #[arg(long, global = true, value_name = "FILE")]
    generators: Option<PathBuf>,
    #[arg(long, global = true, value_name = "M")]
    cell_size: Option<f64>,
    #[arg(long, global = true, value_name = "M")]
    sigma: Option<f64>,
    #[arg(long, global = true)]
    coverage_mode: Option<CoverageMode>,
    #[arg(long, global = true)]
    station_count: Option<usize>,
    #[arg(long, global = true)]
    line_count: Option<usize>,
    #[arg(long, global = true, value_name = "M")]
    mutation_sigma: Option<f64>,
    #[arg(long, global = true, value_name = "M")]
    transfer_penalty_m: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    origin_lat: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    origin_lon: Option<f64>,
    #[arg(long, global = true)]
    stage1_population: Option<usize>,
    #[arg(long, global = true)]
    stage1_generations: Option<usize>,
    #[arg(long, global = true)]
    stage1_crossover_rate: Option<f64>,
    #[arg(long, global = true)]
    stage1_mutation_rate: Option<f64>,
    #[arg(long, global = true)]
    stage1_elite_count: Option<usize>,
    #[arg(long, global = true)]
    stage2_population: Option<usize>,
    #[arg(long, global = true)]
    stage2_generations: Option<usize>,
    #[arg(long, global = true)]
    stage2_crossover_rate: Option<f64>,
    #[arg(long, global = true)]
    stage2_mutation_rate: Option<f64>,
    #[arg(long, global = true)]
    stage2_elite_count: Option<usize>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        fn s<T: ToString>(v: &Option<T>) -> Option<String> {
            v.as_ref().map(T::to_string)
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        [
            ("seed", s(&self.seed)),
            ("out", path(&self.out)),
            ("boundaries", path(&self.boundaries)),
            ("densities", path(&self.densities)),
            ("generators", path(&self.generators)),
            ("cell_size", s(&self.cell_size)),
            ("sigma", s(&self.sigma)),
            ("coverage_mode", s(&self.coverage_mode)),
            ("station_count", s(&self.station_count)),
            ("line_count", s(&self.line_count)),
            ("mutation_sigma", s(&self.mutation_sigma)),
            ("transfer_penalty_m", s(&self.transfer_penalty_m)),
            ("origin_lat", s(&self.origin_lat)),
            ("origin_lon", s(&self.origin_lon)),
            ("stage1_population", s(&self.stage1_population)),
            ("stage1_generations", s(&self.stage1_generations)),
            ("stage1_crossover_rate", s(&self.stage1_crossover_rate)),
            ("stage1_mutation_rate", s(&self.stage1_mutation_rate)),
            ("stage1_elite_count", s(&self.stage1_elite_count)),
            ("stage2_population", s(&self.stage2_population)),
            ("stage2_generations", s(&self.stage2_generations)),
            ("stage2_crossover_rate", s(&self.stage2_crossover_rate)),
            ("stage2_mutation_rate", s(&self.stage2_mutation_rate)),
            ("stage2_elite_count", s(&self.stage2_elite_count)),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    fn config(&self) -> Result<RunConfig, PipelineError> {
        let cwd = Path::new("");
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::parse("", cwd)?,
        };
        for (k, v) in self.pairs() {
            cfg.set(k, &v, cwd)?;
        }
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    if let Command::Validate { stations, lines } = &cli.command {
        pipeline::validate_artifacts(stations, lines)?;
        println!("ok: all line invariants hold");
        return Ok(());
    }
    let mut cfg = cli.overrides.config()?;
    match cli.command {
        Command::Grid => print!("{}", pipeline::cmd_grid(&cfg)?),
        Command::OptimizeStations => {
            let res = pipeline::cmd_optimize_stations(&cfg)?;
            println!("stations = {}", res.best.stations.len());
            println!("coverage = {}", res.report.total);
        }
        Command::OptimizeLines { stations } => {
            if let Some(p) = stations {
                cfg.set("stations", &p.display().to_string(), Path::new(""))?;
            }
            let res = pipeline::cmd_optimize_lines(&cfg)?;
            println!("lines = {}", res.best.lines.len());
            println!("line_fitness = {}", res.fitness.value);
        }
        Command::Run => {
            let res = pipeline::cmd_run(&cfg)?;
            println!("stations = {}", res.stations.best.stations.len());
            println!("coverage = {}", res.stations.report.total);
            println!("lines = {}", res.lines.best.lines.len());
            println!("line_fitness = {}", res.lines.fitness.value);
        }
        Command::Validate { .. } => unreachable!(),
    }
    println!("out = {}", cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let PipelineError::Violations(list) = &e {
                for v in list {
                    eprintln!("  - {v}");
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}
