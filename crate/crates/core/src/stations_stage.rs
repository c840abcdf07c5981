//! Stage one: station placement.
//!
//! A genome is an ordered list of `K` planar station positions. Fitness is the
//! coverage total; mutation moves a single station by a normal offset;
//! crossover exchanges stations slot by slot.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;
use thiserror::Error;

use crate::coverage::{self, CoverageParams, CoverageReport};
use crate::evolve::{self, EvolutionHistory, EvolveError, GaConfig, GaRng, Problem, Sense, INIT_DOMAIN};
use crate::geomodel::{DemandGrid, GeneratorPoint, PlanarPoint, Region};

/// Stations this close to a district boundary still count as inside.
pub const SNAP_TOLERANCE_M: f64 = 50.0;
/// Offsets redrawn before a mutated station is clamped to the boundary.
pub const MAX_MUTATION_TRIES: usize = 16;
/// Residents per station used by [`suggest_station_count`].
pub const RESIDENTS_PER_STATION: f64 = 150_000.0;

#[derive(Debug, Error, PartialEq)]
pub enum StationStageError {
    #[error("demand grid has no populated cells")]
    EmptyGrid,
    #[error("invalid station stage configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Evolve(#[from] EvolveError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationGenome {
    pub stations: Vec<PlanarPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationStageConfig {
    pub station_count: usize,
    /// Standard deviation of the mutation offset, meters.
    pub mutation_sigma: f64,
    pub ga: GaConfig,
    pub coverage: CoverageParams,
}

impl StationStageConfig {
    pub fn validate(&self) -> Result<(), StationStageError> {
        if self.station_count < 1 {
            return Err(StationStageError::InvalidConfig("station_count must be >= 1".into()));
        }
        if !(self.mutation_sigma.is_finite() && self.mutation_sigma > 0.0) {
            return Err(StationStageError::InvalidConfig(format!(
                "mutation_sigma must be positive, got {}",
                self.mutation_sigma
            )));
        }
        self.ga.validate()?;
        Ok(())
    }
}

/// Rule-of-thumb station count, one station per 150 000 residents (at least
/// one). Not derived from any fitted relationship; pass an explicit count
/// when one is known.
pub fn suggest_station_count(total_population: f64) -> usize {
    ((total_population / RESIDENTS_PER_STATION).round() as usize).max(1)
}

/// Stations drawn cell by cell with probability proportional to cell
/// population, jittered uniformly within the cell.
pub fn init_population(
    grid: &DemandGrid,
    region: &Region,
    station_count: usize,
    population_size: usize,
    rng: &mut GaRng,
) -> Result<Vec<StationGenome>, StationStageError> {
    let weights =
        WeightedIndex::new(grid.cells.iter().map(|c| c.population)).map_err(|_| StationStageError::EmptyGrid)?;
    let half = grid.cell_size / 2.0;
    Ok((0..population_size)
        .map(|_| StationGenome {
            stations: (0..station_count)
                .map(|_| {
                    let c = grid.cells[weights.sample(rng)].centroid;
                    let p = PlanarPoint::new(
                        c.x + rng.random_range(-half..=half),
                        c.y + rng.random_range(-half..=half),
                    );
                    if region.admits(p, SNAP_TOLERANCE_M) {
                        p
                    } else {
                        region.clamp_inside(p)
                    }
                })
                .collect(),
        })
        .collect())
}

/// Moves one uniformly chosen station by independent normal offsets in x and
/// y. Offsets landing outside every district are redrawn; after
/// [`MAX_MUTATION_TRIES`] the last attempt is clamped to the nearest boundary.
pub fn mutate(genome: &StationGenome, mutation_sigma: f64, region: &Region, rng: &mut GaRng) -> StationGenome {
    let mut out = genome.clone();
    if out.stations.is_empty() {
        return out;
    }
    let normal = Normal::new(0.0, mutation_sigma).expect("mutation sigma must be finite and nonnegative");
    let i = rng.random_range(0..out.stations.len());
    let from = out.stations[i];
    let mut moved = from;
    for _ in 0..MAX_MUTATION_TRIES {
        moved = PlanarPoint::new(from.x + normal.sample(rng), from.y + normal.sample(rng));
        if region.contains(moved) {
            out.stations[i] = moved;
            return out;
        }
    }
    out.stations[i] = region.clamp_inside(moved);
    out
}

/// Uniform crossover: each slot pair is swapped between the children with
/// probability 1/2.
pub fn crossover(a: &StationGenome, b: &StationGenome, rng: &mut GaRng) -> (StationGenome, StationGenome) {
    assert_eq!(a.stations.len(), b.stations.len(), "parents differ in station count");
    let (mut c1, mut c2) = (a.clone(), b.clone());
    for i in 0..a.stations.len() {
        if rng.random::<bool>() {
            std::mem::swap(&mut c1.stations[i], &mut c2.stations[i]);
        }
    }
    (c1, c2)
}

/// Stage-one problem definition for the GA engine.
pub struct StationProblem<'a> {
    pub grid: &'a DemandGrid,
    pub generators: &'a [GeneratorPoint],
    pub region: &'a Region,
    pub coverage: CoverageParams,
    pub station_count: usize,
    pub mutation_sigma: f64,
}

impl StationProblem<'_> {
    pub fn check(&self, genome: &StationGenome) -> Result<(), String> {
        if genome.stations.len() != self.station_count {
            return Err(format!(
                "expected {} stations, found {}",
                self.station_count,
                genome.stations.len()
            ));
        }
        for (i, &p) in genome.stations.iter().enumerate() {
            if !self.region.admits(p, SNAP_TOLERANCE_M) {
                return Err(format!("station {i} at ({}, {}) lies outside every district", p.x, p.y));
            }
        }
        Ok(())
    }
}

impl Problem for StationProblem<'_> {
    type Genome = StationGenome;

    fn fitness(&self, genome: &StationGenome) -> f64 {
        coverage::evaluate(&genome.stations, self.grid, self.generators, &self.coverage).total
    }

    fn crossover(&self, a: &StationGenome, b: &StationGenome, rng: &mut GaRng) -> (StationGenome, StationGenome) {
        crossover(a, b, rng)
    }

    fn mutate(&self, genome: &StationGenome, rng: &mut GaRng) -> StationGenome {
        mutate(genome, self.mutation_sigma, self.region, rng)
    }

    fn repair(&self, mut genome: StationGenome) -> StationGenome {
        for p in &mut genome.stations {
            if !self.region.admits(*p, SNAP_TOLERANCE_M) {
                *p = self.region.clamp_inside(*p);
            }
        }
        genome
    }

    fn validate(&self, genome: &StationGenome) -> Result<(), String> {
        self.check(genome)
    }
}

#[derive(Debug, Clone)]
pub struct StationStageResult {
    pub best: StationGenome,
    /// Coverage of `best`, carrying the serviced counts s_i.
    pub report: CoverageReport,
    pub history: EvolutionHistory,
}

pub fn optimize_stations(
    grid: &DemandGrid,
    generators: &[GeneratorPoint],
    region: &Region,
    config: &StationStageConfig,
) -> Result<StationStageResult, StationStageError> {
    optimize_stations_observed(grid, generators, region, config, |_, _, _| {})
}

/// Runs stage one; `observer` sees every generation's population.
pub fn optimize_stations_observed<F>(
    grid: &DemandGrid,
    generators: &[GeneratorPoint],
    region: &Region,
    config: &StationStageConfig,
    observer: F,
) -> Result<StationStageResult, StationStageError>
where
    F: FnMut(usize, &[StationGenome], &[f64]),
{
    config.validate()?;
    let ga = GaConfig {
        sense: Sense::Maximize,
        ..config.ga
    };
    let problem = StationProblem {
        grid,
        generators,
        region,
        coverage: config.coverage,
        station_count: config.station_count,
        mutation_sigma: config.mutation_sigma,
    };
    let mut rng = evolve::substream(ga.rng_seed, INIT_DOMAIN, 0);
    let initial = init_population(grid, region, config.station_count, ga.population_size, &mut rng)?;
    let out = evolve::run_observed(&problem, initial, &ga, observer)?;
    let report = coverage::evaluate(&out.best.stations, grid, generators, &config.coverage);
    Ok(StationStageResult {
        best: out.best,
        report,
        history: out.history,
    })
}
