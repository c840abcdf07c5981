//! End-to-end driver: configuration, input loading, both stages and the
//! on-disk artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use thiserror::Error;

use crate::coverage::{self, CoverageError, CoverageMode, CoverageParams, DEFAULT_SIGMA};
use crate::evolve::{GaConfig, Sense};
use crate::geomodel::{
    load_generators, load_region, project, rasterize, unproject, DemandGrid, GeneratorPoint, GeoError, GeoPoint,
    PlanarPoint, Region,
};
use crate::lines_stage::{self, LineGenome, LineStageConfig, LineStageError, LineStageResult, DEFAULT_LINE_COUNT};
use crate::netgraph::LineNetwork;
use crate::stations_stage::{
    self, suggest_station_count, StationGenome, StationStageConfig, StationStageError, StationStageResult,
};

pub const STATIONS_FILE: &str = "stations.geojson";
pub const LINES_FILE: &str = "lines.geojson";
pub const HISTORY_STAGE1_FILE: &str = "history_stage1.csv";
pub const HISTORY_STAGE2_FILE: &str = "history_stage2.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const GRID_FILE: &str = "grid.csv";
pub const GRID_SUMMARY_FILE: &str = "grid_summary.txt";

pub const DEFAULT_CELL_SIZE_M: f64 = 500.0;
pub const DEFAULT_MUTATION_SIGMA_M: f64 = 1000.0;
/// Stage two runs with `seed ^ STAGE2_SEED_SALT` so its random streams do
/// not mirror stage one's.
pub const STAGE2_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Manifest keys with this prefix report results and are skipped on load.
const RESULT_PREFIX: &str = "result.";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Coverage(#[from] CoverageError),
    #[error("{}: {message}", path.display())]
    Artifact { path: PathBuf, message: String },
    #[error("station stage failed: {0}")]
    Stations(#[from] StationStageError),
    #[error("line stage failed: {0}")]
    Lines(#[from] LineStageError),
    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{} invariant violation(s)", .0.len())]
    Violations(Vec<String>),
}

impl PipelineError {
    /// 2 for bad input, 3 for a failed stage or write, 4 for violated
    /// invariants.
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Geo(_)
            | PipelineError::Coverage(_)
            | PipelineError::Artifact { .. } => 2,
            PipelineError::Stations(_) | PipelineError::Lines(_) | PipelineError::Write { .. } => 3,
            PipelineError::Violations(_) => 4,
        }
    }
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

/// GA knobs for one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageGa {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub elite_count: usize,
}

impl Default for StageGa {
    fn default() -> Self {
        let g = GaConfig::default();
        StageGa {
            population: g.population_size,
            generations: g.generations,
            crossover_rate: g.crossover_rate,
            mutation_rate: g.mutation_rate,
            elite_count: g.elite_count,
        }
    }
}

impl StageGa {
    fn ga(&self, seed: u64, sense: Sense) -> GaConfig {
        GaConfig {
            population_size: self.population,
            generations: self.generations,
            crossover_rate: self.crossover_rate,
            mutation_rate: self.mutation_rate,
            elite_count: self.elite_count,
            rng_seed: seed,
            sense,
        }
    }
}

/// Everything a run needs. Read from a flat `key = value` file; see
/// [`RunConfig::KEYS`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub boundaries: Option<PathBuf>,
    pub densities: Option<PathBuf>,
    pub generators: Option<PathBuf>,
    /// Existing stations artifact for a stand-alone line stage.
    pub stations: Option<PathBuf>,
    pub out: PathBuf,
    pub cell_size: f64,
    pub sigma: f64,
    pub coverage_mode: CoverageMode,
    /// `None` picks [`suggest_station_count`] from the region population.
    pub station_count: Option<usize>,
    pub line_count: usize,
    pub mutation_sigma: f64,
    pub transfer_penalty_m: f64,
    pub seed: u64,
    pub origin_lat: Option<f64>,
    pub origin_lon: Option<f64>,
    pub stage1: StageGa,
    pub stage2: StageGa,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            boundaries: None,
            densities: None,
            generators: None,
            stations: None,
            out: PathBuf::from("out"),
            cell_size: DEFAULT_CELL_SIZE_M,
            sigma: DEFAULT_SIGMA,
            coverage_mode: CoverageMode::Sum,
            station_count: None,
            line_count: DEFAULT_LINE_COUNT,
            mutation_sigma: DEFAULT_MUTATION_SIGMA_M,
            transfer_penalty_m: 0.0,
            seed: GaConfig::default().rng_seed,
            origin_lat: None,
            origin_lon: None,
            stage1: StageGa::default(),
            stage2: StageGa::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, PipelineError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| config_err(format!("`{key}` = `{value}`: {e}")))
}

fn resolve(base: &Path, value: &str) -> Result<PathBuf, PipelineError> {
    let p = base.join(value);
    if let Ok(c) = fs::canonicalize(&p) {
        return Ok(c);
    }
    std::path::absolute(&p).map_err(|e| config_err(format!("cannot resolve `{}`: {e}", p.display())))
}

impl RunConfig {
    pub const KEYS: [&'static str; 25] = [
        "boundaries",
        "densities",
        "generators",
        "stations",
        "out",
        "cell_size",
        "sigma",
        "coverage_mode",
        "station_count",
        "line_count",
        "mutation_sigma",
        "transfer_penalty_m",
        "seed",
        "origin_lat",
        "origin_lon",
        "stage1_population",
        "stage1_generations",
        "stage1_crossover_rate",
        "stage1_mutation_rate",
        "stage1_elite_count",
        "stage2_population",
        "stage2_generations",
        "stage2_crossover_rate",
        "stage2_mutation_rate",
        "stage2_elite_count",
    ];

    /// Sets one key. Relative paths are resolved against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), PipelineError> {
        let value = value.trim();
        if let Some((stage, field)) = key.split_once('_').filter(|(s, _)| *s == "stage1" || *s == "stage2") {
            let ga = if stage == "stage1" {
                &mut self.stage1
            } else {
                &mut self.stage2
            };
            match field {
                "population" => ga.population = parse_value(key, value)?,
                "generations" => ga.generations = parse_value(key, value)?,
                "crossover_rate" => ga.crossover_rate = parse_value(key, value)?,
                "mutation_rate" => ga.mutation_rate = parse_value(key, value)?,
                "elite_count" => ga.elite_count = parse_value(key, value)?,
                _ => return Err(config_err(format!("unknown key `{key}`"))),
            }
            return Ok(());
        }
        match key {
            "boundaries" => self.boundaries = Some(resolve(base, value)?),
            "densities" => self.densities = Some(resolve(base, value)?),
            "generators" => self.generators = Some(resolve(base, value)?),
            "stations" => self.stations = Some(resolve(base, value)?),
            "out" => self.out = resolve(base, value)?,
            "cell_size" => self.cell_size = parse_value(key, value)?,
            "sigma" => self.sigma = parse_value(key, value)?,
            "coverage_mode" => self.coverage_mode = parse_value(key, value)?,
            "station_count" => self.station_count = Some(parse_value(key, value)?),
            "line_count" => self.line_count = parse_value(key, value)?,
            "mutation_sigma" => self.mutation_sigma = parse_value(key, value)?,
            "transfer_penalty_m" => self.transfer_penalty_m = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "origin_lat" => self.origin_lat = Some(parse_value(key, value)?),
            "origin_lon" => self.origin_lon = Some(parse_value(key, value)?),
            _ => return Err(config_err(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped,
    /// as are `result.*` keys so a manifest can be fed back in.
    pub fn parse(text: &str, base: &Path) -> Result<RunConfig, PipelineError> {
        let mut cfg = RunConfig {
            out: resolve(base, "out")?,
            ..RunConfig::default()
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_err(format!("line {}: expected `key = value`", n + 1)));
            };
            let key = key.trim();
            if key.starts_with(RESULT_PREFIX) {
                continue;
            }
            cfg.set(key, value, base)
                .map_err(|e| config_err(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    /// Echo in `key = value` form; [`RunConfig::parse`] reads it back to an
    /// equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        for (k, p) in [
            ("boundaries", &self.boundaries),
            ("densities", &self.densities),
            ("generators", &self.generators),
            ("stations", &self.stations),
        ] {
            if let Some(p) = p {
                put(k, p.display().to_string());
            }
        }
        put("out", self.out.display().to_string());
        put("cell_size", self.cell_size.to_string());
        put("sigma", self.sigma.to_string());
        put("coverage_mode", self.coverage_mode.to_string());
        if let Some(k) = self.station_count {
            put("station_count", k.to_string());
        }
        put("line_count", self.line_count.to_string());
        put("mutation_sigma", self.mutation_sigma.to_string());
        put("transfer_penalty_m", self.transfer_penalty_m.to_string());
        put("seed", self.seed.to_string());
        if let Some(v) = self.origin_lat {
            put("origin_lat", v.to_string());
        }
        if let Some(v) = self.origin_lon {
            put("origin_lon", v.to_string());
        }
        for (name, g) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            put(&format!("{name}_population"), g.population.to_string());
            put(&format!("{name}_generations"), g.generations.to_string());
            put(&format!("{name}_crossover_rate"), g.crossover_rate.to_string());
            put(&format!("{name}_mutation_rate"), g.mutation_rate.to_string());
            put(&format!("{name}_elite_count"), g.elite_count.to_string());
        }
        s
    }

    pub fn origin(&self) -> Result<Option<GeoPoint>, PipelineError> {
        match (self.origin_lat, self.origin_lon) {
            (Some(lat), Some(lon)) => Ok(Some(GeoPoint::new(lat, lon)?)),
            (None, None) => Ok(None),
            _ => Err(config_err("origin_lat and origin_lon must be given together")),
        }
    }

    pub fn coverage_params(&self) -> Result<CoverageParams, PipelineError> {
        Ok(CoverageParams::new(self.sigma)?.with_mode(self.coverage_mode))
    }

    pub fn station_stage(&self, total_population: f64) -> Result<StationStageConfig, PipelineError> {
        Ok(StationStageConfig {
            station_count: self
                .station_count
                .unwrap_or_else(|| suggest_station_count(total_population)),
            mutation_sigma: self.mutation_sigma,
            ga: self.stage1.ga(self.seed, Sense::Maximize),
            coverage: self.coverage_params()?,
        })
    }

    pub fn line_stage(&self) -> LineStageConfig {
        LineStageConfig {
            line_count: self.line_count,
            ga: self.stage2.ga(self.seed ^ STAGE2_SEED_SALT, Sense::Minimize),
            transfer_penalty_m: self.transfer_penalty_m,
        }
    }
}

/// Loaded and rasterized inputs.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub region: Region,
    pub grid: DemandGrid,
    pub generators: Vec<GeneratorPoint>,
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs, PipelineError> {
    let boundaries = cfg
        .boundaries
        .as_deref()
        .ok_or_else(|| config_err("`boundaries` is not set"))?;
    let densities = cfg
        .densities
        .as_deref()
        .ok_or_else(|| config_err("`densities` is not set"))?;
    let region = load_region(boundaries, densities, cfg.origin()?)?;
    let generators = match &cfg.generators {
        Some(p) => load_generators(p, region.origin)?,
        None => Vec::new(),
    };
    region.check_generators(&generators)?;
    let grid = rasterize(&region.districts, cfg.cell_size)?;
    log::info!(
        "{} districts, {} grid cells, population {:.0}, {} generators",
        region.districts.len(),
        grid.len(),
        grid.total_population,
        generators.len()
    );
    Ok(Inputs {
        region,
        grid,
        generators,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub stations: StationStageResult,
    pub lines: LineStageResult,
}

/// Both stages; stage two weighs station pairs by stage one's serviced
/// counts.
pub fn run_pipeline(cfg: &RunConfig, inputs: &Inputs) -> Result<PipelineResult, PipelineError> {
    run_pipeline_observed(cfg, inputs, |_, _, _| {}, |_, _, _| {})
}

pub fn run_pipeline_observed<F1, F2>(
    cfg: &RunConfig,
    inputs: &Inputs,
    stage1_observer: F1,
    stage2_observer: F2,
) -> Result<PipelineResult, PipelineError>
where
    F1: FnMut(usize, &[StationGenome], &[f64]),
    F2: FnMut(usize, &[LineGenome], &[f64]),
{
    let station_cfg = cfg.station_stage(inputs.grid.total_population)?;
    let stations = stations_stage::optimize_stations_observed(
        &inputs.grid,
        &inputs.generators,
        &inputs.region,
        &station_cfg,
        stage1_observer,
    )?;
    log::info!("stage 1 best coverage {}", stations.report.total);
    let lines = lines_stage::optimize_lines_observed(
        &stations.best.stations,
        &stations.report.per_station,
        &cfg.line_stage(),
        stage2_observer,
    )?;
    log::info!("stage 2 best line fitness {}", lines.fitness.value);
    Ok(PipelineResult { stations, lines })
}

fn geo_json(p: PlanarPoint, origin: GeoPoint) -> Value {
    let g = unproject(p, origin);
    json!([g.lon, g.lat])
}

fn origin_json(origin: GeoPoint) -> Value {
    json!({ "latitude": origin.lat, "longitude": origin.lon })
}

/// Point features with `station_id`, `serviced_population` and the planar
/// position `x_m`, `y_m`. The planar origin is kept as a top-level `origin`
/// member.
pub fn stations_geojson(stations: &[PlanarPoint], serviced: &[f64], origin: GeoPoint) -> String {
    let features: Vec<Value> = stations
        .iter()
        .zip(serviced)
        .enumerate()
        .map(|(i, (p, s))| {
            json!({
                "type": "Feature",
                "geometry": { "type": "Point", "coordinates": geo_json(*p, origin) },
                "properties": {
                    "station_id": i,
                    "serviced_population": s,
                    "x_m": p.x,
                    "y_m": p.y,
                },
            })
        })
        .collect();
    let doc = json!({ "type": "FeatureCollection", "origin": origin_json(origin), "features": features });
    serde_json::to_string_pretty(&doc).expect("json values serialize") + "\n"
}

/// LineString features with `line_id` and ordered `station_ids`.
pub fn lines_geojson(genome: &LineGenome, stations: &[PlanarPoint], origin: GeoPoint) -> String {
    let features: Vec<Value> = genome
        .lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let coords: Vec<Value> = line.iter().map(|&s| geo_json(stations[s], origin)).collect();
            json!({
                "type": "Feature",
                "geometry": { "type": "LineString", "coordinates": coords },
                "properties": { "line_id": i, "station_ids": line },
            })
        })
        .collect();
    let doc = json!({ "type": "FeatureCollection", "origin": origin_json(origin), "features": features });
    serde_json::to_string_pretty(&doc).expect("json values serialize") + "\n"
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationsArtifact {
    pub origin: GeoPoint,
    pub positions: Vec<PlanarPoint>,
    pub serviced: Vec<f64>,
}

fn features(doc: &Value) -> Result<&Vec<Value>, String> {
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err("not a FeatureCollection".into());
    }
    doc.get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| "missing `features` array".into())
}

fn number(props: &Value, key: &str, at: usize) -> Result<f64, String> {
    props
        .get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| format!("feature {at}: property `{key}` must be a number"))
}

fn index(props: &Value, key: &str, at: usize) -> Result<usize, String> {
    props
        .get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| format!("feature {at}: property `{key}` must be a nonnegative integer"))
}

/// Reads a stations artifact; features must carry ids `0..K` in order.
pub fn parse_stations_geojson(text: &str) -> Result<StationsArtifact, String> {
    let doc: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let origin = doc.get("origin").ok_or("missing `origin` member")?;
    let origin =
        GeoPoint::new(number(origin, "latitude", 0)?, number(origin, "longitude", 0)?).map_err(|e| e.to_string())?;
    let mut positions = Vec::new();
    let mut serviced = Vec::new();
    for (i, f) in features(&doc)?.iter().enumerate() {
        let props = f
            .get("properties")
            .ok_or_else(|| format!("feature {i}: no properties"))?;
        if index(props, "station_id", i)? != i {
            return Err(format!("feature {i}: station_id must equal its position {i}"));
        }
        positions.push(PlanarPoint::new(number(props, "x_m", i)?, number(props, "y_m", i)?));
        serviced.push(number(props, "serviced_population", i)?);
    }
    Ok(StationsArtifact {
        origin,
        positions,
        serviced,
    })
}

/// Reads the `station_ids` of every line feature, in file order.
pub fn parse_lines_geojson(text: &str) -> Result<Vec<Vec<usize>>, String> {
    let doc: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    features(&doc)?
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let ids = f
                .get("properties")
                .and_then(|p| p.get("station_ids"))
                .and_then(Value::as_array)
                .ok_or_else(|| format!("feature {i}: `station_ids` must be an array"))?;
            ids.iter()
                .map(|v| {
                    v.as_u64()
                        .map(|v| v as usize)
                        .ok_or_else(|| format!("feature {i}: station ids must be nonnegative integers"))
                })
                .collect()
        })
        .collect()
}

/// Every violated line invariant, in a stable order. Empty when the layout
/// is valid.
pub fn line_violations(lines: &[Vec<usize>], stations: &[PlanarPoint]) -> Vec<String> {
    let k = stations.len();
    let mut out = Vec::new();
    if lines.is_empty() {
        out.push("no lines".to_string());
    }
    let mut clean = Vec::new();
    for (li, line) in lines.iter().enumerate() {
        let mut seen = vec![false; k];
        let mut kept = Vec::new();
        for &s in line {
            if s >= k {
                out.push(format!("line {li}: station {s} does not exist ({k} stations)"));
            } else if std::mem::replace(&mut seen[s], true) {
                out.push(format!("line {li}: station {s} appears more than once (loop)"));
            } else {
                kept.push(s);
            }
        }
        if line.len() < 2 {
            out.push(format!("line {li}: has {} station(s), needs at least 2", line.len()));
        }
        if kept.len() >= 2 {
            clean.push(kept);
        }
    }
    if k > 0 {
        let net = LineNetwork::build(&clean, stations).expect("cleaned lines are valid");
        let labels = net.component_labels();
        let cut: Vec<String> = (0..k)
            .filter(|&s| labels[s] != labels[0])
            .map(|s| s.to_string())
            .collect();
        if !cut.is_empty() {
            out.push(format!(
                "network is disconnected: {} components, stations unreachable from station 0: {}",
                net.component_count(),
                cut.join(", ")
            ));
        }
    }
    out
}

fn read_artifact(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|e| PipelineError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Re-checks a stations and a lines artifact from disk.
pub fn validate_artifacts(stations_file: &Path, lines_file: &Path) -> Result<(), PipelineError> {
    let artifact = |path: &Path, message: String| PipelineError::Artifact {
        path: path.to_path_buf(),
        message,
    };
    let stations = parse_stations_geojson(&read_artifact(stations_file)?).map_err(|m| artifact(stations_file, m))?;
    let lines = parse_lines_geojson(&read_artifact(lines_file)?).map_err(|m| artifact(lines_file, m))?;
    let violations = line_violations(&lines, &stations.positions);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::Violations(violations))
    }
}

/// Stations for a stand-alone line stage, in the region's planar frame,
/// with serviced counts recomputed against the current inputs.
pub fn load_stations_for_lines(
    path: &Path,
    cfg: &RunConfig,
    inputs: &Inputs,
) -> Result<(Vec<PlanarPoint>, Vec<f64>), PipelineError> {
    let art = parse_stations_geojson(&read_artifact(path)?).map_err(|message| PipelineError::Artifact {
        path: path.to_path_buf(),
        message,
    })?;
    let origin = inputs.region.origin;
    let positions = if art.origin == origin {
        art.positions
    } else {
        art.positions
            .iter()
            .map(|p| project(unproject(*p, art.origin), origin))
            .collect()
    };
    let report = coverage::evaluate(&positions, &inputs.grid, &inputs.generators, &cfg.coverage_params()?);
    Ok((positions, report.per_station))
}

pub fn grid_csv(grid: &DemandGrid) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "y", "population"]).expect("in-memory write");
    for c in &grid.cells {
        w.write_record([
            c.centroid.x.to_string(),
            c.centroid.y.to_string(),
            c.population.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

pub fn grid_summary(inputs: &Inputs, cell_size: f64) -> String {
    format!(
        "cell_size = {cell_size}\ncells = {}\ntotal_population = {}\ndistricts = {}\ngenerators = {}\n",
        inputs.grid.len(),
        inputs.grid.total_population,
        inputs.region.districts.len(),
        inputs.generators.len()
    )
}

/// Writes `files` into `dir`. On failure every file already written by this
/// call is removed again.
pub fn write_artifacts(dir: &Path, files: &[(&str, String)]) -> Result<(), PipelineError> {
    let fail = |path: PathBuf, source| PipelineError::Write { path, source };
    fs::create_dir_all(dir).map_err(|e| fail(dir.to_path_buf(), e))?;
    for (n, (name, body)) in files.iter().enumerate() {
        let path = dir.join(name);
        if let Err(e) = fs::write(&path, body) {
            remove_artifacts(dir, files[..=n].iter().map(|f| f.0));
            return Err(fail(path, e));
        }
    }
    Ok(())
}

/// Deletes the named files in `dir`, ignoring ones that do not exist.
pub fn remove_artifacts<'a>(dir: &Path, names: impl IntoIterator<Item = &'a str>) {
    for name in names {
        let _ = fs::remove_file(dir.join(name));
    }
}

fn manifest(cfg: &RunConfig, results: &[(&str, String)]) -> String {
    let mut s = cfg.to_text();
    for (k, v) in results {
        let _ = writeln!(s, "{RESULT_PREFIX}{k} = {v}");
    }
    s
}

fn stage1_files(cfg: &RunConfig, inputs: &Inputs, res: &StationStageResult) -> Vec<(&'static str, String)> {
    let mut cfg = cfg.clone();
    cfg.station_count = Some(res.best.stations.len());
    vec![
        (
            STATIONS_FILE,
            stations_geojson(&res.best.stations, &res.report.per_station, inputs.region.origin),
        ),
        (HISTORY_STAGE1_FILE, res.history.to_csv()),
        (
            MANIFEST_FILE,
            manifest(&cfg, &[("stage1_best_fitness", res.report.total.to_string())]),
        ),
    ]
}

pub fn cmd_grid(cfg: &RunConfig) -> Result<String, PipelineError> {
    let inputs = load_inputs(cfg)?;
    let summary = grid_summary(&inputs, cfg.cell_size);
    write_artifacts(
        &cfg.out,
        &[
            (GRID_FILE, grid_csv(&inputs.grid)),
            (GRID_SUMMARY_FILE, summary.clone()),
        ],
    )?;
    Ok(summary)
}

/// Runs a stage, removing `names` from the output directory if it fails.
fn staged<T>(
    cfg: &RunConfig,
    names: &[&str],
    f: impl FnOnce() -> Result<T, PipelineError>,
) -> Result<T, PipelineError> {
    f().inspect_err(|e| {
        if e.exit_code() == 3 {
            remove_artifacts(&cfg.out, names.iter().copied());
        }
    })
}

pub fn cmd_optimize_stations(cfg: &RunConfig) -> Result<StationStageResult, PipelineError> {
    let inputs = load_inputs(cfg)?;
    let names = [STATIONS_FILE, HISTORY_STAGE1_FILE, MANIFEST_FILE];
    staged(cfg, &names, || {
        let station_cfg = cfg.station_stage(inputs.grid.total_population)?;
        let res = stations_stage::optimize_stations(&inputs.grid, &inputs.generators, &inputs.region, &station_cfg)?;
        write_artifacts(&cfg.out, &stage1_files(cfg, &inputs, &res))?;
        Ok(res)
    })
}

/// Line stage against `cfg.stations`, or the stations artifact in the
/// output directory when unset.
pub fn cmd_optimize_lines(cfg: &RunConfig) -> Result<LineStageResult, PipelineError> {
    let inputs = load_inputs(cfg)?;
    let stations_file = cfg.stations.clone().unwrap_or_else(|| cfg.out.join(STATIONS_FILE));
    let (positions, serviced) = load_stations_for_lines(&stations_file, cfg, &inputs)?;
    let names = [LINES_FILE, HISTORY_STAGE2_FILE, MANIFEST_FILE];
    staged(cfg, &names, || {
        let res = lines_stage::optimize_lines(&positions, &serviced, &cfg.line_stage())?;
        let mut cfg = cfg.clone();
        cfg.stations = Some(stations_file);
        cfg.station_count = Some(positions.len());
        let files = [
            (LINES_FILE, lines_geojson(&res.best, &positions, inputs.region.origin)),
            (HISTORY_STAGE2_FILE, res.history.to_csv()),
            (
                MANIFEST_FILE,
                manifest(&cfg, &[("stage2_best_fitness", res.fitness.value.to_string())]),
            ),
        ];
        write_artifacts(&cfg.out, &files)?;
        Ok(res)
    })
}

pub fn cmd_run(cfg: &RunConfig) -> Result<PipelineResult, PipelineError> {
    let inputs = load_inputs(cfg)?;
    let names = [
        STATIONS_FILE,
        LINES_FILE,
        HISTORY_STAGE1_FILE,
        HISTORY_STAGE2_FILE,
        MANIFEST_FILE,
    ];
    staged(cfg, &names, || {
        let res = run_pipeline(cfg, &inputs)?;
        let mut run_cfg = cfg.clone();
        run_cfg.station_count = Some(res.stations.best.stations.len());
        let st = &res.stations;
        let files = [
            (
                STATIONS_FILE,
                stations_geojson(&st.best.stations, &st.report.per_station, inputs.region.origin),
            ),
            (
                LINES_FILE,
                lines_geojson(&res.lines.best, &st.best.stations, inputs.region.origin),
            ),
            (HISTORY_STAGE1_FILE, st.history.to_csv()),
            (HISTORY_STAGE2_FILE, res.lines.history.to_csv()),
            (
                MANIFEST_FILE,
                manifest(
                    &run_cfg,
                    &[
                        ("stage1_best_fitness", st.report.total.to_string()),
                        ("stage2_best_fitness", res.lines.fitness.value.to_string()),
                    ],
                ),
            ),
        ];
        write_artifacts(&cfg.out, &files)?;
        Ok(res)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> PathBuf {
        std::path::absolute("/tmp/cfg").unwrap()
    }

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.cell_size, c.sigma, c.line_count), (500.0, 800.0, 5));
        assert_eq!((c.stage1.generations, c.stage1.population), (10, 50));
        assert_eq!(c.stage2, c.stage1);
    }

    #[test]
    fn parse_and_echo_round_trip() {
        let text = "# demo\nboundaries = b.geojson\ndensities=d.csv  # trailing\n\nsigma = 1200.5\nstation_count = 7\n\
                    coverage_mode = nearest\nstage2_generations = 40\norigin_lat = 3.1\norigin_lon = 101.5\n\
                    result.stage1_best_fitness = 12\n";
        let cfg = RunConfig::parse(text, &base()).unwrap();
        assert_eq!(cfg.boundaries.as_deref(), Some(Path::new("/tmp/cfg/b.geojson")));
        assert_eq!(cfg.out, PathBuf::from("/tmp/cfg/out"));
        assert_eq!(cfg.sigma, 1200.5);
        assert_eq!(cfg.station_count, Some(7));
        assert_eq!(cfg.coverage_mode, CoverageMode::Nearest);
        assert_eq!(cfg.stage2.generations, 40);
        assert_eq!(cfg.stage1.generations, 10);
        let again = RunConfig::parse(&cfg.to_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            RunConfig::parse("colour = red", &base()),
            Err(PipelineError::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("sigma", &base()),
            Err(PipelineError::Config(_))
        ));
        let e = RunConfig::parse("x=1\nstage1_population = lots", &base()).unwrap_err();
        assert!(e.to_string().contains("line 1"));
        let e = RunConfig::parse("stage1_population = lots", &base()).unwrap_err();
        assert!(e.to_string().contains("stage1_population"), "{e}");
        assert!(RunConfig::parse("stage3_population = 1", &base()).is_err());
    }

    #[test]
    fn half_origin_rejected() {
        let cfg = RunConfig {
            origin_lat: Some(3.0),
            ..RunConfig::default()
        };
        assert!(cfg.origin().is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig::default();
        let s1 = cfg.station_stage(1.0e6).unwrap();
        let s2 = cfg.line_stage();
        assert_eq!(s1.ga.rng_seed, 42);
        assert_ne!(s2.ga.rng_seed, 42);
        assert_eq!(s1.station_count, suggest_station_count(1.0e6));
        assert_eq!(s2.ga.sense, Sense::Minimize);
    }

    #[test]
    fn stations_artifact_round_trip() {
        let origin = GeoPoint::new(3.05, 101.45).unwrap();
        let pts = vec![
            PlanarPoint::new(1234.5678901234, -98765.4321),
            PlanarPoint::new(0.1, 1.0e-7),
        ];
        let s = vec![123.456, 0.0];
        let text = stations_geojson(&pts, &s, origin);
        let art = parse_stations_geojson(&text).unwrap();
        assert_eq!(art.origin, origin);
        assert_eq!(art.positions, pts);
        assert_eq!(art.serviced, s);
        let doc: Value = serde_json::from_str(&text).unwrap();
        let c = &doc["features"][0]["geometry"]["coordinates"];
        let g = unproject(pts[0], origin);
        assert_eq!((c[0].as_f64().unwrap(), c[1].as_f64().unwrap()), (g.lon, g.lat));
    }

    #[test]
    fn lines_artifact_round_trip() {
        let origin = GeoPoint::new(3.0, 101.0).unwrap();
        let pts: Vec<PlanarPoint> = (0..4).map(|i| PlanarPoint::new(i as f64 * 100.0, 0.0)).collect();
        let g = LineGenome::new(vec![vec![3, 1, 0], vec![1, 2]]);
        let lines = parse_lines_geojson(&lines_geojson(&g, &pts, origin)).unwrap();
        assert_eq!(lines, g.lines);
        assert!(line_violations(&lines, &pts).is_empty());
    }

    #[test]
    fn violations_listed() {
        let pts: Vec<PlanarPoint> = (0..4).map(|i| PlanarPoint::new(i as f64, 0.0)).collect();
        let v = line_violations(&[vec![0, 1, 0], vec![2]], &pts);
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(v[0].contains("loop"));
        assert!(v[1].contains("needs at least 2"));
        assert!(v[2].contains("disconnected") && v[2].ends_with("2, 3"));
        let v = line_violations(&[vec![0, 9]], &pts[..2]);
        assert!(v.iter().any(|m| m.contains("does not exist")));
        assert_eq!(line_violations(&[], &pts)[0], "no lines");
    }

    #[test]
    fn malformed_artifacts() {
        assert!(parse_lines_geojson("{\"type\":\"Feature\"}").is_err());
        assert!(parse_lines_geojson(
            r#"{"type":"FeatureCollection","features":[{"properties":{"station_ids":[1,-2]}}]}"#
        )
        .is_err());
        assert!(parse_stations_geojson(r#"{"type":"FeatureCollection","features":[]}"#).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(config_err("x").exit_code(), 2);
        assert_eq!(PipelineError::from(GeoError::EmptyGrid).exit_code(), 2);
        assert_eq!(PipelineError::from(LineStageError::NoFeasibleIndividual).exit_code(), 3);
        assert_eq!(PipelineError::Violations(vec![]).exit_code(), 4);
    }
}
