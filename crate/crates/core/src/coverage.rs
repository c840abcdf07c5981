//! Gaussian station coverage.
//!
//! A station at distance `r` from a unit of demand captures `exp(-r²/σ²)` of
//! it. The district term sums this over the populated cells of a
//! [`DemandGrid`]; the generator term over point generators. In the default
//! [`CoverageMode::Sum`] every station collects from every source, so
//! residents inside overlapping catchments are counted once per station.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::geomodel::{DemandGrid, GeneratorPoint, PlanarPoint};

/// Lower end of the usual access-distance range, meters.
pub const SIGMA_RECOMMENDED_MIN: f64 = 400.0;
/// Upper end of the usual access-distance range, meters.
pub const SIGMA_RECOMMENDED_MAX: f64 = 3000.0;
/// Values at or beyond this are rejected outright.
pub const SIGMA_HARD_MAX: f64 = 1.0e5;
pub const DEFAULT_SIGMA: f64 = 800.0;

#[derive(Debug, Error, PartialEq)]
pub enum CoverageError {
    #[error("sigma must lie in (0, {SIGMA_HARD_MAX}) m, got {0}")]
    InvalidSigma(f64),
    #[error("unknown coverage mode `{0}` (expected `sum` or `nearest`)")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoverageMode {
    /// Every station collects from every source.
    #[default]
    Sum,
    /// Each source is attributed only to its nearest station.
    Nearest,
}

impl fmt::Display for CoverageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoverageMode::Sum => "sum",
            CoverageMode::Nearest => "nearest",
        })
    }
}

impl FromStr for CoverageMode {
    type Err = CoverageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "sum" => Ok(CoverageMode::Sum),
            "nearest" => Ok(CoverageMode::Nearest),
            other => Err(CoverageError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageParams {
    sigma: f64,
    pub mode: CoverageMode,
}

impl CoverageParams {
    /// Accepts any σ in (0, 10⁵) m and logs a warning outside [400, 3000] m.
    pub fn new(sigma: f64) -> Result<Self, CoverageError> {
        if !(sigma.is_finite() && sigma > 0.0 && sigma < SIGMA_HARD_MAX) {
            return Err(CoverageError::InvalidSigma(sigma));
        }
        let params = CoverageParams {
            sigma,
            mode: CoverageMode::Sum,
        };
        if !params.in_recommended_range() {
            log::warn!(
                "sigma = {sigma} m is outside the usual {SIGMA_RECOMMENDED_MIN}-{SIGMA_RECOMMENDED_MAX} m access range"
            );
        }
        Ok(params)
    }

    pub fn with_mode(mut self, mode: CoverageMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn in_recommended_range(&self) -> bool {
        (SIGMA_RECOMMENDED_MIN..=SIGMA_RECOMMENDED_MAX).contains(&self.sigma)
    }

    #[inline]
    fn kernel(&self, r_sq: f64) -> f64 {
        (-r_sq / (self.sigma * self.sigma)).exp()
    }
}

impl Default for CoverageParams {
    fn default() -> Self {
        CoverageParams {
            sigma: DEFAULT_SIGMA,
            mode: CoverageMode::Sum,
        }
    }
}

/// Per-station serviced population and the objective total.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    /// Objective value, the sum of `per_station`.
    pub total: f64,
    /// s_i: district share plus generator share of station i.
    pub per_station: Vec<f64>,
    pub district: Vec<f64>,
    pub generator: Vec<f64>,
}

fn nearest_station(stations: &[PlanarPoint], p: PlanarPoint) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, s) in stations.iter().enumerate() {
        let d = s.distance_sq(p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn accumulate<I>(stations: &[PlanarPoint], sources: I, params: &CoverageParams) -> Vec<f64>
where
    I: Iterator<Item = (PlanarPoint, f64)> + Clone,
{
    match params.mode {
        CoverageMode::Sum => stations
            .iter()
            .map(|&s| {
                sources
                    .clone()
                    .map(|(p, weight)| weight * params.kernel(s.distance_sq(p)))
                    .sum()
            })
            .collect(),
        CoverageMode::Nearest => {
            let mut out = vec![0.0; stations.len()];
            if stations.is_empty() {
                return out;
            }
            for (p, weight) in sources {
                let (i, r_sq) = nearest_station(stations, p);
                out[i] += weight * params.kernel(r_sq);
            }
            out
        }
    }
}

/// n_i: Gaussian-weighted cell population captured by each station.
pub fn district_coverage(stations: &[PlanarPoint], grid: &DemandGrid, params: &CoverageParams) -> Vec<f64> {
    accumulate(stations, grid.cells.iter().map(|c| (c.centroid, c.population)), params)
}

/// Per-station sum over generators of g_j·exp(−r_ij²/σ²).
pub fn generator_coverage(
    stations: &[PlanarPoint],
    generators: &[GeneratorPoint],
    params: &CoverageParams,
) -> Vec<f64> {
    accumulate(stations, generators.iter().map(|g| (g.position, g.visitors)), params)
}

pub fn evaluate(
    stations: &[PlanarPoint],
    grid: &DemandGrid,
    generators: &[GeneratorPoint],
    params: &CoverageParams,
) -> CoverageReport {
    let district = district_coverage(stations, grid, params);
    let generator = generator_coverage(stations, generators, params);
    let per_station: Vec<f64> = district.iter().zip(&generator).map(|(n, g)| n + g).collect();
    CoverageReport {
        total: per_station.iter().sum(),
        per_station,
        district,
        generator,
    }
}
