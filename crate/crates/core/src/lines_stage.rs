//! Stage two: line layout over fixed stations.
//!
//! A genome is a list of `L` lines, each an ordered list of distinct station
//! indices. Fitness is the sum over unordered station pairs of network
//! distance times the pair's combined serviced population, minimized.
//! Disconnected layouts get a finite penalty and are normally never seen by
//! the engine because [`repair`] reconnects every offspring.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::evolve::{self, EvolutionHistory, EvolveError, GaConfig, GaRng, Problem, Sense, INIT_DOMAIN};
use crate::geomodel::PlanarPoint;
use crate::netgraph::{self, check_lines, LineNetwork};

pub const DEFAULT_LINE_COUNT: usize = 5;
/// Attempts at drawing an applicable mutation before falling back to a
/// segment reversal.
pub const MAX_MUTATION_TRIES: usize = 16;
/// Disconnected layouts score this multiple of the feasible upper bound.
pub const INFEASIBLE_FACTOR: f64 = 1.0e3;

#[derive(Debug, Error, PartialEq)]
pub enum LineStageError {
    #[error("at least 2 stations are needed to build lines, got {0}")]
    TooFewStations(usize),
    #[error("invalid line stage configuration: {0}")]
    InvalidConfig(String),
    #[error("{stations} stations but {demand} serviced-population values")]
    DemandMismatch { stations: usize, demand: usize },
    #[error("no feasible individual was produced")]
    NoFeasibleIndividual,
    #[error(transparent)]
    Evolve(#[from] EvolveError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LineGenome {
    pub lines: Vec<Vec<usize>>,
}

impl LineGenome {
    pub fn new(lines: Vec<Vec<usize>>) -> Self {
        LineGenome { lines }
    }

    /// Orients each line so its first station index is not larger than its
    /// last. A line and its reverse describe the same layout.
    pub fn canonical(&self) -> LineGenome {
        LineGenome {
            lines: self
                .lines
                .iter()
                .map(|l| {
                    let mut l = l.clone();
                    if l.first() > l.last() {
                        l.reverse();
                    }
                    l
                })
                .collect(),
        }
    }

    /// Station slots summed over all lines.
    pub fn placements(&self) -> usize {
        self.lines.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFitness {
    pub value: f64,
    pub feasible: bool,
}

/// `(K − 1) · diameter · Σ_{i<j}(s_i + s_j)`: no connected layout can score
/// worse, since every shortest path uses at most `K − 1` edges each no
/// longer than the station-set diameter.
pub fn feasible_upper_bound(stations: &[PlanarPoint], demand: &[f64], transfer_penalty_m: f64) -> f64 {
    let k = stations.len();
    if k < 2 {
        return 0.0;
    }
    let mut diameter: f64 = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            diameter = diameter.max(stations[i].distance(stations[j]));
        }
    }
    let pair_weight = (k - 1) as f64 * demand.iter().sum::<f64>();
    (k - 1) as f64 * (diameter + transfer_penalty_m) * pair_weight
}

/// Scores layouts over a fixed station set.
#[derive(Debug, Clone)]
pub struct LineEvaluator<'a> {
    stations: &'a [PlanarPoint],
    demand: &'a [f64],
    transfer_penalty_m: f64,
    penalty: f64,
}

impl<'a> LineEvaluator<'a> {
    pub fn new(stations: &'a [PlanarPoint], demand: &'a [f64]) -> Self {
        Self::with_transfer_penalty(stations, demand, 0.0)
    }

    pub fn with_transfer_penalty(stations: &'a [PlanarPoint], demand: &'a [f64], transfer_penalty_m: f64) -> Self {
        assert_eq!(stations.len(), demand.len(), "one serviced count per station");
        let bound = feasible_upper_bound(stations, demand, transfer_penalty_m);
        LineEvaluator {
            stations,
            demand,
            transfer_penalty_m,
            penalty: INFEASIBLE_FACTOR * bound.max(1.0),
        }
    }

    /// Value assigned to disconnected or malformed layouts.
    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn evaluate(&self, genome: &LineGenome) -> LineFitness {
        let infeasible = LineFitness {
            value: self.penalty,
            feasible: false,
        };
        let Ok(net) = LineNetwork::build(&genome.lines, self.stations) else {
            return infeasible;
        };
        let d = if self.transfer_penalty_m > 0.0 {
            netgraph::all_pairs_distances_with_transfers(&net, self.stations, self.transfer_penalty_m)
        } else {
            netgraph::all_pairs_distances(&net)
        };
        if !d.reachable() {
            return infeasible;
        }
        let k = self.stations.len();
        let mut value = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                value += d.get(i, j) * (self.demand[i] + self.demand[j]);
            }
        }
        LineFitness { value, feasible: true }
    }
}

/// Σ_{i<j} d_ij·(s_i + s_j) over network distances.
pub fn line_fitness(genome: &LineGenome, stations: &[PlanarPoint], demand: &[f64]) -> LineFitness {
    LineEvaluator::new(stations, demand).evaluate(genome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MutationKind {
    /// Exchange the positions of two stations within a line.
    Swap,
    /// Reverse a contiguous run of stations within a line.
    Reverse,
    /// Trade one station between two lines.
    Exchange,
    /// Move a station from one line into another.
    Transfer,
    /// Drop a station from a line.
    Remove,
    /// Insert a station into a line.
    Add,
}

impl MutationKind {
    pub const ALL: [MutationKind; 6] = [
        MutationKind::Swap,
        MutationKind::Reverse,
        MutationKind::Exchange,
        MutationKind::Transfer,
        MutationKind::Remove,
        MutationKind::Add,
    ];
}

/// A fully parameterized line mutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineEdit {
    Swap {
        line: usize,
        i: usize,
        j: usize,
    },
    /// Reverses positions `i..=j`.
    Reverse {
        line: usize,
        i: usize,
        j: usize,
    },
    /// Station at `p[i]` and station at `q[j]` change places.
    Exchange {
        p: usize,
        i: usize,
        q: usize,
        j: usize,
    },
    /// Station at `from[i]` is removed and inserted at `to[pos]`.
    Transfer {
        from: usize,
        i: usize,
        to: usize,
        pos: usize,
    },
    Remove {
        line: usize,
        i: usize,
    },
    Add {
        line: usize,
        station: usize,
        pos: usize,
    },
}

impl LineEdit {
    pub fn kind(&self) -> MutationKind {
        match self {
            LineEdit::Swap { .. } => MutationKind::Swap,
            LineEdit::Reverse { .. } => MutationKind::Reverse,
            LineEdit::Exchange { .. } => MutationKind::Exchange,
            LineEdit::Transfer { .. } => MutationKind::Transfer,
            LineEdit::Remove { .. } => MutationKind::Remove,
            LineEdit::Add { .. } => MutationKind::Add,
        }
    }

    /// `None` when the edit would repeat a station within a line, shorten a
    /// line below two stations, or index out of range.
    pub fn apply(&self, genome: &LineGenome) -> Option<LineGenome> {
        let mut g = genome.clone();
        let lines = &mut g.lines;
        match *self {
            LineEdit::Swap { line, i, j } => {
                let l = lines.get_mut(line)?;
                if i == j || i >= l.len() || j >= l.len() {
                    return None;
                }
                l.swap(i, j);
            }
            LineEdit::Reverse { line, i, j } => {
                let l = lines.get_mut(line)?;
                if i >= j || j >= l.len() {
                    return None;
                }
                l[i..=j].reverse();
            }
            LineEdit::Exchange { p, i, q, j } => {
                if p == q || p >= lines.len() || q >= lines.len() {
                    return None;
                }
                let x = *lines[p].get(i)?;
                let y = *lines[q].get(j)?;
                if x == y || lines[p].contains(&y) || lines[q].contains(&x) {
                    return None;
                }
                lines[p][i] = y;
                lines[q][j] = x;
            }
            LineEdit::Transfer { from, i, to, pos } => {
                if from == to || from >= lines.len() || to >= lines.len() {
                    return None;
                }
                if lines[from].len() < 3 || pos > lines[to].len() {
                    return None;
                }
                let x = *lines[from].get(i)?;
                if lines[to].contains(&x) {
                    return None;
                }
                lines[from].remove(i);
                lines[to].insert(pos, x);
            }
            LineEdit::Remove { line, i } => {
                let l = lines.get_mut(line)?;
                if l.len() < 3 || i >= l.len() {
                    return None;
                }
                l.remove(i);
            }
            LineEdit::Add { line, station, pos } => {
                let l = lines.get_mut(line)?;
                if pos > l.len() || l.contains(&station) {
                    return None;
                }
                l.insert(pos, station);
            }
        }
        Some(g)
    }
}

fn two_distinct(n: usize, rng: &mut GaRng) -> (usize, usize) {
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

/// Draws random parameters for `kind`; `None` when no line can host it.
pub fn sample_edit(kind: MutationKind, genome: &LineGenome, station_count: usize, rng: &mut GaRng) -> Option<LineEdit> {
    let lines = &genome.lines;
    if lines.is_empty() {
        return None;
    }
    let pick = |rng: &mut GaRng, min_len: usize| -> Option<usize> {
        let eligible: Vec<usize> = (0..lines.len()).filter(|&l| lines[l].len() >= min_len).collect();
        (!eligible.is_empty()).then(|| eligible[rng.random_range(0..eligible.len())])
    };
    Some(match kind {
        MutationKind::Swap => {
            let line = pick(rng, 2)?;
            let (i, j) = two_distinct(lines[line].len(), rng);
            LineEdit::Swap { line, i, j }
        }
        MutationKind::Reverse => {
            let line = pick(rng, 2)?;
            let (a, b) = two_distinct(lines[line].len(), rng);
            LineEdit::Reverse {
                line,
                i: a.min(b),
                j: a.max(b),
            }
        }
        MutationKind::Exchange => {
            if lines.len() < 2 {
                return None;
            }
            let (p, q) = two_distinct(lines.len(), rng);
            LineEdit::Exchange {
                p,
                i: rng.random_range(0..lines[p].len().max(1)),
                q,
                j: rng.random_range(0..lines[q].len().max(1)),
            }
        }
        MutationKind::Transfer => {
            if lines.len() < 2 {
                return None;
            }
            let from = pick(rng, 3)?;
            let mut to = rng.random_range(0..lines.len() - 1);
            if to >= from {
                to += 1;
            }
            LineEdit::Transfer {
                from,
                i: rng.random_range(0..lines[from].len()),
                to,
                pos: rng.random_range(0..=lines[to].len()),
            }
        }
        MutationKind::Remove => {
            let line = pick(rng, 3)?;
            LineEdit::Remove {
                line,
                i: rng.random_range(0..lines[line].len()),
            }
        }
        MutationKind::Add => {
            if station_count == 0 {
                return None;
            }
            let line = rng.random_range(0..lines.len());
            LineEdit::Add {
                line,
                station: rng.random_range(0..station_count),
                pos: rng.random_range(0..=lines[line].len()),
            }
        }
    })
}

/// Applies one mutation of a uniformly drawn kind. Inapplicable draws are
/// retried up to [`MAX_MUTATION_TRIES`] times, then a segment reversal is
/// used. Connectivity is not restored here; see [`repair`].
pub fn mutate_line(genome: &LineGenome, station_count: usize, rng: &mut GaRng) -> (LineGenome, MutationKind) {
    for _ in 0..MAX_MUTATION_TRIES {
        let kind = MutationKind::ALL[rng.random_range(0..MutationKind::ALL.len())];
        if let Some(g) = sample_edit(kind, genome, station_count, rng).and_then(|e| e.apply(genome)) {
            return (g, kind);
        }
    }
    let fallback = sample_edit(MutationKind::Reverse, genome, station_count, rng).and_then(|e| e.apply(genome));
    (fallback.unwrap_or_else(|| genome.clone()), MutationKind::Reverse)
}

/// Swaps one uniformly chosen line index between the parents.
pub fn crossover_lines(a: &LineGenome, b: &LineGenome, rng: &mut GaRng) -> (LineGenome, LineGenome) {
    assert_eq!(a.lines.len(), b.lines.len(), "parents differ in line count");
    let (mut c1, mut c2) = (a.clone(), b.clone());
    if !a.lines.is_empty() {
        let k = rng.random_range(0..a.lines.len());
        std::mem::swap(&mut c1.lines[k], &mut c2.lines[k]);
    }
    (c1, c2)
}

fn nearest_not_in(stations: &[PlanarPoint], from: usize, exclude: &[usize]) -> Option<usize> {
    (0..stations.len()).filter(|s| !exclude.contains(s)).min_by(|&a, &b| {
        stations[from]
            .distance_sq(stations[a])
            .total_cmp(&stations[from].distance_sq(stations[b]))
    })
}

/// Restores structural validity and connectivity.
///
/// Out-of-range indices and repeated stations (later occurrences) are
/// dropped, and lines shorter than two stations are extended to their
/// nearest station. Then, while more than one component remains, the
/// cheapest line-end extension that joins the component holding station 0
/// to another component is applied: either a line ending inside that
/// component grows to the nearest outside station, or a line ending outside
/// grows to the nearest station inside. Each step merges two components, so
/// at most `K − 1` steps run. Connected, valid genomes are returned
/// unchanged.
pub fn repair(genome: &LineGenome, stations: &[PlanarPoint]) -> LineGenome {
    let k = stations.len();
    assert!(k >= 2, "repair needs at least two stations");
    let mut lines: Vec<Vec<usize>> = genome
        .lines
        .iter()
        .map(|l| {
            let mut seen = vec![false; k];
            l.iter()
                .copied()
                .filter(|&s| s < k && !std::mem::replace(&mut seen[s], true))
                .collect()
        })
        .collect();
    for l in &mut lines {
        if l.is_empty() {
            l.push(0);
        }
        while l.len() < 2 {
            let last = *l.last().unwrap();
            let next = nearest_not_in(stations, last, l).expect("k >= 2");
            l.push(next);
        }
    }
    assert!(!lines.is_empty(), "repair needs at least one line");

    loop {
        let net = LineNetwork::build(&lines, stations).expect("lines are structurally valid");
        let labels = net.component_labels();
        let root = labels[0];
        if labels.iter().all(|&l| l == root) {
            break;
        }
        let in_main = |s: usize| labels[s] == root;
        // (cost, line, at_end, station)
        let mut best: Option<(f64, usize, bool, usize)> = None;
        for (li, line) in lines.iter().enumerate() {
            for (at_end, e) in [(false, line[0]), (true, *line.last().unwrap())] {
                let main_side = in_main(e);
                for v in 0..k {
                    if in_main(v) == main_side || line.contains(&v) {
                        continue;
                    }
                    let cost = stations[e].distance(stations[v]);
                    if best.is_none_or(|b| cost < b.0) {
                        best = Some((cost, li, at_end, v));
                    }
                }
            }
        }
        let (_, li, at_end, v) = best.expect("a joining extension always exists");
        if at_end {
            lines[li].push(v);
        } else {
            lines[li].insert(0, v);
        }
    }
    LineGenome { lines }
}

/// Random layouts: shuffle the stations, cut them into `line_count`
/// contiguous groups, order each group by nearest-neighbour chaining from a
/// random member, pad groups under two stations with their nearest
/// neighbour, then [`repair`].
pub fn init_lines(
    stations: &[PlanarPoint],
    line_count: usize,
    population_size: usize,
    rng: &mut GaRng,
) -> Result<Vec<LineGenome>, LineStageError> {
    let k = stations.len();
    if k < 2 {
        return Err(LineStageError::TooFewStations(k));
    }
    if line_count < 1 {
        return Err(LineStageError::InvalidConfig("line_count must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(population_size);
    for _ in 0..population_size {
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(rng);
        let mut lines = Vec::with_capacity(line_count);
        for li in 0..line_count {
            let (lo, hi) = (li * k / line_count, (li + 1) * k / line_count);
            let mut group: Vec<usize> = order[lo..hi].to_vec();
            if group.is_empty() {
                group.push(rng.random_range(0..k));
            }
            let start = group.swap_remove(rng.random_range(0..group.len()));
            let mut line = vec![start];
            while !group.is_empty() {
                let last = stations[*line.last().unwrap()];
                let (idx, _) = group
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        last.distance_sq(stations[*a.1])
                            .total_cmp(&last.distance_sq(stations[*b.1]))
                    })
                    .unwrap();
                line.push(group.swap_remove(idx));
            }
            if line.len() < 2 {
                let next = nearest_not_in(stations, line[0], &line).expect("k >= 2");
                line.push(next);
            }
            lines.push(line);
        }
        out.push(repair(&LineGenome { lines }, stations));
    }
    Ok(out)
}

/// Structural checks plus connectivity, as a message on failure.
pub fn check_genome(genome: &LineGenome, stations: &[PlanarPoint], line_count: usize) -> Result<(), String> {
    if genome.lines.len() != line_count {
        return Err(format!("expected {line_count} lines, found {}", genome.lines.len()));
    }
    check_lines(&genome.lines, stations.len()).map_err(|e| e.to_string())?;
    let net = LineNetwork::build(&genome.lines, stations).map_err(|e| e.to_string())?;
    if !net.is_connected() {
        return Err(format!("network has {} components", net.component_count()));
    }
    Ok(())
}

/// Stage-two problem definition for the GA engine.
pub struct LineProblem<'a> {
    pub stations: &'a [PlanarPoint],
    pub evaluator: LineEvaluator<'a>,
    pub line_count: usize,
}

impl Problem for LineProblem<'_> {
    type Genome = LineGenome;

    fn fitness(&self, genome: &LineGenome) -> f64 {
        self.evaluator.evaluate(genome).value
    }

    fn crossover(&self, a: &LineGenome, b: &LineGenome, rng: &mut GaRng) -> (LineGenome, LineGenome) {
        crossover_lines(a, b, rng)
    }

    fn mutate(&self, genome: &LineGenome, rng: &mut GaRng) -> LineGenome {
        mutate_line(genome, self.stations.len(), rng).0
    }

    fn repair(&self, genome: LineGenome) -> LineGenome {
        repair(&genome, self.stations)
    }

    fn validate(&self, genome: &LineGenome) -> Result<(), String> {
        check_genome(genome, self.stations, self.line_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineStageConfig {
    pub line_count: usize,
    pub ga: GaConfig,
    /// Equivalent length charged per line change; 0 disables it.
    pub transfer_penalty_m: f64,
}

impl Default for LineStageConfig {
    fn default() -> Self {
        LineStageConfig {
            line_count: DEFAULT_LINE_COUNT,
            ga: GaConfig {
                sense: Sense::Minimize,
                ..GaConfig::default()
            },
            transfer_penalty_m: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LineStageResult {
    pub best: LineGenome,
    pub fitness: LineFitness,
    pub history: EvolutionHistory,
}

pub fn optimize_lines(
    stations: &[PlanarPoint],
    demand: &[f64],
    config: &LineStageConfig,
) -> Result<LineStageResult, LineStageError> {
    optimize_lines_observed(stations, demand, config, |_, _, _| {})
}

/// Runs stage two; `observer` sees every generation's population.
pub fn optimize_lines_observed<F>(
    stations: &[PlanarPoint],
    demand: &[f64],
    config: &LineStageConfig,
    observer: F,
) -> Result<LineStageResult, LineStageError>
where
    F: FnMut(usize, &[LineGenome], &[f64]),
{
    if stations.len() != demand.len() {
        return Err(LineStageError::DemandMismatch {
            stations: stations.len(),
            demand: demand.len(),
        });
    }
    if let Some(bad) = demand.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(LineStageError::InvalidConfig(format!(
            "serviced population {bad} is not a nonnegative number"
        )));
    }
    if !(config.transfer_penalty_m.is_finite() && config.transfer_penalty_m >= 0.0) {
        return Err(LineStageError::InvalidConfig(format!(
            "transfer_penalty_m must be >= 0, got {}",
            config.transfer_penalty_m
        )));
    }
    let ga = GaConfig {
        sense: Sense::Minimize,
        ..config.ga
    };
    ga.validate()?;
    let mut rng = evolve::substream(ga.rng_seed, INIT_DOMAIN, 0);
    let initial = init_lines(stations, config.line_count, ga.population_size, &mut rng)?;
    let problem = LineProblem {
        stations,
        evaluator: LineEvaluator::with_transfer_penalty(stations, demand, config.transfer_penalty_m),
        line_count: config.line_count,
    };
    let out = evolve::run_observed(&problem, initial, &ga, observer)?;
    let fitness = problem.evaluator.evaluate(&out.best);
    if !fitness.feasible {
        return Err(LineStageError::NoFeasibleIndividual);
    }
    Ok(LineStageResult {
        best: out.best,
        fitness,
        history: out.history,
    })
}
