//! Generational genetic algorithm engine.
//!
//! The engine owns the loop and the selection step; everything
//! genome-specific (fitness, crossover, mutation, repair) comes from a
//! [`Problem`]. Each generation keeps `elite_count` best individuals
//! unchanged and fills the remaining slots with offspring of roulette-selected
//! parents.
//!
//! Randomness is ChaCha8 throughout. The run seed is the ChaCha key and every
//! offspring slot draws from its own stream, numbered by `(generation, slot)`,
//! so results do not depend on how fitness evaluation is scheduled across
//! threads.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub type GaRng = ChaCha8Rng;

/// Stream domain reserved for building initial populations.
pub const INIT_DOMAIN: u32 = u32::MAX;

/// Independent deterministic stream for `(domain, slot)` under `seed`.
pub fn substream(seed: u64, domain: u32, slot: u32) -> GaRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 32) | slot as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sense {
    #[default]
    Maximize,
    Minimize,
}

impl Sense {
    /// Strictly better.
    #[inline]
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Sense::Maximize => a > b,
            Sense::Minimize => a < b,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EvolveError {
    #[error("invalid GA configuration: {0}")]
    InvalidConfig(String),
    #[error("initial population: {0}")]
    InvalidInitialPopulation(String),
    #[error("fitness of individual {index} in generation {generation} is not finite")]
    FitnessNotFinite { generation: usize, index: usize },
    #[error("offspring {index} of generation {generation} failed validation after repair: {reason}")]
    InvalidOffspring {
        generation: usize,
        index: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub elite_count: usize,
    pub rng_seed: u64,
    pub sense: Sense,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population_size: 50,
            generations: 10,
            crossover_rate: 0.9,
            mutation_rate: 0.3,
            elite_count: 2,
            rng_seed: 42,
            sense: Sense::Maximize,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), EvolveError> {
        let bad = |m: String| Err(EvolveError::InvalidConfig(m));
        if self.population_size < 2 {
            return bad(format!("population_size must be >= 2, got {}", self.population_size));
        }
        if self.elite_count >= self.population_size {
            return bad(format!(
                "elite_count ({}) must be below population_size ({})",
                self.elite_count, self.population_size
            ));
        }
        if self.generations < 1 {
            return bad("generations must be >= 1".into());
        }
        for (name, r) in [
            ("crossover_rate", self.crossover_rate),
            ("mutation_rate", self.mutation_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        Ok(())
    }
}

/// How raw fitness values become roulette weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    /// Shift so the worst individual keeps a small positive weight ε; works
    /// for either sense and any sign.
    #[default]
    Shifted,
    /// Weight equals fitness; maximization with nonnegative values only.
    Raw,
}

/// Cumulative weights for fitness-proportionate sampling.
#[derive(Debug, Clone)]
pub struct RouletteWheel {
    cumulative: Vec<f64>,
}

impl RouletteWheel {
    pub fn new(fitnesses: &[f64], sense: Sense, mode: WeightMode) -> Self {
        assert!(!fitnesses.is_empty(), "roulette over an empty population");
        let min = fitnesses.iter().copied().fold(f64::INFINITY, f64::min);
        let max = fitnesses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let eps = 1e-6 * ((max - min) + 1.0);
        let weight = |f: f64| match (mode, sense) {
            (WeightMode::Raw, _) => f.max(0.0),
            (WeightMode::Shifted, Sense::Maximize) => f - min + eps,
            (WeightMode::Shifted, Sense::Minimize) => max - f + eps,
        };
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = fitnesses
            .iter()
            .map(|&f| {
                acc += weight(f);
                acc
            })
            .collect();
        if !(acc > 0.0 && acc.is_finite()) {
            // All raw weights zero: fall back to uniform.
            cumulative = (1..=fitnesses.len()).map(|i| i as f64).collect();
        }
        RouletteWheel { cumulative }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let total = *self.cumulative.last().unwrap();
        let mut prev = 0.0;
        self.cumulative
            .iter()
            .map(|&c| {
                let p = (c - prev) / total;
                prev = c;
                p
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().unwrap();
        let r = rng.random::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= r)
            .min(self.cumulative.len() - 1)
    }
}

/// Draws one index with probability proportional to its shifted weight.
pub fn roulette_select<R: Rng + ?Sized>(fitnesses: &[f64], sense: Sense, rng: &mut R) -> usize {
    RouletteWheel::new(fitnesses, sense, WeightMode::Shifted).sample(rng)
}

/// Genome-specific pieces plugged into [`run`].
pub trait Problem: Sync {
    type Genome: Clone + Send + Sync;

    fn fitness(&self, genome: &Self::Genome) -> f64;

    fn crossover(&self, a: &Self::Genome, b: &Self::Genome, rng: &mut GaRng) -> (Self::Genome, Self::Genome);

    fn mutate(&self, genome: &Self::Genome, rng: &mut GaRng) -> Self::Genome;

    /// Restores feasibility after crossover and mutation.
    fn repair(&self, genome: Self::Genome) -> Self::Genome {
        genome
    }

    /// Every individual in every generation must pass this.
    fn validate(&self, _genome: &Self::Genome) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    /// Position of the generation's best individual in its population.
    pub best_index: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvolutionHistory {
    pub records: Vec<GenerationRecord>,
}

impl EvolutionHistory {
    pub const CSV_HEADER: &'static str = "generation,best_fitness,mean_fitness";

    /// `generation,best_fitness,mean_fitness`, floats in shortest
    /// round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{}", r.generation, r.best_fitness, r.mean_fitness);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_csv())
    }

    /// Parses the `(generation, best, mean)` rows written by [`Self::to_csv`].
    pub fn parse_csv(text: &str) -> Result<Vec<(usize, f64, f64)>, String> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(format!("expected header `{}`", Self::CSV_HEADER));
        }
        lines
            .enumerate()
            .map(|(i, line)| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 3 {
                    return Err(format!("row {}: expected 3 fields", i + 2));
                }
                let e = |m: String| format!("row {}: {m}", i + 2);
                Ok((
                    f[0].parse().map_err(|x| e(format!("{x}")))?,
                    f[1].parse().map_err(|x| e(format!("{x}")))?,
                    f[2].parse().map_err(|x| e(format!("{x}")))?,
                ))
            })
            .collect()
    }

    pub fn best_is_monotone(&self, sense: Sense) -> bool {
        self.records
            .windows(2)
            .all(|w| !sense.better(w[0].best_fitness, w[1].best_fitness))
    }
}

#[derive(Debug, Clone)]
pub struct Outcome<G> {
    /// Best individual seen in any generation.
    pub best: G,
    pub best_fitness: f64,
    pub history: EvolutionHistory,
    pub final_population: Vec<G>,
}

fn evaluate<P: Problem>(problem: &P, pop: &[P::Genome], generation: usize) -> Result<Vec<f64>, EvolveError> {
    let fit: Vec<f64> = pop.par_iter().map(|g| problem.fitness(g)).collect();
    match fit.iter().position(|f| !f.is_finite()) {
        Some(index) => Err(EvolveError::FitnessNotFinite { generation, index }),
        None => Ok(fit),
    }
}

fn best_index(fit: &[f64], sense: Sense) -> usize {
    let mut best = 0;
    for (i, &f) in fit.iter().enumerate().skip(1) {
        if sense.better(f, fit[best]) {
            best = i;
        }
    }
    best
}

fn record(generation: usize, fit: &[f64], sense: Sense) -> GenerationRecord {
    let best = best_index(fit, sense);
    GenerationRecord {
        generation,
        best_fitness: fit[best],
        mean_fitness: fit.iter().sum::<f64>() / fit.len() as f64,
        best_index: best,
    }
}

/// Runs the GA from `initial` for `config.generations` generations.
pub fn run<P: Problem>(
    problem: &P,
    initial: Vec<P::Genome>,
    config: &GaConfig,
) -> Result<Outcome<P::Genome>, EvolveError> {
    run_observed(problem, initial, config, |_, _, _| {})
}

/// As [`run`], calling `observer(generation, population, fitness)` for the
/// initial population and after every replacement.
pub fn run_observed<P, F>(
    problem: &P,
    initial: Vec<P::Genome>,
    config: &GaConfig,
    mut observer: F,
) -> Result<Outcome<P::Genome>, EvolveError>
where
    P: Problem,
    F: FnMut(usize, &[P::Genome], &[f64]),
{
    config.validate()?;
    if initial.len() != config.population_size {
        return Err(EvolveError::InvalidInitialPopulation(format!(
            "expected {} individuals, got {}",
            config.population_size,
            initial.len()
        )));
    }
    for (i, g) in initial.iter().enumerate() {
        problem
            .validate(g)
            .map_err(|e| EvolveError::InvalidInitialPopulation(format!("individual {i}: {e}")))?;
    }
    let sense = config.sense;
    let n = config.population_size;

    let mut pop = initial;
    let mut fit = evaluate(problem, &pop, 0)?;
    observer(0, &pop, &fit);
    let mut history = EvolutionHistory {
        records: vec![record(0, &fit, sense)],
    };
    let first = history.records[0].best_index;
    let (mut best, mut best_fitness) = (pop[first].clone(), fit[first]);

    for generation in 1..=config.generations {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| match sense {
            Sense::Maximize => fit[b].total_cmp(&fit[a]),
            Sense::Minimize => fit[a].total_cmp(&fit[b]),
        });
        let mut next: Vec<P::Genome> = order[..config.elite_count].iter().map(|&i| pop[i].clone()).collect();
        let elite_fit: Vec<f64> = order[..config.elite_count].iter().map(|&i| fit[i]).collect();

        let wheel = RouletteWheel::new(&fit, sense, WeightMode::Shifted);
        let mut offspring: Vec<P::Genome> = Vec::with_capacity(n - config.elite_count);
        let mut slot = 0u32;
        while offspring.len() < n - config.elite_count {
            let mut rng = substream(config.rng_seed, generation as u32, slot);
            slot += 1;
            let (a, b) = (wheel.sample(&mut rng), wheel.sample(&mut rng));
            let children = if rng.random::<f64>() < config.crossover_rate {
                let (c1, c2) = problem.crossover(&pop[a], &pop[b], &mut rng);
                vec![c1, c2]
            } else {
                let fitter = if sense.better(fit[b], fit[a]) { b } else { a };
                vec![pop[fitter].clone()]
            };
            for child in children {
                if offspring.len() == n - config.elite_count {
                    break;
                }
                let child = if rng.random::<f64>() < config.mutation_rate {
                    problem.mutate(&child, &mut rng)
                } else {
                    child
                };
                offspring.push(problem.repair(child));
            }
        }
        for (k, child) in offspring.iter().enumerate() {
            problem
                .validate(child)
                .map_err(|reason| EvolveError::InvalidOffspring {
                    generation,
                    index: config.elite_count + k,
                    reason,
                })?;
        }
        let mut offspring_fit = evaluate(problem, &offspring, generation)?;
        next.extend(offspring);
        let mut next_fit = elite_fit;
        next_fit.append(&mut offspring_fit);
        pop = next;
        fit = next_fit;

        observer(generation, &pop, &fit);
        let rec = record(generation, &fit, sense);
        if sense.better(rec.best_fitness, best_fitness) {
            best = pop[rec.best_index].clone();
            best_fitness = rec.best_fitness;
        }
        history.records.push(rec);
    }

    Ok(Outcome {
        best,
        best_fitness,
        history,
        final_population: pop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Maximize −(x − 3)² over reals; crossover averages, mutation jitters.
    struct Parabola;

    impl Problem for Parabola {
        type Genome = f64;

        fn fitness(&self, x: &f64) -> f64 {
            -(x - 3.0).powi(2)
        }

        fn crossover(&self, a: &f64, b: &f64, rng: &mut GaRng) -> (f64, f64) {
            let t: f64 = rng.random();
            (t * a + (1.0 - t) * b, (1.0 - t) * a + t * b)
        }

        fn mutate(&self, x: &f64, rng: &mut GaRng) -> f64 {
            x + rng.random_range(-0.5..0.5)
        }
    }

    fn initial(n: usize) -> Vec<f64> {
        (0..n).map(|i| -10.0 + i as f64).collect()
    }

    #[test]
    fn config_invariants() {
        let ok = GaConfig::default();
        assert!(ok.validate().is_ok());
        assert!(GaConfig {
            population_size: 1,
            elite_count: 0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(GaConfig { elite_count: 50, ..ok }.validate().is_err());
        assert!(GaConfig { generations: 0, ..ok }.validate().is_err());
        assert!(GaConfig {
            mutation_rate: 1.5,
            ..ok
        }
        .validate()
        .is_err());
        assert!(GaConfig {
            crossover_rate: -0.1,
            ..ok
        }
        .validate()
        .is_err());
    }

    #[test]
    fn raw_mode_is_proportional() {
        let w = RouletteWheel::new(&[1.0, 3.0], Sense::Maximize, WeightMode::Raw);
        let p = w.probabilities();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn equal_fitness_is_uniform() {
        for sense in [Sense::Maximize, Sense::Minimize] {
            let p = RouletteWheel::new(&[5.0, 5.0, 5.0], sense, WeightMode::Shifted).probabilities();
            for x in p {
                assert!((x - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        let p = RouletteWheel::new(&[0.0, 0.0], Sense::Maximize, WeightMode::Raw).probabilities();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn shifted_maximize_weights() {
        let p = RouletteWheel::new(&[1.0, 3.0], Sense::Maximize, WeightMode::Shifted).probabilities();
        let eps = 1e-6 * 3.0;
        assert!((p[0] - eps / (2.0 + 2.0 * eps)).abs() < 1e-15);
    }

    #[test]
    fn minimize_prefers_smaller() {
        let mut rng = substream(1, 0, 0);
        let draws = 100_000;
        let zeros = (0..draws)
            .filter(|_| roulette_select(&[10.0, 30.0], Sense::Minimize, &mut rng) == 0)
            .count();
        // Theoretical P(0) = (20 + ε)/(20 + 2ε), ε = 2.1e-5.
        let eps = 1e-6 * 21.0;
        let p0 = (20.0 + eps) / (20.0 + 2.0 * eps);
        assert!(((zeros as f64 / draws as f64) - p0).abs() < 0.01);
    }

    #[test]
    fn empirical_frequencies_within_three_sigma() {
        let fit = [2.0, 7.0, 4.0, 9.0, 1.0];
        let wheel = RouletteWheel::new(&fit, Sense::Maximize, WeightMode::Shifted);
        let p = wheel.probabilities();
        let mut counts = [0usize; 5];
        let mut rng = substream(99, 0, 0);
        let draws = 100_000;
        for _ in 0..draws {
            counts[wheel.sample(&mut rng)] += 1;
        }
        for i in 0..5 {
            let sd = (draws as f64 * p[i] * (1.0 - p[i])).sqrt();
            assert!(
                (counts[i] as f64 - draws as f64 * p[i]).abs() <= 3.0 * sd + 1.0,
                "{i}: {counts:?} vs {p:?}"
            );
        }
    }

    #[test]
    fn substreams_differ() {
        let a: u64 = substream(5, 1, 0).random();
        let b: u64 = substream(5, 1, 1).random();
        let c: u64 = substream(5, 2, 0).random();
        let a2: u64 = substream(5, 1, 0).random();
        assert_eq!(a, a2);
        assert!(a != b && a != c && b != c);
    }

    #[test]
    fn converges_and_is_monotone() {
        let cfg = GaConfig {
            population_size: 20,
            generations: 40,
            ..GaConfig::default()
        };
        let out = run(&Parabola, initial(20), &cfg).unwrap();
        assert!((out.best - 3.0).abs() < 0.05, "{}", out.best);
        assert!(out.history.best_is_monotone(Sense::Maximize));
        assert_eq!(out.history.records.len(), 41);
    }

    #[test]
    fn elites_survive_unchanged() {
        let cfg = GaConfig {
            population_size: 10,
            generations: 5,
            elite_count: 2,
            mutation_rate: 1.0,
            ..GaConfig::default()
        };
        let mut gens: Vec<Vec<f64>> = Vec::new();
        let mut fits: Vec<Vec<f64>> = Vec::new();
        run_observed(&Parabola, initial(10), &cfg, |_, pop, fit| {
            gens.push(pop.to_vec());
            fits.push(fit.to_vec());
        })
        .unwrap();
        for t in 0..gens.len() - 1 {
            let mut order: Vec<usize> = (0..10).collect();
            order.sort_by(|&a, &b| fits[t][b].total_cmp(&fits[t][a]));
            for e in 0..2 {
                assert_eq!(gens[t + 1][e].to_bits(), gens[t][order[e]].to_bits());
            }
        }
    }

    #[test]
    fn degenerate_operators_resample() {
        let cfg = GaConfig {
            population_size: 10,
            generations: 3,
            elite_count: 0,
            crossover_rate: 0.0,
            mutation_rate: 0.0,
            ..GaConfig::default()
        };
        let mut gens: Vec<Vec<f64>> = Vec::new();
        run_observed(&Parabola, initial(10), &cfg, |_, pop, _| gens.push(pop.to_vec())).unwrap();
        for t in 0..gens.len() - 1 {
            for x in &gens[t + 1] {
                assert!(gens[t].iter().any(|y| y.to_bits() == x.to_bits()));
            }
        }
    }

    #[test]
    fn same_seed_same_history() {
        let cfg = GaConfig {
            population_size: 12,
            generations: 8,
            rng_seed: 42,
            ..GaConfig::default()
        };
        let a = run(&Parabola, initial(12), &cfg).unwrap();
        let b = run(&Parabola, initial(12), &cfg).unwrap();
        assert_eq!(a.history.to_csv(), b.history.to_csv());
        assert_eq!(a.best.to_bits(), b.best.to_bits());
        let c = run(&Parabola, initial(12), &GaConfig { rng_seed: 43, ..cfg }).unwrap();
        assert_ne!(a.history.to_csv(), c.history.to_csv());
    }

    #[test]
    fn thread_count_does_not_matter() {
        let cfg = GaConfig {
            population_size: 16,
            generations: 6,
            ..GaConfig::default()
        };
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let a = single.install(|| run(&Parabola, initial(16), &cfg).unwrap());
        let b = run(&Parabola, initial(16), &cfg).unwrap();
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn wrong_population_size_rejected() {
        let cfg = GaConfig::default();
        assert!(matches!(
            run(&Parabola, initial(3), &cfg),
            Err(EvolveError::InvalidInitialPopulation(_))
        ));
    }

    struct Nan;
    impl Problem for Nan {
        type Genome = f64;
        fn fitness(&self, x: &f64) -> f64 {
            if *x > 5.0 {
                f64::NAN
            } else {
                *x
            }
        }
        fn crossover(&self, a: &f64, b: &f64, _: &mut GaRng) -> (f64, f64) {
            (*a, *b)
        }
        fn mutate(&self, x: &f64, _: &mut GaRng) -> f64 {
            *x
        }
    }

    #[test]
    fn non_finite_fitness_reported() {
        let cfg = GaConfig {
            population_size: 10,
            ..GaConfig::default()
        };
        let err = run(&Nan, (0..10).map(f64::from).collect(), &cfg).unwrap_err();
        assert_eq!(
            err,
            EvolveError::FitnessNotFinite {
                generation: 0,
                index: 6
            }
        );
    }

    #[test]
    fn history_csv_round_trip() {
        let h = EvolutionHistory {
            records: vec![
                GenerationRecord {
                    generation: 0,
                    best_fitness: 1.0 / 3.0,
                    mean_fitness: 1e20,
                    best_index: 0,
                },
                GenerationRecord {
                    generation: 1,
                    best_fitness: 0.5,
                    mean_fitness: -2.25,
                    best_index: 3,
                },
            ],
        };
        let rows = EvolutionHistory::parse_csv(&h.to_csv()).unwrap();
        assert_eq!(rows, vec![(0, 1.0 / 3.0, 1e20), (1, 0.5, -2.25)]);
    }
}
