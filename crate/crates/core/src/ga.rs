//! Genetic search over sleep hyperparameters.
//!
//! A genome holds the nine searchable [`SleepConfig`] fields; `dt` stays at
//! the base configuration's value because only `max_rate * dt` matters.
//! Fitness evaluations within a generation run in parallel, each with a seed
//! derived from `(generation, index)`, so results do not depend on the number
//! of worker threads.

use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Section;
use crate::data::{update_pixel_mean, DatasetSlice, PixelMean, SubsetManifest};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::nn::{init_weights_with, train, InitScheme, Mlp, TrainConfig, PAPER_LAYERS};
use crate::scalar::Scalar;
use crate::seed::{self, Rng};
use crate::sleep::{self, LayerScales, SleepConfig, TraceLevel};

pub const GENE_NAMES: [&str; 9] = [
    "time_steps",
    "max_rate",
    "alpha_scale",
    "beta_1",
    "beta_2",
    "beta_3",
    "decay",
    "inc",
    "dec",
];
pub const NUM_GENES: usize = GENE_NAMES.len();
const TIME_STEPS_GENE: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    /// Per-gene mutation probability.
    pub mutation_rate: f64,
    /// Mutation standard deviation as a fraction of the gene's range.
    pub mutation_scale: f64,
    pub tournament_size: usize,
    pub elitism: usize,
    pub seed: u64,
    /// `(min, max)` per gene, in [`GENE_NAMES`] order.
    pub bounds: Vec<(f64, f64)>,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 20,
            generations: 30,
            mutation_rate: 0.2,
            mutation_scale: 0.1,
            tournament_size: 3,
            elitism: 2,
            seed: 0,
            bounds: default_bounds(),
        }
    }
}

/// Search ranges that contain both published configurations.
pub fn default_bounds() -> Vec<(f64, f64)> {
    vec![
        (50.0, 600.0),
        (50.0, 700.0),
        (1.0, 40.0),
        (0.5, 40.0),
        (0.5, 40.0),
        (0.5, 40.0),
        (0.8, 1.0),
        (1e-5, 2e-3),
        (1e-5, 2e-3),
    ]
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.population < 2 {
            return bad(format!("population must be >= 2, got {}", self.population));
        }
        if self.elitism >= self.population {
            return bad(format!(
                "elitism {} must be below population {}",
                self.elitism, self.population
            ));
        }
        if self.tournament_size == 0 {
            return bad("tournament_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return bad(format!("mutation_rate must lie in [0, 1], got {}", self.mutation_rate));
        }
        if !(self.mutation_scale >= 0.0 && self.mutation_scale.is_finite()) {
            return bad(format!("mutation_scale must be >= 0, got {}", self.mutation_scale));
        }
        if self.bounds.len() != NUM_GENES {
            return bad(format!("need {NUM_GENES} bounds, got {}", self.bounds.len()));
        }
        for (name, &(lo, hi)) in GENE_NAMES.iter().zip(&self.bounds) {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return bad(format!("bounds for {name} need min < max, got ({lo}, {hi})"));
            }
        }
        let (lo, hi) = self.bounds[TIME_STEPS_GENE];
        if lo.ceil() > hi.floor() || hi < 1.0 {
            return bad("time_steps bounds contain no integer >= 1".into());
        }
        Ok(())
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new();
        s.set("population", self.population);
        s.set("generations", self.generations);
        s.set("mutation_rate", self.mutation_rate);
        s.set("mutation_scale", self.mutation_scale);
        s.set("tournament_size", self.tournament_size);
        s.set("elitism", self.elitism);
        s.set("seed", self.seed);
        for (name, (lo, hi)) in GENE_NAMES.iter().zip(&self.bounds) {
            s.set(&format!("{name}_min"), lo);
            s.set(&format!("{name}_max"), hi);
        }
        s
    }

    pub fn from_section_over(base: &Self, s: &Section) -> Result<Self> {
        let mut cfg = base.clone();
        if let Some(v) = s.get("population")? {
            cfg.population = v;
        }
        if let Some(v) = s.get("generations")? {
            cfg.generations = v;
        }
        if let Some(v) = s.get("mutation_rate")? {
            cfg.mutation_rate = v;
        }
        if let Some(v) = s.get("mutation_scale")? {
            cfg.mutation_scale = v;
        }
        if let Some(v) = s.get("tournament_size")? {
            cfg.tournament_size = v;
        }
        if let Some(v) = s.get("elitism")? {
            cfg.elitism = v;
        }
        if let Some(v) = s.get("seed")? {
            cfg.seed = v;
        }
        for (k, name) in GENE_NAMES.iter().enumerate() {
            if let Some(v) = s.get(&format!("{name}_min"))? {
                cfg.bounds[k].0 = v;
            }
            if let Some(v) = s.get(&format!("{name}_max"))? {
                cfg.bounds[k].1 = v;
            }
        }
        Ok(cfg)
    }

    fn repair(&self, genes: &mut [f64]) {
        for (g, &(lo, hi)) in genes.iter_mut().zip(&self.bounds) {
            *g = g.clamp(lo, hi);
        }
        let (lo, hi) = self.bounds[TIME_STEPS_GENE];
        genes[TIME_STEPS_GENE] = genes[TIME_STEPS_GENE].round().clamp(lo.ceil().max(1.0), hi.floor());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub genes: Vec<f64>,
    pub fitness: Option<f64>,
    /// Seed the fitness was evaluated with.
    pub eval_seed: Option<u64>,
}

impl Genome {
    pub fn from_sleep_config(cfg: &SleepConfig) -> Result<Self> {
        if cfg.beta.len() != 3 {
            return Err(Error::Config(format!(
                "genome encodes 3 beta thresholds, config has {}",
                cfg.beta.len()
            )));
        }
        Ok(Self {
            genes: vec![
                cfg.time_steps as f64,
                cfg.max_rate,
                cfg.alpha_scale,
                cfg.beta[0],
                cfg.beta[1],
                cfg.beta[2],
                cfg.decay,
                cfg.inc,
                cfg.dec,
            ],
            fitness: None,
            eval_seed: None,
        })
    }

    /// `base` with the searched fields replaced by this genome's genes. The
    /// seed is the evaluation seed when there is one.
    pub fn to_sleep_config(&self, base: &SleepConfig) -> SleepConfig {
        let g = &self.genes;
        SleepConfig {
            seed: self.eval_seed.unwrap_or(base.seed),
            time_steps: g[0].round().max(1.0) as usize,
            max_rate: g[1],
            alpha_scale: g[2],
            beta: vec![g[3], g[4], g[5]],
            decay: g[6],
            inc: g[7],
            dec: g[8],
            ..base.clone()
        }
    }

    fn random(cfg: &GaConfig, rng: &mut Rng) -> Self {
        let mut genes: Vec<f64> = cfg.bounds.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect();
        cfg.repair(&mut genes);
        Self { genes, fitness: None, eval_seed: None }
    }

    fn score(&self) -> f64 {
        self.fitness.unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
    pub best_ever: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaResult {
    pub best: Genome,
    pub history: Vec<GenerationStats>,
}

impl GaResult {
    pub fn write_history_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "generation,best,mean,best_ever")?;
        for s in &self.history {
            writeln!(w, "{},{},{},{}", s.generation, s.best, s.mean, s.best_ever)?;
        }
        Ok(())
    }
}

fn tournament<'a>(pop: &'a [Genome], size: usize, rng: &mut Rng) -> &'a Genome {
    let mut best = &pop[rng.random_range(0..pop.len())];
    for _ in 1..size {
        let c = &pop[rng.random_range(0..pop.len())];
        if c.score() > best.score() {
            best = c;
        }
    }
    best
}

fn evaluate_all<F>(pop: &mut [Genome], generation: usize, ga_seed: u64, fitness: &F)
where
    F: Fn(&Genome, u64) -> f64 + Sync,
{
    let gen_seed = seed::derive(ga_seed, generation as u64);
    pop.par_iter_mut().enumerate().for_each(|(i, g)| {
        if g.fitness.is_none() {
            let s = seed::derive(gen_seed, i as u64);
            let f = fitness(g, s);
            g.fitness = Some(if f.is_nan() { f64::NEG_INFINITY } else { f });
            g.eval_seed = Some(s);
        }
    });
}

/// Runs the search. `anchors` seed the first individuals of the initial
/// population (clamped to bounds); the rest are uniform within bounds.
///
/// `fitness` receives the genome and a seed unique to its generation and
/// position; higher is better.
pub fn evolve<F>(cfg: &GaConfig, anchors: &[Genome], fitness: F) -> Result<GaResult>
where
    F: Fn(&Genome, u64) -> f64 + Sync,
{
    cfg.validate()?;
    if anchors.len() > cfg.population {
        return Err(Error::Config("more anchors than population slots".into()));
    }
    let mut rng = seed::rng(cfg.seed);
    let mut pop: Vec<Genome> = anchors
        .iter()
        .map(|a| {
            if a.genes.len() != NUM_GENES {
                return Err(Error::shape("ga anchor", NUM_GENES, a.genes.len()));
            }
            let mut genes = a.genes.clone();
            cfg.repair(&mut genes);
            Ok(Genome { genes, fitness: None, eval_seed: None })
        })
        .collect::<Result<_>>()?;
    while pop.len() < cfg.population {
        pop.push(Genome::random(cfg, &mut rng));
    }

    let mut history = Vec::with_capacity(cfg.generations + 1);
    let mut best_ever: Option<Genome> = None;
    for generation in 0..=cfg.generations {
        if generation > 0 {
            pop.sort_by(|a, b| b.score().total_cmp(&a.score()));
            let mut next: Vec<Genome> = pop[..cfg.elitism].to_vec();
            while next.len() < cfg.population {
                let a = tournament(&pop, cfg.tournament_size, &mut rng);
                let b = tournament(&pop, cfg.tournament_size, &mut rng);
                let mut genes: Vec<f64> = a
                    .genes
                    .iter()
                    .zip(&b.genes)
                    .map(|(&x, &y)| if rng.random_bool(0.5) { x } else { y })
                    .collect();
                for (g, &(lo, hi)) in genes.iter_mut().zip(&cfg.bounds) {
                    if rng.random_bool(cfg.mutation_rate) {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *g += z * cfg.mutation_scale * (hi - lo);
                    }
                }
                cfg.repair(&mut genes);
                next.push(Genome { genes, fitness: None, eval_seed: None });
            }
            pop = next;
        }
        evaluate_all(&mut pop, generation, cfg.seed, &fitness);

        let gen_best = pop
            .iter()
            .max_by(|a, b| a.score().total_cmp(&b.score()))
            .expect("population is non-empty");
        if best_ever.as_ref().is_none_or(|b| gen_best.score() > b.score()) {
            best_ever = Some(gen_best.clone());
        }
        let stats = GenerationStats {
            generation,
            best: gen_best.score(),
            mean: pop.iter().map(Genome::score).sum::<f64>() / pop.len() as f64,
            best_ever: best_ever.as_ref().map_or(f64::NEG_INFINITY, Genome::score),
        };
        log::info!(
            "generation {generation}: best {:.4} mean {:.4} best-ever {:.4}",
            stats.best,
            stats.mean,
            stats.best_ever
        );
        history.push(stats);
    }
    Ok(GaResult {
        best: best_ever.expect("at least one generation is evaluated"),
        history,
    })
}

/// Validation accuracy of a fixed trained network after sleeping with a
/// candidate configuration.
pub struct SleepFitness<'a, T> {
    mlp: &'a Mlp<T>,
    mean: &'a PixelMean<T>,
    act_max: Vec<T>,
    valid: &'a DatasetSlice<T>,
    base: SleepConfig,
}

impl<'a, T: Scalar> SleepFitness<'a, T> {
    /// Activation maxima are taken once from `scale_data`.
    pub fn new(
        mlp: &'a Mlp<T>,
        mean: &'a PixelMean<T>,
        scale_data: &DatasetSlice<T>,
        valid: &'a DatasetSlice<T>,
        base: SleepConfig,
    ) -> Result<Self> {
        Ok(Self {
            act_max: sleep::activation_maxima(mlp, scale_data)?,
            mlp,
            mean,
            valid,
            base,
        })
    }

    /// Accuracy of the unslept network on the validation set.
    pub fn baseline(&self) -> Result<f64> {
        Ok(evaluate(self.mlp, self.valid)?.accuracy)
    }

    fn try_eval(&self, genome: &Genome, seed: u64) -> Result<f64> {
        let cfg = genome.to_sleep_config(&self.base).with_seed(seed);
        let scales = LayerScales::from_act_max(self.act_max.clone(), cfg.alpha_scale)?;
        let (slept, _) = sleep::src_sleep_with_scales(self.mlp, self.mean, &scales, &cfg, TraceLevel::Counts)?;
        Ok(evaluate(&slept, self.valid)?.accuracy)
    }

    /// Post-sleep validation accuracy; any failure scores 0.
    pub fn eval(&self, genome: &Genome, seed: u64) -> f64 {
        self.try_eval(genome, seed).unwrap_or_else(|e| {
            log::debug!("genome scored 0: {e}");
            0.0
        })
    }
}

/// Weighted mean of several fitness contexts, e.g. one per data fraction.
pub struct WeightedFitness<'a, T> {
    parts: Vec<(f64, SleepFitness<'a, T>)>,
}

impl<'a, T: Scalar> WeightedFitness<'a, T> {
    pub fn new(parts: Vec<(f64, SleepFitness<'a, T>)>) -> Result<Self> {
        if parts.is_empty() || parts.iter().any(|(w, _)| w.is_nan() || *w <= 0.0) {
            return Err(Error::Config("weighted fitness needs positive weights".into()));
        }
        Ok(Self { parts })
    }

    pub fn eval(&self, genome: &Genome, seed: u64) -> f64 {
        let total: f64 = self.parts.iter().map(|(w, _)| w).sum();
        self.parts.iter().map(|(w, f)| w * f.eval(genome, seed)).sum::<f64>() / total
    }
}

/// Inputs of a tuning run on one data fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSpec {
    pub fraction: f64,
    /// Validation set size as a fraction of the training file, drawn from
    /// images outside the training subset.
    pub valid_fraction: f64,
    pub seed: u64,
    pub init: InitScheme,
    pub train_cfg: TrainConfig,
    /// Starting point; its searched fields also seed the first genome.
    pub base_sleep: SleepConfig,
    pub ga: GaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub result: GaResult,
    /// Validation accuracy of the trained network before sleep.
    pub baseline_accuracy: f64,
    pub best_config: SleepConfig,
    pub subset: SubsetManifest,
    pub valid: SubsetManifest,
}

/// Trains on a balanced subset of `train_full`, then searches sleep
/// configurations for the best post-sleep validation accuracy.
pub fn tune(train_full: &DatasetSlice<f64>, spec: &TuneSpec) -> Result<TuneOutcome> {
    let subset = train_full.balanced_subset(spec.fraction, seed::derive(spec.seed, 1))?;
    let valid = train_full
        .without(&subset)?
        .balanced_subset(spec.valid_fraction, seed::derive(spec.seed, 2))?;
    let mut mlp = init_weights_with(&PAPER_LAYERS, seed::derive(spec.seed, 3), spec.init)?;
    train(&mut mlp, &subset, &spec.train_cfg.clone().with_seed(seed::derive(spec.seed, 4)))?;
    let mean = update_pixel_mean(None, &subset)?;
    let ctx = SleepFitness::new(&mlp, &mean, &subset, &valid, spec.base_sleep.clone())?;
    let baseline_accuracy = ctx.baseline()?;
    log::info!("validation accuracy before sleep: {baseline_accuracy:.4}");
    let anchor = Genome::from_sleep_config(&spec.base_sleep)?;
    let result = evolve(&spec.ga, &[anchor], |g: &Genome, s| ctx.eval(g, s))?;
    Ok(TuneOutcome {
        best_config: result.best.to_sleep_config(&spec.base_sleep),
        result,
        baseline_accuracy,
        subset: subset.manifest(),
        valid: valid.manifest(),
    })
}

/// Root-mean-square distance between gene vectors, each gene divided by
/// its range.
pub fn normalized_distance(bounds: &[(f64, f64)], a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = bounds
        .iter()
        .zip(a.iter().zip(b))
        .map(|(&(lo, hi), (x, y))| ((x - y) / (hi - lo)).powi(2))
        .sum();
    (sq / bounds.len() as f64).sqrt()
}
