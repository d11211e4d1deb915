use proptest::prelude::*;
use sleep_replay::ga::{default_bounds, evolve, GaConfig, Genome, NUM_GENES};
use sleep_replay::sleep::SleepConfig;

/// Range-normalised RMS distance, computed independently of the library.
fn distance(bounds: &[(f64, f64)], a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..bounds.len() {
        let d = (a[k] - b[k]) / (bounds[k].1 - bounds[k].0);
        total += d * d;
    }
    (total / bounds.len() as f64).sqrt()
}

fn target() -> Vec<f64> {
    vec![250.0, 300.0, 12.0, 20.0, 8.0, 15.0, 0.93, 9e-4, 3e-4]
}

fn run(seed: u64, threads: usize) -> sleep_replay::ga::GaResult {
    let bounds = default_bounds();
    let t = target();
    let cfg = GaConfig { seed, ..Default::default() };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| evolve(&cfg, &[], |g: &Genome, _| -distance(&bounds, &g.genes, &t)).unwrap())
}

#[test]
fn synthetic_optimum_is_reached_within_thirty_generations() {
    let bounds = default_bounds();
    for seed in [1, 2, 3] {
        let r = run(seed, 1);
        assert_eq!(r.history.len(), 31);
        let d = distance(&bounds, &r.best.genes, &target());
        assert!(d <= 0.05, "seed {seed}: distance {d}");
    }
}

#[test]
fn thread_count_does_not_change_the_search() {
    let a = run(7, 1);
    let b = run(7, 4);
    assert_eq!(a.best, b.best);
    assert_eq!(
        a.history.iter().map(|h| h.best_ever).collect::<Vec<_>>(),
        b.history.iter().map(|h| h.best_ever).collect::<Vec<_>>()
    );
}

#[test]
fn fitness_seeds_are_unique_per_evaluation() {
    let seen = std::sync::Mutex::new(Vec::new());
    let cfg = GaConfig { generations: 3, seed: 5, ..Default::default() };
    evolve(&cfg, &[], |_: &Genome, s| {
        seen.lock().unwrap().push(s);
        0.0
    })
    .unwrap();
    let mut seeds = seen.into_inner().unwrap();
    let n = seeds.len();
    seeds.sort_unstable();
    seeds.dedup();
    assert_eq!(seeds.len(), n);
}

#[test]
fn anchor_is_evaluated_and_kept_when_optimal() {
    let anchor = Genome::from_sleep_config(&SleepConfig::mnist()).unwrap();
    let want = anchor.genes.clone();
    let bounds = default_bounds();
    let cfg = GaConfig { generations: 4, seed: 11, ..Default::default() };
    let r = evolve(&cfg, &[anchor], |g: &Genome, _| -distance(&bounds, &g.genes, &want)).unwrap();
    assert_eq!(r.best.genes, want);
    assert_eq!(r.best.fitness, Some(0.0));
    let cfg_back = r.best.to_sleep_config(&SleepConfig::mnist());
    assert_eq!(cfg_back.time_steps, 365);
    assert_eq!(cfg_back.beta, vec![24.3, 5.08, 18.42]);
}

#[test]
fn nan_fitness_never_wins() {
    let cfg = GaConfig { generations: 2, seed: 3, ..Default::default() };
    let r = evolve(&cfg, &[], |g: &Genome, _| if g.genes[0] > 300.0 { f64::NAN } else { g.genes[1] }).unwrap();
    assert!(r.best.genes[0] <= 300.0);
    assert!(r.best.fitness.unwrap().is_finite());
}

#[test]
fn bad_configs_are_rejected() {
    let zero_pop = GaConfig { population: 0, ..Default::default() };
    assert!(evolve(&zero_pop, &[], |_: &Genome, _| 0.0).is_err());
    let too_many = vec![Genome::from_sleep_config(&SleepConfig::mnist()).unwrap(); 21];
    assert!(evolve(&GaConfig::default(), &too_many, |_: &Genome, _| 0.0).is_err());
    let short = Genome { genes: vec![1.0; NUM_GENES - 1], fitness: None, eval_seed: None };
    assert!(evolve(&GaConfig::default(), &[short], |_: &Genome, _| 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn best_ever_is_monotone_and_genes_stay_in_bounds(seed in 0u64..1000, pop in 4usize..12) {
        let bounds = default_bounds();
        let cfg = GaConfig { population: pop, generations: 6, seed, mutation_scale: 0.5, ..Default::default() };
        let r = evolve(&cfg, &[], |g: &Genome, s| g.genes[2] - (s % 7) as f64).unwrap();
        for w in r.history.windows(2) {
            prop_assert!(w[1].best_ever >= w[0].best_ever);
            prop_assert!(w[1].best_ever >= w[1].best);
        }
        for (g, &(lo, hi)) in r.best.genes.iter().zip(&bounds) {
            prop_assert!(*g >= lo && *g <= hi);
        }
        prop_assert_eq!(r.best.genes[0].fract(), 0.0);
        prop_assert_eq!(r.history.last().unwrap().best_ever, r.best.fitness.unwrap());
    }
}
