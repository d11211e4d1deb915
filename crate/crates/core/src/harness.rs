//! Experiment families: limited data, single-class imbalance and two
//! sequential tasks.
//!
//! Every `(trial, condition)` cell is an independent unit owning its model
//! and RNG streams. Units may run on a thread pool; results are merged in
//! trial-major, condition-minor order, so reports do not depend on `jobs`.
//!
//! Seeds: trial `k` uses `base_seed + k`. Data sampling, initialization,
//! training, sleep and fine-tuning draw from separate streams derived from
//! that seed, and the streams do not depend on the condition.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{join_list, ConfigFile, Section};
use crate::data::{update_pixel_mean, DatasetId, DatasetSlice, PixelMean, Task, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Metrics};
use crate::nn::{init_weights_with, train, InitScheme, Mlp, TrainConfig, PAPER_LAYERS};
use crate::seed;
use crate::sleep::{src_sleep, trace_summary, DeltaSigns, SleepConfig};

const STREAM_DATA: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_SLEEP: u64 = 4;
const STREAM_FINETUNE: u64 = 5;
const STREAM_DATA_T2: u64 = 6;
const STREAM_TRAIN_T2: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Limited,
    Imbalanced,
    Continual,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Limited => "limited",
            Family::Imbalanced => "imbalanced",
            Family::Continual => "continual",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "limited" => Ok(Family::Limited),
            "imbalanced" => Ok(Family::Imbalanced),
            "continual" => Ok(Family::Continual),
            other => Err(Error::Config(format!("unknown experiment family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "post_sleep")]
    PostSleep,
    #[serde(rename = "post_finetune")]
    PostFinetune,
    #[serde(rename = "post_T1")]
    PostT1,
    #[serde(rename = "post_T2")]
    PostT2,
    #[serde(rename = "post_SRC")]
    PostSrc,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::PostSleep => "post_sleep",
            Phase::PostFinetune => "post_finetune",
            Phase::PostT1 => "post_T1",
            Phase::PostT2 => "post_T2",
            Phase::PostSrc => "post_SRC",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Family {
    /// Phases recorded for every cell, in execution order.
    pub fn phases(self, finetune: bool) -> Vec<Phase> {
        match self {
            Family::Limited => vec![Phase::Baseline, Phase::PostSleep, Phase::PostFinetune],
            Family::Imbalanced => vec![Phase::Baseline, Phase::PostSleep],
            Family::Continual if finetune => {
                vec![Phase::PostT1, Phase::PostT2, Phase::PostSrc, Phase::PostFinetune]
            }
            Family::Continual => vec![Phase::PostT1, Phase::PostT2, Phase::PostSrc],
        }
    }
}

/// Log-spaced grid used for the limited-data family.
pub const LIMITED_FRACTIONS: [f64; 11] = [0.001, 0.002, 0.005, 0.01, 0.02, 0.03, 0.05, 0.1, 0.2, 0.5, 1.0];
pub const CONTINUAL_FRACTIONS: [f64; 5] = [0.01, 0.02, 0.05, 0.1, 0.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub family: Family,
    pub dataset: DatasetId,
    /// Limited: subset fractions. Continual: Task 1 fractions.
    pub fractions: Vec<f64>,
    /// Continual: Task 2 fractions.
    pub fractions_t2: Vec<f64>,
    /// Imbalanced: size of the balanced subset before one class is reduced.
    pub imbalance_base: f64,
    pub class_fractions: Vec<f64>,
    pub target_classes: Vec<usize>,
    pub trials: usize,
    pub train_cfg: TrainConfig,
    pub finetune_cfg: TrainConfig,
    pub sleep_cfg: SleepConfig,
    pub base_seed: u64,
    pub init: InitScheme,
    /// Continual: whether the fine-tuning phase runs.
    pub finetune: bool,
}

impl ExperimentSpec {
    pub fn defaults(family: Family, dataset: DatasetId) -> Self {
        let train_cfg = match (family, dataset) {
            (Family::Continual, DatasetId::Mnist) => TrainConfig::baseline().with_epochs(3),
            (Family::Continual, DatasetId::Fmnist) => TrainConfig::baseline().with_epochs(5),
            _ => TrainConfig::baseline(),
        };
        let fractions = match family {
            Family::Limited => LIMITED_FRACTIONS.to_vec(),
            Family::Imbalanced => vec![0.1],
            Family::Continual => CONTINUAL_FRACTIONS.to_vec(),
        };
        Self {
            family,
            dataset,
            fractions_t2: if family == Family::Continual { fractions.clone() } else { Vec::new() },
            fractions,
            imbalance_base: 0.1,
            class_fractions: (1..=10).map(|k| k as f64 / 10.0).collect(),
            target_classes: (0..NUM_CLASSES).collect(),
            trials: 1,
            train_cfg,
            finetune_cfg: TrainConfig::finetune(),
            sleep_cfg: SleepConfig::for_dataset(dataset),
            base_seed: 0,
            init: InitScheme::default(),
            finetune: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        let in_unit = |f: &f64| *f > 0.0 && *f <= 1.0;
        let grids: &[(&str, &[f64])] = match self.family {
            Family::Limited => &[("fractions", &self.fractions)],
            Family::Imbalanced => &[("class_fractions", &self.class_fractions)],
            Family::Continual => &[("fractions", &self.fractions), ("fractions_t2", &self.fractions_t2)],
        };
        for (name, g) in grids {
            if g.is_empty() {
                return bad(format!("{name} must not be empty"));
            }
            if !g.iter().all(in_unit) {
                return bad(format!("{name} must lie in (0, 1]"));
            }
        }
        if self.family == Family::Imbalanced {
            if !in_unit(&self.imbalance_base) {
                return bad("imbalance_base must lie in (0, 1]".into());
            }
            if self.target_classes.is_empty() || self.target_classes.iter().any(|&c| c >= NUM_CLASSES) {
                return bad("target_classes must be non-empty and below 10".into());
            }
        }
        self.train_cfg.validate()?;
        self.finetune_cfg.validate()?;
        self.sleep_cfg.validate(PAPER_LAYERS.len() - 1)
    }

    /// Cells of one trial, in report order.
    pub fn conditions(&self) -> Vec<Condition> {
        match self.family {
            Family::Limited => self.fractions.iter().map(|&f| Condition::limited(f)).collect(),
            Family::Imbalanced => self
                .target_classes
                .iter()
                .flat_map(|&c| {
                    self.class_fractions.iter().map(move |&cf| Condition {
                        fraction: self.imbalance_base,
                        fraction_t2: None,
                        target_class: Some(c),
                        class_fraction: Some(cf),
                    })
                })
                .collect(),
            Family::Continual => self
                .fractions
                .iter()
                .flat_map(|&f1| {
                    self.fractions_t2.iter().map(move |&f2| Condition {
                        fraction: f1,
                        fraction_t2: Some(f2),
                        target_class: None,
                        class_fraction: None,
                    })
                })
                .collect(),
        }
    }

    pub fn to_config(&self) -> ConfigFile {
        let mut e = Section::new();
        e.set("family", self.family);
        e.set("dataset", self.dataset);
        e.set("fractions", join_list(&self.fractions));
        if !self.fractions_t2.is_empty() {
            e.set("fractions_t2", join_list(&self.fractions_t2));
        }
        e.set("imbalance_base", self.imbalance_base);
        e.set("class_fractions", join_list(&self.class_fractions));
        e.set("target_classes", join_list(&self.target_classes));
        e.set("trials", self.trials);
        e.set("base_seed", self.base_seed);
        e.set("init", self.init);
        e.set("finetune", self.finetune);
        let mut cfg = ConfigFile::new();
        cfg.insert("experiment", e);
        cfg.insert("train", self.train_cfg.to_section());
        cfg.insert("finetune", self.finetune_cfg.to_section());
        cfg.insert("sleep", self.sleep_cfg.to_section());
        cfg
    }

    /// Family and dataset come from `[experiment]` unless given; the other
    /// fields start from [`ExperimentSpec::defaults`] and are overridden by
    /// the `[experiment]`, `[train]`, `[finetune]` and `[sleep]` sections.
    pub fn from_config(cfg: &ConfigFile, family: Option<Family>, dataset: Option<DatasetId>) -> Result<Self> {
        let empty = Section::new();
        let e = cfg.section("experiment").unwrap_or(&empty);
        let family = match family {
            Some(f) => f,
            None => e.get("family")?.unwrap_or(Family::Limited),
        };
        let dataset = match dataset {
            Some(d) => d,
            None => e.get("dataset")?.unwrap_or(DatasetId::Mnist),
        };
        let mut spec = Self::defaults(family, dataset);
        if let Some(v) = e.get_list("fractions")? {
            spec.fractions = v;
            if family == Family::Continual && !e.contains("fractions_t2") {
                spec.fractions_t2 = spec.fractions.clone();
            }
        }
        if let Some(v) = e.get_list("fractions_t2")? {
            spec.fractions_t2 = v;
        }
        if let Some(v) = e.get("imbalance_base")? {
            spec.imbalance_base = v;
        }
        if let Some(v) = e.get_list("class_fractions")? {
            spec.class_fractions = v;
        }
        if let Some(v) = e.get_list("target_classes")? {
            spec.target_classes = v;
        }
        if let Some(v) = e.get("trials")? {
            spec.trials = v;
        }
        if let Some(v) = e.get("base_seed")? {
            spec.base_seed = v;
        }
        if let Some(v) = e.get("init")? {
            spec.init = v;
        }
        if let Some(v) = e.get("finetune")? {
            spec.finetune = v;
        }
        if let Some(s) = cfg.section("train") {
            spec.train_cfg = TrainConfig::from_section_over(&spec.train_cfg, s)?;
        }
        if let Some(s) = cfg.section("finetune") {
            spec.finetune_cfg = TrainConfig::from_section_over(&spec.finetune_cfg, s)?;
        }
        if let Some(s) = cfg.section("sleep") {
            spec.sleep_cfg = SleepConfig::from_section_over(&spec.sleep_cfg, s)?;
        }
        Ok(spec)
    }
}

/// One cell of an experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    /// Limited / imbalanced base / Task 1 fraction.
    pub fraction: f64,
    pub fraction_t2: Option<f64>,
    pub target_class: Option<usize>,
    pub class_fraction: Option<f64>,
}

impl Condition {
    pub fn limited(fraction: f64) -> Self {
        Self {
            fraction,
            fraction_t2: None,
            target_class: None,
            class_fraction: None,
        }
    }

    fn csv_fields(&self) -> String {
        fn opt<T: fmt::Display>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{}",
            self.fraction,
            opt(self.fraction_t2),
            opt(self.target_class),
            opt(self.class_fraction)
        )
    }

    fn key(&self) -> String {
        self.csv_fields()
    }
}

const CONDITION_HEADER: &str = "fraction,fraction_t2,target_class,class_fraction";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub phase: Phase,
    pub metrics: Metrics,
}

/// Compact record of one sleep run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SleepStats {
    pub mean_rate: Vec<f64>,
    pub delta_signs: DeltaSigns,
    pub output_spikes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub condition: Condition,
    pub train_size: usize,
    pub phases: Vec<PhaseResult>,
    pub sleep: SleepStats,
}

impl TrialRecord {
    pub fn phase(&self, phase: Phase) -> Option<&Metrics> {
        self.phases.iter().find(|p| p.phase == phase).map(|p| &p.metrics)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub trials: Vec<TrialRecord>,
}

/// Training and test data shared by every unit of an experiment.
pub struct ExperimentData<'a> {
    pub train: &'a DatasetSlice<f64>,
    pub test: &'a DatasetSlice<f64>,
}

fn context(trial: usize, cond: &Condition, e: Error) -> Error {
    Error::input(format!("trial {trial}, condition [{}]: {e}", cond.key()))
}

fn sleep_stats(trace: &crate::sleep::SleepTrace<f64>) -> Result<SleepStats> {
    let summary = trace_summary(trace)?;
    Ok(SleepStats {
        mean_rate: summary.mean_rate.clone(),
        delta_signs: summary.total_signs(),
        output_spikes: trace.total_spikes(trace.layer_sizes().len() - 1),
    })
}

fn fresh_mlp(spec: &ExperimentSpec, s: u64) -> Result<Mlp<f64>> {
    init_weights_with(&PAPER_LAYERS, seed::derive(s, STREAM_INIT), spec.init)
}

/// Limited and imbalanced cells share this pipeline; they differ only in
/// how the training subset is drawn and whether fine-tuning runs.
fn run_single_task(
    spec: &ExperimentSpec,
    data: &ExperimentData,
    trial: usize,
    cond: &Condition,
) -> Result<TrialRecord> {
    let s = spec.base_seed + trial as u64;
    let data_seed = seed::derive(s, STREAM_DATA);
    let subset = match (cond.target_class, cond.class_fraction) {
        (Some(c), Some(cf)) => data.train.imbalanced_subset(cond.fraction, c, cf, data_seed)?,
        _ => data.train.balanced_subset(cond.fraction, data_seed)?,
    };
    let mut mlp = fresh_mlp(spec, s)?;
    train(&mut mlp, &subset, &spec.train_cfg.clone().with_seed(seed::derive(s, STREAM_TRAIN)))?;
    let mut phases = vec![PhaseResult {
        phase: Phase::Baseline,
        metrics: evaluate(&mlp, data.test)?,
    }];

    let mean = update_pixel_mean(None, &subset)?;
    let sleep_cfg = spec.sleep_cfg.clone().with_seed(seed::derive(s, STREAM_SLEEP));
    let (mut slept, trace) = src_sleep(&mlp, &mean, &subset, &sleep_cfg)?;
    phases.push(PhaseResult {
        phase: Phase::PostSleep,
        metrics: evaluate(&slept, data.test)?,
    });

    if spec.family == Family::Limited {
        let ft = spec.finetune_cfg.clone().with_seed(seed::derive(s, STREAM_FINETUNE));
        train(&mut slept, &subset, &ft)?;
        phases.push(PhaseResult {
            phase: Phase::PostFinetune,
            metrics: evaluate(&slept, data.test)?,
        });
    }
    Ok(TrialRecord {
        trial,
        seed: s,
        condition: *cond,
        train_size: subset.len(),
        phases,
        sleep: sleep_stats(&trace)?,
    })
}

fn run_two_task(
    spec: &ExperimentSpec,
    data: &ExperimentData,
    trial: usize,
    cond: &Condition,
) -> Result<TrialRecord> {
    let s = spec.base_seed + trial as u64;
    let f2 = cond
        .fraction_t2
        .ok_or_else(|| Error::input("continual condition lacks a Task 2 fraction"))?;
    let t1 = data
        .train
        .balanced_subset(cond.fraction, seed::derive(s, STREAM_DATA))?
        .task_split(Task::First)?;
    let t2 = data
        .train
        .balanced_subset(f2, seed::derive(s, STREAM_DATA_T2))?
        .task_split(Task::Second)?;

    let mut mlp = fresh_mlp(spec, s)?;
    let mut phases = Vec::new();
    train(&mut mlp, &t1, &spec.train_cfg.clone().with_seed(seed::derive(s, STREAM_TRAIN)))?;
    phases.push(PhaseResult {
        phase: Phase::PostT1,
        metrics: evaluate(&mlp, data.test)?,
    });
    train(&mut mlp, &t2, &spec.train_cfg.clone().with_seed(seed::derive(s, STREAM_TRAIN_T2)))?;
    phases.push(PhaseResult {
        phase: Phase::PostT2,
        metrics: evaluate(&mlp, data.test)?,
    });

    let mean: PixelMean<f64> = update_pixel_mean(Some(&update_pixel_mean(None, &t1)?), &t2)?;
    let sleep_cfg = spec.sleep_cfg.clone().with_seed(seed::derive(s, STREAM_SLEEP));
    let (mut slept, trace) = src_sleep(&mlp, &mean, &t2, &sleep_cfg)?;
    phases.push(PhaseResult {
        phase: Phase::PostSrc,
        metrics: evaluate(&slept, data.test)?,
    });

    if spec.finetune {
        let ft = spec.finetune_cfg.clone().with_seed(seed::derive(s, STREAM_FINETUNE));
        train(&mut slept, &t2, &ft)?;
        phases.push(PhaseResult {
            phase: Phase::PostFinetune,
            metrics: evaluate(&slept, data.test)?,
        });
    }
    Ok(TrialRecord {
        trial,
        seed: s,
        condition: *cond,
        train_size: t1.len() + t2.len(),
        phases,
        sleep: sleep_stats(&trace)?,
    })
}

fn run_family(spec: &ExperimentSpec, data: &ExperimentData, jobs: usize, family: Family) -> Result<ExperimentReport> {
    if spec.family != family {
        return Err(Error::Config(format!(
            "spec is for the {} family, not {family}",
            spec.family
        )));
    }
    spec.validate()?;
    if data.test.is_empty() {
        return Err(Error::input("test set is empty"));
    }
    let units: Vec<(usize, Condition)> = (0..spec.trials)
        .flat_map(|t| spec.conditions().into_iter().map(move |c| (t, c)))
        .collect();
    let run_unit = |&(trial, ref cond): &(usize, Condition)| {
        log::info!("{family} trial {trial} [{}]", cond.key());
        let r = match family {
            Family::Continual => run_two_task(spec, data, trial, cond),
            _ => run_single_task(spec, data, trial, cond),
        };
        r.map_err(|e| context(trial, cond, e))
    };
    let trials: Vec<TrialRecord> = if jobs <= 1 {
        units.iter().map(run_unit).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| units.par_iter().map(run_unit).collect::<Result<_>>())?
    };
    Ok(ExperimentReport {
        spec: spec.clone(),
        trials,
    })
}

pub fn run_limited(spec: &ExperimentSpec, data: &ExperimentData, jobs: usize) -> Result<ExperimentReport> {
    run_family(spec, data, jobs, Family::Limited)
}

pub fn run_imbalanced(spec: &ExperimentSpec, data: &ExperimentData, jobs: usize) -> Result<ExperimentReport> {
    run_family(spec, data, jobs, Family::Imbalanced)
}

pub fn run_continual(spec: &ExperimentSpec, data: &ExperimentData, jobs: usize) -> Result<ExperimentReport> {
    run_family(spec, data, jobs, Family::Continual)
}

/// Runs whichever family `spec` names.
pub fn run(spec: &ExperimentSpec, data: &ExperimentData, jobs: usize) -> Result<ExperimentReport> {
    run_family(spec, data, jobs, spec.family)
}

/// Metrics tracked per phase: overall accuracy always, task accuracies for
/// the continual family, the reduced class's recall for the imbalanced one.
fn tracked_metrics(family: Family, cond: &Condition, m: &Metrics) -> Vec<(&'static str, f64)> {
    let mut out = vec![("accuracy", m.accuracy)];
    match family {
        Family::Continual => {
            let t1 = m.group_accuracy(Task::First.classes());
            let t2 = m.group_accuracy(Task::Second.classes());
            out.extend([("task1", t1), ("task2", t2), ("task_mean", (t1 + t2) / 2.0)]);
        }
        Family::Imbalanced => {
            if let Some(c) = cond.target_class {
                out.push(("target_class", m.per_class_accuracy[c]));
            }
        }
        Family::Limited => {}
    }
    out
}

const METRIC_ORDER: [&str; 5] = ["accuracy", "task1", "task2", "task_mean", "target_class"];

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub condition: Condition,
    pub phase: Phase,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// `(T1 fraction x T2 fraction)` grid of trial means for one phase and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub phase: Phase,
    pub metric: String,
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

/// Per-class recall change of the reduced class, `(post_sleep - baseline)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaGrid {
    pub target_classes: Vec<usize>,
    pub class_fractions: Vec<f64>,
    pub before: Vec<Vec<f64>>,
    pub after: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
}

impl DeltaGrid {
    /// Share of cells with a strictly positive delta.
    pub fn positive_share(&self) -> f64 {
        let cells: Vec<f64> = self.delta.iter().flatten().copied().collect();
        cells.iter().filter(|&&d| d > 0.0).count() as f64 / cells.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub family: Family,
    pub rows: Vec<SummaryRow>,
    pub heatmaps: Vec<Heatmap>,
    pub delta_grid: Option<DeltaGrid>,
}

impl Summary {
    pub fn row(&self, cond: &Condition, phase: Phase, metric: &str) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.condition.key() == cond.key() && r.phase == phase && r.metric == metric)
    }
}

/// Per-condition statistics across trials, plus the family's grids.
pub fn aggregate(report: &ExperimentReport) -> Result<Summary> {
    if report.trials.is_empty() {
        return Err(Error::input("report holds no trials"));
    }
    let spec = &report.spec;
    let mut samples: BTreeMap<(usize, Phase, &'static str), Vec<f64>> = BTreeMap::new();
    let conditions = spec.conditions();
    let position = |c: &Condition| conditions.iter().position(|x| x.key() == c.key());
    for t in &report.trials {
        let ci = position(&t.condition)
            .ok_or_else(|| Error::Format(format!("trial condition [{}] not in spec", t.condition.key())))?;
        for p in &t.phases {
            for (name, v) in tracked_metrics(spec.family, &t.condition, &p.metrics) {
                samples.entry((ci, p.phase, name)).or_default().push(v);
            }
        }
    }
    // condition, then phase in execution order, then metric
    let mut rows = Vec::with_capacity(samples.len());
    for (ci, cond) in conditions.iter().enumerate() {
        for phase in spec.family.phases(spec.finetune) {
            let mut here: Vec<(&str, &Vec<f64>)> = samples
                .iter()
                .filter(|((c, p, _), _)| *c == ci && *p == phase)
                .map(|((_, _, m), xs)| (*m, xs))
                .collect();
            here.sort_by_key(|(m, _)| METRIC_ORDER.iter().position(|x| x == m));
            for (metric, xs) in here {
                let (mean, std) = mean_std(xs);
                rows.push(SummaryRow {
                    condition: *cond,
                    phase,
                    metric: metric.to_string(),
                    mean,
                    std,
                    n: xs.len(),
                });
            }
        }
    }
    let cell = |ci: usize, phase: Phase, metric: &str| {
        samples
            .iter()
            .find(|((c, p, m), _)| *c == ci && *p == phase && *m == metric)
            .map_or(f64::NAN, |(_, xs)| mean_std(xs).0)
    };

    let mut heatmaps = Vec::new();
    let mut delta_grid = None;
    match spec.family {
        Family::Continual => {
            let ncols = spec.fractions_t2.len();
            for phase in spec.family.phases(spec.finetune) {
                for metric in ["task1", "task2", "task_mean"] {
                    let values = (0..spec.fractions.len())
                        .map(|i| (0..ncols).map(|j| cell(i * ncols + j, phase, metric)).collect())
                        .collect();
                    heatmaps.push(Heatmap {
                        phase,
                        metric: metric.to_string(),
                        rows: spec.fractions.clone(),
                        cols: spec.fractions_t2.clone(),
                        values,
                    });
                }
            }
        }
        Family::Imbalanced => {
            let ncols = spec.class_fractions.len();
            let grid = |phase| -> Vec<Vec<f64>> {
                (0..spec.target_classes.len())
                    .map(|i| (0..ncols).map(|j| cell(i * ncols + j, phase, "target_class")).collect())
                    .collect()
            };
            let before = grid(Phase::Baseline);
            let after = grid(Phase::PostSleep);
            let delta = before
                .iter()
                .zip(&after)
                .map(|(b, a)| b.iter().zip(a).map(|(b, a)| a - b).collect())
                .collect();
            delta_grid = Some(DeltaGrid {
                target_classes: spec.target_classes.clone(),
                class_fractions: spec.class_fractions.clone(),
                before,
                after,
                delta,
            });
        }
        Family::Limited => {}
    }
    Ok(Summary {
        family: spec.family,
        rows,
        heatmaps,
        delta_grid,
    })
}

impl ExperimentReport {
    /// Checks the invariants a well-formed report satisfies.
    pub fn validate(&self) -> Result<()> {
        let phases = self.spec.family.phases(self.spec.finetune);
        for t in &self.trials {
            let got: Vec<Phase> = t.phases.iter().map(|p| p.phase).collect();
            if got != phases {
                return Err(Error::Format(format!("trial {} has phases {got:?}", t.trial)));
            }
            for p in &t.phases {
                let m = &p.metrics;
                let acc_ok = |a: f64| (0.0..=1.0).contains(&a);
                if !acc_ok(m.accuracy) || !m.per_class_accuracy.iter().all(|&a| acc_ok(a)) {
                    return Err(Error::Format(format!("trial {}: accuracy outside [0, 1]", t.trial)));
                }
                for (c, row) in m.confusion.iter().enumerate() {
                    if m.support[c] > 0 && (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        return Err(Error::Format(format!(
                            "trial {}: confusion row {c} does not sum to 1",
                            t.trial
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    /// One row per trial x condition x phase.
    pub fn write_trials_csv(&self, mut w: impl Write) -> Result<()> {
        let classes: Vec<String> = (0..NUM_CLASSES).map(|c| format!("acc_{c}")).collect();
        writeln!(
            w,
            "family,dataset,trial,seed,{CONDITION_HEADER},train_size,phase,accuracy,task1,task2,{}",
            classes.join(",")
        )?;
        for t in &self.trials {
            for p in &t.phases {
                let m = &p.metrics;
                let per: Vec<String> = m.per_class_accuracy.iter().map(|a| a.to_string()).collect();
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    self.spec.family,
                    self.spec.dataset,
                    t.trial,
                    t.seed,
                    t.condition.csv_fields(),
                    t.train_size,
                    p.phase,
                    m.accuracy,
                    m.group_accuracy(Task::First.classes()),
                    m.group_accuracy(Task::Second.classes()),
                    per.join(",")
                )?;
            }
        }
        Ok(())
    }
}

impl Summary {
    pub fn write_summary_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{CONDITION_HEADER},phase,metric,mean,std,n")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.condition.csv_fields(),
                r.phase,
                r.metric,
                r.mean,
                r.std,
                r.n
            )?;
        }
        Ok(())
    }
}

impl Heatmap {
    /// First row lists the Task 2 fractions; each further row starts with its
    /// Task 1 fraction.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t1_fraction\\t2_fraction,{}", join_list(&self.cols))?;
        for (f, row) in self.rows.iter().zip(&self.values) {
            writeln!(w, "{f},{}", join_list(row))?;
        }
        Ok(())
    }
}

impl DeltaGrid {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "target_class,class_fraction,before,after,delta")?;
        for (i, c) in self.target_classes.iter().enumerate() {
            for (j, cf) in self.class_fractions.iter().enumerate() {
                writeln!(w, "{c},{cf},{},{},{}", self.before[i][j], self.after[i][j], self.delta[i][j])?;
            }
        }
        Ok(())
    }
}
