use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use sleep_replay::config::{ConfigFile, Section};
use sleep_replay::data::{
    load_split, resolve_root, update_pixel_mean, DatasetFiles, DatasetId, DatasetSlice, PixelMean, Split,
    SubsetManifest, NUM_CLASSES,
};
use sleep_replay::ga::{tune, GaConfig, TuneSpec};
use sleep_replay::harness::{self, aggregate, ExperimentData, ExperimentReport, ExperimentSpec};
use sleep_replay::metrics::{evaluate, Metrics};
use sleep_replay::nn::{init_weights_with, train, InitScheme, TrainConfig, PAPER_LAYERS};
use sleep_replay::sleep::{
    compute_scales, src_sleep_with_scales, SleepConfig, TraceLevel, TraceSummary, DEFAULT_HISTOGRAM_BINS,
};
use sleep_replay::{seed, Error, Mlp64, Result};

use crate::{Cli, Command, EvalArgs, ExperimentArgs, Global, ReportArgs, SleepArgs, TrainArgs, TuneArgs};

const MODEL_FILE: &str = "model.srcmlp";
const MEAN_FILE: &str = "pixel_mean.txt";
const MANIFEST_FILE: &str = "manifest.ini";

// Seed streams of a single `train` run.
const STREAM_DATA: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_TRAIN: u64 = 3;

pub fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    fs::create_dir_all(&g.out)?;
    match &cli.command {
        Command::Train(a) => cmd_train(g, a),
        Command::Sleep(a) => cmd_sleep(g, a),
        Command::Eval(a) => cmd_eval(g, a),
        Command::Experiment(a) => cmd_experiment(g, a),
        Command::Tune(a) => cmd_tune(g, a),
        Command::Report(a) => cmd_report(g, a),
    }
}

fn load_config(g: &Global) -> Result<ConfigFile> {
    match &g.config {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile::new()),
    }
}

fn section<'a>(cfg: &'a ConfigFile, name: &str) -> std::borrow::Cow<'a, Section> {
    match cfg.section(name) {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(Section::new()),
    }
}

fn load_data(g: &Global, id: DatasetId, split: Split) -> Result<DatasetSlice<f64>> {
    let root = resolve_root(g.data_root.as_deref());
    load_split(&root, id, split, &DatasetFiles::default()).map_err(|e| {
        Error::input(format!(
            "cannot load {id} {split:?} data under {}: {e}",
            root.display()
        ))
    })
}

fn write_with(path: impl AsRef<Path>, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn run_section(command: &str, fields: &[(&str, String)]) -> Section {
    let mut s = Section::new();
    s.set("command", command);
    s.set("version", env!("CARGO_PKG_VERSION"));
    for (k, v) in fields {
        s.set(k, v);
    }
    s
}

fn write_manifest(out: &Path, sections: Vec<(&str, Section)>) -> Result<()> {
    let mut cfg = ConfigFile::new();
    for (name, s) in sections {
        cfg.insert(name, s);
    }
    write_with(out.join(MANIFEST_FILE), |w| Ok(write!(w, "{cfg}")?))
}

fn cmd_train(g: &Global, a: &TrainArgs) -> Result<()> {
    let cfg = load_config(g)?;
    let ts = section(&cfg, "train");
    let mut train_cfg = TrainConfig::from_section_over(&TrainConfig::baseline(), &ts)?;
    if let Some(e) = a.epochs {
        train_cfg.epochs = e;
    }
    let seed = g.seed.unwrap_or(train_cfg.seed);
    let init = match a.init {
        Some(i) => i,
        None => ts.get::<InitScheme>("init")?.unwrap_or_default(),
    };
    train_cfg.seed = seed::derive(seed, STREAM_TRAIN);
    train_cfg.validate()?;

    let full = load_data(g, a.dataset, Split::Train)?;
    let subset = full.balanced_subset(a.fraction, seed::derive(seed, STREAM_DATA))?;
    let mut mlp = init_weights_with(&PAPER_LAYERS, seed::derive(seed, STREAM_INIT), init)?;
    let losses = train(&mut mlp, &subset, &train_cfg)?;
    let mean = update_pixel_mean(None, &subset)?;

    mlp.save(g.out.join(MODEL_FILE))?;
    fs::write(g.out.join(MEAN_FILE), mean.to_text())?;
    write_with(g.out.join("loss.csv"), |w| {
        writeln!(w, "epoch,loss")?;
        for (e, l) in losses.iter().enumerate() {
            writeln!(w, "{e},{l}")?;
        }
        Ok(())
    })?;
    write_manifest(
        &g.out,
        vec![
            (
                "run",
                run_section(
                    "train",
                    &[
                        ("dataset", a.dataset.to_string()),
                        ("fraction", a.fraction.to_string()),
                        ("seed", seed.to_string()),
                        ("init", init.to_string()),
                    ],
                ),
            ),
            ("subset", subset.manifest().to_section()),
            ("train", train_cfg.to_section()),
        ],
    )?;
    println!(
        "trained on {} images; final loss {:.6}",
        subset.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Reloads the training subset recorded in a model directory's manifest.
fn reload_subset(g: &Global, manifest: &ConfigFile) -> Result<DatasetSlice<f64>> {
    let s = manifest
        .section("subset")
        .ok_or_else(|| Error::Format("manifest lacks a [subset] section".into()))?;
    let m = SubsetManifest::from_section(s)?;
    let subset = load_data(g, m.source, Split::Train)?.balanced_subset(m.fraction, m.seed)?;
    if subset.manifest() != m {
        return Err(Error::Format(
            "training subset no longer matches its manifest; has the dataset changed?".into(),
        ));
    }
    Ok(subset)
}

fn cmd_sleep(g: &Global, a: &SleepArgs) -> Result<()> {
    let dir = &a.model_dir;
    let manifest = ConfigFile::load(dir.join(MANIFEST_FILE))?;
    let mlp = Mlp64::load(dir.join(MODEL_FILE))?;
    let mean = PixelMean::<f64>::from_text(&fs::read_to_string(dir.join(MEAN_FILE))?)?;
    let subset = reload_subset(g, &manifest)?;
    if mlp.input_size() != mean.mean().len() || mlp.input_size() != subset.images().cols() {
        return Err(Error::Format(format!(
            "model input width {} does not match pixel mean ({}) or data ({})",
            mlp.input_size(),
            mean.mean().len(),
            subset.images().cols()
        )));
    }

    let cfg = load_config(g)?;
    let mut sleep_cfg = SleepConfig::from_section_over(&SleepConfig::for_dataset(subset.source()), &section(&cfg, "sleep"))?;
    if let Some(s) = g.seed {
        sleep_cfg.seed = s;
    }
    sleep_cfg.validate(mlp.num_weight_layers())?;
    let scales = compute_scales(&mlp, &subset, sleep_cfg.alpha_scale)?;
    let level = if a.raster { TraceLevel::Full } else { TraceLevel::Counts };
    let (slept, trace) = src_sleep_with_scales(&mlp, &mean, &scales, &sleep_cfg, level)?;
    let summary = TraceSummary::from_trace(&trace, DEFAULT_HISTOGRAM_BINS)?;

    let out = &g.out;
    slept.save(out.join(MODEL_FILE))?;
    fs::write(out.join(MEAN_FILE), mean.to_text())?;
    write_with(out.join("spike_counts.csv"), |w| trace.write_spike_counts_csv(w))?;
    if a.raster {
        write_with(out.join("raster.csv"), |w| trace.write_raster_csv(w))?;
    }
    write_with(out.join("rate_series.csv"), |w| summary.write_rate_series_csv(w))?;
    write_with(out.join("delta_histogram.csv"), |w| summary.write_delta_histogram_csv(w))?;
    write_with(out.join("delta_signs.csv"), |w| summary.write_delta_signs_csv(w))?;
    fs::write(out.join("trace_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    fs::write(out.join("scales.json"), serde_json::to_string_pretty(&scales)?)?;

    let mut sections = vec![(
        "run",
        run_section("sleep", &[("model_dir", dir.display().to_string())]),
    )];
    for name in ["subset", "train"] {
        if let Some(s) = manifest.section(name) {
            sections.push((name, s.clone()));
        }
    }
    sections.push(("sleep", sleep_cfg.to_section()));
    write_manifest(out, sections)?;

    let signs = summary.total_signs();
    println!(
        "slept {} steps; output spikes {}; deltas -{} / +{}",
        trace.steps(),
        trace.total_spikes(trace.layer_sizes().len() - 1),
        signs.negative,
        signs.positive
    );
    Ok(())
}

fn write_metrics(out: &Path, prefix: &str, m: &Metrics) -> Result<()> {
    write_with(out.join(format!("{prefix}confusion.csv")), |w| write_confusion(w, &m.confusion))?;
    write_with(out.join(format!("{prefix}per_class.csv")), |w| {
        writeln!(w, "class,support,accuracy")?;
        for c in 0..NUM_CLASSES {
            writeln!(w, "{c},{},{}", m.support[c], m.per_class_accuracy[c])?;
        }
        Ok(())
    })
}

fn write_confusion(w: &mut impl Write, c: &[[f64; NUM_CLASSES]; NUM_CLASSES]) -> Result<()> {
    let head: Vec<String> = (0..NUM_CLASSES).map(|p| format!("pred_{p}")).collect();
    writeln!(w, "true_class,{}", head.join(","))?;
    for (t, row) in c.iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{t},{}", vals.join(","))?;
    }
    Ok(())
}

fn cmd_eval(g: &Global, a: &EvalArgs) -> Result<()> {
    let mlp = Mlp64::load(&a.model)?;
    let test = load_data(g, a.dataset, Split::Test)?;
    let m = evaluate(&mlp, &test)?;
    fs::write(g.out.join("metrics.json"), serde_json::to_string_pretty(&m)?)?;
    write_metrics(&g.out, "", &m)?;
    write_manifest(
        &g.out,
        vec![(
            "run",
            run_section(
                "eval",
                &[
                    ("model", a.model.display().to_string()),
                    ("dataset", a.dataset.to_string()),
                    ("test_size", test.len().to_string()),
                ],
            ),
        )],
    )?;
    println!("accuracy {:.4}", m.accuracy);
    Ok(())
}

fn experiment_spec(g: &Global, a: &ExperimentArgs) -> Result<ExperimentSpec> {
    let cfg = load_config(g)?;
    let mut spec = ExperimentSpec::from_config(&cfg, a.family, a.dataset)?;
    if let Some(f) = &a.fraction {
        match spec.family {
            harness::Family::Limited => spec.fractions = f.clone(),
            harness::Family::Continual => {
                spec.fractions = f.clone();
                spec.fractions_t2 = f.clone();
            }
            harness::Family::Imbalanced => {
                spec.imbalance_base = *f
                    .first()
                    .ok_or_else(|| Error::Config("empty --fraction".into()))?;
            }
        }
    }
    if let Some(t) = a.trials {
        spec.trials = t;
    }
    if let Some(e) = a.epochs {
        spec.train_cfg.epochs = e;
    }
    if let Some(s) = g.seed {
        spec.base_seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

fn cmd_experiment(g: &Global, a: &ExperimentArgs) -> Result<()> {
    let spec = experiment_spec(g, a)?;
    let train_full = load_data(g, spec.dataset, Split::Train)?;
    let test = load_data(g, spec.dataset, Split::Test)?;
    let data = ExperimentData {
        train: &train_full,
        test: &test,
    };
    let report = harness::run(&spec, &data, a.jobs.max(1))?;
    report.validate()?;
    fs::write(g.out.join("report.json"), report.to_json()?)?;
    write_report_tables(&g.out, &report)?;
    let mut sections = vec![("run", run_section("experiment", &[("jobs", a.jobs.to_string())]))];
    let spec_cfg = spec.to_config();
    for name in ["experiment", "train", "finetune", "sleep"] {
        if let Some(s) = spec_cfg.section(name) {
            sections.push((name, s.clone()));
        }
    }
    write_manifest(&g.out, sections)?;
    println!("{} cells written to {}", report.trials.len(), g.out.display());
    Ok(())
}

/// Flat tables shared by `experiment` and `report`.
fn write_report_tables(out: &Path, report: &ExperimentReport) -> Result<()> {
    let summary = aggregate(report)?;
    write_with(out.join("trials.csv"), |w| report.write_trials_csv(w))?;
    write_with(out.join("summary.csv"), |w| summary.write_summary_csv(w))?;
    write_with(out.join("accuracy_curve.csv"), |w| {
        writeln!(w, "fraction,fraction_t2,target_class,class_fraction,phase,mean,std,n")?;
        for r in summary.rows.iter().filter(|r| r.metric == "accuracy") {
            let c = &r.condition;
            let opt = |v: Option<String>| v.unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                c.fraction,
                opt(c.fraction_t2.map(|x| x.to_string())),
                opt(c.target_class.map(|x| x.to_string())),
                opt(c.class_fraction.map(|x| x.to_string())),
                r.phase,
                r.mean,
                r.std,
                r.n
            )?;
        }
        Ok(())
    })?;
    for h in &summary.heatmaps {
        write_with(out.join(format!("heatmap_{}_{}.csv", h.phase, h.metric)), |w| h.write_csv(w))?;
    }
    if let Some(d) = &summary.delta_grid {
        write_with(out.join("delta_grid.csv"), |w| d.write_csv(w))?;
    }
    Ok(())
}

/// Trial-mean confusion matrix of every condition and phase.
fn write_confusions(out: &Path, report: &ExperimentReport) -> Result<()> {
    let dir = out.join("confusion");
    fs::create_dir_all(&dir)?;
    let conditions = report.spec.conditions();
    for (ci, cond) in conditions.iter().enumerate() {
        for phase in report.spec.family.phases(report.spec.finetune) {
            let ms: Vec<&Metrics> = report
                .trials
                .iter()
                .filter(|t| t.condition == *cond)
                .filter_map(|t| t.phase(phase))
                .collect();
            if ms.is_empty() {
                continue;
            }
            let mut c = [[0.0; NUM_CLASSES]; NUM_CLASSES];
            for m in &ms {
                for (row, mrow) in c.iter_mut().zip(&m.confusion) {
                    for (v, x) in row.iter_mut().zip(mrow) {
                        *v += x / ms.len() as f64;
                    }
                }
            }
            write_with(dir.join(format!("c{ci:03}_{}.csv", phase.name())), |w| {
                write_confusion(w, &c)
            })?;
        }
    }
    write_with(dir.join("conditions.csv"), |w| {
        writeln!(w, "index,fraction,fraction_t2,target_class,class_fraction")?;
        for (ci, c) in conditions.iter().enumerate() {
            writeln!(
                w,
                "{ci},{},{},{},{}",
                c.fraction,
                c.fraction_t2.map(|x| x.to_string()).unwrap_or_default(),
                c.target_class.map(|x| x.to_string()).unwrap_or_default(),
                c.class_fraction.map(|x| x.to_string()).unwrap_or_default()
            )?;
        }
        Ok(())
    })
}

fn cmd_tune(g: &Global, a: &TuneArgs) -> Result<()> {
    let cfg = load_config(g)?;
    let ts = section(&cfg, "tune");
    let mut ga = GaConfig::from_section_over(&GaConfig::default(), &section(&cfg, "ga"))?;
    if let Some(n) = a.generations {
        ga.generations = n;
    }
    if let Some(n) = a.population {
        ga.population = n;
    }
    let seed = g.seed.or(ts.get("seed")?).unwrap_or(0);
    ga.seed = seed;
    let mut train_cfg = TrainConfig::from_section_over(&TrainConfig::baseline(), &section(&cfg, "train"))?;
    if let Some(e) = a.epochs {
        train_cfg.epochs = e;
    }
    let spec = TuneSpec {
        fraction: a.fraction,
        valid_fraction: ts.get("valid_fraction")?.unwrap_or(0.05),
        seed,
        init: ts.get("init")?.unwrap_or_default(),
        train_cfg,
        base_sleep: SleepConfig::from_section_over(&SleepConfig::for_dataset(a.dataset), &section(&cfg, "sleep"))?,
        ga,
    };
    let full = load_data(g, a.dataset, Split::Train)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcome = pool.install(|| tune(&full, &spec))?;

    write_with(g.out.join("ga_progress.csv"), |w| outcome.result.write_history_csv(w))?;
    let mut best = ConfigFile::new();
    best.insert("sleep", outcome.best_config.to_section());
    fs::write(g.out.join("best_sleep.ini"), best.to_string())?;
    fs::write(g.out.join("tune.json"), serde_json::to_string_pretty(&outcome)?)?;
    let mut tune_section = Section::new();
    tune_section.set("dataset", a.dataset);
    tune_section.set("fraction", spec.fraction);
    tune_section.set("valid_fraction", spec.valid_fraction);
    tune_section.set("seed", seed);
    tune_section.set("init", spec.init);
    write_manifest(
        &g.out,
        vec![
            ("run", run_section("tune", &[("jobs", a.jobs.to_string())])),
            ("tune", tune_section),
            ("ga", spec.ga.to_section()),
            ("train", spec.train_cfg.to_section()),
            ("sleep", spec.base_sleep.to_section()),
        ],
    )?;
    println!(
        "validation accuracy {:.4} before sleep, {:.4} with the best genome",
        outcome.baseline_accuracy,
        outcome.result.best.fitness.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_report(g: &Global, a: &ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{} is not valid JSON: {e}", a.input.display())))?;
    let kind = if value.get("trials").is_some() {
        let report = ExperimentReport::from_json(&text)?;
        write_report_tables(&g.out, &report)?;
        write_confusions(&g.out, &report)?;
        "experiment"
    } else if value.get("rate_series").is_some() {
        let summary: TraceSummary = serde_json::from_value(value)?;
        if summary.rate_series.iter().any(|r| r.len() != summary.steps) {
            return Err(Error::Format("rate series length differs from step count".into()));
        }
        write_with(g.out.join("rate_series.csv"), |w| summary.write_rate_series_csv(w))?;
        write_with(g.out.join("delta_histogram.csv"), |w| summary.write_delta_histogram_csv(w))?;
        write_with(g.out.join("delta_signs.csv"), |w| summary.write_delta_signs_csv(w))?;
        "sleep"
    } else {
        return Err(Error::Format(format!(
            "{} is neither an experiment report nor a sleep summary",
            a.input.display()
        )));
    };
    write_manifest(
        &g.out,
        vec![(
            "run",
            run_section(
                "report",
                &[("input", a.input.display().to_string()), ("kind", kind.to_string())],
            ),
        )],
    )?;
    println!("{kind} tables written to {}", g.out.display());
    Ok(())
}
