use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::ExperimentConfig;
use crate::data::{
    gaussian_normalize, generate_phantom_with_stats, load_dataset, plan_folds, read_volume, render_fold_plans,
    validate_dataset, write_subject, write_volume, DatasetSummary, FoldPlan, Modality, PhantomSpec, PhantomStats,
    Subject, Volume,
};
use crate::error::{Error, Result};
use crate::metrics::{
    confusion, dice, fnr, fpr, mae, parse_subject_rows, psnr, render_subject_rows, render_summary, summarize,
    support_mask, MethodSummary, SubjectRow,
};
use crate::nets::Network;
use crate::scalar::Scalar;
use crate::train::{predict, render_curves, synthesize, train, Regime, TrainConfig, TrainResult};

/// Environment variable capping the number of concurrent training tasks.
pub const THREADS_ENV: &str = "JSYNTH_THREADS";

pub const CLASSIFIER_FILE: &str = "classifier.jsyn";
pub const GENERATOR_FILE: &str = "generator.jsyn";
pub const CURVES_FILE: &str = "curves.csv";
/// Written last; its presence marks a finished task.
pub const SUBJECTS_FILE: &str = "subjects.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const FOLDS_FILE: &str = "folds.csv";
pub const CONFIG_FILE: &str = "config.txt";

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

pub fn task_dir(out: &Path, seed: u64, fold: usize, regime: Regime) -> PathBuf {
    seed_dir(out, seed).join(format!("fold-{fold}")).join(regime.name())
}

pub fn prediction_path(task: &Path, id: &str) -> PathBuf {
    task.join(format!("pred-{id}.mvol"))
}

pub fn synthesis_path(task: &Path, id: &str) -> PathBuf {
    task.join(format!("synth-{id}.mvol"))
}

/// Training seed of one fold: the experiment seed xor the fold index.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ fold as u64
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temp file so a crash never leaves a partial
/// file under the final name.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Task parallelism from [`THREADS_ENV`]; `None` leaves the choice to
/// rayon.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Generates a phantom cohort and writes it under `root`.
pub fn write_phantom(spec: &PhantomSpec, root: &Path) -> Result<PhantomStats> {
    let (subjects, stats) = generate_phantom_with_stats::<f64>(spec)?;
    create_dir(root)?;
    for s in &subjects {
        write_subject(root, s)?;
    }
    Ok(stats)
}

/// Test-set outputs of one subject.
#[derive(Debug, Clone)]
pub struct SubjectEval<T> {
    pub row: SubjectRow,
    pub prediction: Volume<T>,
    pub synthesis: Option<Volume<T>>,
}

/// Synthesis error against the real FLAIR, both in the normalized
/// domain and over the FLAIR's support. Returns `(mae, psnr)`.
pub fn synthesis_scores<T: Scalar>(flair: &Volume<T>, synth: &Volume<T>) -> Result<(f64, f64)> {
    let mask = support_mask(flair.voxels());
    let reference = gaussian_normalize(flair)?;
    Ok((
        mae(reference.voxels(), synth.voxels(), &mask)?,
        psnr(reference.voxels(), synth.voxels(), &mask)?,
    ))
}

pub fn evaluate_subject<T: Scalar>(result: &TrainResult<T>, subject: &Subject<T>, slice: (usize, usize)) -> Result<SubjectEval<T>> {
    let synthesis = match &result.generator {
        Some(g) => Some(synthesize(g, &subject.t1, slice)?),
        None => None,
    };
    let prediction = predict(&result.classifier, &subject.t1, synthesis.as_ref(), slice)?;
    let c = confusion(prediction.voxels(), subject.label.voxels())?;
    let scores = match &synthesis {
        Some(s) => Some(synthesis_scores(&subject.flair, s)?),
        None => None,
    };
    Ok(SubjectEval {
        row: SubjectRow {
            method: result.regime.name().to_string(),
            subject: subject.id.clone(),
            dsc: dice(&c),
            fpr: fpr(&c),
            fnr: fnr(&c),
            mae: scores.map(|s| s.0),
            psnr: scores.map(|s| s.1),
        },
        prediction,
        synthesis,
    })
}

/// Trains one regime on one fold and writes checkpoints, curves,
/// predictions and per-subject rows into `dir`.
pub fn run_task<T: Scalar>(subjects: &[Subject<T>], plan: &FoldPlan, config: &TrainConfig, dir: &Path) -> Result<Vec<SubjectRow>> {
    plan.check_disjoint()?;
    let result = train(subjects, plan, config)?;
    create_dir(dir)?;
    write_atomic(&dir.join(CLASSIFIER_FILE), &result.classifier.to_bytes())?;
    if let Some(g) = &result.generator {
        write_atomic(&dir.join(GENERATOR_FILE), &g.to_bytes())?;
    }
    write_atomic(&dir.join(CURVES_FILE), render_curves(&result.curves).as_bytes())?;
    let mut rows = Vec::new();
    for id in &plan.test {
        let s = subjects
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::invalid("cross-validate", format!("unknown test subject {id}")))?;
        let e = evaluate_subject(&result, s, config.slice)?;
        write_volume(&e.prediction, &prediction_path(dir, id))?;
        if let Some(v) = &e.synthesis {
            write_volume(v, &synthesis_path(dir, id))?;
        }
        rows.push(e.row);
    }
    write_atomic(&dir.join(SUBJECTS_FILE), render_subject_rows(&rows).as_bytes())?;
    Ok(rows)
}

/// One regime on one fold of one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskKey {
    pub seed: u64,
    pub fold: usize,
    pub regime: Regime,
}

impl std::fmt::Display for TaskKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "seed-{}/fold-{}/{}", self.seed, self.fold, self.regime.name())
    }
}

pub fn all_tasks(config: &ExperimentConfig) -> Vec<TaskKey> {
    let mut tasks = Vec::new();
    for &seed in &config.seeds {
        for fold in 0..config.n_folds {
            for &regime in &config.regimes {
                tasks.push(TaskKey { seed, fold, regime });
            }
        }
    }
    tasks
}

/// Tasks without a finished per-subject file under `out`.
pub fn missing_tasks(config: &ExperimentConfig, out: &Path) -> Vec<TaskKey> {
    all_tasks(config)
        .into_iter()
        .filter(|t| !task_dir(out, t.seed, t.fold, t.regime).join(SUBJECTS_FILE).is_file())
        .collect()
}

/// Per-seed and pooled summaries of a finished run.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub pooled: Vec<MethodSummary>,
    pub per_seed: Vec<(u64, Vec<MethodSummary>)>,
    pub trained: Vec<TaskKey>,
    pub reused: Vec<TaskKey>,
    pub dataset: DatasetSummary,
}

/// Fold plans of every seed, in seed order.
pub fn fold_plans(config: &ExperimentConfig, ids: &[String]) -> Result<Vec<(u64, Vec<FoldPlan>)>> {
    config
        .seeds
        .iter()
        .map(|&seed| Ok((seed, plan_folds(ids, config.n_folds, config.n_test, config.n_val, seed)?)))
        .collect()
}

/// Runs every regime on every fold of every seed, skipping tasks that
/// already finished, then aggregates.
///
/// The dataset is validated and every fold plan built before any
/// training starts. Tasks run in parallel but each is a pure function of
/// its inputs and writes only below its own directory, so results do
/// not depend on scheduling.
pub fn cross_validate<T: Scalar>(config: &ExperimentConfig, progress: &(dyn Fn(&str) + Sync)) -> Result<CvOutcome> {
    config.validate()?;
    let pool = pool()?;
    let dataset = validate_dataset(&config.data_root)?;
    let subjects = load_dataset::<T>(&config.data_root)?;
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let plans = fold_plans(config, &ids)?;
    for (_, p) in &plans {
        for f in p {
            f.check_disjoint()?;
        }
    }
    let out = &config.out_dir;
    create_dir(out)?;
    write_atomic(&out.join(CONFIG_FILE), config.render().as_bytes())?;
    for (seed, p) in &plans {
        create_dir(&seed_dir(out, *seed))?;
        write_atomic(&seed_dir(out, *seed).join(FOLDS_FILE), render_fold_plans(p).as_bytes())?;
    }

    let todo = missing_tasks(config, out);
    let reused: Vec<TaskKey> = all_tasks(config).into_iter().filter(|t| !todo.contains(t)).collect();
    for t in &reused {
        progress(&format!("{t}: already complete"));
    }
    let plan_of = |t: &TaskKey| -> &FoldPlan {
        let (_, p) = plans.iter().find(|(s, _)| *s == t.seed).expect("planned seed");
        &p[t.fold]
    };
    let results: Vec<Result<()>> = pool.install(|| {
        todo.par_iter()
            .map(|t| {
                let cfg = config.train_config(t.regime, fold_seed(t.seed, t.fold))?;
                let dir = task_dir(out, t.seed, t.fold, t.regime);
                let rows = run_task(&subjects, plan_of(t), &cfg, &dir)?;
                let mean = rows.iter().map(|r| r.dsc).sum::<f64>() / rows.len().max(1) as f64;
                progress(&format!("{t}: done, mean test Dice {mean:.4}"));
                Ok(())
            })
            .collect()
    });
    for r in results {
        r?;
    }
    let (pooled, per_seed) = aggregate(config, out)?;
    Ok(CvOutcome {
        pooled,
        per_seed,
        trained: todo,
        reused,
        dataset,
    })
}

/// Rows of one task, as written.
pub fn read_task_rows(out: &Path, task: TaskKey) -> Result<Vec<SubjectRow>> {
    let path = task_dir(out, task.seed, task.fold, task.regime).join(SUBJECTS_FILE);
    parse_subject_rows(&read_text(&path)?).map_err(|e| Error::InvalidData {
        path,
        msg: e.to_string(),
    })
}

/// Rebuilds per-seed and pooled CSVs from the finished task files.
/// Pooled rows name subjects `seed-S/<id>` so pairing stays within a seed.
pub fn aggregate(config: &ExperimentConfig, out: &Path) -> Result<(Vec<MethodSummary>, Vec<(u64, Vec<MethodSummary>)>)> {
    let missing = missing_tasks(config, out);
    if !missing.is_empty() {
        return Err(incomplete(out, &missing));
    }
    let mut pooled_rows = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in &config.seeds {
        let mut rows = Vec::new();
        for &regime in &config.regimes {
            for fold in 0..config.n_folds {
                rows.extend(read_task_rows(out, TaskKey { seed, fold, regime })?);
            }
        }
        let summary = summarize(&rows, &config.baseline, config.permutations, config.permutation_seed)?;
        let dir = seed_dir(out, seed);
        write_atomic(&dir.join(SUBJECTS_FILE), render_subject_rows(&rows).as_bytes())?;
        write_atomic(&dir.join(SUMMARY_FILE), render_summary(&summary).as_bytes())?;
        pooled_rows.extend(rows.into_iter().map(|r| SubjectRow {
            subject: format!("seed-{seed}/{}", r.subject),
            ..r
        }));
        per_seed.push((seed, summary));
    }
    let pooled = summarize(&pooled_rows, &config.baseline, config.permutations, config.permutation_seed)?;
    write_atomic(&out.join(SUBJECTS_FILE), render_subject_rows(&pooled_rows).as_bytes())?;
    write_atomic(&out.join(SUMMARY_FILE), render_summary(&pooled).as_bytes())?;
    Ok((pooled, per_seed))
}

pub(crate) fn incomplete(out: &Path, missing: &[TaskKey]) -> Error {
    let list: Vec<String> = missing.iter().map(ToString::to_string).collect();
    Error::InvalidData {
        path: out.to_path_buf(),
        msg: format!("incomplete results; missing folds: {}", list.join(", ")),
    }
}

/// Trains a single regime on one fold of the plan for `seed` and writes
/// checkpoints, curves and test rows into `out`.
pub fn train_single<T: Scalar>(config: &ExperimentConfig, regime: Regime, seed: u64, fold: usize, out: &Path) -> Result<Vec<SubjectRow>> {
    config.validate()?;
    validate_dataset(&config.data_root)?;
    let subjects = load_dataset::<T>(&config.data_root)?;
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let plans = plan_folds(&ids, config.n_folds, config.n_test, config.n_val, seed)?;
    let plan = plans
        .get(fold)
        .ok_or_else(|| Error::Config(format!("fold {fold} out of range (0..{})", config.n_folds)))?;
    let cfg = config.train_config(regime, fold_seed(seed, fold))?;
    run_task(&subjects, plan, &cfg, out)
}

/// Smallest slice at least as large as `dims` whose sides divide by
/// `divisor`.
pub fn fitted_slice(dims: (usize, usize), divisor: usize) -> (usize, usize) {
    let up = |s: usize| s.div_ceil(divisor) * divisor;
    (up(dims.0), up(dims.1))
}

/// Synthesizes a FLAIR volume from a T1 file with a saved generator.
/// With a reference FLAIR, also returns `(mae, psnr)` against it.
pub fn synthesize_file(checkpoint: &Path, t1: &Path, out: &Path, reference: Option<&Path>) -> Result<Option<(f64, f64)>> {
    let generator = Network::<f64>::load(checkpoint)?;
    let t1 = read_volume::<f64>(t1, Modality::T1)?;
    let slice = fitted_slice(t1.slice_dims(), generator.config().spatial_divisor());
    let synth = synthesize(&generator, &t1, slice)?;
    write_volume(&synth, out)?;
    match reference {
        None => Ok(None),
        Some(path) => {
            let flair = read_volume::<f64>(path, Modality::Flair)?;
            if flair.dims() != synth.dims() {
                return Err(Error::InvalidData {
                    path: path.to_path_buf(),
                    msg: format!("reference dims {:?} differ from T1 dims {:?}", flair.dims(), synth.dims()),
                });
            }
            synthesis_scores(&flair, &synth).map(Some)
        }
    }
}
