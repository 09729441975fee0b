use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use jsynth::data::validate_dataset;
use jsynth::experiment::{
    cross_validate, report, synthesize_file, train_single, write_phantom, ExperimentConfig, Precision,
};
use jsynth::gradcheck::{run_suite, SUITE_TOLERANCE};
use jsynth::train::Regime;
use jsynth::{Error, ErrorKind, Result};

/// Joint FLAIR synthesis and lesion segmentation.
#[derive(Parser)]
#[command(name = "jsynth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom cohort (to --out, else the config's data_root).
    GenPhantom {
        #[command(flatten)]
        common: Common,
    },
    /// Check a dataset directory and print a summary.
    ValidateData {
        /// Dataset root; defaults to the config's data_root.
        dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train one regime on one fold.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "joint")]
        regime: Regime,
        #[arg(long)]
        folds: Option<usize>,
        /// Fold index to train on.
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Cross-validate the configured regimes; resumes finished folds.
    CrossValidate {
        #[command(flatten)]
        common: Common,
        /// Run only this regime.
        #[arg(long)]
        regime: Option<Regime>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Synthesize a FLAIR volume from a T1 volume.
    Synthesize {
        checkpoint: PathBuf,
        t1: PathBuf,
        output: PathBuf,
        /// Real FLAIR to score the synthesis against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Tables and overlay panels of a finished cross-validation.
    Report {
        /// Results directory; defaults to --out, then the config's out_dir.
        dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every differentiable op.
    GradCheck {
        /// Single seed instead of 0, 1 and 2.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut c = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let cwd = std::env::current_dir().map_err(|e| Error::Io {
                path: ".".into(),
                source: e,
            })?;
            ExperimentConfig::parse("", &cwd)?
        }
    };
    if let Some(seed) = common.seed {
        c.seeds = vec![seed];
        c.phantom.seed = seed;
    }
    Ok(c)
}

fn gen_phantom(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let root = common.out.clone().unwrap_or(config.data_root);
    let stats = write_phantom(&config.phantom, &root)?;
    let p = &config.phantom;
    println!("wrote {} subjects to {}", p.n_subjects, root.display());
    println!("  volume dims      {} x {} x {}", p.slices, p.height, p.width);
    println!("  seed             {}", p.seed);
    println!("  lesions          {}", stats.lesions);
    println!("  faint in T1      {} ({:.1}%)", stats.faint, 100.0 * stats.faint_fraction());
    println!("  skipped          {}", stats.skipped);
    Ok(())
}

fn validate_data(dir: Option<PathBuf>, common: &Common) -> Result<()> {
    let root = match dir {
        Some(d) => d,
        None => load_config(common)?.data_root,
    };
    let s = validate_dataset(&root)?;
    println!("{}: ok", root.display());
    println!("  subjects                 {}", s.subjects);
    println!("  dims                     {:?}", s.dims);
    println!("  slices                   {}", s.slices);
    println!("  lesion voxels            {}", s.lesion_voxels);
    println!("  subjects without lesions {}", s.subjects_without_lesions);
    Ok(())
}

fn train_cmd(common: &Common, regime: Regime, folds: Option<usize>, fold: usize) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(n) = folds {
        config.n_folds = n;
        config.n_test = validate_dataset(&config.data_root)?.subjects / n.max(1);
    }
    let seed = config.seeds[0];
    let out = common.out.clone().unwrap_or_else(|| {
        config
            .out_dir
            .join(format!("train-{}-seed-{seed}-fold-{fold}", regime.name()))
    });
    let rows = match config.precision {
        Precision::F64 => train_single::<f64>(&config, regime, seed, fold, &out)?,
        Precision::F32 => train_single::<f32>(&config, regime, seed, fold, &out)?,
    };
    println!("{} fold {fold} seed {seed} -> {}", regime.name(), out.display());
    for r in &rows {
        println!("  {:<10} dice {:.4}", r.subject, r.dsc);
    }
    Ok(())
}

fn cross_validate_cmd(common: &Common, regime: Option<Regime>, folds: Option<usize>) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    if let Some(r) = regime {
        config.regimes = vec![r];
    }
    if let Some(n) = folds {
        config.n_folds = n;
        config.n_test = validate_dataset(&config.data_root)?.subjects / n.max(1);
    }
    config.validate()?;
    let start = Instant::now();
    let log = |msg: &str| eprintln!("[{:>7.1}s] {msg}", start.elapsed().as_secs_f64());
    let out = match config.precision {
        Precision::F64 => cross_validate::<f64>(&config, &log)?,
        Precision::F32 => cross_validate::<f32>(&config, &log)?,
    };
    println!(
        "{} tasks trained, {} reused; results in {}",
        out.trained.len(),
        out.reused.len(),
        config.out_dir.display()
    );
    print!("{}", jsynth::metrics::format_summary_table(&out.pooled, &config.baseline));
    Ok(())
}

fn synthesize_cmd(checkpoint: &Path, t1: &Path, output: &Path, reference: Option<&Path>) -> Result<()> {
    let scores = synthesize_file(checkpoint, t1, output, reference)?;
    println!("wrote {}", output.display());
    if let Some((mae, psnr)) = scores {
        println!("MAE  {mae}");
        println!("PSNR {psnr} dB");
    }
    Ok(())
}

fn report_cmd(dir: Option<PathBuf>, common: &Common) -> Result<()> {
    let dir = match dir.or_else(|| common.out.clone()) {
        Some(d) => d,
        None => load_config(common)?.out_dir,
    };
    let rep = report(&dir)?;
    print!("{}", rep.text);
    println!();
    for p in &rep.panels {
        println!(
            "{:<6} panel: seed {} fold {} {} slice {} ({} lesion voxels)",
            p.tag, p.seed, p.fold, p.subject, p.z, p.lesion_load
        );
    }
    println!("wrote {} files to {}", rep.files.len(), dir.join(jsynth::experiment::REPORT_DIR).display());
    Ok(())
}

fn grad_check(seed: Option<u64>) -> std::result::Result<(), Failure> {
    let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| vec![0, 1, 2]);
    let start = Instant::now();
    let cases = run_suite(&seeds)?;
    let mut failed = 0;
    println!("{:<24} {:>10} {:>5} {:>12} {:>8} {:>6}", "op", "shape", "seed", "rel_error", "checked", "kinks");
    for c in &cases {
        let ok = c.passed();
        failed += usize::from(!ok);
        println!(
            "{:<24} {:>10} {:>5} {:>12.3e} {:>8} {:>6} {}",
            c.op,
            c.shape,
            c.seed,
            c.result.max_rel_error,
            c.result.checked,
            c.result.kinks,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!(
        "{} cases, {failed} above {SUITE_TOLERANCE:e}, {:.1}s",
        cases.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure::Numerical(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

enum Failure {
    Lib(Error),
    /// Numerical failure detected outside the library.
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::GenPhantom { common } => gen_phantom(&common)?,
        Command::ValidateData { dir, common } => validate_data(dir, &common)?,
        Command::Train {
            common,
            regime,
            folds,
            fold,
        } => train_cmd(&common, regime, folds, fold)?,
        Command::CrossValidate { common, regime, folds } => cross_validate_cmd(&common, regime, folds)?,
        Command::Synthesize {
            checkpoint,
            t1,
            output,
            reference,
        } => synthesize_cmd(&checkpoint, &t1, &output, reference.as_deref())?,
        Command::Report { dir, common } => report_cmd(dir, &common)?,
        Command::GradCheck { seed } => grad_check(seed)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            })
        }
    }
}
