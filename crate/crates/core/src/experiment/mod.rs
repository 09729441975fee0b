//! Cross-validation experiments on a dataset directory: configuration,
//! resumable per-fold training tasks, aggregation and reports.
//!
//! Output layout below the results directory:
//!
//! ```text
//! config.txt                      canonical config of the run
//! subjects.csv, summary.csv       pooled over seeds
//! seed-S/folds.csv                fold plan of seed S
//! seed-S/subjects.csv, summary.csv
//! seed-S/fold-F/<regime>/         classifier.jsyn, generator.jsyn,
//!                                 curves.csv, pred-<id>.mvol,
//!                                 synth-<id>.mvol, subjects.csv
//! report/                         tables and overlay panels
//! ```

mod config;
mod report;
mod run;

pub use config::{ExperimentConfig, Precision};
pub use report::{render_table1, render_table2, report, select_panels, PanelSlice, ReportOutcome, REPORT_DIR};
pub use run::{
    aggregate, all_tasks, cross_validate, evaluate_subject, fitted_slice, fold_plans, fold_seed, missing_tasks,
    prediction_path, read_task_rows, run_task, seed_dir, synthesis_path, synthesis_scores, synthesize_file,
    task_dir, thread_cap, train_single, write_phantom, CvOutcome, SubjectEval, TaskKey, CLASSIFIER_FILE,
    CONFIG_FILE, CURVES_FILE, FOLDS_FILE, GENERATOR_FILE, SUBJECTS_FILE, SUMMARY_FILE, THREADS_ENV,
};
