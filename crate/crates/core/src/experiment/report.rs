use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::run::{aggregate, fold_plans, incomplete, missing_tasks, prediction_path, task_dir, write_atomic, CONFIG_FILE};
use crate::data::{read_subject, read_volume, Modality};
use crate::error::{Error, Result};
use crate::metrics::{confusion, format_summary_table, render_overlay, MethodSummary, FN_COLOR, FP_COLOR, TP_COLOR};

pub const REPORT_DIR: &str = "report";

/// A test slice picked for the qualitative panels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanelSlice {
    /// `low`, `median` or `high`.
    pub tag: &'static str,
    pub seed: u64,
    pub fold: usize,
    pub subject: String,
    pub z: usize,
    pub lesion_load: usize,
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub text: String,
    pub summary: Vec<MethodSummary>,
    pub panels: Vec<PanelSlice>,
    pub files: Vec<PathBuf>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Segmentation table as CSV: one row per method.
pub fn render_table1(summary: &[MethodSummary]) -> String {
    let mut o = String::from("method,dsc,fpr,fnr,p_dsc,p_fpr,p_fnr\n");
    for s in summary {
        let _ = writeln!(
            o,
            "{},{},{},{},{},{},{}",
            s.method,
            s.mean_dsc,
            opt(s.mean_fpr),
            opt(s.mean_fnr),
            opt(s.p_dsc),
            opt(s.p_fpr),
            opt(s.p_fnr)
        );
    }
    o
}

/// Synthesis table as CSV: methods with a generator only.
pub fn render_table2(summary: &[MethodSummary]) -> String {
    let mut o = String::from("method,mae,psnr\n");
    for s in summary.iter().filter(|s| s.mean_mae.is_some()) {
        let _ = writeln!(o, "{},{},{}", s.method, opt(s.mean_mae), opt(s.mean_psnr));
    }
    o
}

/// Lowest, median and highest lesion-load test slices of the first
/// seed. Ties are broken by subject id, then slice index.
pub fn select_panels(config: &ExperimentConfig) -> Result<Vec<PanelSlice>> {
    let seed = config.seeds[0];
    let ids = subject_ids(&config.data_root)?;
    let (_, plans) = fold_plans(config, &ids)?.into_iter().next().expect("seeds are nonempty");
    let mut slices = Vec::new();
    for plan in &plans {
        for id in &plan.test {
            let label = read_subject::<f64>(&config.data_root, id)?.label;
            for z in 0..label.depth() {
                let load = label.slice(z).iter().filter(|&&v| v == 1.0).count();
                slices.push((load, id.clone(), z, plan.fold));
            }
        }
    }
    slices.sort();
    let n = slices.len();
    if n == 0 {
        return Err(Error::invalid("report", "no test slices"));
    }
    Ok([("low", 0), ("median", (n - 1) / 2), ("high", n - 1)]
        .into_iter()
        .map(|(tag, i)| {
            let (lesion_load, subject, z, fold) = slices[i].clone();
            PanelSlice {
                tag,
                seed,
                fold,
                subject,
                z,
                lesion_load,
            }
        })
        .collect())
}

fn subject_ids(root: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .collect();
    ids.sort();
    Ok(ids)
}

/// Tables and overlay panels for a finished cross-validation directory.
/// Fails with the list of missing folds when any task is unfinished.
pub fn report(results: &Path) -> Result<ReportOutcome> {
    let config = ExperimentConfig::load(&results.join(CONFIG_FILE))?;
    let missing = missing_tasks(&config, results);
    if !missing.is_empty() {
        return Err(incomplete(results, &missing));
    }
    let (summary, _) = aggregate(&config, results)?;
    let dir = results.join(REPORT_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, bytes)?;
        files.push(path);
        Ok(())
    };
    let text = format_summary_table(&summary, &config.baseline);
    put("tables.txt", text.as_bytes())?;
    put("table1.csv", render_table1(&summary).as_bytes())?;
    put("table2.csv", render_table2(&summary).as_bytes())?;

    let panels = select_panels(&config)?;
    let mut index = String::from("tag,seed,fold,subject,slice,lesion_load,method,tp,fp,fn,blue,green,yellow\n");
    for p in &panels {
        let subject = read_subject::<f64>(&config.data_root, &p.subject)?;
        let (h, w) = subject.t1.slice_dims();
        let truth = subject.label.slice(p.z);
        for &regime in &config.regimes {
            let pred = read_volume::<f64>(
                &prediction_path(&task_dir(results, p.seed, p.fold, regime), &p.subject),
                Modality::Label,
            )?;
            let pred = pred.slice(p.z);
            let img = render_overlay(pred, truth, subject.t1.slice(p.z), h, w)?;
            let c = confusion(pred, truth)?;
            put(&format!("overlay-{}-{}.ppm", p.tag, regime.name()), &img.to_ppm())?;
            let _ = writeln!(
                index,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                p.tag,
                p.seed,
                p.fold,
                p.subject,
                p.z,
                p.lesion_load,
                regime.name(),
                c.tp,
                c.fp,
                c.fn_,
                img.count(TP_COLOR),
                img.count(FP_COLOR),
                img.count(FN_COLOR)
            );
        }
    }
    put("overlays.csv", index.as_bytes())?;
    Ok(ReportOutcome {
        text,
        summary,
        panels,
        files,
    })
}
