use std::collections::HashMap;
use std::fmt::Write as _;

use super::{cap_psnr, permutation_test};
use crate::error::{Error, Result};

/// Differences below this p-value are marked in tables.
pub const SIGNIFICANCE_LEVEL: f64 = 0.005;

const SUBJECT_HEADER: [&str; 7] = ["method", "subject", "dsc", "fpr", "fnr", "mae", "psnr"];
const SUMMARY_HEADER: [&str; 10] = [
    "method",
    "mean_dsc",
    "mean_fpr",
    "mean_fnr",
    "mean_mae",
    "mean_psnr",
    "p_dsc_vs_baseline",
    "p_fpr_vs_baseline",
    "p_fnr_vs_baseline",
    "n_subjects",
];

/// Metrics of one method on one test subject. Absent values are written
/// as empty CSV fields.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRow {
    pub method: String,
    pub subject: String,
    pub dsc: f64,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub mae: Option<f64>,
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub mean_dsc: f64,
    pub mean_fpr: Option<f64>,
    pub mean_fnr: Option<f64>,
    pub mean_mae: Option<f64>,
    /// Mean of capped PSNR values.
    pub mean_psnr: Option<f64>,
    pub p_dsc: Option<f64>,
    pub p_fpr: Option<f64>,
    pub p_fnr: Option<f64>,
    pub n_subjects: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn paired_p(
    rows: &[&SubjectRow],
    base: &HashMap<&str, &SubjectRow>,
    field: fn(&SubjectRow) -> Option<f64>,
    n_permutations: usize,
    seed: u64,
) -> Result<Option<f64>> {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for r in rows {
        if let (Some(x), Some(y)) = (field(r), base.get(r.subject.as_str()).and_then(|br| field(br))) {
            a.push(x);
            b.push(y);
        }
    }
    if a.len() < 2 {
        return Ok(None);
    }
    permutation_test(&a, &b, n_permutations, seed).map(Some)
}

/// Per-method means plus paired p-values against `baseline`, in order of
/// first appearance. Subjects are paired by id.
pub fn summarize(rows: &[SubjectRow], baseline: &str, n_permutations: usize, seed: u64) -> Result<Vec<MethodSummary>> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let base: HashMap<&str, &SubjectRow> = rows
        .iter()
        .filter(|r| r.method == baseline)
        .map(|r| (r.subject.as_str(), r))
        .collect();
    let mut out = Vec::new();
    for m in methods {
        let mine: Vec<&SubjectRow> = rows.iter().filter(|r| r.method == m).collect();
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = mine.iter().find(|r| !seen.insert(r.subject.as_str())) {
            return Err(Error::invalid(
                "summarize",
                format!("method {m} has more than one row for subject {}", dup.subject),
            ));
        }
        let compare = m != baseline && !base.is_empty();
        let p = |field: fn(&SubjectRow) -> Option<f64>| -> Result<Option<f64>> {
            if compare {
                paired_p(&mine, &base, field, n_permutations, seed)
            } else {
                Ok(None)
            }
        };
        out.push(MethodSummary {
            method: m.to_string(),
            mean_dsc: mean(mine.iter().map(|r| r.dsc)).unwrap_or(f64::NAN),
            mean_fpr: mean(mine.iter().filter_map(|r| r.fpr)),
            mean_fnr: mean(mine.iter().filter_map(|r| r.fnr)),
            mean_mae: mean(mine.iter().filter_map(|r| r.mae)),
            mean_psnr: mean(mine.iter().filter_map(|r| r.psnr.map(cap_psnr))),
            p_dsc: p(|r| Some(r.dsc))?,
            p_fpr: p(|r| r.fpr)?,
            p_fnr: p(|r| r.fnr)?,
            n_subjects: mine.len(),
        });
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(header: &[&str], records: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in records {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn render_subject_rows(rows: &[SubjectRow]) -> String {
    write_csv(
        &SUBJECT_HEADER,
        rows.iter().map(|r| {
            vec![
                r.method.clone(),
                r.subject.clone(),
                r.dsc.to_string(),
                opt(r.fpr),
                opt(r.fnr),
                opt(r.mae),
                opt(r.psnr),
            ]
        }),
    )
}

pub fn render_summary(summary: &[MethodSummary]) -> String {
    write_csv(
        &SUMMARY_HEADER,
        summary.iter().map(|s| {
            vec![
                s.method.clone(),
                s.mean_dsc.to_string(),
                opt(s.mean_fpr),
                opt(s.mean_fnr),
                opt(s.mean_mae),
                opt(s.mean_psnr),
                opt(s.p_dsc),
                opt(s.p_fpr),
                opt(s.p_fnr),
                s.n_subjects.to_string(),
            ]
        }),
    )
}

fn read_records(text: &str, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let bad = |msg: String| Error::invalid("csv", msg);
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let got = r.headers().map_err(|e| bad(e.to_string()))?;
    if got.iter().ne(header.iter().copied()) {
        return Err(bad(format!("unexpected header {:?}", got.iter().collect::<Vec<_>>())));
    }
    r.records().map(|rec| rec.map_err(|e| bad(e.to_string()))).collect()
}

fn field(rec: &csv::StringRecord, i: usize) -> Result<Option<f64>> {
    let s = rec.get(i).unwrap_or("");
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::invalid("csv", format!("not a number: {s:?}")))
}

fn required(rec: &csv::StringRecord, i: usize) -> Result<f64> {
    field(rec, i)?.ok_or_else(|| Error::invalid("csv", format!("missing value in column {i}")))
}

pub fn parse_subject_rows(text: &str) -> Result<Vec<SubjectRow>> {
    read_records(text, &SUBJECT_HEADER)?
        .iter()
        .map(|rec| {
            Ok(SubjectRow {
                method: rec[0].to_string(),
                subject: rec[1].to_string(),
                dsc: required(rec, 2)?,
                fpr: field(rec, 3)?,
                fnr: field(rec, 4)?,
                mae: field(rec, 5)?,
                psnr: field(rec, 6)?,
            })
        })
        .collect()
}

pub fn parse_summary(text: &str) -> Result<Vec<MethodSummary>> {
    read_records(text, &SUMMARY_HEADER)?
        .iter()
        .map(|rec| {
            Ok(MethodSummary {
                method: rec[0].to_string(),
                mean_dsc: required(rec, 1)?,
                mean_fpr: field(rec, 2)?,
                mean_fnr: field(rec, 3)?,
                mean_mae: field(rec, 4)?,
                mean_psnr: field(rec, 5)?,
                p_dsc: field(rec, 6)?,
                p_fpr: field(rec, 7)?,
                p_fnr: field(rec, 8)?,
                n_subjects: required(rec, 9)? as usize,
            })
        })
        .collect()
}

fn pct(v: Option<f64>, p: Option<f64>) -> String {
    match v {
        Some(x) => {
            let mark = if p.is_some_and(|p| p < SIGNIFICANCE_LEVEL) { "*" } else { "" };
            format!("{:.2}{mark}", 100.0 * x)
        }
        None => "-".into(),
    }
}

/// Plain-text segmentation and synthesis tables. Entries marked `*` differ
/// from the baseline with p below [`SIGNIFICANCE_LEVEL`].
pub fn format_summary_table(summary: &[MethodSummary], baseline: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Segmentation (mean over test subjects, %; * p < {SIGNIFICANCE_LEVEL} vs {baseline})");
    let _ = writeln!(out, "{:<12} {:>10} {:>10} {:>10}", "method", "DSC", "FPR", "FNR");
    for s in summary {
        let _ = writeln!(
            out,
            "{:<12} {:>10} {:>10} {:>10}",
            s.method,
            pct(Some(s.mean_dsc), s.p_dsc),
            pct(s.mean_fpr, s.p_fpr),
            pct(s.mean_fnr, s.p_fnr)
        );
    }
    let synth: Vec<&MethodSummary> = summary.iter().filter(|s| s.mean_mae.is_some()).collect();
    if !synth.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "Synthesis (real vs synthetic FLAIR)");
        let _ = writeln!(out, "{:<12} {:>10} {:>10}", "method", "MAE", "PSNR(dB)");
        for s in synth {
            let _ = writeln!(
                out,
                "{:<12} {:>10.4} {:>10}",
                s.method,
                s.mean_mae.unwrap_or(f64::NAN),
                s.mean_psnr.map(|p| format!("{p:.2}")).unwrap_or_else(|| "-".into())
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, subject: usize, dsc: f64) -> SubjectRow {
        SubjectRow {
            method: method.into(),
            subject: format!("s{subject}"),
            dsc,
            fpr: Some(1.0 - dsc),
            fnr: if subject == 0 { None } else { Some(dsc / 2.0) },
            mae: (method != "unimodal").then_some(0.25 + dsc),
            psnr: (method != "unimodal").then_some(if subject == 1 { f64::INFINITY } else { 10.0 }),
        }
    }

    fn rows() -> Vec<SubjectRow> {
        let mut r = Vec::new();
        for s in 0..6 {
            r.push(row("unimodal", s, 0.5 + 0.01 * s as f64));
            r.push(row("joint", s, 0.6 + 0.013 * s as f64));
        }
        r
    }

    #[test]
    fn means_are_per_subject_averages() {
        let s = summarize(&rows(), "unimodal", 999, 0).unwrap();
        assert_eq!(s.len(), 2);
        let joint = &s[1];
        let expect = (0..6).map(|i| 0.6 + 0.013 * i as f64).sum::<f64>() / 6.0;
        assert!((joint.mean_dsc - expect).abs() < 1e-15);
        assert_eq!(s[0].mean_mae, None);
        assert_eq!(joint.mean_psnr, Some((99.0 + 5.0 * 10.0) / 6.0));
        assert!(s[0].p_dsc.is_none());
        // every pair shifts the same way: exact p = 2 / 2^6
        assert_eq!(joint.p_dsc, Some(2.0 / 64.0));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let r = rows();
        let text = render_subject_rows(&r);
        assert!(text.starts_with("method,subject,dsc,fpr,fnr,mae,psnr\n"));
        assert_eq!(parse_subject_rows(&text).unwrap(), r);
        let s = summarize(&r, "unimodal", 999, 0).unwrap();
        let text = render_summary(&s);
        assert!(text.starts_with("method,mean_dsc,mean_fpr,mean_fnr,mean_mae,mean_psnr,p_dsc_vs_baseline"));
        assert_eq!(parse_summary(&text).unwrap(), s);
    }

    #[test]
    fn table_marks_only_significant_entries() {
        let mut s = summarize(&rows(), "unimodal", 999, 0).unwrap();
        s[1].p_dsc = Some(0.001);
        s[1].p_fpr = Some(0.2);
        let t = format_summary_table(&s, "unimodal");
        let marks: usize = t.lines().skip(2).map(|l| l.matches('*').count()).sum();
        assert_eq!(marks, 1, "{t}");
        assert!(t.lines().any(|l| l.starts_with("joint") && l.contains('*')));
        assert!(t.contains("Synthesis"));
    }

    #[test]
    fn duplicate_subject_rows_are_rejected() {
        let mut r = rows();
        r.push(row("joint", 2, 0.1));
        assert!(summarize(&r, "unimodal", 99, 0).is_err());
    }
}
