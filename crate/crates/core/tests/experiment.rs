use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use jsynth::data::{validate_dataset, PhantomSpec};
use jsynth::experiment::{
    cross_validate, report, synthesize_file, task_dir, write_phantom, ExperimentConfig, SUBJECTS_FILE, SUMMARY_FILE,
};
use jsynth::metrics::{parse_subject_rows, parse_summary, RgbImage};
use jsynth::train::{Regime, TrainConfig};
use jsynth::ErrorKind;

fn desk(root: &Path, out: &str) -> ExperimentConfig {
    ExperimentConfig {
        data_root: root.join("data"),
        out_dir: root.join(out),
        phantom: PhantomSpec {
            n_subjects: 6,
            slices: 2,
            height: 16,
            width: 16,
            lesion_radius: (1.0, 2.0),
            ..PhantomSpec::default()
        },
        train: TrainConfig {
            epochs: 1,
            batch_size: 2,
            lr: 1e-3,
            slice: (16, 16),
            depth: 1,
            base_filters: 2,
            ..TrainConfig::default()
        },
        n_folds: 3,
        n_test: 2,
        n_val: 1,
        seeds: vec![0, 1],
        permutations: 200,
        ..ExperimentConfig::default()
    }
}

fn quiet(_: &str) {}

/// Every file below `dir` keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(p.strip_prefix(base).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn cross_validation_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let config = desk(tmp.path(), "results");
    let stats = write_phantom(&config.phantom, &config.data_root).unwrap();
    assert!(stats.lesions > 0);
    assert_eq!(validate_dataset(&config.data_root).unwrap().subjects, 6);

    let out = cross_validate::<f64>(&config, &quiet).unwrap();
    assert_eq!(out.trained.len(), 2 * 3 * 3);
    assert!(out.reused.is_empty());

    // each seed: 3 regimes x 6 test rows, every subject tested once
    for seed in [0, 1] {
        let text = fs::read_to_string(config.out_dir.join(format!("seed-{seed}")).join(SUBJECTS_FILE)).unwrap();
        let rows = parse_subject_rows(&text).unwrap();
        assert_eq!(rows.len(), 18);
        for r in Regime::ALL {
            let mut subjects: Vec<&str> = rows.iter().filter(|x| x.method == r.name()).map(|x| x.subject.as_str()).collect();
            subjects.sort_unstable();
            subjects.dedup();
            assert_eq!(subjects.len(), 6);
        }
        assert!(rows.iter().filter(|x| x.method == "unimodal").all(|x| x.mae.is_none()));
        assert!(rows.iter().filter(|x| x.method != "unimodal").all(|x| x.mae.is_some()));
    }

    // pooled means recomputed independently from the pooled rows
    let rows = parse_subject_rows(&fs::read_to_string(config.out_dir.join(SUBJECTS_FILE)).unwrap()).unwrap();
    let summary = parse_summary(&fs::read_to_string(config.out_dir.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary.len(), 3);
    for s in &summary {
        let dsc: Vec<f64> = rows.iter().filter(|r| r.method == s.method).map(|r| r.dsc).collect();
        let mut acc = 0.0;
        for d in &dsc {
            acc += d;
        }
        assert_eq!(s.mean_dsc, acc / dsc.len() as f64);
        assert_eq!(s.n_subjects, 12);
        assert_eq!(s.p_dsc.is_none(), s.method == "unimodal");
    }
    assert_eq!(out.pooled, summary);

    // deleting one fold and rerunning reproduces every file bitwise
    let before = snapshot(&config.out_dir);
    fs::remove_dir_all(config.out_dir.join("seed-1").join("fold-2")).unwrap();
    let err = report(&config.out_dir).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
    let msg = err.to_string();
    for r in Regime::ALL {
        assert!(msg.contains(&format!("seed-1/fold-2/{}", r.name())), "{msg}");
    }
    assert!(!msg.contains("seed-0"), "{msg}");
    let again = cross_validate::<f64>(&config, &quiet).unwrap();
    assert_eq!(again.trained.len(), 3);
    assert_eq!(again.reused.len(), 15);
    assert_eq!(before, snapshot(&config.out_dir));

    // report: tables, and overlay colours reconcile with confusion counts
    let rep = report(&config.out_dir).unwrap();
    assert_eq!(rep.summary, summary);
    assert_eq!(rep.panels.len(), 3);
    assert!(rep.panels[0].lesion_load <= rep.panels[1].lesion_load);
    assert!(rep.panels[1].lesion_load <= rep.panels[2].lesion_load);
    let table1 = fs::read_to_string(config.out_dir.join("report/table1.csv")).unwrap();
    assert_eq!(table1.lines().count(), 1 + 3);
    let table2 = fs::read_to_string(config.out_dir.join("report/table2.csv")).unwrap();
    assert_eq!(table2.lines().count(), 1 + 2);
    let index = fs::read_to_string(config.out_dir.join("report/overlays.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 9);
    for line in index.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(&f[7..10], &f[10..13], "{line}");
        let img = RgbImage::from_ppm(&fs::read(config.out_dir.join(format!("report/overlay-{}-{}.ppm", f[0], f[6]))).unwrap()).unwrap();
        assert_eq!(img.count(jsynth::metrics::TP_COLOR).to_string(), f[7]);
    }

    // a saved generator synthesizes a test subject again, bit for bit
    let task = task_dir(&config.out_dir, 0, 0, Regime::Joint);
    let plan = fs::read_to_string(config.out_dir.join("seed-0/folds.csv")).unwrap();
    let id = plan.lines().find(|l| l.starts_with("0,test,")).unwrap().rsplit(',').next().unwrap().to_string();
    let synth = tmp.path().join("synth.mvol");
    let scores = synthesize_file(
        &task.join("generator.jsyn"),
        &config.data_root.join(&id).join("t1.mvol"),
        &synth,
        Some(&config.data_root.join(&id).join("flair.mvol")),
    )
    .unwrap()
    .unwrap();
    assert_eq!(fs::read(&synth).unwrap(), fs::read(task.join(format!("synth-{id}.mvol"))).unwrap());
    let row = parse_subject_rows(&fs::read_to_string(task.join(SUBJECTS_FILE)).unwrap())
        .unwrap()
        .into_iter()
        .find(|r| r.subject == id)
        .unwrap();
    assert_eq!(Some(scores.0), row.mae);
    assert_eq!(Some(scores.1), row.psnr);
}

#[test]
fn full_rerun_is_bitwise_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = ExperimentConfig {
        seeds: vec![3],
        ..desk(tmp.path(), "a")
    };
    let b = ExperimentConfig {
        out_dir: tmp.path().join("b"),
        ..a.clone()
    };
    write_phantom(&a.phantom, &a.data_root).unwrap();
    cross_validate::<f64>(&a, &quiet).unwrap();
    cross_validate::<f64>(&b, &quiet).unwrap();
    let (mut sa, mut sb) = (snapshot(&a.out_dir), snapshot(&b.out_dir));
    // the config records its own output directory
    sa.remove(Path::new("config.txt"));
    sb.remove(Path::new("config.txt"));
    assert!(sa.len() > 20);
    assert_eq!(sa, sb);
}

#[test]
fn invalid_dataset_is_rejected_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let config = desk(tmp.path(), "results");
    write_phantom(&config.phantom, &config.data_root).unwrap();
    fs::write(config.data_root.join("sub-03").join("label.mvol"), b"MVOL").unwrap();
    let err = cross_validate::<f64>(&config, &quiet).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
    assert!(!config.out_dir.exists());

    let tmp = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        n_test: 4,
        ..desk(tmp.path(), "results")
    };
    write_phantom(&config.phantom, &config.data_root).unwrap();
    let err = cross_validate::<f64>(&config, &quiet).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Usage, "{err}");
    assert!(!config.out_dir.exists());
}

#[test]
fn single_precision_pipeline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        seeds: vec![0],
        regimes: vec![Regime::Joint],
        baseline: "joint".into(),
        ..desk(tmp.path(), "results")
    };
    write_phantom(&config.phantom, &config.data_root).unwrap();
    let out = cross_validate::<f32>(&config, &quiet).unwrap();
    assert_eq!(out.pooled[0].n_subjects, 6);
    assert!(out.pooled[0].mean_mae.unwrap().is_finite());
}

#[test]
fn shipped_config_describes_the_phantom_experiment() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/phantom.cfg");
    let c = ExperimentConfig::load(&path).unwrap();
    assert_eq!((c.phantom.n_subjects, c.phantom.height, c.phantom.width), (12, 64, 64));
    assert_eq!((c.n_folds, c.n_test, c.n_val), (3, 4, 2));
    assert_eq!(c.seeds, [0, 1, 2]);
    assert_eq!((c.train.depth, c.train.base_filters), (3, 16));
    assert!(c.train.epochs <= 30);
    assert!(c.data_root.ends_with("data/phantom"));
    assert!(c.data_root.is_absolute());
}
