use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
# small cohort for fast runs
data_root = data
out_dir = results
phantom.subjects = 6
phantom.slices = 2
phantom.size = 16, 16
phantom.lesion_radius = 1.0, 2.0
folds = 3
n_test = 2
n_val = 1
seeds = 0
epochs = 1
batch_size = 2
lr = 0.001
slice = 16, 16
depth = 1
base_filters = 2
permutations = 100
";

fn jsynth(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jsynth"))
        .args(args)
        .current_dir(dir)
        .env_remove("JSYNTH_THREADS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("desk.cfg"), CONFIG).unwrap();
    let o = jsynth(tmp.path(), &["gen-phantom", "--config", "desk.cfg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    tmp
}

#[test]
fn gen_phantom_writes_cohort_and_summary() {
    let tmp = setup();
    let o = jsynth(tmp.path(), &["gen-phantom", "--config", "desk.cfg", "--out", "again"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("wrote 6 subjects"), "{text}");
    assert!(text.contains("faint in T1"), "{text}");
    let dirs: Vec<_> = fs::read_dir(tmp.path().join("data")).unwrap().collect();
    assert_eq!(dirs.len(), 6);
    let mut files = 0;
    for d in fs::read_dir(tmp.path().join("data")).unwrap() {
        let d = d.unwrap().path();
        for f in ["t1.mvol", "flair.mvol", "label.mvol"] {
            let a = fs::read(d.join(f)).unwrap();
            let b = fs::read(tmp.path().join("again").join(d.file_name().unwrap()).join(f)).unwrap();
            assert_eq!(a, b);
            files += 1;
        }
    }
    assert_eq!(files, 18);
    let o = jsynth(tmp.path(), &["validate-data", "--config", "desk.cfg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("subjects                 6"));
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = setup();
    assert_eq!(jsynth(tmp.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(jsynth(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(jsynth(tmp.path(), &["train", "--regime", "bogus"]).status.code(), Some(1));

    fs::write(tmp.path().join("bad.cfg"), "epochs = many\n").unwrap();
    let o = jsynth(tmp.path(), &["cross-validate", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));

    let o = jsynth(tmp.path(), &["validate-data", "missing-dir"]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(tmp.path().join("data/sub-02/flair.mvol"), b"XXXXXXXXXXXXXXXXXXXX").unwrap();
    let o = jsynth(tmp.path(), &["validate-data", "data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("flair.mvol"), "{}", stderr(&o));
    // data errors are reported before any training starts
    let o = jsynth(tmp.path(), &["cross-validate", "--config", "desk.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("results").exists());

    let o = Command::new(env!("CARGO_BIN_EXE_jsynth"))
        .args(["cross-validate", "--config", "desk.cfg"])
        .current_dir(tmp.path())
        .env("JSYNTH_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn cross_validate_report_and_synthesize() {
    let tmp = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_jsynth"))
        .args(["cross-validate", "--config", "desk.cfg"])
        .current_dir(tmp.path())
        .env("JSYNTH_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("9 tasks trained"), "{}", stdout(&o));
    let o = jsynth(tmp.path(), &["report", "results"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for m in ["unimodal", "offline", "joint", "DSC", "PSNR"] {
        assert!(text.contains(m), "{text}");
    }
    for tag in ["low", "median", "high"] {
        assert!(tmp.path().join(format!("results/report/overlay-{tag}-joint.ppm")).is_file());
    }

    // a rerun reuses everything
    let o = jsynth(tmp.path(), &["cross-validate", "--config", "desk.cfg"]);
    assert!(stdout(&o).contains("0 tasks trained, 9 reused"), "{}", stdout(&o));

    fs::remove_dir_all(tmp.path().join("results/seed-0/fold-1/offline")).unwrap();
    let o = jsynth(tmp.path(), &["report", "--out", "results"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing folds: seed-0/fold-1/offline"), "{}", stderr(&o));

    let gen = "results/seed-0/fold-0/joint/generator.jsyn";
    let o = jsynth(
        tmp.path(),
        &["synthesize", gen, "data/sub-00/t1.mvol", "synth.mvol", "--reference", "data/sub-00/flair.mvol"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mae: f64 = text.lines().find_map(|l| l.strip_prefix("MAE  ")).unwrap().parse().unwrap();
    let expected = jsynth::experiment::synthesis_scores(
        &jsynth::data::read_volume::<f64>(&tmp.path().join("data/sub-00/flair.mvol"), jsynth::data::Modality::Flair).unwrap(),
        &jsynth::data::read_volume::<f64>(&tmp.path().join("synth.mvol"), jsynth::data::Modality::SynthFlair).unwrap(),
    )
    .unwrap();
    assert_eq!(mae, expected.0);

    // a classifier is not a generator
    let o = jsynth(
        tmp.path(),
        &["synthesize", "results/seed-0/fold-0/joint/classifier.jsyn", "data/sub-00/t1.mvol", "x.mvol"],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_writes_checkpoints_and_curves() {
    let tmp = setup();
    let o = jsynth(
        tmp.path(),
        &["train", "--config", "desk.cfg", "--regime", "offline", "--seed", "4", "--folds", "2", "--fold", "1", "--out", "run"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["classifier.jsyn", "generator.jsyn", "curves.csv", "subjects.csv"] {
        assert!(tmp.path().join("run").join(f).is_file(), "{f}");
    }
    let curves = fs::read_to_string(tmp.path().join("run/curves.csv")).unwrap();
    assert!(curves.starts_with("epoch,l_c,l_g_l2,l_g_seg,val_dice\n"));
    assert_eq!(stdout(&o).lines().filter(|l| l.contains("dice")).count(), 3);
}

#[test]
fn grad_check_single_seed_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = jsynth(tmp.path(), &["grad-check", "--seed", "1"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("generator->classifier"));
    assert!(!text.contains("FAIL"));
}
