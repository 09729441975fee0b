use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::PhantomSpec;
use crate::error::{Error, Result};
use crate::train::{Regime, TrainConfig};

/// Numeric precision of a whole experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Everything a cross-validation run depends on.
///
/// Training keys without a prefix apply to every regime; a key prefixed
/// with a regime name (`joint.epochs = 12`) overrides it for that regime.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub phantom: PhantomSpec,
    pub regimes: Vec<Regime>,
    pub train: TrainConfig,
    pub overrides: Vec<(Regime, String, String)>,
    pub n_folds: usize,
    pub n_test: usize,
    pub n_val: usize,
    pub seeds: Vec<u64>,
    /// Method the others are tested against.
    pub baseline: String,
    pub permutations: usize,
    pub permutation_seed: u64,
    pub precision: Precision,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("results"),
            phantom: PhantomSpec::default(),
            regimes: Regime::ALL.to_vec(),
            train: TrainConfig::default(),
            overrides: Vec::new(),
            n_folds: 3,
            n_test: 4,
            n_val: 2,
            seeds: vec![0, 1, 2],
            baseline: Regime::Unimodal.name().into(),
            permutations: 10_000,
            permutation_seed: 0,
            precision: Precision::F64,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_pair<T: FromStr>(key: &str, value: &str) -> Result<(T, T)> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok((parse(key, a)?, parse(key, b)?)),
        _ => Err(Error::Config(format!("{key}: expected two comma-separated values, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn apply_train_key(train: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "epochs" => train.epochs = parse(key, value)?,
        "batch_size" => train.batch_size = parse(key, value)?,
        "lr" => train.lr = parse(key, value)?,
        "lambda_seg" => train.lambda_seg = parse(key, value)?,
        "slice" => train.slice = parse_pair(key, value)?,
        "depth" => train.depth = parse(key, value)?,
        "base_filters" => train.base_filters = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn apply_phantom_key(p: &mut PhantomSpec, key: &str, value: &str) -> Result<bool> {
    match key {
        "seed" => p.seed = parse(key, value)?,
        "subjects" => p.n_subjects = parse(key, value)?,
        "slices" => p.slices = parse(key, value)?,
        "size" => (p.height, p.width) = parse_pair(key, value)?,
        "lesions_per_slice" => p.lesions_per_slice = parse_pair(key, value)?,
        "lesion_radius" => p.lesion_radius = parse_pair(key, value)?,
        "faint_fraction" => p.faint_fraction = parse(key, value)?,
        "noise_sigma" => p.noise_sigma = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment. Relative paths
    /// are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(at(format!("duplicate key {key}")));
            }
            c.apply(key, value).map_err(|e| match e {
                Error::Config(m) => at(m),
                other => other,
            })?;
        }
        for p in [&mut c.data_root, &mut c.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let path = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("/")))
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(rest) = key.strip_prefix("phantom.") {
            if apply_phantom_key(&mut self.phantom, rest, value)? {
                return Ok(());
            }
        } else if let Some((prefix, rest)) = key.split_once('.') {
            if let Ok(regime) = prefix.parse::<Regime>() {
                let mut probe = self.train.clone();
                if apply_train_key(&mut probe, rest, value)? {
                    self.overrides.push((regime, rest.to_string(), value.to_string()));
                    return Ok(());
                }
            }
        } else if apply_train_key(&mut self.train, key, value)? {
            return Ok(());
        } else {
            match key {
                "data_root" => self.data_root = PathBuf::from(value),
                "out_dir" => self.out_dir = PathBuf::from(value),
                "regimes" => self.regimes = parse_list(key, value)?,
                "folds" => self.n_folds = parse(key, value)?,
                "n_test" => self.n_test = parse(key, value)?,
                "n_val" => self.n_val = parse(key, value)?,
                "seeds" => self.seeds = parse_list(key, value)?,
                "baseline" => self.baseline = value.to_string(),
                "permutations" => self.permutations = parse(key, value)?,
                "permutation_seed" => self.permutation_seed = parse(key, value)?,
                "precision" => {
                    self.precision = match value {
                        "f32" => Precision::F32,
                        "f64" => Precision::F64,
                        other => return Err(Error::Config(format!("precision: expected f32 or f64, got {other:?}"))),
                    }
                }
                _ => return Err(Error::Config(format!("unknown key {key}"))),
            }
            return Ok(());
        }
        Err(Error::Config(format!("unknown key {key}")))
    }

    /// Training config of one regime, with overrides applied and `seed`
    /// as the run seed.
    pub fn train_config(&self, regime: Regime, seed: u64) -> Result<TrainConfig> {
        let mut t = TrainConfig {
            regime,
            seed,
            ..self.train.clone()
        };
        for (r, key, value) in &self.overrides {
            if *r == regime {
                apply_train_key(&mut t, key, value)?;
            }
        }
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.regimes.is_empty() {
            return Err(Error::Config("no regimes enabled".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.regimes.iter().find(|r| !seen.insert(**r)) {
            return Err(Error::Config(format!("regime {} listed twice", dup.name())));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.n_folds == 0 || self.permutations == 0 {
            return Err(Error::Config("folds and permutations must be positive".into()));
        }
        for &r in &self.regimes {
            self.train_config(r, 0)?
                .validate()
                .map_err(|e| Error::Config(format!("{}: {e}", r.name())))?;
        }
        self.phantom.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Canonical rendering; parsing it back yields an equal config.
    pub fn render(&self) -> String {
        let mut o = String::new();
        let t = &self.train;
        let p = &self.phantom;
        let list = |v: Vec<String>| v.join(", ");
        let _ = writeln!(o, "data_root = {}", self.data_root.display());
        let _ = writeln!(o, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(o, "precision = {}", self.precision.name());
        let _ = writeln!(o, "regimes = {}", list(self.regimes.iter().map(|r| r.name().to_string()).collect()));
        let _ = writeln!(o, "seeds = {}", list(self.seeds.iter().map(u64::to_string).collect()));
        let _ = writeln!(o, "folds = {}", self.n_folds);
        let _ = writeln!(o, "n_test = {}", self.n_test);
        let _ = writeln!(o, "n_val = {}", self.n_val);
        let _ = writeln!(o, "baseline = {}", self.baseline);
        let _ = writeln!(o, "permutations = {}", self.permutations);
        let _ = writeln!(o, "permutation_seed = {}", self.permutation_seed);
        let _ = writeln!(o, "epochs = {}", t.epochs);
        let _ = writeln!(o, "batch_size = {}", t.batch_size);
        let _ = writeln!(o, "lr = {}", t.lr);
        let _ = writeln!(o, "lambda_seg = {}", t.lambda_seg);
        let _ = writeln!(o, "slice = {}, {}", t.slice.0, t.slice.1);
        let _ = writeln!(o, "depth = {}", t.depth);
        let _ = writeln!(o, "base_filters = {}", t.base_filters);
        for (r, key, value) in &self.overrides {
            let _ = writeln!(o, "{}.{key} = {value}", r.name());
        }
        let _ = writeln!(o, "phantom.seed = {}", p.seed);
        let _ = writeln!(o, "phantom.subjects = {}", p.n_subjects);
        let _ = writeln!(o, "phantom.slices = {}", p.slices);
        let _ = writeln!(o, "phantom.size = {}, {}", p.height, p.width);
        let _ = writeln!(o, "phantom.lesions_per_slice = {}, {}", p.lesions_per_slice.0, p.lesions_per_slice.1);
        let _ = writeln!(o, "phantom.lesion_radius = {}, {}", p.lesion_radius.0, p.lesion_radius.1);
        let _ = writeln!(o, "phantom.faint_fraction = {}", p.faint_fraction);
        let _ = writeln!(o, "phantom.noise_sigma = {}", p.noise_sigma);
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_overrides() {
        let text = "\
# desk run
data_root = cohort
seeds = 4, 5   # two seeds
regimes = unimodal, joint
epochs = 7
joint.epochs = 9
joint.lr = 0.001
phantom.size = 32, 48
phantom.faint_fraction = 0.4
slice = 32, 48
";
        let c = ExperimentConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(c.data_root, PathBuf::from("/base/cohort"));
        assert_eq!(c.out_dir, PathBuf::from("/base/results"));
        assert_eq!(c.seeds, vec![4, 5]);
        assert_eq!(c.regimes, vec![Regime::Unimodal, Regime::Joint]);
        assert_eq!((c.phantom.height, c.phantom.width), (32, 48));
        assert_eq!(c.train_config(Regime::Unimodal, 4).unwrap().epochs, 7);
        let j = c.train_config(Regime::Joint, 5).unwrap();
        assert_eq!((j.epochs, j.lr, j.seed, j.regime), (9, 0.001, 5, Regime::Joint));
    }

    #[test]
    fn render_round_trips() {
        let text = "regimes = offline, joint\nunimodal.depth = 2\nlambda_seg = 0.5\nprecision = f32\n";
        let c = ExperimentConfig::parse(text, Path::new("/x")).unwrap();
        let again = ExperimentConfig::parse(&c.render(), Path::new("/elsewhere")).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn rejects_bad_lines() {
        for bad in [
            "epochs 3",
            "colour = red",
            "epochs = three",
            "epochs = 2\nepochs = 3",
            "seeds = ",
            "regimes = joint, joint",
            "regimes = bogus",
            "joint.colour = 1",
            "batch_size = 1",
            "slice = 60, 64",
            "phantom.faint_fraction = 2",
        ] {
            let err = ExperimentConfig::parse(bad, Path::new("/")).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad:?}: {err:?}");
        }
        let err = ExperimentConfig::parse("# header\n\nepochs = x", Path::new("/")).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
