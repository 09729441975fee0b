//! The three training regimes, slice batching and volume-level inference.
//!
//! * unimodal: a one-channel classifier on T1 alone.
//! * offline: a generator trained on L2 only, then frozen while a
//!   two-channel classifier trains on T1 plus the synthetic FLAIR.
//! * joint: generator and classifier updated in turn on every batch, with
//!   the segmentation loss reaching the generator through the classifier.
//!
//! Every run is a pure function of its subjects, fold plan and config.

mod batch;
mod infer;
mod steps;

pub use batch::{epoch_batches, prepare_volume, Batch, SliceSet};
pub use infer::{predict, probabilities, synthesize, threshold, DEFAULT_THRESHOLD};
pub use steps::{ClassifierTrainer, GeneratorLosses, JointTrainer, SynthesisTrainer};

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{FoldPlan, Subject};
use crate::error::{Error, Result};
use crate::metrics::{confusion, dice};
use crate::nets::{build_classifier, build_generator, NetMode, Network, UNetConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Unimodal,
    Offline,
    Joint,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Unimodal, Regime::Offline, Regime::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Unimodal => "unimodal",
            Regime::Offline => "offline",
            Regime::Joint => "joint",
        }
    }

    pub fn has_generator(self) -> bool {
        self != Regime::Unimodal
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unimodal" => Ok(Regime::Unimodal),
            "offline" => Ok(Regime::Offline),
            "joint" => Ok(Regime::Joint),
            other => Err(Error::Config(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the segmentation term in the generator objective.
    pub lambda_seg: f64,
    pub seed: u64,
    pub slice: (usize, usize),
    pub depth: usize,
    pub base_filters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Joint,
            epochs: 20,
            batch_size: 4,
            lr: 2e-4,
            lambda_seg: 1.0,
            seed: 0,
            slice: (64, 64),
            depth: 3,
            base_filters: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} is below 2", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.lambda_seg >= 0.0 && self.lambda_seg.is_finite()) {
            return bad(format!("lambda_seg {} must be nonnegative", self.lambda_seg));
        }
        self.classifier_config(1).validate()?;
        let div = self.classifier_config(1).spatial_divisor();
        for size in [self.slice.0, self.slice.1] {
            if size == 0 || size % div != 0 {
                return Err(Error::Indivisible {
                    op: "train config",
                    size,
                    divisor: div,
                });
            }
        }
        Ok(())
    }

    pub fn classifier_config(&self, in_channels: usize) -> UNetConfig {
        UNetConfig::classifier(in_channels, self.depth, self.base_filters)
    }

    pub fn generator_config(&self) -> UNetConfig {
        UNetConfig::generator(self.depth, self.base_filters)
    }
}

/// Independent seeds for generator init, classifier init and the batch
/// schedule, all derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub generator: u64,
    pub classifier: u64,
    pub schedule: u64,
}

impl RunSeeds {
    pub fn derive(seed: u64) -> Self {
        let pick = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng.next_u64()
        };
        Self {
            generator: pick(1),
            classifier: pick(2),
            schedule: pick(3),
        }
    }

    pub fn schedule_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.schedule)
    }
}

/// One row of a loss curve; fields a regime does not produce are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_c: Option<f64>,
    pub l_g_l2: Option<f64>,
    pub l_g_seg: Option<f64>,
    pub val_dice: Option<f64>,
    /// Generator L2 on validation slices; not part of the curve file.
    pub val_l2: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainResult<T> {
    pub regime: Regime,
    pub classifier: Network<T>,
    pub generator: Option<Network<T>>,
    pub curves: Vec<EpochLog>,
    /// 1-based epoch whose classifier was kept.
    pub selected_epoch: usize,
    /// 1-based epoch whose generator was kept, when it differs from the
    /// classifier's (offline stage 1).
    pub generator_epoch: Option<usize>,
    pub seed: u64,
}

/// `epoch,l_c,l_g_l2,l_g_seg,val_dice`, empty fields for absent values.
pub fn render_curves(curves: &[EpochLog]) -> String {
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,l_c,l_g_l2,l_g_seg,val_dice\n");
    for c in curves {
        let _ = writeln!(out, "{},{},{},{},{}", c.epoch, f(c.l_c), f(c.l_g_l2), f(c.l_g_seg), f(c.val_dice));
    }
    out
}

fn select<'a, T>(subjects: &'a [Subject<T>], ids: &[String]) -> Result<Vec<&'a Subject<T>>> {
    let by_id: HashMap<&str, &Subject<T>> = subjects.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::invalid("train", format!("fold plan names unknown subject {id}")))
        })
        .collect()
}

struct FoldData<T> {
    train: SliceSet<T>,
    val: SliceSet<T>,
}

fn fold_data<T: Scalar>(subjects: &[Subject<T>], fold: &FoldPlan, config: &TrainConfig) -> Result<FoldData<T>> {
    config.validate()?;
    fold.check_disjoint()?;
    let train = select(subjects, &fold.train)?;
    if train.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    let train = SliceSet::from_subjects(&train, config.slice)?;
    if train.len() < 2 {
        return Err(Error::invalid("train", "fewer than two training slices"));
    }
    let val = SliceSet::from_subjects(&select(subjects, &fold.val)?, config.slice)?;
    Ok(FoldData { train, val })
}

/// Mean of per-subject Dice scores of thresholded classifier outputs on
/// preprocessed slices. `None` without validation subjects.
fn validation_dice<T: Scalar>(
    classifier: &Network<T>,
    generator: Option<&Network<T>>,
    val: &SliceSet<T>,
) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for (_, range) in &val.subjects {
        let b = val.range_batch(range.clone());
        let input = match generator {
            Some(g) => stack_channels(&b.t1, &g.infer(&b.t1)?),
            None => b.t1.clone(),
        };
        let probs = classifier.infer(&input)?;
        let pred = threshold(probs.data(), DEFAULT_THRESHOLD);
        total += dice(&confusion(&pred, b.label.data())?);
    }
    Ok(Some(total / val.subjects.len() as f64))
}

fn validation_l2<T: Scalar>(generator: &Network<T>, val: &SliceSet<T>) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let b = val.range_batch(0..val.len());
    let synth = generator.infer(&b.t1)?;
    let n = synth.numel() as f64;
    let sse: f64 = synth
        .data()
        .iter()
        .zip(b.flair.data())
        .map(|(a, b)| {
            let d = a.to_f64_lossless() - b.to_f64_lossless();
            d * d
        })
        .sum();
    Ok(Some(sse / n))
}

/// Concatenates two `N x 1 x H x W` tensors along channels.
pub fn stack_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, _, h, w] = a.dims4().expect("4-d input");
    let plane = h * w;
    let mut data = Vec::with_capacity(2 * n * plane);
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * plane..(i + 1) * plane]);
        data.extend_from_slice(&b.data()[i * plane..(i + 1) * plane]);
    }
    Tensor::new(&[n, 2, h, w], data).expect("sized from inputs")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn eval_copy<T: Scalar>(net: &Network<T>) -> Network<T> {
    let mut n = net.clone();
    n.set_mode(NetMode::Eval);
    n.zero_grads();
    n
}

/// Keeps the first epoch with a strictly better score.
fn improves(score: Option<f64>, best: Option<f64>, higher_is_better: bool) -> bool {
    match (score, best) {
        (Some(s), Some(b)) => {
            if higher_is_better {
                s > b
            } else {
                s < b
            }
        }
        (Some(_), None) => true,
        // without validation data the last epoch is kept
        (None, _) => true,
    }
}

pub fn train_unimodal<T: Scalar>(subjects: &[Subject<T>], fold: &FoldPlan, config: &TrainConfig) -> Result<TrainResult<T>> {
    let data = fold_data(subjects, fold, config)?;
    let seeds = RunSeeds::derive(config.seed);
    let net = build_classifier(config.classifier_config(1), seeds.classifier)?;
    let mut trainer = ClassifierTrainer::new(net, T::from_f64_lossy(config.lr));
    let mut rng = seeds.schedule_rng();
    let mut curves = Vec::new();
    let mut best: (Option<f64>, usize, Option<Network<T>>) = (None, 0, None);
    for epoch in 1..=config.epochs {
        let mut losses = Vec::new();
        for idx in epoch_batches(data.train.len(), config.batch_size, &mut rng)? {
            losses.push(trainer.step(&data.train.batch(&idx), None)?);
        }
        let val_dice = validation_dice(&trainer.classifier, None, &data.val)?;
        curves.push(EpochLog {
            epoch,
            l_c: Some(mean(&losses)),
            l_g_l2: None,
            l_g_seg: None,
            val_dice,
            val_l2: None,
        });
        if improves(val_dice, best.0, true) {
            best = (val_dice, epoch, Some(eval_copy(&trainer.classifier)));
        }
    }
    Ok(TrainResult {
        regime: Regime::Unimodal,
        classifier: best.2.expect("at least one epoch"),
        generator: None,
        curves,
        selected_epoch: best.1,
        generator_epoch: None,
        seed: config.seed,
    })
}

/// Stage 1 of the offline regime: generator on pure L2 for
/// `config.epochs` epochs. Returns the trainer after the last epoch and
/// the per-epoch `(train L2, validation L2)`.
pub fn train_synthesis_stage<T: Scalar>(
    train: &SliceSet<T>,
    val: &SliceSet<T>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &SynthesisTrainer<T>, f64, Option<f64>),
) -> Result<SynthesisTrainer<T>> {
    let seeds = RunSeeds::derive(config.seed);
    let g = build_generator(config.generator_config(), seeds.generator)?;
    let mut trainer = SynthesisTrainer::new(g, T::from_f64_lossy(config.lr));
    let mut rng = seeds.schedule_rng();
    for epoch in 1..=config.epochs {
        let mut losses = Vec::new();
        for idx in epoch_batches(train.len(), config.batch_size, &mut rng)? {
            losses.push(trainer.step(&train.batch(&idx))?);
        }
        let val_l2 = validation_l2(&trainer.generator, val)?;
        on_epoch(epoch, &trainer, mean(&losses), val_l2);
    }
    Ok(trainer)
}

pub fn train_offline<T: Scalar>(subjects: &[Subject<T>], fold: &FoldPlan, config: &TrainConfig) -> Result<TrainResult<T>> {
    let data = fold_data(subjects, fold, config)?;
    let seeds = RunSeeds::derive(config.seed);

    let mut stage1: Vec<(f64, Option<f64>)> = Vec::new();
    let mut best_g: (Option<f64>, usize, Option<Network<T>>) = (None, 0, None);
    train_synthesis_stage(&data.train, &data.val, config, |epoch, t, l2, val_l2| {
        stage1.push((l2, val_l2));
        if improves(val_l2, best_g.0, false) {
            best_g = (val_l2, epoch, Some(eval_copy(&t.generator)));
        }
    })?;
    let generator = best_g.2.expect("at least one epoch");
    let frozen_hash = generator.param_hash();

    // the generator is frozen from here on, so its outputs are fixed inputs
    let all = data.train.range_batch(0..data.train.len());
    let synth = generator.infer(&all.t1)?;
    let plane = data.train.height * data.train.width;

    let c = build_classifier(config.classifier_config(2), seeds.classifier)?;
    let mut trainer = ClassifierTrainer::new(c, T::from_f64_lossy(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.schedule);
    rng.set_stream(1);
    let mut curves = Vec::new();
    let mut best_c: (Option<f64>, usize, Option<Network<T>>) = (None, 0, None);
    for epoch in 1..=config.epochs {
        let mut losses = Vec::new();
        for idx in epoch_batches(data.train.len(), config.batch_size, &mut rng)? {
            let batch = data.train.batch(&idx);
            let mut s = Vec::with_capacity(idx.len() * plane);
            for &i in &idx {
                s.extend_from_slice(&synth.data()[i * plane..(i + 1) * plane]);
            }
            let second = Tensor::new(batch.t1.shape(), s)?;
            losses.push(trainer.step(&batch, Some(&second))?);
        }
        let val_dice = validation_dice(&trainer.classifier, Some(&generator), &data.val)?;
        curves.push(EpochLog {
            epoch,
            l_c: Some(mean(&losses)),
            l_g_l2: Some(stage1[epoch - 1].0),
            l_g_seg: None,
            val_dice,
            val_l2: stage1[epoch - 1].1,
        });
        if improves(val_dice, best_c.0, true) {
            best_c = (val_dice, epoch, Some(eval_copy(&trainer.classifier)));
        }
    }
    assert_eq!(frozen_hash, generator.param_hash(), "generator changed while frozen");
    Ok(TrainResult {
        regime: Regime::Offline,
        classifier: best_c.2.expect("at least one epoch"),
        generator: Some(generator),
        curves,
        selected_epoch: best_c.1,
        generator_epoch: Some(best_g.1),
        seed: config.seed,
    })
}

/// Builds the joint trainer exactly as [`train_joint`] does.
pub fn joint_trainer<T: Scalar>(config: &TrainConfig) -> Result<JointTrainer<T>> {
    let seeds = RunSeeds::derive(config.seed);
    let g = build_generator(config.generator_config(), seeds.generator)?;
    let c = build_classifier(config.classifier_config(2), seeds.classifier)?;
    Ok(JointTrainer::new(
        g,
        c,
        T::from_f64_lossy(config.lr),
        T::from_f64_lossy(config.lambda_seg),
    ))
}

pub fn train_joint<T: Scalar>(subjects: &[Subject<T>], fold: &FoldPlan, config: &TrainConfig) -> Result<TrainResult<T>> {
    let data = fold_data(subjects, fold, config)?;
    let mut trainer = joint_trainer::<T>(config)?;
    let mut rng = RunSeeds::derive(config.seed).schedule_rng();
    let mut curves = Vec::new();
    let mut best: (Option<f64>, usize, Option<(Network<T>, Network<T>)>) = (None, 0, None);
    for epoch in 1..=config.epochs {
        let (mut lc, mut l2, mut seg) = (Vec::new(), Vec::new(), Vec::new());
        for idx in epoch_batches(data.train.len(), config.batch_size, &mut rng)? {
            let (c, g) = trainer.step(&data.train.batch(&idx))?;
            lc.push(c);
            l2.push(g.l2);
            seg.push(g.seg);
        }
        let g_eval = eval_copy(&trainer.generator);
        let val_dice = validation_dice(&trainer.classifier, Some(&g_eval), &data.val)?;
        curves.push(EpochLog {
            epoch,
            l_c: Some(mean(&lc)),
            l_g_l2: Some(mean(&l2)),
            l_g_seg: Some(mean(&seg)),
            val_dice,
            val_l2: validation_l2(&g_eval, &data.val)?,
        });
        if improves(val_dice, best.0, true) {
            best = (val_dice, epoch, Some((eval_copy(&trainer.classifier), g_eval)));
        }
    }
    let (classifier, generator) = best.2.expect("at least one epoch");
    Ok(TrainResult {
        regime: Regime::Joint,
        classifier,
        generator: Some(generator),
        curves,
        selected_epoch: best.1,
        generator_epoch: None,
        seed: config.seed,
    })
}

pub fn train<T: Scalar>(subjects: &[Subject<T>], fold: &FoldPlan, config: &TrainConfig) -> Result<TrainResult<T>> {
    match config.regime {
        Regime::Unimodal => train_unimodal(subjects, fold, config),
        Regime::Offline => train_offline(subjects, fold, config),
        Regime::Joint => train_joint(subjects, fold, config),
    }
}
