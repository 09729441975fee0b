use super::batch::Batch;
use crate::error::Result;
use crate::nets::Network;
use crate::scalar::Scalar;
use crate::tensor::{Adam, AdamConfig, BatchNormMode, Tape, Tensor, Var};

fn scalar<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<f64> {
    Ok(tape.value(v).item()?.to_f64_lossless())
}

/// Segmentation input: T1 alone, or T1 stacked with a FLAIR-like image.
fn classifier_input<T: Scalar>(tape: &mut Tape<T>, t1: Var, second: Option<Var>) -> Result<Var> {
    match second {
        Some(s) => tape.concat_channels(t1, s),
        None => Ok(t1),
    }
}

/// Trains a classifier on fixed inputs: T1 alone, or T1 plus a frozen
/// synthetic FLAIR.
#[derive(Debug, Clone)]
pub struct ClassifierTrainer<T> {
    pub classifier: Network<T>,
    optimizer: Adam<T>,
}

impl<T: Scalar> ClassifierTrainer<T> {
    pub fn new(classifier: Network<T>, lr: T) -> Self {
        let optimizer = Adam::new(AdamConfig::with_lr(lr), classifier.params());
        Self { classifier, optimizer }
    }

    /// One BCE step; `second` is the precomputed second channel, if any.
    pub fn step(&mut self, batch: &Batch<T>, second: Option<&Tensor<T>>) -> Result<f64> {
        let mut tape = Tape::new();
        let xa = tape.constant(batch.t1.clone());
        let xs = second.map(|s| tape.constant(s.clone()));
        let input = classifier_input(&mut tape, xa, xs)?;
        let cv = self.classifier.bind(&mut tape, true);
        let p = self.classifier.forward_with(&mut tape, input, &cv, BatchNormMode::Train)?;
        let loss = tape.bce_loss(p, &batch.label)?;
        tape.backward(loss)?;
        self.classifier.collect_grads(&tape, &cv);
        self.optimizer.step(self.classifier.params_mut())?;
        scalar(&tape, loss)
    }
}

/// Trains a generator on the pure L2 synthesis loss.
#[derive(Debug, Clone)]
pub struct SynthesisTrainer<T> {
    pub generator: Network<T>,
    optimizer: Adam<T>,
}

impl<T: Scalar> SynthesisTrainer<T> {
    pub fn new(generator: Network<T>, lr: T) -> Self {
        let optimizer = Adam::new(AdamConfig::with_lr(lr), generator.params());
        Self { generator, optimizer }
    }

    pub fn step(&mut self, batch: &Batch<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let xa = tape.constant(batch.t1.clone());
        let xb = tape.constant(batch.flair.clone());
        let gv = self.generator.bind(&mut tape, true);
        let synth = self.generator.forward_with(&mut tape, xa, &gv, BatchNormMode::Train)?;
        let loss = tape.l2_loss(synth, xb)?;
        tape.backward(loss)?;
        self.generator.collect_grads(&tape, &gv);
        self.optimizer.step(self.generator.params_mut())?;
        scalar(&tape, loss)
    }
}

/// Losses of one generator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorLosses {
    pub l2: f64,
    pub seg: f64,
}

/// Alternating optimization of a generator and a two-channel classifier.
///
/// Each batch takes a classifier step with the generator held fixed, then
/// a generator step on `l2 + lambda * bce` with the classifier held fixed
/// and the BCE gradient flowing back through the classifier into the
/// generator.
#[derive(Debug, Clone)]
pub struct JointTrainer<T> {
    pub generator: Network<T>,
    pub classifier: Network<T>,
    pub lambda: T,
    opt_g: Adam<T>,
    opt_c: Adam<T>,
}

impl<T: Scalar> JointTrainer<T> {
    pub fn new(generator: Network<T>, classifier: Network<T>, lr: T, lambda: T) -> Self {
        let opt_g = Adam::new(AdamConfig::with_lr(lr), generator.params());
        let opt_c = Adam::new(AdamConfig::with_lr(lr), classifier.params());
        Self {
            generator,
            classifier,
            lambda,
            opt_g,
            opt_c,
        }
    }

    /// Classifier step. The generator runs on batch statistics with
    /// untracked parameters, so neither its weights nor its running
    /// statistics change.
    pub fn classifier_step(&mut self, batch: &Batch<T>) -> Result<f64> {
        let g_before = self.generator.state_hash();
        let mut tape = Tape::new();
        let xa = tape.constant(batch.t1.clone());
        let gv = self.generator.bind(&mut tape, false);
        let synth = self.generator.forward_frozen(&mut tape, xa, &gv, BatchNormMode::BatchStats)?;
        let input = classifier_input(&mut tape, xa, Some(synth))?;
        let cv = self.classifier.bind(&mut tape, true);
        let p = self.classifier.forward_with(&mut tape, input, &cv, BatchNormMode::Train)?;
        let loss = tape.bce_loss(p, &batch.label)?;
        tape.backward(loss)?;
        self.classifier.collect_grads(&tape, &cv);
        self.opt_c.step(self.classifier.params_mut())?;
        assert_eq!(g_before, self.generator.state_hash(), "classifier step modified the generator");
        scalar(&tape, loss)
    }

    /// Builds `l2 + lambda * bce` on `tape` with tracked generator
    /// parameters and returns `(loss, l2, bce, bound generator params)`.
    fn generator_objective(
        &mut self,
        tape: &mut Tape<T>,
        batch: &Batch<T>,
        lambda: T,
        update_stats: bool,
    ) -> Result<(Var, Var, Var, Vec<Var>)> {
        let xa = tape.constant(batch.t1.clone());
        let xb = tape.constant(batch.flair.clone());
        let gv = self.generator.bind(tape, true);
        let synth = if update_stats {
            self.generator.forward_with(tape, xa, &gv, BatchNormMode::Train)?
        } else {
            self.generator.forward_frozen(tape, xa, &gv, BatchNormMode::BatchStats)?
        };
        // Must precede the classifier nodes: with lambda = 0 the generator
        // then follows the pure-L2 trajectory bit for bit.
        let l2 = tape.l2_loss(synth, xb)?;
        let input = classifier_input(tape, xa, Some(synth))?;
        let cv = self.classifier.bind(tape, false);
        let p = self.classifier.forward_frozen(tape, input, &cv, BatchNormMode::BatchStats)?;
        let bce = tape.bce_loss(p, &batch.label)?;
        let seg = tape.scale(bce, lambda)?;
        let loss = tape.add(l2, seg)?;
        Ok((loss, l2, bce, gv))
    }

    /// Generator step; the classifier is read-only.
    pub fn generator_step(&mut self, batch: &Batch<T>) -> Result<GeneratorLosses> {
        let c_before = self.classifier.state_hash();
        let mut tape = Tape::new();
        let (loss, l2, bce, gv) = self.generator_objective(&mut tape, batch, self.lambda, true)?;
        tape.backward(loss)?;
        self.generator.collect_grads(&tape, &gv);
        self.opt_g.step(self.generator.params_mut())?;
        assert_eq!(c_before, self.classifier.state_hash(), "generator step modified the classifier");
        Ok(GeneratorLosses {
            l2: scalar(&tape, l2)?,
            seg: scalar(&tape, bce)?,
        })
    }

    /// Gradient of the generator objective with weight `lambda`, without
    /// updating anything.
    pub fn generator_gradient(&mut self, batch: &Batch<T>, lambda: T) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let (loss, _, _, gv) = self.generator_objective(&mut tape, batch, lambda, false)?;
        tape.backward(loss)?;
        Ok(gv
            .iter()
            .zip(self.generator.params())
            .map(|(v, p)| tape.grad(*v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); p.numel()]))
            .collect())
    }

    pub fn step(&mut self, batch: &Batch<T>) -> Result<(f64, GeneratorLosses)> {
        let l_c = self.classifier_step(batch)?;
        let l_g = self.generator_step(batch)?;
        Ok((l_c, l_g))
    }
}
