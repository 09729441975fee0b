//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates the forward pass on an untracked
//! tape, so it shares no code with the backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nets::{build_classifier, build_generator, UNetConfig};
use crate::tensor::{BatchNormMode, RunningStats, Tape, Tensor, Var};

/// Perturbation used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of comparing analytic and numeric gradients for one case.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probed coordinates left out because a `+-FD_STEP` perturbation
    /// moved some leaky ReLU or max pool onto another linear piece; the
    /// function is not differentiable across that step.
    pub kinks: usize,
}

/// `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|)`, i.e. the worst
/// elementwise discrepancy relative to the gradient's overall scale.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        worst
    } else {
        worst / scale.max(1e-300)
    }
}

/// Compares `d loss / d inputs` from the tape against central differences.
///
/// `loss` builds a scalar from the given input handles. At most
/// `max_coords` coordinates per input are probed (chosen with `seed`);
/// pass `usize::MAX` to probe all of them. Coordinates whose perturbation
/// crosses a kink are counted in [`GradCheck::kinks`] instead of compared.
pub fn check<F>(loss: F, inputs: &[Tensor<f64>], max_coords: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_region_log();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = loss(&mut tape, &vars)?;
    let region = tape.region();
    tape.backward(out)?;

    let eval = |values: &[Tensor<f64>]| -> Result<(f64, Option<u64>)> {
        let mut t = Tape::with_region_log();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let out = loss(&mut t, &vs)?;
        Ok((t.value(out).item()?, t.region()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut kinks = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let n = inputs[k].numel();
        let grad = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.random_range(0..n)).collect()
        };
        for i in coords {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let (plus, rp) = eval(&work)?;
            work[k].data_mut()[i] = orig - FD_STEP;
            let (minus, rm) = eval(&work)?;
            work[k].data_mut()[i] = orig;
            if rp != region || rm != region {
                kinks += 1;
                continue;
            }
            analytic.push(grad[i]);
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    Ok(GradCheck {
        max_rel_error: relative_error(&analytic, &numeric),
        checked: analytic.len(),
        kinks,
    })
}

/// Uniform random tensor in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Error bound every case of [`run_suite`] must meet.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// One op checked at one shape and seed.
#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub op: &'static str,
    pub shape: String,
    pub seed: u64,
    pub result: GradCheck,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.result.max_rel_error < SUITE_TOLERANCE
    }
}

/// Projects an op output onto fixed random weights so the op can be
/// checked as a scalar function.
fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    tape.weighted_sum(out, weights)
}

fn fmt_shape(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values per pooling window, so the argmax is stable under the
/// finite-difference step.
fn distinct(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| perm[i] as f64 / n as f64 - 0.5)
}

const SHAPES: [[usize; 4]; 3] = [[2, 3, 4, 4], [1, 2, 6, 8], [3, 1, 8, 6]];

/// Every differentiable op on three shapes, then the generator to
/// classifier composite, for each seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<SuiteCase>> {
    let mut cases = Vec::new();
    for &seed in seeds {
        for (k, &shape) in SHAPES.iter().enumerate() {
            cases.extend(op_cases(shape, seed, k)?);
        }
        cases.push(composite_case(seed)?);
    }
    Ok(cases)
}

fn op_cases(shape: [usize; 4], seed: u64, variant: usize) -> Result<Vec<SuiteCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(variant as u64);
    let [n, c, h, w] = shape;
    let mut cases = Vec::new();
    let mut push = |op: &'static str, dims: &[usize], result: GradCheck| {
        cases.push(SuiteCase {
            op,
            shape: fmt_shape(dims),
            seed,
            result,
        })
    };

    // stride 2 needs (size + 2 - 3) even, i.e. odd sizes
    let stride = if variant == 2 { 2 } else { 1 };
    let conv_in: [usize; 4] = if stride == 2 { [n, c, h + 1, w + 1] } else { shape };
    let cout = 2 + variant;
    let inputs = [
        random_tensor(&conv_in, &mut rng),
        random_tensor(&[cout, c, 3, 3], &mut rng),
        random_tensor(&[cout], &mut rng),
    ];
    let ho = (conv_in[2] - 1) / stride + 1;
    let wo = (conv_in[3] - 1) / stride + 1;
    let proj = random_tensor(&[n, cout, ho, wo], &mut rng);
    let r = check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, stride)?;
            project(t, y, &proj)
        },
        &inputs,
        usize::MAX,
        seed,
    )?;
    push("conv2d", &conv_in, r);

    let x = distinct(&shape, &mut rng);
    let proj = random_tensor(&[n, c, h / 2, w / 2], &mut rng);
    let r = check(
        |t, v| {
            let y = t.max_pool2d(v[0], 2)?;
            project(t, y, &proj)
        },
        &[x],
        usize::MAX,
        seed,
    )?;
    push("max_pool2d", &shape, r);

    let x = random_tensor(&shape, &mut rng);
    let proj = random_tensor(&[n, c, 2 * h, 2 * w], &mut rng);
    let r = check(
        |t, v| {
            let y = t.upsample_nearest2(v[0])?;
            project(t, y, &proj)
        },
        &[x],
        usize::MAX,
        seed,
    )?;
    push("upsample_nearest2", &shape, r);

    let other = [n, 1 + variant, h, w];
    let inputs = [random_tensor(&shape, &mut rng), random_tensor(&other, &mut rng)];
    let proj = random_tensor(&[n, c + other[1], h, w], &mut rng);
    let r = check(
        |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            project(t, y, &proj)
        },
        &inputs,
        usize::MAX,
        seed,
    )?;
    push("concat_channels", &shape, r);

    // batch statistics need two samples
    let bn_shape = [n.max(2), c, h, w];
    let stats = RunningStats {
        mean: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
        var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
    };
    for (op, mode) in [
        ("batch_norm2d[batch]", BatchNormMode::BatchStats),
        ("batch_norm2d[eval]", BatchNormMode::Eval),
    ] {
        let inputs = [
            random_tensor(&bn_shape, &mut rng),
            random_tensor(&[c], &mut rng),
            random_tensor(&[c], &mut rng),
        ];
        let proj = random_tensor(&bn_shape, &mut rng);
        let r = check(
            |t, v| {
                let mut s = stats.clone();
                let y = t.batch_norm2d(v[0], v[1], v[2], &mut s, mode)?;
                project(t, y, &proj)
            },
            &inputs,
            usize::MAX,
            seed,
        )?;
        push(op, &bn_shape, r);
    }

    let x = away_from_zero(&shape, &mut rng);
    let proj = random_tensor(&shape, &mut rng);
    let r = check(
        |t, v| {
            let y = t.leaky_relu(v[0], 0.2)?;
            project(t, y, &proj)
        },
        &[x],
        usize::MAX,
        seed,
    )?;
    push("leaky_relu", &shape, r);

    let x = Tensor::from_fn(&shape, |_| rng.random_range(-4.0..4.0));
    let proj = random_tensor(&shape, &mut rng);
    let r = check(
        |t, v| {
            let y = t.sigmoid(v[0])?;
            project(t, y, &proj)
        },
        &[x],
        usize::MAX,
        seed,
    )?;
    push("sigmoid", &shape, r);

    let probs = Tensor::from_fn(&shape, |_| rng.random_range(0.05..0.95));
    let target = Tensor::from_fn(&shape, |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    let r = check(|t, v| t.bce_loss(v[0], &target), &[probs], usize::MAX, seed)?;
    push("bce_loss", &shape, r);

    let inputs = [random_tensor(&shape, &mut rng), random_tensor(&shape, &mut rng)];
    let r = check(|t, v| t.l2_loss(v[0], v[1]), &inputs, usize::MAX, seed)?;
    push("l2_loss", &shape, r);

    let x = random_tensor(&shape, &mut rng);
    let r = check(
        |t, v| {
            let sq = t.l2_loss(v[0], v[0])?;
            let s = t.sum(v[0])?;
            t.add(sq, s)
        },
        &[x],
        usize::MAX,
        seed,
    )?;
    push("sum", &shape, r);

    let x = random_tensor(&shape, &mut rng);
    let weights = random_tensor(&shape, &mut rng);
    let r = check(|t, v| t.weighted_sum(v[0], &weights), &[x], usize::MAX, seed)?;
    push("weighted_sum", &shape, r);

    let inputs = [random_tensor(&shape, &mut rng), random_tensor(&shape, &mut rng)];
    let proj = random_tensor(&shape, &mut rng);
    let factor = rng.random_range(-2.0..2.0);
    let r = check(
        |t, v| {
            let s = t.scale(v[1], factor)?;
            let y = t.add(v[0], s)?;
            project(t, y, &proj)
        },
        &inputs,
        usize::MAX,
        seed,
    )?;
    push("add+scale", &shape, r);

    Ok(cases)
}

/// Checks the generator objective `l2(G(x), y) + bce(C(x, G(x)), label)`
/// with respect to every generator parameter, on a depth-2 pair at
/// 16x16. Both networks use batch statistics, as during training.
pub fn composite_case(seed: u64) -> Result<SuiteCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(99);
    let g = build_generator::<f64>(UNetConfig::generator(2, 2), seed)?;
    let c = build_classifier::<f64>(UNetConfig::classifier(2, 2, 2), seed.wrapping_add(1000))?;
    let shape = [2, 1, 16, 16];
    let t1 = random_tensor(&shape, &mut rng);
    let flair = random_tensor(&shape, &mut rng);
    let label = Tensor::from_fn(&shape, |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    let result = check(
        |tape, v| {
            let xa = tape.constant(t1.clone());
            let xb = tape.constant(flair.clone());
            let synth = g.forward_frozen(tape, xa, v, BatchNormMode::BatchStats)?;
            let l2 = tape.l2_loss(synth, xb)?;
            let input = tape.concat_channels(xa, synth)?;
            let cv = c.bind(tape, false);
            let p = c.forward_frozen(tape, input, &cv, BatchNormMode::BatchStats)?;
            let bce = tape.bce_loss(p, &label)?;
            tape.add(l2, bce)
        },
        g.params(),
        24,
        seed,
    )?;
    Ok(SuiteCase {
        op: "generator->classifier",
        shape: fmt_shape(&shape),
        seed,
        result,
    })
}
