use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, ConvGeometry};
use super::Tensor;

/// Variance floor added before the square root in batch normalization.
pub const BN_EPS: f64 = 1e-7;
/// Weight of the newest batch in the running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.1;
/// Predictions are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left untouched.
    BatchStats,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Sigmoid {
        input: Var,
    },
    Bce {
        pred: Var,
        target: Vec<T>,
    },
    L2 {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of executed operations.
///
/// A node is tracked when any of its inputs is tracked; untracked nodes
/// keep no backward state, so a tape whose leaves are all constants acts
/// as a plain forward evaluator.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    /// Running hash of the piecewise-linear branch taken by every
    /// leaky ReLU and max pool; `None` unless requested.
    region: Option<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            region: None,
        }
    }

    /// A tape that also records which linear piece each leaky ReLU and
    /// max pool selected. Two evaluations with equal [`Tape::region`] lie
    /// in the same differentiable region.
    pub fn with_region_log() -> Self {
        Self {
            nodes: Vec::new(),
            region: Some(FNV_OFFSET),
        }
    }

    pub fn region(&self) -> Option<u64> {
        self.region
    }

    fn log_region(&mut self, branches: impl Iterator<Item = u64>) {
        if let Some(h) = &mut self.region {
            for b in branches {
                *h = (*h ^ b).wrapping_mul(FNV_PRIME);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, tracked: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: value.with_requires_grad(tracked),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.is_tracked(*v))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize, stride: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, cin, h, w] = self.value(input).dims4()?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: OP,
                dim: "input channels",
                expected: wcin,
                actual: cin,
            });
        }
        if self.value(bias).numel() != cout {
            return Err(Error::ShapeMismatch {
                op: OP,
                dim: "bias length",
                expected: cout,
                actual: self.value(bias).numel(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(OP, format!("kernel {kh}x{kw} must have odd sides")));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be at least 1"));
        }
        let out_size = |size: usize, k: usize, dim: &'static str| -> Result<usize> {
            let span = size + 2 * padding;
            if span < k || !(span - k).is_multiple_of(stride) {
                return Err(Error::invalid(
                    OP,
                    format!("{dim}: ({size} + 2*{padding} - {k}) is not a non-negative multiple of stride {stride}"),
                ));
            }
            Ok((span - k) / stride + 1)
        };
        let ho = out_size(h, kh, "height")?;
        let wo = out_size(w, kw, "width")?;
        let geom = ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            padding,
            stride,
            ho,
            wo,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let tracked = self.tracked_any(&[input, weight, bias]);
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        self.push(
            OP,
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            tracked,
        )
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        const OP: &str = "max_pool2d";
        let dims = self.value(input).dims4()?;
        let [n, c, h, w] = dims;
        if window == 0 {
            return Err(Error::invalid(OP, "window must be at least 1"));
        }
        for size in [h, w] {
            if size % window != 0 {
                return Err(Error::Indivisible {
                    op: OP,
                    size,
                    divisor: window,
                });
            }
        }
        let (out, argmax) = kernels::max_pool_forward(dims, window, self.value(input).data());
        self.log_region(argmax.iter().map(|&i| i as u64));
        let value = Tensor::new(&[n, c, h / window, w / window], out)?;
        let tracked = self.is_tracked(input);
        self.push(OP, value, Op::MaxPool { input, argmax }, tracked)
    }

    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let [n, c, h, w] = dims;
        let out = kernels::upsample2_forward(dims, self.value(input).data());
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        let tracked = self.is_tracked(input);
        self.push("upsample_nearest2", value, Op::Upsample { input }, tracked)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        for (dim, expected, actual) in [("batch", n, nb), ("height", h, hb), ("width", w, wb)] {
            if expected != actual {
                return Err(Error::ShapeMismatch {
                    op: OP,
                    dim,
                    expected,
                    actual,
                });
            }
        }
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (pa + pb));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for s in 0..n {
            out.extend_from_slice(&da[s * pa..(s + 1) * pa]);
            out.extend_from_slice(&db[s * pb..(s + 1) * pb]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out)?;
        let tracked = self.tracked_any(&[a, b]);
        self.push(OP, value, Op::Concat { a, b }, tracked)
    }

    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BatchNormMode,
    ) -> Result<Var> {
        const OP: &str = "batch_norm2d";
        let [n, c, h, w] = self.value(input).dims4()?;
        for (dim, v) in [("gamma length", gamma), ("beta length", beta)] {
            if self.value(v).numel() != c {
                return Err(Error::ShapeMismatch {
                    op: OP,
                    dim,
                    expected: c,
                    actual: self.value(v).numel(),
                });
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::ShapeMismatch {
                op: OP,
                dim: "running statistics length",
                expected: c,
                actual: stats.mean.len(),
            });
        }
        let batch_stats = mode != BatchNormMode::Eval;
        if batch_stats && n < 2 {
            return Err(Error::invalid(OP, "batch size must be at least 2 in train mode"));
        }
        let hw = h * w;
        let count = n * hw;
        let eps = T::lit(BN_EPS);
        let x = self.value(input).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); x.len()];
        for ch in 0..c {
            let plane = |s: usize| (s * c + ch) * hw..(s * c + ch + 1) * hw;
            let (mean, var) = if batch_stats {
                let m = T::from_usize(count).unwrap();
                let mean = (0..n).map(|s| x[plane(s)].iter().copied().sum::<T>()).sum::<T>() / m;
                let var = (0..n)
                    .map(|s| x[plane(s)].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>())
                    .sum::<T>()
                    / m;
                if mode == BatchNormMode::Train {
                    let mom = T::lit(BN_MOMENTUM);
                    let unbiased = if count > 1 {
                        var * m / (m - T::one())
                    } else {
                        var
                    };
                    stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean;
                    stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * unbiased;
                }
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for s in 0..n {
                for i in plane(s) {
                    let xh = (x[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let tracked = self.tracked_any(&[input, gamma, beta]);
        self.push(
            OP,
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            tracked,
        )
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Result<Var> {
        const OP: &str = "leaky_relu";
        if !(slope > T::zero() && slope < T::one()) {
            return Err(Error::invalid(OP, format!("slope {slope} outside (0, 1)")));
        }
        let src = self.value(input);
        let data = src
            .data()
            .iter()
            .map(|&v| if v >= T::zero() { v } else { slope * v })
            .collect();
        let value = Tensor::new(src.shape(), data)?;
        if self.region.is_some() {
            let signs: Vec<u64> = self.value(input).data().iter().map(|&v| u64::from(v >= T::zero())).collect();
            self.log_region(signs.into_iter());
        }
        let tracked = self.is_tracked(input);
        self.push(OP, value, Op::LeakyRelu { input, slope }, tracked)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let value = Tensor::new(src.shape(), data)?;
        let tracked = self.is_tracked(input);
        self.push("sigmoid", value, Op::Sigmoid { input }, tracked)
    }

    /// Mean two-sided binary cross-entropy against a `{0, 1}` target.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        const OP: &str = "bce_loss";
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::invalid(
                OP,
                format!("prediction shape {:?} != target shape {:?}", p.shape(), target.shape()),
            ));
        }
        if let Some(bad) = target.data().iter().find(|&&t| t != T::zero() && t != T::one()) {
            return Err(Error::invalid(OP, format!("target value {bad} is not 0 or 1")));
        }
        let lo = T::lit(PROB_CLAMP);
        let hi = T::one() - lo;
        let n = T::from_usize(p.numel().max(1)).unwrap();
        let total: T = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pv, &t)| {
                let q = pv.max(lo).min(hi);
                -(t * q.ln() + (T::one() - t) * (T::one() - q).ln())
            })
            .sum();
        let tracked = self.is_tracked(pred);
        self.push(
            OP,
            Tensor::scalar(total / n),
            Op::Bce {
                pred,
                target: target.data().to_vec(),
            },
            tracked,
        )
    }

    /// Mean squared difference.
    pub fn l2_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "l2_loss";
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::invalid(
                OP,
                format!("shape {:?} != shape {:?}", ta.shape(), tb.shape()),
            ));
        }
        let n = T::from_usize(ta.numel().max(1)).unwrap();
        let total: T = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let tracked = self.tracked_any(&[a, b]);
        self.push(OP, Tensor::scalar(total / n), Op::L2 { a, b }, tracked)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().copied().sum();
        let tracked = self.is_tracked(input);
        self.push("sum", Tensor::scalar(total), Op::Sum { input }, tracked)
    }

    /// `sum(input * weights)` for a constant weight tensor of equal size.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        const OP: &str = "weighted_sum";
        let src = self.value(input);
        if src.numel() != weights.numel() {
            return Err(Error::ShapeMismatch {
                op: OP,
                dim: "element count",
                expected: src.numel(),
                actual: weights.numel(),
            });
        }
        let total = src.data().iter().zip(weights.data()).map(|(&x, &w)| x * w).sum();
        let tracked = self.is_tracked(input);
        self.push(
            OP,
            Tensor::scalar(total),
            Op::WeightedSum {
                input,
                weights: weights.data().to_vec(),
            },
            tracked,
        )
    }

    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "add";
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(Error::ShapeMismatch {
                op: OP,
                dim: "element count",
                expected: ta.numel(),
                actual: tb.numel(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let tracked = self.tracked_any(&[a, b]);
        self.push(OP, value, Op::Add { a, b }, tracked)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(src.shape(), data)?;
        let tracked = self.is_tracked(input);
        self.push("scale", value, Op::Scale { input, factor }, tracked)
    }

    /// Propagates the gradient of a scalar `loss` to every tracked leaf.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                dim: "loss element count",
                expected: 1,
                actual: root.numel(),
            });
        }
        if !root.requires_grad() {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut send = |v: Var, delta: Vec<T>| {
            if !nodes[v.0].value.requires_grad() {
                return;
            }
            match adj[v.0].as_mut() {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += *d),
                None => adj[v.0] = Some(delta),
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        let tracked = |v: Var| nodes[v.0].value.requires_grad();
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads = kernels::conv2d_backward(
                    geom,
                    val(*input),
                    val(*weight),
                    g,
                    (tracked(*input), tracked(*weight), tracked(*bias)),
                );
                if let Some(d) = grads.input {
                    send(*input, d);
                }
                if let Some(d) = grads.weight {
                    send(*weight, d);
                }
                if let Some(d) = grads.bias {
                    send(*bias, d);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); val(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                send(*input, dx);
            }
            Op::Upsample { input } => {
                let dims = nodes[input.0].value.dims4().expect("recorded as 4-D");
                send(*input, kernels::upsample2_backward(dims, g));
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = nodes[a.0].value.dims4().expect("recorded as 4-D");
                let cb = nodes[b.0].value.dims4().expect("recorded as 4-D")[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                let mut ga = Vec::with_capacity(n * pa);
                let mut gb = Vec::with_capacity(n * pb);
                for s in 0..n {
                    let base = s * (pa + pb);
                    ga.extend_from_slice(&g[base..base + pa]);
                    gb.extend_from_slice(&g[base + pa..base + pa + pb]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = nodes[input.0].value.dims4().expect("recorded as 4-D");
                let hw = h * w;
                let m = T::from_usize(n * hw).unwrap();
                let gm = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    for s in 0..n {
                        let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                        for k in r {
                            dgamma[ch] += g[k] * xhat[k];
                            dbeta[ch] += g[k];
                        }
                    }
                }
                if tracked(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    for ch in 0..c {
                        let scale = gm[ch] * inv_std[ch];
                        for s in 0..n {
                            let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                            for k in r {
                                dx[k] = if *batch_stats {
                                    scale * (g[k] - dbeta[ch] / m - xhat[k] * dgamma[ch] / m)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                    send(*input, dx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::LeakyRelu { input, slope } => {
                let dx = val(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x >= T::zero() { gv } else { *slope * gv })
                    .collect();
                send(*input, dx);
            }
            Op::Sigmoid { input } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                send(*input, dx);
            }
            Op::Bce { pred, target } => {
                let lo = T::lit(PROB_CLAMP);
                let hi = T::one() - lo;
                let p = val(*pred);
                let n = T::from_usize(p.len().max(1)).unwrap();
                let scale = g[0] / n;
                let dp = p
                    .iter()
                    .zip(target)
                    .map(|(&pv, &t)| {
                        if pv < lo || pv > hi {
                            T::zero()
                        } else {
                            scale * (-t / pv + (T::one() - t) / (T::one() - pv))
                        }
                    })
                    .collect();
                send(*pred, dp);
            }
            Op::L2 { a, b } => {
                let (xa, xb) = (val(*a), val(*b));
                let n = T::from_usize(xa.len().max(1)).unwrap();
                let scale = T::lit(2.0) * g[0] / n;
                let da: Vec<T> = xa.iter().zip(xb).map(|(&x, &y)| scale * (x - y)).collect();
                if tracked(*b) {
                    send(*b, da.iter().map(|&v| -v).collect());
                }
                send(*a, da);
            }
            Op::Sum { input } => {
                send(*input, vec![g[0]; val(*input).len()]);
            }
            Op::WeightedSum { input, weights } => {
                send(*input, weights.iter().map(|&w| w * g[0]).collect());
            }
            Op::Add { a, b } => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Scale { input, factor } => {
                send(*input, g.iter().map(|&v| v * *factor).collect());
            }
        }
    }
}

#[cfg(test)]
#[path = "tape_tests.rs"]
mod tests;
