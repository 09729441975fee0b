//! U-Net construction for the segmenter and the generator.
//!
//! Every resolution level uses the block `[conv3x3 -> batch norm ->
//! leaky ReLU] x 2`. The decoder upsamples by nearest-neighbour doubling
//! followed by a conv3x3 block, concatenates the encoder skip of the same
//! level and applies another block. A 1x1 convolution and the configured
//! final activation produce the single output channel.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchNormMode, RunningStats, Tape, Tensor, Var};

/// Leaky ReLU slope used between layers.
pub const INTERNAL_SLOPE: f64 = 0.01;
/// Leaky ReLU slope of the generator's output layer.
pub const GENERATOR_SLOPE: f64 = 0.2;

const MAGIC: [u8; 4] = *b"JSYN";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalActivation {
    Sigmoid,
    LeakyRelu,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of pooling (and upsampling) levels.
    pub depth: usize,
    /// Channels at the first level; doubled at each deeper level.
    pub base_filters: usize,
    pub final_activation: FinalActivation,
    /// Slope of the final activation when it is a leaky ReLU.
    pub leaky_slope: f64,
}

impl UNetConfig {
    pub fn classifier(in_channels: usize, depth: usize, base_filters: usize) -> Self {
        Self {
            in_channels,
            out_channels: 1,
            depth,
            base_filters,
            final_activation: FinalActivation::Sigmoid,
            leaky_slope: GENERATOR_SLOPE,
        }
    }

    pub fn generator(depth: usize, base_filters: usize) -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            depth,
            base_filters,
            final_activation: FinalActivation::LeakyRelu,
            leaky_slope: GENERATOR_SLOPE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "unet config";
        if self.depth < 1 {
            return Err(Error::invalid(OP, "depth must be at least 1"));
        }
        if self.depth > 16 {
            return Err(Error::invalid(OP, "depth above 16 is not supported"));
        }
        if self.base_filters < 1 {
            return Err(Error::invalid(OP, "base_filters must be at least 1"));
        }
        if !(1..=2).contains(&self.in_channels) {
            return Err(Error::invalid(OP, format!("in_channels must be 1 or 2, got {}", self.in_channels)));
        }
        if self.out_channels != 1 {
            return Err(Error::invalid(OP, format!("out_channels must be 1, got {}", self.out_channels)));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid(OP, format!("leaky_slope {} outside (0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, level: usize) -> usize {
        self.base_filters << level
    }
}

/// Indices of one `conv -> batch norm` pair in the parameter list.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvBn {
    /// Weight index; the bias follows it.
    conv: usize,
    /// Gamma index; beta follows it.
    norm: usize,
    stats: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    encoders: Vec<[ConvBn; 2]>,
    bottleneck: [ConvBn; 2],
    /// Indexed by target level.
    ups: Vec<ConvBn>,
    decoders: Vec<[ConvBn; 2]>,
    head: usize,
}

struct LayoutBuilder<'a, T> {
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    stats: Vec<RunningStats<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> LayoutBuilder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> usize {
        let fan_in = (cin * k * k) as f64;
        // uniform with variance 2 / fan_in
        let bound = (6.0 / fan_in).sqrt();
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| T::lit(rng.random_range(-bound..bound)));
        let idx = self.params.len();
        self.params.push(w.with_requires_grad(true));
        self.names.push(format!("{name}.weight"));
        self.params.push(Tensor::zeros(&[cout]).with_requires_grad(true));
        self.names.push(format!("{name}.bias"));
        idx
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize) -> ConvBn {
        let conv = self.conv(name, cin, cout, 3);
        let norm = self.params.len();
        self.params.push(Tensor::full(&[cout], T::one()).with_requires_grad(true));
        self.names.push(format!("{name}.gamma"));
        self.params.push(Tensor::zeros(&[cout]).with_requires_grad(true));
        self.names.push(format!("{name}.beta"));
        self.stats.push(RunningStats::new(cout));
        ConvBn {
            conv,
            norm,
            stats: self.stats.len() - 1,
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> [ConvBn; 2] {
        [
            self.conv_bn(&format!("{name}.0"), cin, cout),
            self.conv_bn(&format!("{name}.1"), cout, cout),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetMode {
    Train,
    Eval,
}

/// A U-Net with its parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    config: UNetConfig,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    stats: Vec<RunningStats<T>>,
    layout: Layout,
    mode: NetMode,
}

/// Segmentation network: `N x in x H x W` to probabilities `N x 1 x H x W`.
pub fn build_classifier<T: Scalar>(config: UNetConfig, seed: u64) -> Result<Network<T>> {
    if config.final_activation != FinalActivation::Sigmoid {
        return Err(Error::invalid("build_classifier", "final activation must be sigmoid"));
    }
    Network::new(config, seed)
}

/// Synthesis network: one input channel to one unbounded output channel.
pub fn build_generator<T: Scalar>(config: UNetConfig, seed: u64) -> Result<Network<T>> {
    if config.in_channels != 1 {
        return Err(Error::invalid("build_generator", "generator takes exactly one input channel"));
    }
    if config.final_activation != FinalActivation::LeakyRelu {
        return Err(Error::invalid("build_generator", "final activation must be leaky ReLU"));
    }
    Network::new(config, seed)
}

impl<T: Scalar> Network<T> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::from_rng(config, &mut rng))
    }

    fn from_rng(config: UNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut b = LayoutBuilder {
            params: Vec::new(),
            names: Vec::new(),
            stats: Vec::new(),
            rng,
        };
        let mut encoders = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels;
        for level in 0..config.depth {
            encoders.push(b.block(&format!("enc{level}"), cin, config.width(level)));
            cin = config.width(level);
        }
        let bottleneck = b.block("bottleneck", cin, config.width(config.depth));
        let mut ups = vec![None; config.depth];
        let mut decoders = vec![None; config.depth];
        for level in (0..config.depth).rev() {
            let wide = config.width(level + 1);
            let narrow = config.width(level);
            ups[level] = Some(b.conv_bn(&format!("up{level}"), wide, narrow));
            decoders[level] = Some(b.block(&format!("dec{level}"), 2 * narrow, narrow));
        }
        let head = b.conv("head", config.width(0), config.out_channels, 1);
        let layout = Layout {
            encoders,
            bottleneck,
            ups: ups.into_iter().map(Option::unwrap).collect(),
            decoders: decoders.into_iter().map(Option::unwrap).collect(),
            head,
        };
        Self {
            config,
            params: b.params,
            names: b.names,
            stats: b.stats,
            layout,
            mode: NetMode::Train,
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn mode(&self) -> NetMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: NetMode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    /// Number of learnable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Hash of the learnable parameter bits.
    pub fn param_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            for v in p.data() {
                v.to_f64_lossless().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Hash of parameters and running statistics.
    pub fn state_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.param_hash().hash(&mut h);
        for s in &self.stats {
            for v in s.mean.iter().chain(&s.var) {
                v.to_f64_lossless().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.clear_grad();
        }
    }

    /// Records the parameters on `tape`, tracked iff `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone().with_requires_grad(trainable)))
            .collect()
    }

    /// Adds the tape gradients of bound parameters into `self`.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &[Var]) {
        for (p, v) in self.params.iter_mut().zip(bound) {
            match tape.grad(*v) {
                Some(g) => p.accumulate_grad(g),
                None => {
                    p.grad_mut();
                }
            }
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::invalid("forward", format!("expected N x C x H x W input, got {shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "forward",
                dim: "input channels",
                expected: self.config.in_channels,
                actual: c,
            });
        }
        let div = self.config.spatial_divisor();
        for size in [h, w] {
            if size == 0 || size % div != 0 {
                return Err(Error::Indivisible {
                    op: "forward",
                    size,
                    divisor: div,
                });
            }
        }
        Ok(())
    }

    /// Forward pass with the network's own mode.
    ///
    /// In [`NetMode::Train`] batch statistics are used and the running
    /// statistics are updated; in [`NetMode::Eval`] nothing is mutated.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, bound: &[Var]) -> Result<Var> {
        let bn = match self.mode {
            NetMode::Train => BatchNormMode::Train,
            NetMode::Eval => BatchNormMode::Eval,
        };
        self.forward_with(tape, input, bound, bn)
    }

    /// Forward pass with an explicit batch-norm mode.
    pub fn forward_with(&mut self, tape: &mut Tape<T>, input: Var, bound: &[Var], bn: BatchNormMode) -> Result<Var> {
        if bn == BatchNormMode::Train {
            let mut stats = std::mem::take(&mut self.stats);
            let out = self.run(tape, input, bound, &mut stats, bn, None);
            self.stats = stats;
            out
        } else {
            let mut stats = self.stats.clone();
            self.run(tape, input, bound, &mut stats, bn, None)
        }
    }

    /// Read-only forward that never touches running statistics.
    pub fn forward_frozen(&self, tape: &mut Tape<T>, input: Var, bound: &[Var], bn: BatchNormMode) -> Result<Var> {
        let bn = if bn == BatchNormMode::Train {
            BatchNormMode::BatchStats
        } else {
            bn
        };
        let mut stats = self.stats.clone();
        self.run(tape, input, bound, &mut stats, bn, None)
    }

    /// Eval-mode inference on a plain tensor.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let bound = self.bind(&mut tape, false);
        let y = self.forward_frozen(&mut tape, x, &bound, BatchNormMode::Eval)?;
        Ok(tape.value(y).clone())
    }

    fn conv_bn(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        bound: &[Var],
        layer: ConvBn,
        stats: &mut [RunningStats<T>],
        bn: BatchNormMode,
    ) -> Result<Var> {
        let y = tape.conv2d(x, bound[layer.conv], bound[layer.conv + 1], 1, 1)?;
        let y = tape.batch_norm2d(y, bound[layer.norm], bound[layer.norm + 1], &mut stats[layer.stats], bn)?;
        tape.leaky_relu(y, T::lit(INTERNAL_SLOPE))
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        bound: &[Var],
        block: [ConvBn; 2],
        stats: &mut [RunningStats<T>],
        bn: BatchNormMode,
    ) -> Result<Var> {
        let y = self.conv_bn(tape, x, bound, block[0], stats, bn)?;
        self.conv_bn(tape, y, bound, block[1], stats, bn)
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        bound: &[Var],
        stats: &mut [RunningStats<T>],
        bn: BatchNormMode,
        ablate_skip: Option<usize>,
    ) -> Result<Var> {
        if bound.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                dim: "bound parameter count",
                expected: self.params.len(),
                actual: bound.len(),
            });
        }
        self.check_input(tape.value(input).shape())?;
        let l = &self.layout;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = input;
        for enc in &l.encoders {
            let y = self.block(tape, x, bound, *enc, stats, bn)?;
            skips.push(y);
            x = tape.max_pool2d(y, 2)?;
        }
        x = self.block(tape, x, bound, l.bottleneck, stats, bn)?;
        for level in (0..self.config.depth).rev() {
            let up = tape.upsample_nearest2(x)?;
            let up = self.conv_bn(tape, up, bound, l.ups[level], stats, bn)?;
            let mut skip = skips[level];
            if ablate_skip == Some(level) {
                let zeros = Tensor::zeros(tape.value(skip).shape());
                skip = tape.constant(zeros);
            }
            let cat = tape.concat_channels(up, skip)?;
            x = self.block(tape, cat, bound, l.decoders[level], stats, bn)?;
        }
        let y = tape.conv2d(x, bound[l.head], bound[l.head + 1], 0, 1)?;
        match self.config.final_activation {
            FinalActivation::Sigmoid => tape.sigmoid(y),
            FinalActivation::LeakyRelu => tape.leaky_relu(y, T::lit(self.config.leaky_slope)),
        }
    }

    /// Serializes config, parameters and running statistics.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [c.in_channels, c.out_channels, c.depth, c.base_filters] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(match c.final_activation {
            FinalActivation::Sigmoid => 0,
            FinalActivation::LeakyRelu => 1,
        });
        out.extend_from_slice(&c.leaky_slope.to_le_bytes());
        let count: usize =
            self.num_parameters() + self.stats.iter().map(|s| s.mean.len() + s.var.len()).sum::<usize>();
        out.extend_from_slice(&(count as u64).to_le_bytes());
        let values = self
            .params
            .iter()
            .flat_map(|p| p.data().iter())
            .chain(self.stats.iter().flat_map(|s| s.mean.iter().chain(&s.var)));
        for v in values {
            out.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: MAGIC,
            });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.into(),
                version,
            });
        }
        let in_channels = r.u32()? as usize;
        let out_channels = r.u32()? as usize;
        let depth = r.u32()? as usize;
        let base_filters = r.u32()? as usize;
        let final_activation = match r.take(1)?[0] {
            0 => FinalActivation::Sigmoid,
            1 => FinalActivation::LeakyRelu,
            other => {
                return Err(Error::InvalidData {
                    path: path.into(),
                    msg: format!("unknown final activation tag {other}"),
                })
            }
        };
        let leaky_slope = r.f64()?;
        let config = UNetConfig {
            in_channels,
            out_channels,
            depth,
            base_filters,
            final_activation,
            leaky_slope,
        };
        config.validate().map_err(|e| Error::InvalidData {
            path: path.into(),
            msg: e.to_string(),
        })?;
        let count = r.u64()?;
        // Shapes come from the config; the RNG draws are overwritten below.
        let mut net = Self::new(config, 0)?;
        let expected = net.num_parameters() + net.stats.iter().map(|s| 2 * s.mean.len()).sum::<usize>();
        if count != expected as u64 {
            return Err(Error::InvalidData {
                path: path.into(),
                msg: format!("config implies {expected} values, header says {count}"),
            });
        }
        let needed = r.pos as u64 + count * 8;
        if (bytes.len() as u64) < needed {
            return Err(Error::Truncated {
                path: path.into(),
                expected: needed,
                actual: bytes.len() as u64,
            });
        }
        for p in &mut net.params {
            for v in p.data_mut() {
                *v = T::from_f64_lossy(r.f64()?);
            }
        }
        for s in &mut net.stats {
            for v in s.mean.iter_mut().chain(s.var.iter_mut()) {
                *v = T::from_f64_lossy(r.f64()?);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidData {
                path: path.into(),
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.into(),
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
#[path = "nets_tests.rs"]
mod tests;
