//! Segmentation and reconstruction metrics, paired significance tests,
//! overlays and the tabular report.

mod overlay;
mod report;

pub use overlay::{render_overlay, Rgb, RgbImage, FN_COLOR, FP_COLOR, TP_COLOR};
pub use report::{
    format_summary_table, parse_subject_rows, parse_summary, render_subject_rows, render_summary, summarize,
    MethodSummary, SubjectRow, SIGNIFICANCE_LEVEL,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::is_binary;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Table value used in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Ground-truth positives.
    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            dim: "voxel count",
            expected: a,
            actual: b,
        });
    }
    Ok(())
}

/// Voxel-wise counts of binary `pred` against binary `truth`.
pub fn confusion<T: Scalar>(pred: &[T], truth: &[T]) -> Result<ConfusionCounts> {
    check_len("confusion", truth.len(), pred.len())?;
    if !is_binary(pred) || !is_binary(truth) {
        return Err(Error::invalid("confusion", "inputs must contain only 0 and 1"));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == T::one(), t == T::one()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2tp / (2tp + fp + fn)`; 1.0 when both masks are empty.
pub fn dice(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

/// False positives per ground-truth positive; `None` without positives.
pub fn fpr(c: &ConfusionCounts) -> Option<f64> {
    (c.positives() > 0).then(|| c.fp as f64 / c.positives() as f64)
}

/// Missed fraction of ground-truth positives; `None` without positives.
pub fn fnr(c: &ConfusionCounts) -> Option<f64> {
    (c.positives() > 0).then(|| c.fn_ as f64 / c.positives() as f64)
}

/// Nonzero voxels of a reference image.
pub fn support_mask<T: Scalar>(reference: &[T]) -> Vec<bool> {
    reference.iter().map(|&v| v != T::zero()).collect()
}

fn masked_pairs<'a, T: Scalar>(
    op: &'static str,
    a: &'a [T],
    b: &'a [T],
    mask: &'a [bool],
) -> Result<impl Iterator<Item = (f64, f64)> + Clone + 'a> {
    check_len(op, a.len(), b.len())?;
    check_len(op, a.len(), mask.len())?;
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid(op, "mask is empty"));
    }
    Ok(a.iter()
        .zip(b)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((x, y), _)| (x.to_f64_lossless(), y.to_f64_lossless())))
}

/// Mean absolute difference over `mask`.
pub fn mae<T: Scalar>(a: &[T], b: &[T], mask: &[bool]) -> Result<f64> {
    let pairs = masked_pairs("mae", a, b, mask)?;
    let (sum, n) = pairs.fold((0.0, 0usize), |(s, n), (x, y)| (s + (x - y).abs(), n + 1));
    Ok(sum / n as f64)
}

/// `10 log10(peak^2 / mse)` over `mask`, with `peak` the range of
/// `reference` on the mask. Identical inputs give `+inf`.
pub fn psnr<T: Scalar>(reference: &[T], test: &[T], mask: &[bool]) -> Result<f64> {
    let pairs = masked_pairs("psnr", reference, test, mask)?;
    let (lo, hi) = pairs
        .clone()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (r, _)| (lo.min(r), hi.max(r)));
    let peak = hi - lo;
    if peak <= 0.0 {
        return Err(Error::invalid("psnr", "reference is constant on the mask"));
    }
    let (sse, n) = pairs.fold((0.0, 0usize), |(s, n), (r, t)| (s + (r - t) * (r - t), n + 1));
    Ok(psnr_from_mse(peak, sse / n as f64))
}

pub fn psnr_from_mse(peak: f64, mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Clamps a PSNR to [`PSNR_CAP`] for tables and means.
pub fn cap_psnr(db: f64) -> f64 {
    db.min(PSNR_CAP)
}

fn mean_of_signed(diffs: &[f64], signs: impl Fn(usize) -> bool) -> f64 {
    diffs
        .iter()
        .enumerate()
        .map(|(i, &d)| if signs(i) { -d } else { d })
        .sum::<f64>()
        / diffs.len() as f64
}

/// Two-sided paired sign-flip test on the mean difference `a - b`.
///
/// When `2^n <= n_permutations` every sign pattern is enumerated and the
/// exact p-value is returned. Otherwise `n_permutations` random patterns
/// are drawn and `p = (1 + hits) / (1 + n_permutations)`. Pairs are put in
/// a canonical order first, so the result does not depend on how the
/// subjects are listed.
pub fn permutation_test(a: &[f64], b: &[f64], n_permutations: usize, seed: u64) -> Result<f64> {
    check_len("permutation_test", a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::invalid("permutation_test", "need at least two pairs"));
    }
    if n_permutations == 0 {
        return Err(Error::invalid("permutation_test", "n_permutations must be positive"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("permutation_test", "values must be finite"));
    }
    let mut diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    diffs.sort_by(|x, y| x.abs().total_cmp(&y.abs()).then(x.total_cmp(y)));
    let n = diffs.len();
    let observed = mean_of_signed(&diffs, |_| false).abs();
    // sums of sign-flipped copies can differ from the observed sum by rounding
    let scale = diffs.iter().map(|d| d.abs()).sum::<f64>() / n as f64;
    let threshold = observed - 1e-12 * scale;

    if n < usize::BITS as usize && (1usize << n) <= n_permutations {
        let total = 1usize << n;
        let hits = (0..total)
            .filter(|&mask| mean_of_signed(&diffs, |i| mask >> i & 1 == 1).abs() >= threshold)
            .count();
        return Ok(hits as f64 / total as f64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flips = vec![false; n];
    let mut hits = 0usize;
    for _ in 0..n_permutations {
        flips.iter_mut().for_each(|f| *f = rng.random_bool(0.5));
        if mean_of_signed(&diffs, |i| flips[i]).abs() >= threshold {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + n_permutations) as f64)
}
