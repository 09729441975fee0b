use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Modality, Subject, Volume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

// Raw tissue intensities: (T1, FLAIR).
const WHITE: (f64, f64) = (1.0, 0.55);
const GREY: (f64, f64) = (0.65, 0.7);
const VENTRICLE: (f64, f64) = (0.2, 0.1);
/// FLAIR lesion gain.
const FLAIR_LESION_DELTA: f64 = 0.6;
/// T1 lesion drop; faint lesions drop a tenth of this.
const T1_LESION_DELTA: f64 = 0.45;
/// Brain voxels are kept strictly positive so the support survives noise.
const MIN_TISSUE: f64 = 1e-3;
const PLACEMENT_RETRIES: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub n_subjects: usize,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of lesions attempted per slice.
    pub lesions_per_slice: (usize, usize),
    /// Inclusive range of lesion semi-axes, in pixels.
    pub lesion_radius: (f64, f64),
    /// Probability that a lesion is nearly invisible in T1.
    pub faint_fraction: f64,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_subjects: 12,
            slices: 4,
            height: 64,
            width: 64,
            lesions_per_slice: (1, 4),
            lesion_radius: (1.5, 4.0),
            faint_fraction: 0.5,
            noise_sigma: 0.05,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("phantom", msg));
        if self.n_subjects == 0 || self.slices == 0 {
            return bad("need at least one subject and one slice".into());
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!("slice size {}x{} is below 8x8", self.height, self.width));
        }
        if self.lesions_per_slice.0 > self.lesions_per_slice.1 {
            return bad(format!("empty lesion count range {:?}", self.lesions_per_slice));
        }
        let (lo, hi) = self.lesion_radius;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("invalid lesion radius range {:?}", self.lesion_radius));
        }
        if !(0.0..=1.0).contains(&self.faint_fraction) {
            return bad(format!("faint fraction {} outside [0, 1]", self.faint_fraction));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("invalid noise sigma {}", self.noise_sigma));
        }
        Ok(())
    }

    /// Fails unless both slice dims are divisible by `divisor`.
    pub fn check_divisible(&self, divisor: usize) -> Result<()> {
        for size in [self.height, self.width] {
            if size % divisor != 0 {
                return Err(Error::Indivisible {
                    op: "phantom",
                    size,
                    divisor,
                });
            }
        }
        Ok(())
    }
}

/// Lesion bookkeeping of a generated cohort.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhantomStats {
    pub lesions: usize,
    pub faint: usize,
    /// Lesions dropped after exhausting placement retries.
    pub skipped: usize,
}

impl PhantomStats {
    pub fn faint_fraction(&self) -> f64 {
        if self.lesions == 0 {
            0.0
        } else {
            self.faint as f64 / self.lesions as f64
        }
    }
}

#[derive(Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn value(&self, y: f64, x: f64) -> f64 {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        self.value(y as f64, x as f64) <= 1.0
    }

    fn grown(&self, by: f64) -> Self {
        Self {
            ry: self.ry + by,
            rx: self.rx + by,
            ..*self
        }
    }

    fn pixels(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let y0 = (self.cy - self.ry).floor().max(0.0) as usize;
        let y1 = ((self.cy + self.ry).ceil() as usize).min(h - 1);
        let x0 = (self.cx - self.rx).floor().max(0.0) as usize;
        let x1 = ((self.cx + self.rx).ceil() as usize).min(w - 1);
        let mut out = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.contains(y, x) {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

struct SliceImages {
    t1: Vec<f64>,
    flair: Vec<f64>,
    label: Vec<f64>,
}

fn render_slice(spec: &PhantomSpec, z: usize, subject_scale: (f64, f64), rng: &mut ChaCha8Rng, stats: &mut PhantomStats) -> SliceImages {
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    // brain shrinks towards the first and last slice
    let mid = (spec.slices as f64 - 1.0) / 2.0;
    let taper = if mid > 0.0 { 1.0 - 0.15 * ((z as f64 - mid).abs() / mid) } else { 1.0 };
    let brain = Ellipse {
        cy: (hf - 1.0) / 2.0 + rng.random_range(-0.02..0.02) * hf,
        cx: (wf - 1.0) / 2.0 + rng.random_range(-0.02..0.02) * wf,
        ry: 0.42 * hf * taper * subject_scale.0,
        rx: 0.36 * wf * taper * subject_scale.1,
    };
    let white = Ellipse {
        ry: brain.ry * 0.74,
        rx: brain.rx * 0.74,
        ..brain
    };
    let ventricle = Ellipse {
        ry: brain.ry * 0.26,
        rx: brain.rx * 0.14,
        ..brain
    };

    let mut t1 = vec![0.0; h * w];
    let mut flair = vec![0.0; h * w];
    let mut label = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let tissue = if ventricle.contains(y, x) {
                VENTRICLE
            } else if white.contains(y, x) {
                WHITE
            } else if brain.contains(y, x) {
                GREY
            } else {
                continue;
            };
            t1[y * w + x] = tissue.0;
            flair[y * w + x] = tissue.1;
        }
    }

    let count = rng.random_range(spec.lesions_per_slice.0..=spec.lesions_per_slice.1);
    let mut placed: Vec<Ellipse> = Vec::new();
    for _ in 0..count {
        let faint = rng.random_bool(spec.faint_fraction);
        let mut accepted = None;
        for _ in 0..PLACEMENT_RETRIES {
            let (lo, hi) = spec.lesion_radius;
            let cand = Ellipse {
                cy: white.cy + rng.random_range(-white.ry..white.ry),
                cx: white.cx + rng.random_range(-white.rx..white.rx),
                ry: rng.random_range(lo..=hi),
                rx: rng.random_range(lo..=hi),
            };
            let px = cand.pixels(h, w);
            let fits = !px.is_empty()
                && px.iter().all(|&(y, x)| {
                    white.contains(y, x)
                        && !ventricle.grown(1.0).contains(y, x)
                        && placed.iter().all(|p| !p.grown(1.0).contains(y, x))
                });
            if fits {
                accepted = Some((cand, px));
                break;
            }
        }
        let Some((lesion, px)) = accepted else {
            stats.skipped += 1;
            continue;
        };
        stats.lesions += 1;
        stats.faint += usize::from(faint);
        let drop = if faint { T1_LESION_DELTA / 10.0 } else { T1_LESION_DELTA };
        for (y, x) in px {
            t1[y * w + x] -= drop;
            flair[y * w + x] += FLAIR_LESION_DELTA;
            label[y * w + x] = 1.0;
        }
        placed.push(lesion);
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for img in [&mut t1, &mut flair] {
            for v in img.iter_mut().filter(|v| **v > 0.0) {
                *v = (*v + noise.sample(rng)).max(MIN_TISSUE);
            }
        }
    }
    SliceImages { t1, flair, label }
}

/// Generates a cohort and reports how many lesions were placed.
///
/// Subject `i` draws from its own stream of the seeded generator, so a
/// cohort is a prefix of any larger cohort with the same seed.
pub fn generate_phantom_with_stats<T: Scalar>(spec: &PhantomSpec) -> Result<(Vec<Subject<T>>, PhantomStats)> {
    spec.validate()?;
    let dims = [spec.slices, spec.height, spec.width];
    let mut stats = PhantomStats::default();
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    let width = spec.n_subjects.saturating_sub(1).to_string().len().max(2);
    for i in 0..spec.n_subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let scale = (rng.random_range(0.92..1.05), rng.random_range(0.92..1.05));
        let mut t1 = Vec::with_capacity(dims.iter().product());
        let mut flair = Vec::with_capacity(t1.capacity());
        let mut label = Vec::with_capacity(t1.capacity());
        for z in 0..spec.slices {
            let s = render_slice(spec, z, scale, &mut rng, &mut stats);
            t1.extend(s.t1);
            flair.extend(s.flair);
            label.extend(s.label);
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect::<Vec<T>>();
        subjects.push(Subject::new(
            format!("sub-{i:0width$}"),
            Volume::new(dims, cast(t1), Modality::T1)?,
            Volume::new(dims, cast(flair), Modality::Flair)?,
            Volume::new(dims, cast(label), Modality::Label)?,
        )?);
    }
    Ok((subjects, stats))
}

pub fn generate_phantom<T: Scalar>(spec: &PhantomSpec) -> Result<Vec<Subject<T>>> {
    generate_phantom_with_stats(spec).map(|(s, _)| s)
}
