use super::batch::prepare_volume;
use crate::data::{CropPad, Modality, Volume};
use crate::error::{Error, Result};
use crate::nets::{FinalActivation, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability at or above which a voxel is labelled as lesion.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn slices_tensor<T: Scalar>(data: Vec<T>, depth: usize, slice: (usize, usize), channels: usize) -> Tensor<T> {
    Tensor::new(&[depth, channels, slice.0, slice.1], data).expect("sized by caller")
}

fn back_to_volume<T: Scalar>(out: &Tensor<T>, plan: &CropPad, dims: [usize; 3]) -> Vec<T> {
    let plane = plan.target().0 * plan.target().1;
    let mut voxels = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        voxels.extend(plan.invert(&out.data()[z * plane..(z + 1) * plane]));
    }
    voxels
}

/// Eval-mode synthesis of every slice of a raw T1 volume, mapped back to
/// the volume's own slice size. The result lives in the normalized
/// intensity domain.
pub fn synthesize<T: Scalar>(generator: &Network<T>, t1: &Volume<T>, slice: (usize, usize)) -> Result<Volume<T>> {
    let cfg = generator.config();
    if cfg.final_activation != FinalActivation::LeakyRelu || cfg.in_channels != 1 {
        return Err(Error::invalid("synthesize", "network is not a generator"));
    }
    if t1.modality() != Modality::T1 {
        return Err(Error::invalid("synthesize", format!("expected a T1 volume, got {:?}", t1.modality())));
    }
    let (x, plan) = prepare_volume(t1, slice)?;
    let out = generator.infer(&slices_tensor(x, t1.depth(), slice, 1))?;
    Volume::new(t1.dims(), back_to_volume(&out, &plan, t1.dims()), Modality::SynthFlair)
}

/// Eval-mode lesion probabilities in original coordinates.
///
/// A FLAIR second channel is normalized like T1; synthetic or other
/// second channels are used as given.
pub fn probabilities<T: Scalar>(
    classifier: &Network<T>,
    t1: &Volume<T>,
    second: Option<&Volume<T>>,
    slice: (usize, usize),
) -> Result<Vec<T>> {
    let cfg = classifier.config();
    if cfg.final_activation != FinalActivation::Sigmoid {
        return Err(Error::invalid("predict", "network is not a classifier"));
    }
    let arity = 1 + usize::from(second.is_some());
    if cfg.in_channels != arity {
        return Err(Error::ShapeMismatch {
            op: "predict",
            dim: "input channels",
            expected: cfg.in_channels,
            actual: arity,
        });
    }
    let (a, plan) = prepare_volume(t1, slice)?;
    let plane = slice.0 * slice.1;
    let data = match second {
        None => a,
        Some(s) => {
            if s.dims() != t1.dims() {
                return Err(Error::invalid("predict", "second channel dims differ from T1 dims"));
            }
            let (b, _) = prepare_volume(s, slice)?;
            let mut data = Vec::with_capacity(2 * a.len());
            for z in 0..t1.depth() {
                data.extend_from_slice(&a[z * plane..(z + 1) * plane]);
                data.extend_from_slice(&b[z * plane..(z + 1) * plane]);
            }
            data
        }
    };
    let out = classifier.infer(&slices_tensor(data, t1.depth(), slice, arity))?;
    Ok(back_to_volume(&out, &plan, t1.dims()))
}

pub fn threshold<T: Scalar>(probs: &[T], level: f64) -> Vec<T> {
    let level = T::from_f64_lossy(level);
    probs.iter().map(|&p| if p >= level { T::one() } else { T::zero() }).collect()
}

/// Binary segmentation in original coordinates. Voxels outside the
/// cropped field of view are background.
pub fn predict<T: Scalar>(
    classifier: &Network<T>,
    t1: &Volume<T>,
    second: Option<&Volume<T>>,
    slice: (usize, usize),
) -> Result<Volume<T>> {
    let probs = probabilities(classifier, t1, second, slice)?;
    let labels = threshold(&probs, DEFAULT_THRESHOLD);
    Volume::new(t1.dims(), labels, Modality::Label)
}
