use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::{gaussian_normalize, CropPad, Modality, Subject, Volume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Normalizes a T1 or FLAIR volume and maps every slice to `slice`.
/// Other modalities are only cropped or padded.
pub fn prepare_volume<T: Scalar>(volume: &Volume<T>, slice: (usize, usize)) -> Result<(Vec<T>, CropPad)> {
    let plan = CropPad::new(volume.slice_dims(), slice)?;
    let normalized;
    let source = match volume.modality() {
        Modality::T1 | Modality::Flair => {
            normalized = gaussian_normalize(volume)?;
            &normalized
        }
        Modality::Label | Modality::SynthFlair => volume,
    };
    let mut out = Vec::with_capacity(volume.depth() * slice.0 * slice.1);
    for z in 0..volume.depth() {
        out.extend(plan.apply(source.slice(z)));
    }
    Ok((out, plan))
}

/// Preprocessed slices of a set of subjects, stored back to back.
#[derive(Debug, Clone)]
pub struct SliceSet<T> {
    pub height: usize,
    pub width: usize,
    pub t1: Vec<T>,
    pub flair: Vec<T>,
    pub label: Vec<T>,
    /// Index range of each subject's slices.
    pub subjects: Vec<(String, std::ops::Range<usize>)>,
}

impl<T: Scalar> SliceSet<T> {
    pub fn from_subjects(subjects: &[&Subject<T>], slice: (usize, usize)) -> Result<Self> {
        let mut set = Self {
            height: slice.0,
            width: slice.1,
            t1: Vec::new(),
            flair: Vec::new(),
            label: Vec::new(),
            subjects: Vec::new(),
        };
        for s in subjects {
            let start = set.len();
            set.t1.extend(prepare_volume(&s.t1, slice)?.0);
            set.flair.extend(prepare_volume(&s.flair, slice)?.0);
            set.label.extend(prepare_volume(&s.label, slice)?.0);
            set.subjects.push((s.id.clone(), start..set.len()));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.t1.len() / (self.height * self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.t1.is_empty()
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn gather(&self, source: &[T], idx: &[usize]) -> Tensor<T> {
        let p = self.plane();
        let mut data = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            data.extend_from_slice(&source[i * p..(i + 1) * p]);
        }
        Tensor::new(&[idx.len(), 1, self.height, self.width], data).expect("sized from the set")
    }

    pub fn batch(&self, idx: &[usize]) -> Batch<T> {
        Batch {
            t1: self.gather(&self.t1, idx),
            flair: self.gather(&self.flair, idx),
            label: self.gather(&self.label, idx),
        }
    }

    pub fn range_batch(&self, range: std::ops::Range<usize>) -> Batch<T> {
        self.batch(&range.collect::<Vec<_>>())
    }
}

/// `N x 1 x H x W` inputs, targets and labels of one step.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub t1: Tensor<T>,
    pub flair: Tensor<T>,
    pub label: Tensor<T>,
}

/// Shuffles `0..n` and cuts it into batches of `batch_size`. A trailing
/// batch of one slice is merged into the previous batch, since batch
/// normalization needs at least two samples.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::invalid("schedule", "batch size must be at least 2"));
    }
    if n < 2 {
        return Err(Error::invalid("schedule", format!("{n} training slices; need at least 2")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(tail);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn batches_cover_every_slice_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [2, 5, 8, 9, 13] {
            let b = epoch_batches(n, 4, &mut rng).unwrap();
            let mut all: Vec<usize> = b.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!(b.iter().all(|x| x.len() >= 2));
        }
        assert!(epoch_batches(4, 1, &mut rng).is_err());
    }

    #[test]
    fn schedule_depends_only_on_the_generator_state() {
        let a = epoch_batches(10, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = epoch_batches(10, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }
}
