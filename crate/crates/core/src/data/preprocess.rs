use super::{Modality, Volume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Center crop / zero pad plan between a source and a target slice size.
///
/// On odd differences the extra row or column is taken from, or added to,
/// the bottom and right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropPad {
    source: (usize, usize),
    target: (usize, usize),
    /// Source coordinate of target cell (0, 0); negative when padding.
    offset: (isize, isize),
}

impl CropPad {
    pub fn new(source: (usize, usize), target: (usize, usize)) -> Result<Self> {
        if source.0 == 0 || source.1 == 0 || target.0 == 0 || target.1 == 0 {
            return Err(Error::invalid("crop_or_pad", "slice sizes must be positive"));
        }
        let off = |s: usize, t: usize| (s as isize - t as isize) / 2;
        Ok(Self {
            source,
            target,
            offset: (off(source.0, target.0), off(source.1, target.1)),
        })
    }

    pub fn source(&self) -> (usize, usize) {
        self.source
    }

    pub fn target(&self) -> (usize, usize) {
        self.target
    }

    /// Source `(row, col)` that lands at target `(r, c)`, if any.
    pub fn source_of(&self, r: usize, c: usize) -> Option<(usize, usize)> {
        let sr = r as isize + self.offset.0;
        let sc = c as isize + self.offset.1;
        let inside = sr >= 0 && sc >= 0 && (sr as usize) < self.source.0 && (sc as usize) < self.source.1;
        inside.then_some((sr as usize, sc as usize))
    }

    fn remap<T: Scalar>(&self, input: &[T], from: (usize, usize), to: (usize, usize), forward: bool) -> Vec<T> {
        assert_eq!(input.len(), from.0 * from.1, "slice size does not match the plan");
        let mut out = vec![T::zero(); to.0 * to.1];
        for r in 0..self.target.0 {
            for c in 0..self.target.1 {
                if let Some((sr, sc)) = self.source_of(r, c) {
                    if forward {
                        out[r * to.1 + c] = input[sr * from.1 + sc];
                    } else {
                        out[sr * to.1 + sc] = input[r * from.1 + c];
                    }
                }
            }
        }
        out
    }

    /// Maps a source-sized slice to the target size.
    pub fn apply<T: Scalar>(&self, slice: &[T]) -> Vec<T> {
        self.remap(slice, self.source, self.target, true)
    }

    /// Maps a target-sized slice back to source coordinates; cropped-away
    /// source cells are zero.
    pub fn invert<T: Scalar>(&self, slice: &[T]) -> Vec<T> {
        self.remap(slice, self.target, self.source, false)
    }
}

/// Z-scores a T1 or FLAIR volume over its support using the population
/// standard deviation.
///
/// The support is every nonzero voxel. For raw, nonnegative intensities
/// this is the set of voxels `> 0`; counting negative voxels as well keeps
/// the map idempotent on already-normalized volumes. Background stays 0.
pub fn gaussian_normalize<T: Scalar>(volume: &Volume<T>) -> Result<Volume<T>> {
    if volume.modality() == Modality::Label {
        return Err(Error::invalid("gaussian_normalize", "label volumes are never normalized"));
    }
    let support: Vec<f64> = volume
        .voxels()
        .iter()
        .map(|v| v.to_f64_lossless())
        .filter(|&v| v != 0.0)
        .collect();
    let n = support.len() as f64;
    if support.len() < 2 {
        return Err(Error::invalid("gaussian_normalize", "fewer than two support voxels"));
    }
    let mean = support.iter().sum::<f64>() / n;
    let var = support.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 || !var.is_finite() {
        return Err(Error::invalid("gaussian_normalize", "support is constant"));
    }
    let sd = var.sqrt();
    let voxels = volume
        .voxels()
        .iter()
        .map(|&v| {
            let x = v.to_f64_lossless();
            if x != 0.0 {
                T::from_f64_lossy((x - mean) / sd)
            } else {
                T::zero()
            }
        })
        .collect();
    Volume::new(volume.dims(), voxels, volume.modality())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize) -> Vec<f64> {
        (0..h * w).map(|i| i as f64 + 1.0).collect()
    }

    #[test]
    fn larger_input_is_center_cropped() {
        let plan = CropPad::new((200, 200), (192, 192)).unwrap();
        assert_eq!(plan.source_of(0, 0), Some((4, 4)));
        assert_eq!(plan.source_of(191, 191), Some((195, 195)));
        let out = plan.apply(&grid(200, 200));
        assert_eq!(out.len(), 192 * 192);
        assert_eq!(out[0], (4 * 200 + 4 + 1) as f64);
    }

    #[test]
    fn equal_size_is_identity() {
        let plan = CropPad::new((5, 7), (5, 7)).unwrap();
        let g = grid(5, 7);
        assert_eq!(plan.apply(&g), g);
        assert_eq!(plan.invert(&g), g);
    }

    #[test]
    fn odd_padding_puts_extra_at_bottom_right() {
        let plan = CropPad::new((5, 7), (8, 8)).unwrap();
        let out = plan.apply(&grid(5, 7));
        for r in 0..8 {
            for c in 0..8 {
                let inside = (1..=5).contains(&r) && c <= 6;
                assert_eq!(out[r * 8 + c] != 0.0, inside, "({r},{c})");
            }
        }
        assert_eq!(out[8], 1.0);
        assert_eq!(plan.invert(&out), grid(5, 7));
    }

    #[test]
    fn invert_restores_overlap_after_crop() {
        let plan = CropPad::new((9, 6), (4, 4)).unwrap();
        let g = grid(9, 6);
        let back = plan.invert(&plan.apply(&g));
        for r in 0..9 {
            for c in 0..6 {
                let kept = (2..6).contains(&r) && (1..5).contains(&c);
                assert_eq!(back[r * 6 + c], if kept { g[r * 6 + c] } else { 0.0 });
            }
        }
    }

    #[test]
    fn two_level_support_maps_to_unit_values() {
        let v = Volume::new([1, 1, 4], vec![0.0, 1.0, 3.0, 0.0], Modality::T1).unwrap();
        let n = gaussian_normalize(&v).unwrap();
        assert_eq!(n.voxels(), &[0.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn normalizing_twice_changes_nothing() {
        let v = Volume::new([1, 2, 3], vec![0.0f64, 0.5, 1.5, 2.0, 7.0, 0.0], Modality::T1).unwrap();
        let once = gaussian_normalize(&v).unwrap();
        let twice = gaussian_normalize(&once).unwrap();
        for (a, b) in once.voxels().iter().zip(twice.voxels()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_support_is_an_error() {
        let v = Volume::new([1, 1, 3], vec![2.0, 2.0, 0.0], Modality::Flair).unwrap();
        assert!(gaussian_normalize(&v).is_err());
        let l = Volume::new([1, 1, 2], vec![0.0, 1.0], Modality::Label).unwrap();
        assert!(gaussian_normalize(&l).is_err());
    }
}
