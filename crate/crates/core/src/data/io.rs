use std::fs;
use std::path::{Path, PathBuf};

use super::{is_binary, Modality, Subject, Volume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const VOLUME_MAGIC: [u8; 4] = *b"MVOL";
pub const VOLUME_HEADER_BYTES: u64 = 16;

fn encode<T: Scalar>(volume: &Volume<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(VOLUME_HEADER_BYTES as usize + volume.voxels().len() * 8);
    out.extend_from_slice(&VOLUME_MAGIC);
    for d in volume.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in volume.voxels() {
        out.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
    }
    out
}

fn decode<T: Scalar>(bytes: &[u8], path: &Path, modality: Modality) -> Result<Volume<T>> {
    let have = bytes.len() as u64;
    if have < 4 || bytes[..4] != VOLUME_MAGIC {
        if have < 4 && VOLUME_MAGIC.starts_with(bytes) {
            return Err(Error::Truncated {
                path: path.into(),
                expected: VOLUME_HEADER_BYTES,
                actual: have,
            });
        }
        return Err(Error::BadMagic {
            path: path.into(),
            expected: VOLUME_MAGIC,
        });
    }
    if have < VOLUME_HEADER_BYTES {
        return Err(Error::Truncated {
            path: path.into(),
            expected: VOLUME_HEADER_BYTES,
            actual: have,
        });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let raw = [dim(0), dim(1), dim(2)];
    let payload = raw
        .iter()
        .try_fold(8u64, |acc, &d| acc.checked_mul(u64::from(d)))
        .and_then(|p| p.checked_add(VOLUME_HEADER_BYTES))
        .filter(|&total| usize::try_from(total).is_ok());
    let Some(expected) = payload else {
        return Err(Error::DimOverflow {
            path: path.into(),
            dims: raw,
        });
    };
    if have < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            actual: have,
        });
    }
    if have > expected {
        return Err(Error::InvalidData {
            path: path.into(),
            msg: format!("{} trailing bytes after voxel data", have - expected),
        });
    }
    let voxels: Vec<T> = bytes[VOLUME_HEADER_BYTES as usize..]
        .chunks_exact(8)
        .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    let dims = raw.map(|d| d as usize);
    Volume::new(dims, voxels, modality).map_err(|e| Error::InvalidData {
        path: path.into(),
        msg: e.to_string(),
    })
}

pub fn write_volume<T: Scalar>(volume: &Volume<T>, path: &Path) -> Result<()> {
    if volume.dims().iter().any(|&d| u32::try_from(d).is_err()) {
        return Err(Error::DimOverflow {
            path: path.into(),
            dims: volume.dims().map(|d| d.min(u32::MAX as usize) as u32),
        });
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(volume)).map_err(|e| Error::io(path, e))
}

/// Reads a volume file and tags it with `modality`.
pub fn read_volume<T: Scalar>(path: &Path, modality: Modality) -> Result<Volume<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path, modality)
}

fn subject_file(root: &Path, id: &str, modality: Modality) -> PathBuf {
    root.join(id).join(format!("{}.mvol", modality.file_stem()))
}

pub fn write_subject<T: Scalar>(root: &Path, subject: &Subject<T>) -> Result<()> {
    write_volume(&subject.t1, &subject_file(root, &subject.id, Modality::T1))?;
    write_volume(&subject.flair, &subject_file(root, &subject.id, Modality::Flair))?;
    write_volume(&subject.label, &subject_file(root, &subject.id, Modality::Label))
}

pub fn read_subject<T: Scalar>(root: &Path, id: &str) -> Result<Subject<T>> {
    let t1 = read_volume(&subject_file(root, id, Modality::T1), Modality::T1)?;
    let flair = read_volume(&subject_file(root, id, Modality::Flair), Modality::Flair)?;
    let label = read_volume(&subject_file(root, id, Modality::Label), Modality::Label)?;
    Subject::new(id, t1, flair, label).map_err(|e| Error::InvalidData {
        path: root.join(id),
        msg: e.to_string(),
    })
}

fn subject_ids(root: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads every subject directory under `root`, sorted by id.
pub fn load_dataset<T: Scalar>(root: &Path) -> Result<Vec<Subject<T>>> {
    let ids = subject_ids(root)?;
    if ids.is_empty() {
        return Err(Error::InvalidData {
            path: root.into(),
            msg: "no subject directories".into(),
        });
    }
    ids.iter().map(|id| read_subject(root, id)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub subjects: usize,
    pub dims: [usize; 3],
    pub slices: usize,
    pub lesion_voxels: usize,
    pub subjects_without_lesions: usize,
}

/// Checks files, shared dims, finiteness and binary labels for the whole
/// cohort. Every subject must have the same dims.
pub fn validate_dataset(root: &Path) -> Result<DatasetSummary> {
    let subjects = load_dataset::<f64>(root)?;
    let dims = subjects[0].dims();
    let mut summary = DatasetSummary {
        subjects: subjects.len(),
        dims,
        slices: 0,
        lesion_voxels: 0,
        subjects_without_lesions: 0,
    };
    for s in &subjects {
        let path = root.join(&s.id);
        if s.dims() != dims {
            return Err(Error::InvalidData {
                path,
                msg: format!("dims {:?} differ from cohort dims {dims:?}", s.dims()),
            });
        }
        for v in [&s.t1, &s.flair] {
            if v.voxels().iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidData {
                    path,
                    msg: format!("{} volume has non-finite voxels", v.modality().file_stem()),
                });
            }
        }
        debug_assert!(is_binary(s.label.voxels()));
        let positives = s.label.positives();
        summary.lesion_voxels += positives;
        summary.subjects_without_lesions += usize::from(positives == 0);
        summary.slices += s.dims()[0];
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume<f64> {
        let n = dims.iter().product();
        Volume::new(dims, (0..n).map(|i| i as f64 * 0.37 - 3.0).collect(), Modality::T1).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mvol");
        let v = ramp([2, 3, 4]);
        write_volume(&v, &path).unwrap();
        let back: Volume<f64> = read_volume(&path, Modality::T1).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn file_size_follows_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mvol");
        write_volume(&ramp([2, 3, 4]), &path).unwrap();
        // header plus 2*3*4 little-endian f64 voxels
        assert_eq!(fs::metadata(&path).unwrap().len(), 16 + 24 * 8);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MVOL");
        assert_eq!(&bytes[4..16], &[2, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0]);
    }

    #[test]
    fn structural_errors() {
        let p = Path::new("mem");
        let mut bytes = encode(&ramp([1, 2, 2]));
        assert!(matches!(
            decode::<f64>(&bytes[..bytes.len() - 1], p, Modality::T1),
            Err(Error::Truncated { expected: 48, actual: 47, .. })
        ));
        assert!(matches!(decode::<f64>(&bytes[..10], p, Modality::T1), Err(Error::Truncated { .. })));
        let mut huge = bytes.clone();
        huge[4..16].copy_from_slice(&[0xff; 12]);
        assert!(matches!(decode::<f64>(&huge, p, Modality::T1), Err(Error::DimOverflow { .. })));
        bytes[0] = b'N';
        assert!(matches!(decode::<f64>(&bytes, p, Modality::T1), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn non_binary_label_file_is_rejected() {
        let bytes = encode(&ramp([1, 1, 3]));
        let err = decode::<f64>(&bytes, Path::new("x"), Modality::Label).unwrap_err();
        assert!(matches!(err, Error::InvalidData { .. }));
    }

    #[test]
    fn dataset_layout_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dims = [1, 2, 2];
        let t1 = ramp(dims);
        let flair = ramp(dims).with_modality(Modality::Flair).unwrap();
        let label = Volume::new(dims, vec![0.0, 1.0, 1.0, 0.0], Modality::Label).unwrap();
        let s = Subject::new("sub-01", t1, flair, label).unwrap();
        write_subject(dir.path(), &s).unwrap();
        assert!(dir.path().join("sub-01/flair.mvol").is_file());
        let loaded: Vec<Subject<f64>> = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, vec![s]);
        let summary = validate_dataset(dir.path()).unwrap();
        assert_eq!(summary.lesion_voxels, 2);
        fs::remove_file(dir.path().join("sub-01/label.mvol")).unwrap();
        assert!(validate_dataset(dir.path()).is_err());
    }
}
