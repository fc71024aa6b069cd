use std::fs;
use std::path::Path;

use super::{Dataset, Normalization};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;

/// Record layout of the CIFAR binary distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarLayout {
    /// One label byte per record, 10 classes.
    Cifar10,
    /// Coarse and fine label bytes per record; the fine label (100 classes)
    /// is used.
    Cifar100,
}

impl CifarLayout {
    fn label_bytes(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 1,
            CifarLayout::Cifar100 => 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 10,
            CifarLayout::Cifar100 => 100,
        }
    }

    pub fn record_bytes(self) -> usize {
        self.label_bytes() + CIFAR_IMAGE_BYTES
    }
}

/// Reads CIFAR binary batch files in order. Pixels are scaled to `[0,1]`
/// and normalized with `norm`, or with statistics fitted on the loaded
/// images when `norm` is `None`.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P], layout: CifarLayout, norm: Option<&Normalization>) -> Result<Dataset> {
    let rec = layout.record_bytes();
    let classes = layout.num_classes();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path)?;
        if bytes.len() % rec != 0 {
            return Err(Error::Format {
                offset: (bytes.len() - bytes.len() % rec) as u64,
                detail: format!(
                    "{}: truncated record ({} trailing bytes, records are {rec} bytes)",
                    path.as_ref().display(),
                    bytes.len() % rec
                ),
            });
        }
        for (r, record) in bytes.chunks_exact(rec).enumerate() {
            let label_at = layout.label_bytes() - 1;
            let label = record[label_at] as usize;
            if label >= classes {
                return Err(Error::Format {
                    offset: (r * rec + label_at) as u64,
                    detail: format!("{}: label {label} >= {classes}", path.as_ref().display()),
                });
            }
            labels.push(label);
            pixels.extend(record[layout.label_bytes()..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::Format {
            offset: 0,
            detail: "no records".into(),
        });
    }
    let raw = Tensor::new([labels.len(), 3, 32, 32], pixels)?;
    Dataset::from_raw(raw, labels, classes, norm)
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn record(label: &[u8], fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = label.to_vec();
        r.extend((0..CIFAR_IMAGE_BYTES).map(fill));
        r
    }

    #[test]
    fn two_record_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(&record(&[3], |i| (i % 256) as u8)).unwrap();
        f.write_all(&record(&[7], |_| 0)).unwrap();
        drop(f);
        let id = Normalization::identity(3);
        let d = load_cifar_binary(&[&path], CifarLayout::Cifar10, Some(&id)).unwrap();
        assert_eq!(d.labels(), [3, 7]);
        assert_eq!(d.image_shape(), [3, 32, 32]);
        // R plane first, row-major
        assert_eq!(d.images().row(0)[5], 5.0 / 255.0);
        assert_eq!(d.images().row(0)[1024 + 1], (1025 % 256) as f32 / 255.0);
        assert!(d.images().row(1).iter().all(|&v| v == 0.0));

        let fitted = load_cifar_binary(&[&path], CifarLayout::Cifar10, None).unwrap();
        let n = fitted.norm();
        for ch in 0..3 {
            let v = fitted.images().row(1)[ch * 1024];
            assert!((v - (0.0 - n.mean[ch]) / n.std[ch]).abs() < 1e-6);
        }
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.bin");
        fs::write(&path, record(&[2, 57], |_| 128)).unwrap();
        let d = load_cifar_binary(&[&path], CifarLayout::Cifar100, None).unwrap();
        assert_eq!(d.labels(), [57]);
        assert_eq!(d.num_classes(), 100);
    }

    #[test]
    fn truncated_file_names_the_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut bytes = record(&[1], |_| 0);
        bytes.extend([0u8; 10]);
        fs::write(&path, bytes).unwrap();
        match load_cifar_binary(&[&path], CifarLayout::Cifar10, None) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut bytes = record(&[1], |_| 0);
        bytes.extend(record(&[10], |_| 0));
        fs::write(&path, bytes).unwrap();
        match load_cifar_binary(&[&path], CifarLayout::Cifar10, None) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("unexpected {other:?}"),
        }
    }
}
