//! Binary container for a synthetic set.
//!
//! Layout, all little-endian: `b"DDMC"`, `u16` version, `u32` count, C, H, W
//! and class count, per-channel `f32` mean then `f32` std, `count*C*H*W`
//! `f32` pixels image-major, then `count` `u32` labels.

use std::fs;
use std::path::Path;

use super::Normalization;
use crate::autodiff::{Real, Tensor};
use crate::condense::SyntheticSet;
use crate::error::{Error, Result};

pub const CONDENSED_MAGIC: [u8; 4] = *b"DDMC";
pub const CONDENSED_VERSION: u16 = 1;

const HEADER_BYTES: usize = 4 + 2 + 5 * 4;

pub fn encode_condensed<T: Real>(syn: &SyntheticSet<T>) -> Vec<u8> {
    let [c, h, w] = syn.image_shape();
    let count = syn.labels().len();
    let mut out = Vec::with_capacity(HEADER_BYTES + 8 * c + 4 * count * (c * h * w + 1));
    out.extend_from_slice(&CONDENSED_MAGIC);
    out.extend_from_slice(&CONDENSED_VERSION.to_le_bytes());
    for v in [count, c, h, w, syn.num_classes()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let norm = syn.norm();
    for v in norm.mean.iter().chain(&norm.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &p in syn.pixels().data() {
        out.extend_from_slice(&(p.as_f64() as f32).to_le_bytes());
    }
    for &l in syn.labels() {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("file ends inside {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(n * 4, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode_condensed(bytes: &[u8]) -> Result<SyntheticSet<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CONDENSED_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic, not a condensed set".into(),
        });
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != CONDENSED_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("header")?;
    let c = r.u32("header")?;
    let h = r.u32("header")?;
    let w = r.u32("header")?;
    let classes = r.u32("header")?;
    if c == 0 || h == 0 || w == 0 || classes == 0 || count == 0 || count % classes != 0 {
        return Err(Error::Format {
            offset: 6,
            detail: format!("inconsistent header: count {count}, shape {c}x{h}x{w}, {classes} classes"),
        });
    }
    let expected = HEADER_BYTES as u128 + 8 * c as u128 + 4 * count as u128 * (c as u128 * h as u128 * w as u128 + 1);
    if bytes.len() as u128 != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected as usize) as u64,
            detail: format!("file is {} bytes, header implies {expected}", bytes.len()),
        });
    }
    let mean = r.f32s(c, "normalization")?;
    let std = r.f32s(c, "normalization")?;
    let pixels = r.f32s(count * c * h * w, "pixels")?;
    let label_start = r.pos;
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(r.u32("labels")?);
    }
    SyntheticSet::from_parts(
        Tensor::new([count, c, h, w], pixels)?,
        labels,
        count / classes,
        classes,
        Normalization { mean, std },
    )
    .map_err(|e| Error::Format {
        offset: label_start as u64,
        detail: e.to_string(),
    })
}

pub fn save_condensed<T: Real>(syn: &SyntheticSet<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_condensed(syn))?;
    Ok(())
}

pub fn load_condensed(path: impl AsRef<Path>) -> Result<SyntheticSet<f32>> {
    decode_condensed(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> SyntheticSet<f32> {
        let pixels: Vec<f32> = (0..6 * 3 * 4 * 2).map(|i| (i as f32 * 0.731).sin() * 1e3).collect();
        SyntheticSet::from_parts(
            Tensor::new([6, 3, 4, 2], pixels).unwrap(),
            vec![0, 0, 1, 1, 2, 2],
            2,
            3,
            Normalization {
                mean: vec![0.1, 0.2, f32::MIN_POSITIVE],
                std: vec![1.5, 0.25, 3.0],
            },
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = sample_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ddmc");
        save_condensed(&s, &path).unwrap();
        let back = load_condensed(&path).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.pixels()), bits(s.pixels()));
        assert_eq!(back, s);
    }

    #[test]
    fn file_size_matches_layout() {
        let s = sample_set();
        let (count, c, h, w) = (6, 3, 4, 2);
        assert_eq!(encode_condensed(&s).len(), 4 + 2 + 5 * 4 + 2 * c * 4 + count * c * h * w * 4 + count * 4);
    }

    #[test]
    fn header_corruption_is_rejected() {
        let bytes = encode_condensed(&sample_set());
        for (i, want) in [(0usize, 0u64), (3, 0), (4, 4), (5, 4)] {
            let mut bad = bytes.clone();
            bad[i] ^= 0xff;
            match decode_condensed(&bad) {
                Err(Error::Format { offset, .. }) => assert_eq!(offset, want, "byte {i}"),
                other => panic!("byte {i}: {other:?}"),
            }
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let bytes = encode_condensed(&sample_set());
        assert!(decode_condensed(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_condensed(&long).is_err());
        let mut bad_label = bytes;
        let n = bad_label.len();
        bad_label[n - 4] = 7;
        assert!(matches!(decode_condensed(&bad_label), Err(Error::Format { .. })));
    }
}
