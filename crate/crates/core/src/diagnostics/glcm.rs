//! Gray-level co-occurrence texture features.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::table::sig6;

#[derive(Clone, Debug, PartialEq)]
pub struct GlcmConfig {
    pub levels: usize,
    /// `(row, column)` displacements.
    pub offsets: Vec<(isize, isize)>,
    pub kernels: Vec<usize>,
    pub symmetric: bool,
}

impl Default for GlcmConfig {
    fn default() -> Self {
        GlcmConfig {
            levels: 8,
            offsets: vec![(0, 1)],
            kernels: vec![3, 5],
            symmetric: true,
        }
    }
}

impl GlcmConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::config("GLCM needs at least two gray levels"));
        }
        if self.offsets.is_empty() || self.kernels.is_empty() {
            return Err(Error::config("GLCM needs at least one offset and one kernel"));
        }
        for &k in &self.kernels {
            if k % 2 == 0 || k > height || k > width {
                return Err(Error::config(format!("kernel {k} must be odd and fit a {height}x{width} image")));
            }
        }
        for &(di, dj) in &self.offsets {
            let k = *self.kernels.iter().min().expect("non-empty") as isize;
            if di.abs() >= k || dj.abs() >= k {
                return Err(Error::config(format!("offset ({di},{dj}) leaves no pair inside a {k}x{k} window")));
            }
        }
        Ok(())
    }
}

/// `floor(x * n)` clamped to `[0, n - 1]`.
pub fn quantize(x: f64, levels: usize) -> usize {
    let q = (x * levels as f64).floor();
    if q.is_nan() || q < 0.0 {
        0
    } else {
        (q as usize).min(levels - 1)
    }
}

/// Mean dissimilarity and entropy over every window position and kernel
/// size of a `[0,1]` grayscale image stored row-major.
pub fn glcm_features(gray: &[f64], height: usize, width: usize, cfg: &GlcmConfig) -> Result<(f64, f64)> {
    if gray.len() != height * width {
        return Err(Error::shape("glcm_features", "pixel count differs from height x width"));
    }
    cfg.validate(height, width)?;
    let n = cfg.levels;
    let q: Vec<usize> = gray.iter().map(|&x| quantize(x, n)).collect();
    let mut counts = vec![0u32; n * n];
    let (mut dis_sum, mut ent_sum) = (0.0, 0.0);
    for &k in &cfg.kernels {
        let (mut dis_k, mut ent_k) = (0.0, 0.0);
        let positions = (height - k + 1) * (width - k + 1);
        for r0 in 0..=height - k {
            for c0 in 0..=width - k {
                counts.iter_mut().for_each(|c| *c = 0);
                let mut total = 0u32;
                for &(di, dj) in &cfg.offsets {
                    for r in 0..k as isize {
                        for c in 0..k as isize {
                            let (r2, c2) = (r + di, c + dj);
                            if r2 < 0 || c2 < 0 || r2 >= k as isize || c2 >= k as isize {
                                continue;
                            }
                            let a = q[(r0 + r as usize) * width + c0 + c as usize];
                            let b = q[(r0 + r2 as usize) * width + c0 + c2 as usize];
                            counts[a * n + b] += 1;
                            total += 1;
                            if cfg.symmetric {
                                counts[b * n + a] += 1;
                                total += 1;
                            }
                        }
                    }
                }
                let (d, e) = window_features(&counts, n, total);
                dis_k += d;
                ent_k += e;
            }
        }
        dis_sum += dis_k / positions as f64;
        ent_sum += ent_k / positions as f64;
    }
    let nk = cfg.kernels.len() as f64;
    Ok((dis_sum / nk, ent_sum / nk))
}

fn window_features(counts: &[u32], n: usize, total: u32) -> (f64, f64) {
    let (mut dis, mut ent) = (0.0, 0.0);
    for (idx, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let p = c as f64 / total as f64;
        dis += p * (idx / n).abs_diff(idx % n) as f64;
        ent -= p * p.ln();
    }
    (dis, ent)
}

/// Luma grayscale of every image in raw pixel space, one `Vec` per image.
pub fn grayscale_images(set: &Dataset) -> Vec<Vec<f64>> {
    let raw = set.raw_images();
    let [c, h, w] = set.image_shape();
    (0..raw.rows())
        .map(|i| {
            let img = raw.row(i);
            if c == 3 {
                (0..h * w)
                    .map(|p| 0.299 * img[p] as f64 + 0.587 * img[h * w + p] as f64 + 0.114 * img[2 * h * w + p] as f64)
                    .collect()
            } else {
                img[..h * w].iter().map(|&v| v as f64).collect()
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextureRow {
    pub set: String,
    pub dissimilarity: f64,
    pub entropy: f64,
    pub images: usize,
}

pub const TEXTURE_HEADER: &str = "set,dissimilarity,entropy,images";

impl TextureRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.set,
            sig6(self.dissimilarity),
            sig6(self.entropy),
            self.images
        )
    }
}

/// Mean GLCM features per named set.
pub fn texture_report(sets: &[(&str, &Dataset)], cfg: &GlcmConfig) -> Result<Vec<TextureRow>> {
    sets.iter()
        .map(|&(name, set)| {
            if set.is_empty() {
                return Err(Error::config(format!("texture set {name} is empty")));
            }
            let [_, h, w] = set.image_shape();
            let (mut dis, mut ent) = (0.0, 0.0);
            for img in grayscale_images(set) {
                let (d, e) = glcm_features(&img, h, w, cfg)?;
                dis += d;
                ent += e;
            }
            Ok(TextureRow {
                set: name.into(),
                dissimilarity: dis / set.len() as f64,
                entropy: ent / set.len() as f64,
                images: set.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::data::Normalization;

    #[test]
    fn constant_image_has_no_texture() {
        let img = vec![0.4; 36];
        assert_eq!(glcm_features(&img, 6, 6, &GlcmConfig::default()).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn checkerboard_two_levels() {
        let img: Vec<f64> = (0..64).map(|i| if (i / 8 + i % 8) % 2 == 0 { 0.0 } else { 1.0 }).collect();
        let cfg = GlcmConfig {
            levels: 2,
            ..GlcmConfig::default()
        };
        let (d, e) = glcm_features(&img, 8, 8, &cfg).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        assert!((e - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn quantization_edges() {
        assert_eq!(quantize(0.0, 8), 0);
        assert_eq!(quantize(0.124, 8), 0);
        assert_eq!(quantize(0.125, 8), 1);
        assert_eq!(quantize(1.0, 8), 7);
        assert_eq!(quantize(-0.3, 8), 0);
        assert_eq!(quantize(1.7, 8), 7);
    }

    #[test]
    fn bad_configs() {
        let img = vec![0.0; 16];
        for cfg in [
            GlcmConfig {
                levels: 1,
                ..GlcmConfig::default()
            },
            GlcmConfig {
                kernels: vec![4],
                ..GlcmConfig::default()
            },
            GlcmConfig {
                kernels: vec![5],
                ..GlcmConfig::default()
            },
        ] {
            assert!(glcm_features(&img, 4, 4, &cfg).is_err());
        }
    }

    #[test]
    fn report_rows() {
        let raw = Tensor::new([2, 1, 5, 5], (0..50).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let set = Dataset::new(raw, vec![0, 1], 2, Normalization::identity(1)).unwrap();
        let cfg = GlcmConfig::default();
        let rows = texture_report(&[("a", &set), ("b", &set)], &cfg).unwrap();
        assert_eq!(rows[0].dissimilarity, rows[1].dissimilarity);
        assert_eq!(rows[0].entropy, rows[1].entropy);
        let per: Vec<(f64, f64)> = grayscale_images(&set)
            .iter()
            .map(|g| glcm_features(g, 5, 5, &cfg).unwrap())
            .collect();
        assert!((rows[0].dissimilarity - (per[0].0 + per[1].0) / 2.0).abs() < 1e-9);
        assert!((rows[0].entropy - (per[0].1 + per[1].1) / 2.0).abs() < 1e-9);
        assert_eq!(rows[0].csv_line().split(',').count(), 4);
    }
}
