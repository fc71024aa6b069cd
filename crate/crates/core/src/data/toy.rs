//! Deterministic synthetic classification task.
//!
//! Each class owns a smooth template (three random 2-D cosines per channel).
//! Samples add Gaussian pixel noise, a global brightness offset and a small
//! integer translation, so template identity carries the content while
//! noise and brightness act as style.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const COSINES_PER_CHANNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub classes: usize,
    /// Samples generated per class before the 80/20 split.
    pub per_class: usize,
    /// `(C, H, W)`.
    pub shape: [usize; 3],
    /// Std of the per-pixel Gaussian noise.
    pub noise: f64,
    /// Half-width of the uniform per-sample brightness offset.
    pub brightness: f64,
    /// Largest absolute per-axis translation in pixels.
    pub max_shift: i64,
    /// Peak absolute deviation of a template from mid-gray.
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            classes: 4,
            per_class: 500,
            shape: [3, 16, 16],
            noise: 0.3,
            brightness: 0.2,
            max_shift: 2,
            amplitude: 0.17,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy)]
struct Cosine {
    amp: f64,
    fx: f64,
    fy: f64,
    phase: f64,
}

struct Template {
    /// Per channel: cosine components and the amplitude normalizer.
    channels: Vec<(Vec<Cosine>, f64)>,
}

impl Template {
    fn draw(shape: [usize; 3], amplitude: f64, rng: &mut ChaCha8Rng) -> Self {
        let [c, h, w] = shape;
        let channels = (0..c)
            .map(|_| {
                let waves: Vec<Cosine> = (0..COSINES_PER_CHANNEL)
                    .map(|_| Cosine {
                        amp: rng.random_range(0.5..1.0),
                        fx: rng.random_range(-2.0..2.0),
                        fy: rng.random_range(-2.0..2.0),
                        phase: rng.random_range(0.0..2.0 * PI),
                    })
                    .collect();
                let peak = (0..h)
                    .flat_map(|y| (0..w).map(move |x| (x, y)))
                    .map(|(x, y)| eval(&waves, x as f64, y as f64, h, w).abs())
                    .fold(0.0, f64::max)
                    .max(1e-9);
                (waves, amplitude / peak)
            })
            .collect();
        Template { channels }
    }
}

fn eval(waves: &[Cosine], x: f64, y: f64, h: usize, w: usize) -> f64 {
    waves
        .iter()
        .map(|c| c.amp * (2.0 * PI * (c.fx * x / w as f64 + c.fy * y / h as f64) + c.phase).cos())
        .sum()
}

/// Builds `(train, test)` with an 80/20 split per class; both are normalized
/// with statistics fitted on the train split.
pub fn gen_toy_dataset(cfg: &ToyConfig) -> Result<(Dataset, Dataset)> {
    if cfg.classes < 2 {
        return Err(Error::config("toy dataset needs at least two classes"));
    }
    if cfg.per_class < 2 || !(cfg.noise >= 0.0) || !(cfg.brightness >= 0.0) || cfg.max_shift < 0 || !(cfg.amplitude > 0.0) {
        return Err(Error::config("invalid toy dataset parameters"));
    }
    let [c, h, w] = cfg.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let templates: Vec<Template> = (0..cfg.classes).map(|_| Template::draw(cfg.shape, cfg.amplitude, &mut rng)).collect();
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("non-negative std");
    let n_train = (cfg.per_class * 4) / 5;
    let (mut train_px, mut test_px) = (Vec::new(), Vec::new());
    let (mut train_y, mut test_y) = (Vec::new(), Vec::new());
    for (label, t) in templates.iter().enumerate() {
        for i in 0..cfg.per_class {
            let shift = |rng: &mut ChaCha8Rng| {
                if cfg.max_shift == 0 {
                    0
                } else {
                    rng.random_range(-cfg.max_shift..=cfg.max_shift)
                }
            };
            let (dx, dy) = (shift(&mut rng), shift(&mut rng));
            let bright = if cfg.brightness > 0.0 {
                rng.random_range(-cfg.brightness..cfg.brightness)
            } else {
                0.0
            };
            let (px, ys) = if i < n_train {
                (&mut train_px, &mut train_y)
            } else {
                (&mut test_px, &mut test_y)
            };
            for (waves, scale) in &t.channels {
                for y in 0..h {
                    for x in 0..w {
                        let base = eval(waves, (x as i64 - dx) as f64, (y as i64 - dy) as f64, h, w) * scale;
                        let n = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        px.push((0.5 + base + bright + n) as f32);
                    }
                }
            }
            ys.push(label);
        }
    }
    let train_raw = Tensor::new([train_y.len(), c, h, w], train_px)?;
    let test_raw = Tensor::new([test_y.len(), c, h, w], test_px)?;
    let train = Dataset::from_raw(train_raw, train_y, cfg.classes, None)?;
    let test = Dataset::from_raw(test_raw, test_y, cfg.classes, Some(train.norm()))?;
    Ok((train, test))
}
