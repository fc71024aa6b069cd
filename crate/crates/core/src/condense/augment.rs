use rand::Rng;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::Result;

/// Largest brightness offset, in normalized units.
pub const MAX_BRIGHTNESS: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentOp {
    None,
    /// Horizontal mirror.
    Flip,
    /// Shift by `(dx, dy)` pixels with zero fill.
    Translate { dx: isize, dy: isize },
    /// Add a constant to every pixel.
    Brightness(f64),
}

/// One augmentation draw, shared by the real and synthetic batch of a class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub op: AugmentOp,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { op: AugmentOp::None };

    /// Picks flip, translate or brightness uniformly, then its parameters.
    /// Shifts lie in `[-H/8, H/8]` per axis.
    pub fn draw<R: Rng>(rng: &mut R, height: usize) -> Self {
        let max_shift = (height / 8) as i64;
        let op = match rng.random_range(0..3) {
            0 => AugmentOp::Flip,
            1 => AugmentOp::Translate {
                dx: rng.random_range(-max_shift..=max_shift) as isize,
                dy: rng.random_range(-max_shift..=max_shift) as isize,
            },
            _ => AugmentOp::Brightness(rng.random_range(-MAX_BRIGHTNESS..=MAX_BRIGHTNESS)),
        };
        AugmentParams { op }
    }
}

/// Applies `params` to an `[N,C,H,W]` batch inside the graph, so gradients
/// reach the input pixels.
pub fn dsa_augment<T: Real>(graph: &mut Graph<T>, batch: Var, params: AugmentParams) -> Result<Var> {
    match params.op {
        AugmentOp::None => Ok(batch),
        AugmentOp::Flip => graph.flip_w(batch),
        AugmentOp::Translate { dx, dy } => graph.translate(batch, dx, dy),
        AugmentOp::Brightness(delta) => Ok(graph.add_scalar(batch, T::of(delta))),
    }
}

/// Applies `params` to a plain tensor.
pub fn augment_tensor<T: Real>(batch: &Tensor<T>, params: AugmentParams) -> Tensor<T> {
    let w = *batch.shape().last().expect("image batch");
    let h = batch.shape()[batch.shape().len() - 2];
    match params.op {
        AugmentOp::None => batch.clone(),
        AugmentOp::Flip => crate::autodiff::flip_rows(batch, w),
        AugmentOp::Translate { dx, dy } => {
            let mut out = Tensor::zeros(batch.shape().to_vec());
            crate::autodiff::shift_planes(batch.data(), out.data_mut(), h, w, dx, dy);
            out
        }
        AugmentOp::Brightness(delta) => batch.map(|v| v + T::of(delta)),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn through_graph(t: &Tensor<f64>, p: AugmentParams) -> Tensor<f64> {
        let mut g = Graph::new();
        let x = g.leaf(t.clone(), true);
        let y = dsa_augment(&mut g, x, p).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn translate_example() {
        let t = Tensor::<f64>::new([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let p = AugmentParams {
            op: AugmentOp::Translate { dx: 1, dy: 0 },
        };
        assert_eq!(through_graph(&t, p).data(), [0., 1., 0., 3.]);
        assert_eq!(augment_tensor(&t, p).data(), [0., 1., 0., 3.]);
    }

    #[test]
    fn identity_and_flip_involution() {
        let t = Tensor::<f64>::new([1, 2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(through_graph(&t, AugmentParams::IDENTITY), t);
        let flip = AugmentParams { op: AugmentOp::Flip };
        let once = through_graph(&t, flip);
        assert_eq!(once.row(0)[..3], [2., 1., 0.]);
        assert_eq!(through_graph(&once, flip), t);
    }

    #[test]
    fn graph_and_tensor_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::<f64>::new([2, 3, 8, 8], (0..384).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        for _ in 0..30 {
            let p = AugmentParams::draw(&mut rng, 8);
            if let AugmentOp::Translate { dx, dy } = p.op {
                assert!(dx.abs() <= 1 && dy.abs() <= 1);
            }
            if let AugmentOp::Brightness(d) = p.op {
                assert!(d.abs() <= MAX_BRIGHTNESS);
            }
            assert_eq!(through_graph(&t, p), augment_tensor(&t, p));
        }
    }
}
