//! Configurable ConvNet with randomly sampled parameters.
//!
//! Each block is `conv3x3 -> instance norm -> relu -> avgpool(2)`. Style
//! statistics are read from the post-activation, pre-pool maps; the content
//! embedding is the flattened output of the last pool.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub depth: usize,
    pub width: usize,
    /// `(C, H, W)` of one input image.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl NetworkSpec {
    /// Spec with the conventional depth for the input resolution
    /// (3 blocks at 32px, 4 at 64px, 5 at 128px; 2 below 32px).
    pub fn for_input(input_shape: [usize; 3], width: usize, num_classes: usize) -> Self {
        let depth = match input_shape[1] {
            h if h >= 128 => 5,
            h if h >= 64 => 4,
            h if h >= 32 => 3,
            _ => 2,
        };
        NetworkSpec {
            depth,
            width,
            input_shape,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if !(2..=5).contains(&self.depth) {
            return Err(Error::config(format!("depth {} outside 2..=5", self.depth)));
        }
        if self.width == 0 || c == 0 || self.num_classes == 0 {
            return Err(Error::config("width, channels and num_classes must be positive"));
        }
        let f = 1 << self.depth;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::config(format!(
                "input {h}x{w} not divisible by 2^{} = {f}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Spatial size of the final pooled maps.
    pub fn final_hw(&self) -> (usize, usize) {
        (self.input_shape[1] >> self.depth, self.input_shape[2] >> self.depth)
    }

    pub fn embedding_dim(&self) -> usize {
        let (h, w) = self.final_hw();
        self.width * h * w
    }
}

/// Ordered, duplicate-free set of block indices whose maps feed the style
/// losses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSet(Vec<usize>);

impl LayerSet {
    pub fn new(mut layers: Vec<usize>) -> Self {
        layers.sort_unstable();
        layers.dedup();
        LayerSet(layers)
    }

    pub fn all(depth: usize) -> Self {
        LayerSet((0..depth).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.binary_search(&layer).is_ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial size of the block's pre-pool maps.
    pub height: usize,
    pub width: usize,
}

/// Validated architecture, shared by every parameter draw.
#[derive(Clone, Debug)]
pub struct NetworkTemplate {
    spec: NetworkSpec,
    blocks: Vec<BlockShape>,
}

pub fn build_convnet(spec: &NetworkSpec) -> Result<NetworkTemplate> {
    spec.validate()?;
    let [c, mut h, mut w] = spec.input_shape;
    let mut blocks = Vec::with_capacity(spec.depth);
    let mut in_channels = c;
    for _ in 0..spec.depth {
        blocks.push(BlockShape {
            in_channels,
            out_channels: spec.width,
            height: h,
            width: w,
        });
        in_channels = spec.width;
        h /= 2;
        w /= 2;
    }
    Ok(NetworkTemplate {
        spec: spec.clone(),
        blocks,
    })
}

impl NetworkTemplate {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[BlockShape] {
        &self.blocks
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim()
    }

    pub fn all_layers(&self) -> LayerSet {
        LayerSet::all(self.spec.depth)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// One realization of the network weights.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T = f32> {
    pub seed: u64,
    pub blocks: Vec<ConvParams<T>>,
    pub head: Option<LinearParams<T>>,
}

fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Draws conv weights from `N(0, sqrt(2 / fan_in))` with zero biases; the
/// same `(template, seed)` always yields bitwise-identical parameters.
pub fn sample_params<T: Real>(template: &NetworkTemplate, seed: u64) -> NetworkParams<T> {
    sample(template, seed, false)
}

/// Like [`sample_params`], plus a linear classifier head.
pub fn sample_params_with_head<T: Real>(template: &NetworkTemplate, seed: u64) -> NetworkParams<T> {
    sample(template, seed, true)
}

fn sample<T: Real>(template: &NetworkTemplate, seed: u64, head: bool) -> NetworkParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = template
        .blocks
        .iter()
        .map(|b| ConvParams {
            weight: he_normal(
                &[b.out_channels, b.in_channels, KERNEL, KERNEL],
                b.in_channels * KERNEL * KERNEL,
                &mut rng,
            ),
            bias: Tensor::zeros([b.out_channels]),
        })
        .collect();
    let head = head.then(|| {
        let d = template.embedding_dim();
        let k = template.spec.num_classes;
        LinearParams {
            weight: he_normal(&[k, d], d, &mut rng),
            bias: Tensor::zeros([k]),
        }
    });
    NetworkParams { seed, blocks, head }
}

impl<T: Real> NetworkParams<T> {
    /// Records every parameter as a graph leaf.
    pub fn attach(&self, graph: &mut Graph<T>, requires_grad: bool) -> AttachedParams {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                (
                    graph.leaf(b.weight.clone(), requires_grad),
                    graph.leaf(b.bias.clone(), requires_grad),
                )
            })
            .collect();
        let head = self.head.as_ref().map(|h| {
            (
                graph.leaf(h.weight.clone(), requires_grad),
                graph.leaf(h.bias.clone(), requires_grad),
            )
        });
        AttachedParams { blocks, head }
    }

    /// All parameter tensors, in the order of [`AttachedParams::vars`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        if let Some(h) = &mut self.head {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }
}

/// Graph handles of a parameter set.
#[derive(Clone, Debug)]
pub struct AttachedParams {
    blocks: Vec<(Var, Var)>,
    head: Option<(Var, Var)>,
}

impl AttachedParams {
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.blocks.iter().flat_map(|&(w, b)| [w, b]).collect();
        if let Some((w, b)) = self.head {
            out.extend([w, b]);
        }
        out
    }
}

/// Features of one batch under one parameter draw.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    layers: LayerSet,
    /// Post-activation, pre-pool maps, one per entry of `layers`.
    pub block_maps: Vec<Var>,
    /// `[N, d]` flattened output of the final block.
    pub embedding: Var,
}

impl FeatureBundle {
    pub fn new(layers: LayerSet, block_maps: Vec<Var>, embedding: Var) -> Result<Self> {
        if layers.len() != block_maps.len() {
            return Err(Error::config("one block map per layer required"));
        }
        Ok(FeatureBundle {
            layers,
            block_maps,
            embedding,
        })
    }

    pub fn layers(&self) -> &LayerSet {
        &self.layers
    }

    pub fn map(&self, layer: usize) -> Option<Var> {
        self.layers
            .as_slice()
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.block_maps[i])
    }
}

/// Runs the conv blocks over `batch`, collecting the maps named in `layers`.
pub fn extract_features<T: Real>(
    graph: &mut Graph<T>,
    template: &NetworkTemplate,
    params: &AttachedParams,
    batch: Var,
    layers: &LayerSet,
) -> Result<FeatureBundle> {
    forward_with_hook(graph, template, params, batch, layers, |_, _, v| Ok(v))
}

/// [`extract_features`] with a hook that may replace each block's
/// post-activation map before pooling.
pub fn forward_with_hook<T: Real>(
    graph: &mut Graph<T>,
    template: &NetworkTemplate,
    params: &AttachedParams,
    batch: Var,
    layers: &LayerSet,
    mut hook: impl FnMut(usize, &mut Graph<T>, Var) -> Result<Var>,
) -> Result<FeatureBundle> {
    let depth = template.spec.depth;
    if let Some(&bad) = layers.as_slice().iter().find(|&&l| l >= depth) {
        return Err(Error::config(format!("layer {bad} out of range for depth {depth}")));
    }
    let [c, h, w] = template.spec.input_shape;
    let shape = graph.shape(batch);
    if shape.len() != 4 || shape[1..] != [c, h, w] {
        return Err(Error::shape(
            "extract_features",
            format!("batch {shape:?} does not match input [{c}, {h}, {w}]"),
        ));
    }
    let mut x = batch;
    let mut block_maps = Vec::with_capacity(layers.len());
    for (i, &(wv, bv)) in params.blocks.iter().enumerate() {
        let y = graph.conv2d(x, wv, bv, 1, 1)?;
        let y = graph.instance_norm2d(y, T::of(NORM_EPS))?;
        let y = graph.relu(y);
        let y = hook(i, graph, y)?;
        if layers.contains(i) {
            block_maps.push(y);
        }
        x = graph.avg_pool2d(y, 2)?;
    }
    let embedding = graph.flatten(x)?;
    Ok(FeatureBundle {
        layers: layers.clone(),
        block_maps,
        embedding,
    })
}

/// Classifier logits from an embedding; requires a head.
pub fn logits<T: Real>(graph: &mut Graph<T>, params: &AttachedParams, embedding: Var) -> Result<Var> {
    let (w, b) = params
        .head
        .ok_or_else(|| Error::config("network has no classifier head"))?;
    graph.linear(embedding, w, b)
}

/// Forward pass to logits for a batch of images, without recording gradients
/// into the parameters.
pub fn predict<T: Real>(template: &NetworkTemplate, params: &NetworkParams<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let attached = params.attach(&mut g, false);
    let x = g.constant(images.clone());
    let f = extract_features(&mut g, template, &attached, x, &LayerSet::new(vec![]))?;
    let out = logits(&mut g, &attached, f.embedding)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(depth: usize, width: usize, hw: usize) -> NetworkSpec {
        NetworkSpec {
            depth,
            width,
            input_shape: [3, hw, hw],
            num_classes: 10,
        }
    }

    #[test]
    fn embedding_dimension_examples() {
        let t = build_convnet(&spec(3, 32, 32)).unwrap();
        assert_eq!(t.embedding_dim(), 32 * 4 * 4);
        let t = build_convnet(&spec(4, 8, 64)).unwrap();
        assert_eq!(t.spec().final_hw(), (4, 4));
        assert_eq!(t.blocks().len(), 4);
        assert!(build_convnet(&spec(3, 32, 30)).is_err());
        assert!(build_convnet(&spec(6, 32, 128)).is_err());
    }

    #[test]
    fn embedding_dimension_matches_forward_pass() {
        for depth in 2..=4 {
            for width in [1, 3] {
                for hw in [16, 32] {
                    let s = spec(depth, width, hw);
                    let Ok(t) = build_convnet(&s) else {
                        assert!(hw % (1 << depth) != 0);
                        continue;
                    };
                    let p = sample_params::<f32>(&t, 1);
                    let mut g = Graph::new();
                    let a = p.attach(&mut g, false);
                    let x = g.constant(Tensor::zeros([2, 3, hw, hw]));
                    let f = extract_features(&mut g, &t, &a, x, &t.all_layers()).unwrap();
                    assert_eq!(g.shape(f.embedding), [2, s.embedding_dim()]);
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let t = build_convnet(&spec(3, 32, 32)).unwrap();
        let a = sample_params_with_head::<f32>(&t, 7);
        let b = sample_params_with_head::<f32>(&t, 7);
        let c = sample_params_with_head::<f32>(&t, 8);
        assert_eq!(a, b);
        assert_ne!(a.blocks[0].weight, c.blocks[0].weight);
    }

    #[test]
    fn conv_weight_scale_follows_fan_in() {
        let t = build_convnet(&spec(3, 32, 32)).unwrap();
        let p = sample_params::<f64>(&t, 3);
        // second block: 32 -> 32 channels, fan_in = 288
        let w = p.blocks[1].weight.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = (2.0f64 / 288.0).sqrt();
        assert!((std - target).abs() < 0.2 * target, "{std} vs {target}");
        assert!(p.blocks.iter().all(|b| b.bias.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn block_maps_have_pre_pool_sizes() {
        let t = build_convnet(&spec(3, 4, 32)).unwrap();
        let p = sample_params::<f32>(&t, 0);
        let mut g = Graph::new();
        let a = p.attach(&mut g, false);
        let x = g.constant(Tensor::zeros([1, 3, 32, 32]));
        let f = extract_features(&mut g, &t, &a, x, &LayerSet::new(vec![0, 1, 2])).unwrap();
        let sizes: Vec<usize> = f.block_maps.iter().map(|&m| g.shape(m)[2]).collect();
        assert_eq!(sizes, [32, 16, 8]);
        let x2 = g.constant(Tensor::zeros([1, 3, 32, 32]));
        assert!(extract_features(&mut g, &t, &a, x2, &LayerSet::new(vec![3])).is_err());
    }

    #[test]
    fn samples_are_processed_independently() {
        let t = build_convnet(&spec(2, 4, 16)).unwrap();
        let p = sample_params::<f32>(&t, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let batch = Tensor::<f32>::new([4, 3, 16, 16], (0..4 * 768).map(|_| dist.sample(&mut rng) as f32).collect()).unwrap();
        let embed = |x: Tensor<f32>| {
            let mut g = Graph::new();
            let a = p.attach(&mut g, false);
            let xv = g.constant(x);
            let f = extract_features(&mut g, &t, &a, xv, &t.all_layers()).unwrap();
            g.value(f.embedding).clone()
        };
        let full = embed(batch.clone());
        let single = embed(batch.select_rows(&[2]));
        for (a, b) in full.row(2).iter().zip(single.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        let permuted = embed(batch.select_rows(&[3, 1, 0, 2]));
        for (dst, src) in [(0, 3), (1, 1), (2, 0), (3, 2)] {
            assert_eq!(permuted.row(dst), full.row(src));
        }
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let t = build_convnet(&spec(2, 4, 16)).unwrap();
        let p = sample_params::<f64>(&t, 4);
        let mut g = Graph::new();
        let a = p.attach(&mut g, false);
        let x = g.leaf(Tensor::full([1, 3, 16, 16], 0.5), true);
        let f = extract_features(&mut g, &t, &a, x, &t.all_layers()).unwrap();
        let s = g.sum(f.embedding);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_some());
        assert!(a.vars().iter().all(|&v| grads.get(v).is_none()));
    }
}
