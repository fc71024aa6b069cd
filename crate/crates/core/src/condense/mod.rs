//! Outer optimization of the synthetic pixels.

mod augment;

pub use augment::{augment_tensor, dsa_augment, AugmentOp, AugmentParams, MAX_BRIGHTNESS};

use std::io::{self, Write};

use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Real, Tensor};
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::losses::{extract_pair_features, total_loss, ClassBatchPair, LossBreakdown, LossConfig};
use crate::network::{build_convnet, sample_params, NetworkSpec, NetworkTemplate};
use crate::table::sig6;

/// Learnable images, `ipc` per class, stored class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet<T = f32> {
    pixels: Tensor<T>,
    labels: Vec<usize>,
    ipc: usize,
    num_classes: usize,
    norm: Normalization,
}

impl<T: Real> SyntheticSet<T> {
    pub fn from_parts(pixels: Tensor<T>, labels: Vec<usize>, ipc: usize, num_classes: usize, norm: Normalization) -> Result<Self> {
        if pixels.shape().len() != 4 || pixels.rows() != ipc * num_classes {
            return Err(Error::shape(
                "synthetic set",
                format!("{:?} pixels for {num_classes} classes x {ipc}", pixels.shape()),
            ));
        }
        if ipc == 0 || num_classes == 0 {
            return Err(Error::config("synthetic set needs ipc >= 1 and at least one class"));
        }
        let expected: Vec<usize> = (0..num_classes).flat_map(|c| std::iter::repeat_n(c, ipc)).collect();
        if labels != expected {
            return Err(Error::config("synthetic labels must be class-major with ipc per class"));
        }
        if norm.channels() != pixels.shape()[1] {
            return Err(Error::shape("synthetic set", "normalization channel count differs from pixels"));
        }
        Ok(SyntheticSet {
            pixels,
            labels,
            ipc,
            num_classes,
            norm,
        })
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn norm(&self) -> &Normalization {
        &self.norm
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.pixels.shape();
        [s[1], s[2], s[3]]
    }

    /// The `[ipc, C, H, W]` block of one class.
    pub fn class_pixels(&self, class: usize) -> Tensor<T> {
        let rows: Vec<usize> = (class * self.ipc..(class + 1) * self.ipc).collect();
        self.pixels.select_rows(&rows)
    }

    pub fn cast<U: Real>(&self) -> SyntheticSet<U> {
        SyntheticSet {
            pixels: self.pixels.cast(),
            labels: self.labels.clone(),
            ipc: self.ipc,
            num_classes: self.num_classes,
            norm: self.norm.clone(),
        }
    }

    /// The set as an ordinary labeled dataset.
    pub fn to_dataset(&self) -> Dataset {
        Dataset::new(self.pixels.cast(), self.labels.clone(), self.num_classes, self.norm.clone())
            .expect("a valid synthetic set is a valid dataset")
    }
}

/// Copies `ipc` real images per class, sampled without replacement.
pub fn init_synthetic(real: &Dataset, ipc: usize, seed: u64) -> Result<SyntheticSet<f32>> {
    if ipc == 0 {
        return Err(Error::config("ipc must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(ipc * real.num_classes());
    for class in 0..real.num_classes() {
        let pool = real.class_indices(class);
        if pool.len() < ipc {
            return Err(Error::InsufficientSamples {
                class,
                available: pool.len(),
                requested: ipc,
            });
        }
        rows.extend(index::sample(&mut rng, pool.len(), ipc).into_iter().map(|i| pool[i]));
    }
    let labels = (0..real.num_classes()).flat_map(|c| std::iter::repeat_n(c, ipc)).collect();
    SyntheticSet::from_parts(real.gather(&rows), labels, ipc, real.num_classes(), real.norm().clone())
}

/// Momentum SGD on pixels: `v <- m v + g`, `p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct OptimizerState<T = f32> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Tensor<T>,
    pub iteration: usize,
    pub total_iters: usize,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(syn: &SyntheticSet<T>, lr: f64, momentum: f64, total_iters: usize) -> Result<Self> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(OptimizerState {
            lr,
            momentum,
            velocity: Tensor::zeros(syn.pixels.shape().to_vec()),
            iteration: 0,
            total_iters,
        })
    }

    pub fn velocity(&self) -> &Tensor<T> {
        &self.velocity
    }

    fn apply(&mut self, pixels: &mut Tensor<T>, grad: &Tensor<T>) {
        let (lr, m) = (T::of(self.lr), T::of(self.momentum));
        for ((p, v), &g) in pixels
            .data_mut()
            .iter_mut()
            .zip(self.velocity.data_mut())
            .zip(grad.data())
        {
            *v = m * *v + g;
            *p = *p - lr * *v;
        }
        self.iteration += 1;
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one iteration, a pure function of the master seed.
pub fn derive_seed(master: u64, iteration: u64) -> u64 {
    splitmix64(splitmix64(master) ^ iteration)
}

/// Every random choice of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub theta_seed: u64,
    /// Dataset rows of the real batch, per class.
    pub real_indices: Vec<Vec<usize>>,
    pub augments: Vec<AugmentParams>,
}

impl StepPlan {
    /// Draws the network seed, then per class a real batch (without
    /// replacement, capped at the class size) and one augmentation.
    pub fn draw(real: &Dataset, batch_per_class: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta_seed = rng.next_u64();
        let height = real.image_shape()[1];
        let mut real_indices = Vec::with_capacity(real.num_classes());
        let mut augments = Vec::with_capacity(real.num_classes());
        for class in 0..real.num_classes() {
            let pool = real.class_indices(class);
            let n = batch_per_class.min(pool.len());
            real_indices.push(index::sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect());
            augments.push(AugmentParams::draw(&mut rng, height));
        }
        StepPlan {
            theta_seed,
            real_indices,
            augments,
        }
    }
}

/// Loss and its gradient with respect to every synthetic pixel, under `plan`.
pub fn loss_gradient<T: Real>(
    syn: &SyntheticSet<T>,
    real: &Dataset,
    template: &NetworkTemplate,
    cfg: &LossConfig,
    plan: &StepPlan,
) -> Result<(Tensor<T>, LossBreakdown)> {
    let mut g = Graph::<T>::new();
    let params = sample_params::<T>(template, plan.theta_seed).attach(&mut g, false);
    let mut pairs = Vec::with_capacity(syn.num_classes);
    for class in 0..syn.num_classes {
        let rows = &plan.real_indices[class];
        if rows.is_empty() {
            return Err(Error::EmptyClass(class));
        }
        let real_leaf = g.constant(real.gather(rows).cast());
        let syn_leaf = g.leaf(syn.class_pixels(class), true);
        let aug = plan.augments[class];
        pairs.push((
            syn_leaf,
            ClassBatchPair {
                class_id: class,
                real: dsa_augment(&mut g, real_leaf, aug)?,
                syn: dsa_augment(&mut g, syn_leaf, aug)?,
            },
        ));
    }
    let batch: Vec<ClassBatchPair> = pairs.iter().map(|p| p.1).collect();
    let layers = cfg.resolve_layers(template.spec().depth);
    let feats = extract_pair_features(&mut g, template, &params, &batch, &layers)?;
    let (root, breakdown) = total_loss(&mut g, &feats, cfg, syn.ipc)?;
    if !breakdown.is_finite() {
        return Ok((Tensor::zeros(syn.pixels.shape().to_vec()), breakdown));
    }
    let mut grads = g.backward(root)?;
    let mut grad = Vec::with_capacity(syn.pixels.numel());
    for (leaf, _) in &pairs {
        match grads.take(*leaf) {
            Some(t) => grad.extend_from_slice(t.data()),
            None => grad.extend(std::iter::repeat_n(T::zero(), syn.pixels.row_len() * syn.ipc)),
        }
    }
    Ok((Tensor::new(syn.pixels.shape().to_vec(), grad)?, breakdown))
}

/// One update of the synthetic pixels with all randomness drawn from `seed`.
pub fn condense_step<T: Real>(
    syn: &mut SyntheticSet<T>,
    real: &Dataset,
    template: &NetworkTemplate,
    cfg: &LossConfig,
    opt: &mut OptimizerState<T>,
    seed: u64,
) -> Result<LossBreakdown> {
    let plan = StepPlan::draw(real, cfg.real_batch_per_class, seed);
    apply_plan(syn, real, template, cfg, opt, &plan)
}

/// [`condense_step`] with an explicit plan.
pub fn apply_plan<T: Real>(
    syn: &mut SyntheticSet<T>,
    real: &Dataset,
    template: &NetworkTemplate,
    cfg: &LossConfig,
    opt: &mut OptimizerState<T>,
    plan: &StepPlan,
) -> Result<LossBreakdown> {
    let iteration = opt.iteration;
    let (grad, breakdown) = loss_gradient(syn, real, template, cfg, plan)?;
    if let Some(term) = breakdown.first_non_finite() {
        return Err(Error::NonFinite {
            term: term.into(),
            iteration,
        });
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite {
            term: "gradient".into(),
            iteration,
        });
    }
    opt.apply(&mut syn.pixels, &grad);
    if !syn.pixels.is_finite() {
        return Err(Error::NonFinite {
            term: "pixels".into(),
            iteration,
        });
    }
    Ok(breakdown)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CondenseConfig {
    pub ipc: usize,
    pub iters: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    /// A metrics row is recorded at every iteration divisible by this.
    pub log_interval: usize,
    pub loss: LossConfig,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        CondenseConfig {
            ipc: 10,
            iters: 2000,
            seed: 0,
            lr: 1.0,
            momentum: 0.5,
            log_interval: 10,
            loss: LossConfig::default(),
        }
    }
}

impl CondenseConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate(self.ipc)?;
        if self.iters == 0 {
            return Err(Error::config("iters must be at least 1"));
        }
        if self.log_interval == 0 {
            return Err(Error::config("log_interval must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

pub const METRICS_HEADER: &str = "iter,loss_total,loss_mmd,loss_mm,loss_cm,loss_icd";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub loss: LossBreakdown,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{}",
            self.iter,
            sig6(l.total),
            sig6(l.mmd),
            sig6(l.mm),
            sig6(l.cm),
            sig6(l.icd)
        )
    }
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[MetricsRow]) -> io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Condensed<T = f32> {
    pub syn: SyntheticSet<T>,
    pub metrics: Vec<MetricsRow>,
}

/// Initializes from real images and runs `cfg.iters` steps. Each logged row
/// is handed to `on_row` as soon as it exists, so callers can persist
/// progress that survives an abort.
pub fn run_condensation<T: Real>(
    real: &Dataset,
    spec: &NetworkSpec,
    cfg: &CondenseConfig,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<Condensed<T>> {
    cfg.validate()?;
    let template = build_convnet(spec)?;
    if spec.input_shape != real.image_shape() || spec.num_classes != real.num_classes() {
        return Err(Error::config(format!(
            "network expects {:?} images and {} classes, data has {:?} and {}",
            spec.input_shape,
            spec.num_classes,
            real.image_shape(),
            real.num_classes()
        )));
    }
    if let Some(l) = &cfg.loss.layers {
        if let Some(&bad) = l.as_slice().iter().find(|&&l| l >= spec.depth) {
            return Err(Error::config(format!("style layer {bad} out of range for depth {}", spec.depth)));
        }
    }
    let mut syn = init_synthetic(real, cfg.ipc, cfg.seed)?.cast::<T>();
    let mut opt = OptimizerState::new(&syn, cfg.lr, cfg.momentum, cfg.iters)?;
    let mut metrics = Vec::with_capacity(cfg.iters.div_ceil(cfg.log_interval));
    for iter in 0..cfg.iters {
        let loss = condense_step(
            &mut syn,
            real,
            &template,
            &cfg.loss,
            &mut opt,
            derive_seed(cfg.seed, iter as u64),
        )?;
        if iter % cfg.log_interval == 0 {
            let row = MetricsRow { iter, loss };
            on_row(&row);
            metrics.push(row);
        }
    }
    Ok(Condensed { syn, metrics })
}

#[cfg(test)]
mod tests;
