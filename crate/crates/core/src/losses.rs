//! Content, style and diversity terms of the condensation objective.
//!
//! Every loss is a scalar graph node whose gradient flows into the synthetic
//! pixels. All terms of one iteration share a single feature extraction
//! under a single parameter draw.

use std::collections::HashSet;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::network::{extract_features, AttachedParams, FeatureBundle, LayerSet, NetworkTemplate};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of moments matching inside the style loss.
    pub alpha: f64,
    /// Weight of the intra-class diversity term inside the content loss.
    pub beta: f64,
    /// Weight of the style loss in the total objective.
    pub lambda: f64,
    /// Neighbour count as a fraction of IPC.
    pub k_frac: f64,
    /// Blocks used for style matching; `None` means every block.
    pub layers: Option<LayerSet>,
    pub real_batch_per_class: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 10.0,
            lambda: 5e3,
            k_frac: 0.2,
            layers: None,
            real_batch_per_class: 64,
        }
    }
}

impl LossConfig {
    /// Number of nearest neighbours for a given IPC: `max(1, round(k_frac * ipc))`.
    pub fn k(&self, ipc: usize) -> usize {
        ((self.k_frac * ipc as f64).round() as usize).max(1)
    }

    /// The diversity term needs at least two samples per class.
    pub fn icd_active(&self, ipc: usize) -> bool {
        ipc >= 2
    }

    pub fn resolve_layers(&self, depth: usize) -> LayerSet {
        self.layers.clone().unwrap_or_else(|| LayerSet::all(depth))
    }

    pub fn validate(&self, ipc: usize) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.k_frac > 0.0 && self.k_frac <= 1.0) {
            return Err(Error::config(format!("k_frac must lie in (0, 1], got {}", self.k_frac)));
        }
        if self.real_batch_per_class == 0 {
            return Err(Error::config("real_batch_per_class must be positive"));
        }
        if matches!(&self.layers, Some(l) if l.is_empty()) {
            return Err(Error::config("style layer set is empty"));
        }
        if ipc == 0 {
            return Err(Error::config("ipc must be positive"));
        }
        if self.icd_active(ipc) && self.k(ipc) >= ipc {
            return Err(Error::config(format!(
                "k = {} must be below ipc = {ipc}",
                self.k(ipc)
            )));
        }
        Ok(())
    }
}

/// Real and synthetic batches of one class, already recorded in a graph.
#[derive(Clone, Copy, Debug)]
pub struct ClassBatchPair {
    pub class_id: usize,
    pub real: Var,
    pub syn: Var,
}

/// Features of both sides of a [`ClassBatchPair`] under the same parameters.
#[derive(Clone, Debug)]
pub struct ClassFeatures {
    pub class_id: usize,
    pub real: FeatureBundle,
    pub syn: FeatureBundle,
}

pub fn extract_pair_features<T: Real>(
    graph: &mut Graph<T>,
    template: &NetworkTemplate,
    params: &AttachedParams,
    pairs: &[ClassBatchPair],
    layers: &LayerSet,
) -> Result<Vec<ClassFeatures>> {
    pairs
        .iter()
        .map(|p| {
            Ok(ClassFeatures {
                class_id: p.class_id,
                real: extract_features(graph, template, params, p.real, layers)?,
                syn: extract_features(graph, template, params, p.syn, layers)?,
            })
        })
        .collect()
}

/// Raw values of the four loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mmd: f64,
    pub mm: f64,
    pub cm: f64,
    pub icd: f64,
}

impl LossBreakdown {
    /// Recombines the raw terms with the configured weights.
    pub fn weighted(&self, cfg: &LossConfig) -> f64 {
        cfg.lambda * (cfg.alpha * self.mm + self.cm) + cfg.beta * self.icd + self.mmd
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.mmd, self.mm, self.cm, self.icd]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, checked in reporting order.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("loss_mmd", self.mmd),
            ("loss_mm", self.mm),
            ("loss_cm", self.cm),
            ("loss_icd", self.icd),
            ("loss_total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn check_classes(feats: &[ClassFeatures]) -> Result<()> {
    let mut seen = HashSet::new();
    for f in feats {
        if !seen.insert(f.class_id) {
            return Err(Error::config(format!("class {} appears twice", f.class_id)));
        }
    }
    Ok(())
}

fn sum_scalars<T: Real>(graph: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter();
    let Some(&first) = it.next() else {
        return Ok(graph.constant(Tensor::scalar(T::zero())));
    };
    it.try_fold(first, |acc, &t| graph.add(acc, t))
}

fn squared_distance<T: Real>(graph: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = graph.sub(a, b)?;
    let d = graph.square(d);
    Ok(graph.sum(d))
}

fn map_for(bundle: &FeatureBundle, layer: usize) -> Result<Var> {
    bundle
        .map(layer)
        .ok_or_else(|| Error::config(format!("layer {layer} was not extracted")))
}

/// Per-sample channel means and biased variances: `[N,C,H,W] -> ([N,C], [N,C])`.
pub fn channel_moments<T: Real>(graph: &mut Graph<T>, map: Var) -> Result<(Var, Var)> {
    Ok((graph.spatial_mean(map)?, graph.spatial_var(map)?))
}

/// Per-sample `G = Phi Phi^T` over channel maps flattened to `C x HW`.
pub fn gram_matrix<T: Real>(graph: &mut Graph<T>, map: Var) -> Result<Var> {
    graph.gram(map)
}

/// `sum_i || mean Phi(S_i) - mean Phi(T_i) ||^2` over classes.
pub fn mmd_loss<T: Real>(graph: &mut Graph<T>, feats: &[ClassFeatures]) -> Result<Var> {
    check_classes(feats)?;
    let mut terms = Vec::with_capacity(feats.len());
    for f in feats {
        let s = graph.mean_rows(f.syn.embedding);
        let r = graph.mean_rows(f.real.embedding);
        terms.push(squared_distance(graph, s, r)?);
    }
    sum_scalars(graph, &terms)
}

/// Moments matching: half the squared distance between set-averaged channel
/// means plus that between set-averaged channel variances, summed over
/// classes and layers.
pub fn mm_loss<T: Real>(graph: &mut Graph<T>, feats: &[ClassFeatures], layers: &LayerSet) -> Result<Var> {
    check_classes(feats)?;
    if layers.is_empty() {
        return Err(Error::config("moments matching needs at least one layer"));
    }
    let mut terms = Vec::new();
    for f in feats {
        for &l in layers.as_slice() {
            let (mu_s, var_s) = channel_moments(graph, map_for(&f.syn, l)?)?;
            let (mu_r, var_r) = channel_moments(graph, map_for(&f.real, l)?)?;
            let (mu_s, var_s) = (graph.mean_rows(mu_s), graph.mean_rows(var_s));
            let (mu_r, var_r) = (graph.mean_rows(mu_r), graph.mean_rows(var_r));
            terms.push(squared_distance(graph, mu_s, mu_r)?);
            terms.push(squared_distance(graph, var_s, var_r)?);
        }
    }
    let total = sum_scalars(graph, &terms)?;
    Ok(graph.scale(total, T::of(0.5)))
}

/// Correlation matching: squared distance between set-averaged Gram
/// matrices, scaled per layer by `1 / (4 (h w)^2 n^2)`.
pub fn cm_loss<T: Real>(graph: &mut Graph<T>, feats: &[ClassFeatures], layers: &LayerSet) -> Result<Var> {
    check_classes(feats)?;
    if layers.is_empty() {
        return Err(Error::config("correlation matching needs at least one layer"));
    }
    let mut terms = Vec::new();
    for f in feats {
        for &l in layers.as_slice() {
            let syn_map = map_for(&f.syn, l)?;
            let shape = graph.shape(syn_map);
            let (n, hw) = (shape[1] as f64, (shape[2] * shape[3]) as f64);
            let norm = 1.0 / (4.0 * hw * hw * n * n);
            let gs = gram_matrix(graph, syn_map)?;
            let gr = gram_matrix(graph, map_for(&f.real, l)?)?;
            let (gs, gr) = (graph.mean_rows(gs), graph.mean_rows(gr));
            let d = squared_distance(graph, gs, gr)?;
            terms.push(graph.scale(d, T::of(norm)));
        }
    }
    sum_scalars(graph, &terms)
}

/// For each row, the indices of its `k` nearest other rows by squared
/// Euclidean distance, ties broken by lower index.
pub fn knn_intraclass<T: Real>(embeddings: &Tensor<T>, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = embeddings.rows();
    if k == 0 || k >= n {
        return Err(Error::config(format!("k = {k} outside 1..={}", n.saturating_sub(1))));
    }
    let dist = |i: usize, j: usize| -> f64 {
        embeddings
            .row(i)
            .iter()
            .zip(embeddings.row(j))
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum()
    };
    Ok((0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist(i, j), j)).collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect())
}

fn log_softmax_rows<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let v = g.constant(t.clone());
    let out = g.log_softmax(v);
    g.value(out).clone()
}

/// Intra-class diversity: `-sum_x KL(softmax(Phi(x)) || softmax(m_x))`, where
/// `m_x` is the mean embedding of the `k` nearest other synthetic samples of
/// the same class. Neighbour sets are taken from the current embedding
/// values and `m_x` is held constant in the backward pass.
pub fn icd_loss<T: Real>(graph: &mut Graph<T>, syn_embeddings: &[Var], k: usize) -> Result<Var> {
    let neighbors = syn_embeddings
        .iter()
        .map(|&e| {
            if graph.shape(e)[0] < 2 {
                return Err(Error::config("diversity term needs at least two samples per class"));
            }
            knn_intraclass(graph.value(e), k)
        })
        .collect::<Result<Vec<_>>>()?;
    icd_loss_with_neighbors(graph, syn_embeddings, &neighbors)
}

/// [`icd_loss`] with precomputed neighbour sets, one list per class.
pub fn icd_loss_with_neighbors<T: Real>(
    graph: &mut Graph<T>,
    syn_embeddings: &[Var],
    neighbors: &[Vec<Vec<usize>>],
) -> Result<Var> {
    if syn_embeddings.len() != neighbors.len() {
        return Err(Error::config("one neighbour list per class required"));
    }
    let mut terms = Vec::with_capacity(syn_embeddings.len());
    for (&e, nbrs) in syn_embeddings.iter().zip(neighbors) {
        let values = graph.value(e);
        let (b, d) = (values.rows(), values.row_len());
        if nbrs.len() != b {
            return Err(Error::config("neighbour list length differs from batch size"));
        }
        let mut means = Tensor::zeros([b, d]);
        for (i, set) in nbrs.iter().enumerate() {
            if set.is_empty() || set.iter().any(|&j| j >= b || j == i) {
                return Err(Error::config(format!("invalid neighbour set for sample {i}")));
            }
            let inv = T::one() / T::of(set.len() as f64);
            let mut acc = vec![T::zero(); d];
            for &j in set {
                for (a, &v) in acc.iter_mut().zip(values.row(j)) {
                    *a += v;
                }
            }
            for (m, a) in means.row_mut(i).iter_mut().zip(acc) {
                *m = a * inv;
            }
        }
        let log_q = graph.constant(log_softmax_rows(&means));
        let p = graph.softmax(e);
        let log_p = graph.log_softmax(e);
        let diff = graph.sub(log_p, log_q)?;
        let kl = graph.mul(p, diff)?;
        terms.push(graph.sum(kl));
    }
    let total = sum_scalars(graph, &terms)?;
    Ok(graph.scale(total, -T::one()))
}

/// `lambda (alpha L_MM + L_CM) + beta L_ICD + L_MMD`, with the raw terms.
///
/// The diversity term is computed only when `ipc >= 2`; otherwise it is
/// reported as zero.
pub fn total_loss<T: Real>(
    graph: &mut Graph<T>,
    feats: &[ClassFeatures],
    cfg: &LossConfig,
    ipc: usize,
) -> Result<(Var, LossBreakdown)> {
    let layers = feats
        .first()
        .map(|f| f.syn.layers().clone())
        .ok_or_else(|| Error::config("no classes to match"))?;
    let layers = match &cfg.layers {
        Some(l) => l.clone(),
        None => layers,
    };
    let mmd = mmd_loss(graph, feats)?;
    let mm = mm_loss(graph, feats, &layers)?;
    let cm = cm_loss(graph, feats, &layers)?;
    let icd = if cfg.icd_active(ipc) {
        let embs: Vec<Var> = feats.iter().map(|f| f.syn.embedding).collect();
        icd_loss(graph, &embs, cfg.k(ipc))?
    } else {
        graph.constant(Tensor::scalar(T::zero()))
    };
    let style = graph.scale(mm, T::of(cfg.alpha));
    let style = graph.add(style, cm)?;
    let style = graph.scale(style, T::of(cfg.lambda));
    let content = graph.scale(icd, T::of(cfg.beta));
    let content = graph.add(content, mmd)?;
    let total = graph.add(style, content)?;
    let item = |v: Var| graph.value(v).item().as_f64();
    let breakdown = LossBreakdown {
        total: item(total),
        mmd: item(mmd),
        mm: item(mm),
        cm: item(cm),
        icd: item(icd),
    };
    Ok((total, breakdown))
}
