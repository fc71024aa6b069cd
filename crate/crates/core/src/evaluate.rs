//! Training classifiers from scratch on small sets and scoring them.

use std::io::{self, Write};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::condense::{derive_seed, dsa_augment, AugmentParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{
    build_convnet, extract_features, logits, predict, sample_params, sample_params_with_head, LayerSet, NetworkParams,
    NetworkSpec, NetworkTemplate,
};
use crate::table::sig6;

const PREDICT_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub nets_per_set: usize,
    pub repeats: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Draw one augmentation per mini-batch during training.
    pub augment: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            nets_per_set: 3,
            repeats: 2,
            epochs: 100,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 256,
            augment: true,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.nets_per_set == 0 || self.repeats == 0 || self.batch_size == 0 {
            return Err(Error::config("nets, repeats and batch size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("eval learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("eval momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// A network with its classifier head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub template: NetworkTemplate,
    pub params: NetworkParams<f32>,
}

impl Classifier {
    pub fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut out = Vec::with_capacity(images.rows() * self.template.spec().num_classes);
        for rows in chunks(images.rows()) {
            out.extend_from_slice(predict(&self.template, &self.params, &images.select_rows(&rows))?.data());
        }
        Tensor::new([images.rows(), self.template.spec().num_classes], out)
    }
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(PREDICT_CHUNK).map(move |s| (s..(s + PREDICT_CHUNK).min(n)).collect())
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy training with momentum SGD and weight decay, deterministic
/// per seed. The last mini-batch of an epoch may be smaller.
pub fn train_classifier(train: &Dataset, spec: &NetworkSpec, protocol: &EvalProtocol, seed: u64) -> Result<Classifier> {
    protocol.validate()?;
    if let Some(c) = (0..train.num_classes()).find(|&c| train.class_indices(c).is_empty()) {
        return Err(Error::EmptyClass(c));
    }
    if spec.input_shape != train.image_shape() || spec.num_classes != train.num_classes() {
        return Err(Error::config("network spec does not match the training set"));
    }
    let template = build_convnet(spec)?;
    let mut params = sample_params_with_head::<f32>(&template, seed);
    let mut velocity: Vec<Vec<f32>> = params.tensors_mut().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let height = train.image_shape()[1];
    let classes = train.num_classes();
    let no_maps = LayerSet::new(Vec::new());
    let (lr, m, wd) = (protocol.lr as f32, protocol.momentum as f32, protocol.weight_decay as f32);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..protocol.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(protocol.batch_size) {
            let mut g = Graph::<f32>::new();
            let attached = params.attach(&mut g, true);
            let mut x = g.constant(train.gather(batch));
            if protocol.augment {
                x = dsa_augment(&mut g, x, AugmentParams::draw(&mut rng, height))?;
            }
            let feats = extract_features(&mut g, &template, &attached, x, &no_maps)?;
            let z = logits(&mut g, &attached, feats.embedding)?;
            let logp = g.log_softmax(z);
            let mut onehot = Tensor::zeros([batch.len(), classes]);
            for (r, &i) in batch.iter().enumerate() {
                onehot.row_mut(r)[train.labels()[i]] = 1.0;
            }
            let onehot = g.constant(onehot);
            let picked = g.mul(logp, onehot)?;
            let total = g.sum(picked);
            let loss = g.scale(total, -1.0 / batch.len() as f32);
            let grads = g.backward(loss)?;
            for ((t, v), var) in params.tensors_mut().into_iter().zip(&mut velocity).zip(attached.vars()) {
                let grad = grads.get(var).expect("parameters require grad");
                for ((p, vel), &gr) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                    *vel = m * *vel + gr + wd * *p;
                    *p -= lr * *vel;
                }
            }
        }
    }
    Ok(Classifier { template, params })
}

/// Top-1 accuracy in percent.
pub fn evaluate_accuracy(classifier: &Classifier, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::config("empty test set"));
    }
    let z = classifier.logits(test.images())?;
    let correct = (0..test.len()).filter(|&i| argmax(z.row(i)) == test.labels()[i]).count();
    Ok(100.0 * correct as f64 / test.len() as f64)
}

fn check_ipc(real: &Dataset, ipc: usize) -> Result<()> {
    if ipc == 0 {
        return Err(Error::config("ipc must be positive"));
    }
    for class in 0..real.num_classes() {
        let n = real.class_indices(class).len();
        if n < ipc {
            return Err(Error::InsufficientSamples {
                class,
                available: n,
                requested: ipc,
            });
        }
    }
    Ok(())
}

/// `ipc` images per class drawn uniformly without replacement, class-major.
pub fn random_coreset(real: &Dataset, ipc: usize, seed: u64) -> Result<Dataset> {
    check_ipc(real, ipc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(ipc * real.num_classes());
    for class in 0..real.num_classes() {
        let pool = real.class_indices(class);
        let mut pick: Vec<usize> = index::sample(&mut rng, pool.len(), ipc).into_iter().map(|i| pool[i]).collect();
        pick.sort_unstable();
        rows.extend(pick);
    }
    Ok(real.subset(&rows))
}

/// Greedy herding over the rows of `embeddings`: step `m` picks the unused
/// row minimizing `|mean - (sum + x) / (m + 1)|`, ties to the lower index.
pub fn herding_select(embeddings: &[Vec<f64>], count: usize) -> Vec<usize> {
    let n = embeddings.len();
    let Some(d) = embeddings.first().map(Vec::len) else {
        return Vec::new();
    };
    let mut mean = vec![0.0; d];
    for e in embeddings {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v / n as f64;
        }
    }
    let mut sum = vec![0.0; d];
    let mut used = vec![false; n];
    let mut picked = Vec::with_capacity(count);
    for step in 0..count.min(n) {
        let denom = (step + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in embeddings.iter().enumerate() {
            if used[i] {
                continue;
            }
            let dist: f64 = (0..d).map(|j| (mean[j] - (sum[j] + e[j]) / denom).powi(2)).sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("an unused row remains");
        used[i] = true;
        for (s, v) in sum.iter_mut().zip(&embeddings[i]) {
            *s += v;
        }
        picked.push(i);
    }
    picked
}

/// Embeddings of `images` under a random network drawn from `seed`.
pub fn random_embeddings(template: &NetworkTemplate, seed: u64, images: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    let params = sample_params::<f32>(template, seed);
    let no_maps = LayerSet::new(Vec::new());
    let mut out = Vec::with_capacity(images.rows());
    for rows in chunks(images.rows()) {
        let mut g = Graph::<f32>::new();
        let attached = params.attach(&mut g, false);
        let x = g.constant(images.select_rows(&rows));
        let f = extract_features(&mut g, template, &attached, x, &no_maps)?;
        let e = g.value(f.embedding);
        out.extend((0..e.rows()).map(|r| e.row(r).iter().map(|&v| v as f64).collect()));
    }
    Ok(out)
}

/// Per-class herding in the embedding space of a fixed random network.
pub fn herding_coreset(real: &Dataset, ipc: usize, template: &NetworkTemplate, seed: u64) -> Result<Dataset> {
    check_ipc(real, ipc)?;
    let mut rows = Vec::with_capacity(ipc * real.num_classes());
    for class in 0..real.num_classes() {
        let pool = real.class_indices(class);
        let emb = random_embeddings(template, seed, &real.gather(pool))?;
        rows.extend(herding_select(&emb, ipc).into_iter().map(|i| pool[i]));
    }
    Ok(real.subset(&rows))
}

/// Where the training images of an evaluation come from.
#[derive(Clone, Copy, Debug)]
pub enum TrainSource<'a> {
    Condensed(&'a Dataset),
    Random { real: &'a Dataset, ipc: usize },
    Herding { real: &'a Dataset, ipc: usize },
}

impl TrainSource<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            TrainSource::Condensed(_) => "condensed",
            TrainSource::Random { .. } => "random",
            TrainSource::Herding { .. } => "herding",
        }
    }

    /// The training set of one repeat. Coresets are redrawn per repeat; a
    /// condensed set is fixed.
    pub fn materialize(&self, spec: &NetworkSpec, seed: u64) -> Result<Dataset> {
        match *self {
            TrainSource::Condensed(d) => Ok(d.clone()),
            TrainSource::Random { real, ipc } => random_coreset(real, ipc, seed),
            TrainSource::Herding { real, ipc } => herding_coreset(real, ipc, &build_convnet(spec)?, seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunAccuracy {
    pub seed: u64,
    pub run: usize,
    pub accuracy_pct: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub source: String,
    pub runs: Vec<RunAccuracy>,
    pub mean_pct: f64,
    /// Population standard deviation over all runs.
    pub std_pct: f64,
    pub seconds: f64,
    pub protocol: EvalProtocol,
}

pub const REPORT_HEADER: &str = "source,seed,run,accuracy_pct";
pub const SUMMARY_HEADER: &str = "source,mean_pct,std_pct,runs";

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_runs(source: &str, runs: Vec<RunAccuracy>, seconds: f64, protocol: EvalProtocol) -> Self {
        let accs: Vec<f64> = runs.iter().map(|r| r.accuracy_pct).collect();
        let (mean_pct, std_pct) = mean_std(&accs);
        EvalReport {
            source: source.into(),
            runs,
            mean_pct,
            std_pct,
            seconds,
            protocol,
        }
    }

    pub fn write_report_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{REPORT_HEADER}")?;
        for r in &self.runs {
            writeln!(out, "{},{},{},{}", self.source, r.seed, r.run, sig6(r.accuracy_pct))?;
        }
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{SUMMARY_HEADER}")?;
        writeln!(
            out,
            "{},{},{},{}",
            self.source,
            sig6(self.mean_pct),
            sig6(self.std_pct),
            self.runs.len()
        )
    }
}

/// Trains `nets_per_set` networks on each of `repeats` training sets and
/// scores every one on `test`.
pub fn run_evaluation(
    source: TrainSource<'_>,
    spec: &NetworkSpec,
    protocol: &EvalProtocol,
    test: &Dataset,
    seed: u64,
) -> Result<EvalReport> {
    protocol.validate()?;
    let start = Instant::now();
    let mut runs = Vec::with_capacity(protocol.repeats * protocol.nets_per_set);
    for repeat in 0..protocol.repeats {
        let set_seed = derive_seed(seed, repeat as u64);
        let train = source.materialize(spec, set_seed)?;
        for net in 0..protocol.nets_per_set {
            let net_seed = derive_seed(set_seed, net as u64 + 1);
            let clf = train_classifier(&train, spec, protocol, net_seed)?;
            runs.push(RunAccuracy {
                seed: net_seed,
                run: runs.len(),
                accuracy_pct: evaluate_accuracy(&clf, test)?,
            });
        }
    }
    Ok(EvalReport::from_runs(
        source.name(),
        runs,
        start.elapsed().as_secs_f64(),
        protocol.clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_toy_dataset, ToyConfig};
    use crate::network::LinearParams;

    fn toy() -> (Dataset, Dataset) {
        gen_toy_dataset(&ToyConfig {
            classes: 2,
            per_class: 40,
            shape: [3, 8, 8],
            seed: 2,
            ..ToyConfig::default()
        })
        .unwrap()
    }

    fn spec() -> NetworkSpec {
        NetworkSpec {
            depth: 2,
            width: 4,
            input_shape: [3, 8, 8],
            num_classes: 2,
        }
    }

    fn quick() -> EvalProtocol {
        EvalProtocol {
            epochs: 3,
            batch_size: 16,
            ..EvalProtocol::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_zero_epochs_is_init() {
        let (train, _) = toy();
        let a = train_classifier(&train, &spec(), &quick(), 9).unwrap();
        let b = train_classifier(&train, &spec(), &quick(), 9).unwrap();
        assert_eq!(a.params, b.params);
        let zero = EvalProtocol { epochs: 0, ..quick() };
        let init = train_classifier(&train, &spec(), &zero, 9).unwrap();
        assert_eq!(init.params, sample_params_with_head(&init.template, 9));
        assert_ne!(a.params, init.params);
    }

    #[test]
    fn empty_class_is_rejected() {
        let (train, _) = toy();
        let only0 = Dataset::new(train.gather(train.class_indices(0)), vec![0; 32], 2, train.norm().clone()).unwrap();
        assert!(matches!(
            train_classifier(&only0, &spec(), &quick(), 0),
            Err(Error::EmptyClass(1))
        ));
    }

    fn constant_classifier(bias: Vec<f32>) -> Classifier {
        let template = build_convnet(&spec()).unwrap();
        let mut params = sample_params_with_head::<f32>(&template, 0);
        let head = params.head.as_mut().unwrap();
        head.weight = Tensor::zeros(head.weight.shape().to_vec());
        head.bias = Tensor::new([2], bias).unwrap();
        Classifier { template, params }
    }

    #[test]
    fn constant_prediction_scores_one_over_c() {
        let (_, test) = toy();
        assert_eq!(evaluate_accuracy(&constant_classifier(vec![1.0, 0.0]), &test).unwrap(), 50.0);
        // a tie resolves to class 0
        assert_eq!(evaluate_accuracy(&constant_classifier(vec![0.5, 0.5]), &test).unwrap(), 50.0);
    }

    #[test]
    fn accuracy_ignores_positive_logit_scale() {
        let (train, test) = toy();
        let clf = train_classifier(&train, &spec(), &quick(), 1).unwrap();
        let base = evaluate_accuracy(&clf, &test).unwrap();
        let mut scaled = clf.clone();
        let head = scaled.params.head.as_mut().unwrap();
        *head = LinearParams {
            weight: head.weight.map(|v| v * 7.5),
            bias: head.bias.map(|v| v * 7.5),
        };
        assert_eq!(evaluate_accuracy(&scaled, &test).unwrap(), base);
    }

    #[test]
    fn argmax_prefers_lower_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn random_coreset_properties() {
        let (train, _) = toy();
        let a = random_coreset(&train, 5, 1).unwrap();
        assert_eq!(a.labels(), [0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        let b = random_coreset(&train, 5, 2).unwrap();
        assert_ne!(a.images(), b.images());
        assert_eq!(a.images(), random_coreset(&train, 5, 1).unwrap().images());
        let full = random_coreset(&train, 32, 0).unwrap();
        assert_eq!(full.images(), train.images());
        assert!(matches!(random_coreset(&train, 33, 0), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn herding_examples() {
        assert_eq!(herding_select(&[vec![-1.0], vec![0.0], vec![1.0]], 1), [1]);
        assert_eq!(herding_select(&vec![vec![2.0, 1.0]; 5], 3), [0, 1, 2]);
        let e = vec![vec![3.0, 0.0], vec![1.0, 1.0], vec![-1.0, 2.0], vec![1.0, 1.0]];
        assert_eq!(herding_select(&e, 1), [1]);
        // running means 0, -1, 0
        assert_eq!(herding_select(&[vec![0.0], vec![4.0], vec![-2.0], vec![-2.0]], 3), [0, 2, 1]);
    }

    #[test]
    fn herding_coreset_is_class_balanced() {
        let (train, _) = toy();
        let template = build_convnet(&spec()).unwrap();
        let h = herding_coreset(&train, 3, &template, 4).unwrap();
        assert_eq!(h.labels(), [0, 0, 0, 1, 1, 1]);
        assert_eq!(h.images(), herding_coreset(&train, 3, &template, 4).unwrap().images());
    }

    #[test]
    fn report_counts_and_aggregates() {
        let (train, test) = toy();
        let p = EvalProtocol {
            nets_per_set: 2,
            repeats: 2,
            ..quick()
        };
        let r = run_evaluation(TrainSource::Random { real: &train, ipc: 4 }, &spec(), &p, &test, 3).unwrap();
        assert_eq!(r.runs.len(), 4);
        let accs: Vec<f64> = r.runs.iter().map(|x| x.accuracy_pct).collect();
        let mean = accs.iter().sum::<f64>() / 4.0;
        assert!((r.mean_pct - mean).abs() < 1e-9);
        let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((r.std_pct - std).abs() < 1e-9);
        let mut csv = Vec::new();
        r.write_report_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);

        let single = EvalProtocol {
            nets_per_set: 1,
            repeats: 1,
            ..quick()
        };
        let one = run_evaluation(TrainSource::Condensed(&train), &spec(), &single, &test, 3).unwrap();
        assert_eq!(one.std_pct, 0.0);
        assert_eq!(one.mean_pct, one.runs[0].accuracy_pct);
    }

    #[test]
    fn summary_csv_format() {
        let r = EvalReport::from_runs(
            "random",
            vec![
                RunAccuracy {
                    seed: 1,
                    run: 0,
                    accuracy_pct: 50.0,
                },
                RunAccuracy {
                    seed: 2,
                    run: 1,
                    accuracy_pct: 60.0,
                },
            ],
            0.0,
            EvalProtocol::default(),
        );
        let mut csv = Vec::new();
        r.write_summary_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "source,mean_pct,std_pct,runs\nrandom,55,5,2\n");
    }
}
