//! Per-image style statistics and set-level summaries.

use std::io::{self, Write};

use crate::autodiff::{Graph, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluate::random_embeddings;
use crate::network::{build_convnet, extract_features, sample_params, LayerSet, NetworkParams, NetworkSpec, NetworkTemplate};
use crate::table::sig6;

const CHUNK: usize = 256;

/// Channel means and biased variances of each plane of an `[N,C,H,W]` map,
/// one `(mu, var)` pair per sample.
pub fn map_moments(map: &Tensor<f32>) -> Vec<(Vec<f64>, Vec<f64>)> {
    let s = map.shape();
    let (c, p) = (s[1], s[2] * s[3]);
    (0..s[0])
        .map(|i| {
            let row = map.row(i);
            let mut mu = Vec::with_capacity(c);
            let mut var = Vec::with_capacity(c);
            for plane in row.chunks(p) {
                let m = plane.iter().map(|&v| v as f64).sum::<f64>() / p as f64;
                let v = plane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / p as f64;
                mu.push(m);
                var.push(v);
            }
            (mu, var)
        })
        .collect()
}

/// Moments of every image at block `layer` (post-activation, pre-pool).
pub fn image_moments(
    template: &NetworkTemplate,
    params: &NetworkParams<f32>,
    images: &Tensor<f32>,
    layer: usize,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let layers = LayerSet::new(vec![layer]);
    let mut out = Vec::with_capacity(images.rows());
    for start in (0..images.rows()).step_by(CHUNK) {
        let rows: Vec<usize> = (start..(start + CHUNK).min(images.rows())).collect();
        let mut g = Graph::<f32>::new();
        let attached = params.attach(&mut g, false);
        let x = g.constant(images.select_rows(&rows));
        let f = extract_features(&mut g, template, &attached, x, &layers)?;
        out.extend(map_moments(g.value(f.block_maps[0])));
    }
    Ok(out)
}

/// Per-class averages of per-image moments.
pub fn class_style_stats(
    template: &NetworkTemplate,
    params: &NetworkParams<f32>,
    set: &Dataset,
    layer: usize,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let moments = image_moments(template, params, set.images(), layer)?;
    (0..set.num_classes())
        .map(|class| {
            let idx = set.class_indices(class);
            if idx.is_empty() {
                return Err(Error::EmptyClass(class));
            }
            Ok(average(idx.iter().map(|&i| &moments[i])))
        })
        .collect()
}

fn average<'a>(items: impl Iterator<Item = &'a (Vec<f64>, Vec<f64>)>) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut mu: Vec<f64> = Vec::new();
    let mut var: Vec<f64> = Vec::new();
    for (m, v) in items {
        if n == 0 {
            mu = vec![0.0; m.len()];
            var = vec![0.0; v.len()];
        }
        mu.iter_mut().zip(m).for_each(|(a, b)| *a += b);
        var.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        n += 1;
    }
    let inv = 1.0 / n.max(1) as f64;
    (mu.into_iter().map(|x| x * inv).collect(), var.into_iter().map(|x| x * inv).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleRow {
    pub set: String,
    pub class: usize,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleExport {
    pub channels: usize,
    pub rows: Vec<StyleRow>,
    /// `|mean mu_A - mean mu_B|^2 + |mean var_A - mean var_B|^2` per class.
    pub gaps: Vec<f64>,
}

impl StyleExport {
    pub fn total_gap(&self) -> f64 {
        self.gaps.iter().sum()
    }

    pub fn write_rows_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let mut header = vec!["set".to_string(), "class".to_string()];
        header.extend((0..self.channels).map(|i| format!("mu_{i}")));
        header.extend((0..self.channels).map(|i| format!("var_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for r in &self.rows {
            let mut cells = vec![r.set.clone(), r.class.to_string()];
            cells.extend(r.mu.iter().chain(&r.var).map(|&v| sig6(v)));
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn write_gaps_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "class,style_gap")?;
        for (c, g) in self.gaps.iter().enumerate() {
            writeln!(out, "{c},{}", sig6(*g))?;
        }
        Ok(())
    }
}

/// Style vectors of both sets under one random network at `layer`, plus the
/// per-class gap between the set averages.
pub fn export_style_stats(
    a: (&str, &Dataset),
    b: (&str, &Dataset),
    spec: &NetworkSpec,
    seed: u64,
    layer: usize,
) -> Result<StyleExport> {
    if a.1.num_classes() != b.1.num_classes() || a.1.image_shape() != b.1.image_shape() {
        return Err(Error::config("style sets differ in class count or image shape"));
    }
    let template = build_convnet(spec)?;
    if layer >= spec.depth {
        return Err(Error::config(format!("layer {layer} out of range for depth {}", spec.depth)));
    }
    let params = sample_params::<f32>(&template, seed);
    let mut rows = Vec::with_capacity(a.1.len() + b.1.len());
    for (name, set) in [a, b] {
        let moments = image_moments(&template, &params, set.images(), layer)?;
        rows.extend(moments.into_iter().zip(set.labels()).map(|((mu, var), &class)| StyleRow {
            set: name.into(),
            class,
            mu,
            var,
        }));
    }
    let split = a.1.len();
    let gaps = (0..a.1.num_classes())
        .map(|class| {
            let of = |rs: &[StyleRow]| {
                let pairs: Vec<(Vec<f64>, Vec<f64>)> = rs
                    .iter()
                    .filter(|r| r.class == class)
                    .map(|r| (r.mu.clone(), r.var.clone()))
                    .collect();
                average(pairs.iter())
            };
            let (ma, va) = of(&rows[..split]);
            let (mb, vb) = of(&rows[split..]);
            sq_dist(&ma, &mb) + sq_dist(&va, &vb)
        })
        .collect();
    Ok(StyleExport {
        channels: spec.width,
        rows,
        gaps,
    })
}

/// Per-class style gap summed over classes and every block.
pub fn style_gap_all_layers(a: &Dataset, b: &Dataset, spec: &NetworkSpec, seed: u64) -> Result<f64> {
    (0..spec.depth)
        .map(|layer| export_style_stats(("a", a), ("b", b), spec, seed, layer).map(|e| e.total_gap()))
        .sum()
}

/// Mean Euclidean distance between embeddings of distinct same-class images
/// under a random network, averaged over classes with at least two images.
pub fn intra_class_diversity(set: &Dataset, spec: &NetworkSpec, seed: u64) -> Result<f64> {
    let template = build_convnet(spec)?;
    let emb = random_embeddings(&template, seed, set.images())?;
    let mut per_class = Vec::new();
    for class in 0..set.num_classes() {
        let idx = set.class_indices(class);
        if idx.len() < 2 {
            continue;
        }
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                total += sq_dist(&emb[i], &emb[j]).sqrt();
                pairs += 1;
            }
        }
        per_class.push(total / pairs as f64);
    }
    if per_class.is_empty() {
        return Err(Error::config("diversity needs a class with at least two images"));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_toy_dataset, ToyConfig};

    fn toy() -> Dataset {
        gen_toy_dataset(&ToyConfig {
            classes: 2,
            per_class: 10,
            shape: [3, 8, 8],
            seed: 3,
            ..ToyConfig::default()
        })
        .unwrap()
        .0
    }

    fn spec() -> NetworkSpec {
        NetworkSpec {
            depth: 2,
            width: 4,
            input_shape: [3, 8, 8],
            num_classes: 2,
        }
    }

    #[test]
    fn self_gap_is_zero_and_shapes() {
        let d = toy();
        let e = export_style_stats(("a", &d), ("b", &d), &spec(), 1, 0).unwrap();
        assert!(e.gaps.iter().all(|&g| g == 0.0));
        assert_eq!(e.rows.len(), 2 * d.len());
        let mut csv = Vec::new();
        e.write_rows_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.lines().all(|l| l.split(',').count() == 2 * 4 + 2));
        assert_eq!(text.lines().count(), 2 * d.len() + 1);
    }

    #[test]
    fn gap_recomputes_from_rows() {
        let d = toy();
        let other = d.subset(&[0, 1, 2, 9, 10, 11]);
        let e = export_style_stats(("real", &d), ("sub", &other), &spec(), 2, 1).unwrap();
        for class in 0..2 {
            let mean_of = |set: &str, f: fn(&StyleRow) -> &Vec<f64>| {
                let rs: Vec<&StyleRow> = e.rows.iter().filter(|r| r.set == set && r.class == class).collect();
                (0..4)
                    .map(|ch| rs.iter().map(|r| f(r)[ch]).sum::<f64>() / rs.len() as f64)
                    .collect::<Vec<f64>>()
            };
            let gap = sq_dist(&mean_of("real", |r| &r.mu), &mean_of("sub", |r| &r.mu))
                + sq_dist(&mean_of("real", |r| &r.var), &mean_of("sub", |r| &r.var));
            assert!((gap - e.gaps[class]).abs() <= 1e-9 * gap.max(1.0));
        }
        assert!(e.total_gap() > 0.0);
    }

    #[test]
    fn moments_of_known_map() {
        let t = Tensor::new([1, 2, 1, 2], vec![1.0, 3.0, 2.0, 2.0]).unwrap();
        assert_eq!(map_moments(&t), vec![(vec![2.0, 2.0], vec![1.0, 0.0])]);
    }

    #[test]
    fn diversity_of_duplicates_is_zero() {
        let d = toy();
        let dup = d.subset(&[0, 0, 10, 10]);
        assert_eq!(intra_class_diversity(&dup, &spec(), 0).unwrap(), 0.0);
        assert!(intra_class_diversity(&d, &spec(), 0).unwrap() > 0.0);
    }
}
