//! Moving feature-map style toward target statistics.

use std::io::{self, Write};

use super::style::class_style_stats;
use crate::autodiff::{Graph, Real, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluate::{argmax, Classifier};
use crate::network::{forward_with_hook, logits, LayerSet};
use crate::table::sig6;

/// Floor on the source variance in the renormalization denominator.
pub const DRIFT_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct DriftConfig {
    pub gamma: f64,
    pub layer: usize,
    pub target_mean: Vec<f64>,
    /// Target variances, not standard deviations.
    pub target_var: Vec<f64>,
}

impl DriftConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.target_mean.len() != channels || self.target_var.len() != channels {
            return Err(Error::config(format!("drift targets must have {channels} channels")));
        }
        if self.target_var.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config("target variances must be >= 0"));
        }
        Ok(())
    }
}

fn drift_plane<T: Real>(plane: &mut [T], gamma: f64, target_mean: f64, target_var: f64) {
    let p = plane.len() as f64;
    let mu = plane.iter().map(|v| v.as_f64()).sum::<f64>() / p;
    let var = plane.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / p;
    let var_d = (1.0 - gamma) * var + gamma * target_var;
    let mu_d = (1.0 - gamma) * mu + gamma * target_mean;
    let gain = var_d.sqrt() / var.max(DRIFT_EPS).sqrt();
    for v in plane {
        *v = T::of(gain * (v.as_f64() - mu) + mu_d);
    }
}

/// Renormalizes every `(sample, channel)` plane of `[N,C,H,W]` to the
/// interpolated moments.
pub fn style_drift_features<T: Real>(map: &Tensor<T>, cfg: &DriftConfig) -> Result<Tensor<T>> {
    let s = map.shape();
    if s.len() != 4 {
        return Err(Error::shape("style_drift_features", format!("expected [N,C,H,W], got {s:?}")));
    }
    let (c, p) = (s[1], s[2] * s[3]);
    cfg.validate(c)?;
    let mut out = map.clone();
    for (i, plane) in out.data_mut().chunks_mut(p).enumerate() {
        drift_plane(plane, cfg.gamma, cfg.target_mean[i % c], cfg.target_var[i % c]);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftRow {
    pub gamma: f64,
    pub accuracy_pct: f64,
}

pub fn write_drift_csv<W: Write>(mut out: W, rows: &[DriftRow]) -> io::Result<()> {
    writeln!(out, "gamma,accuracy_pct")?;
    for r in rows {
        writeln!(out, "{},{}", sig6(r.gamma), sig6(r.accuracy_pct))?;
    }
    Ok(())
}

/// Accuracy of `classifier` on `eval` when each sample's map at `layer` is
/// drifted toward the class-average style of `target` (measured with the
/// classifier's own network), for every `gamma`.
pub fn run_drift_experiment(
    classifier: &Classifier,
    eval: &Dataset,
    target: &Dataset,
    layer: usize,
    gammas: &[f64],
) -> Result<Vec<DriftRow>> {
    let depth = classifier.template.spec().depth;
    if layer >= depth {
        return Err(Error::config(format!("drift layer {layer} out of range for depth {depth}")));
    }
    if eval.is_empty() {
        return Err(Error::config("empty evaluation set"));
    }
    let targets = class_style_stats(&classifier.template, &classifier.params, target, layer)?;
    let no_maps = LayerSet::new(Vec::new());
    gammas
        .iter()
        .map(|&gamma| {
            if !(0.0..=1.0).contains(&gamma) {
                return Err(Error::config(format!("gamma must lie in [0, 1], got {gamma}")));
            }
            let mut correct = 0usize;
            for start in (0..eval.len()).step_by(256) {
                let rows: Vec<usize> = (start..(start + 256).min(eval.len())).collect();
                let labels: Vec<usize> = rows.iter().map(|&i| eval.labels()[i]).collect();
                let mut g = Graph::<f32>::new();
                let attached = classifier.params.attach(&mut g, false);
                let x = g.constant(eval.gather(&rows));
                let feats = forward_with_hook(&mut g, &classifier.template, &attached, x, &no_maps, |i, g, v| {
                    if i != layer {
                        return Ok(v);
                    }
                    let mut map = g.value(v).clone();
                    let c = map.shape()[1];
                    let p = map.row_len() / c;
                    for (plane_idx, plane) in map.data_mut().chunks_mut(p).enumerate() {
                        let (mu, var) = &targets[labels[plane_idx / c]];
                        drift_plane(plane, gamma, mu[plane_idx % c], var[plane_idx % c]);
                    }
                    Ok(g.constant(map))
                })?;
                let z = logits(&mut g, &attached, feats.embedding)?;
                let z = g.value(z);
                correct += (0..rows.len()).filter(|&r| argmax(z.row(r)) == labels[r]).count();
            }
            Ok(DriftRow {
                gamma,
                accuracy_pct: 100.0 * correct as f64 / eval.len() as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::map_moments;

    fn sample_map() -> Tensor<f32> {
        Tensor::new([2, 3, 4, 4], (0..96).map(|i| ((i * 37 % 11) as f32 * 0.3).max(0.6) - 0.5).collect()).unwrap()
    }

    fn cfg(gamma: f64) -> DriftConfig {
        DriftConfig {
            gamma,
            layer: 0,
            target_mean: vec![1.5, -0.5, 0.0],
            target_var: vec![0.25, 2.0, 1.0],
        }
    }

    #[test]
    fn zero_gamma_is_identity() {
        let m = sample_map();
        let out = style_drift_features(&m, &cfg(0.0)).unwrap();
        for (a, b) in m.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn full_gamma_hits_target_moments() {
        let m = sample_map().cast::<f64>();
        let out = style_drift_features(&m, &cfg(1.0)).unwrap();
        for s in 0..2 {
            for ch in 0..3 {
                let plane = &out.row(s)[ch * 16..(ch + 1) * 16];
                let mu = plane.iter().sum::<f64>() / 16.0;
                let var = plane.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0;
                assert!((mu - cfg(1.0).target_mean[ch]).abs() < 1e-6);
                assert!((var - cfg(1.0).target_var[ch]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn own_moments_are_a_fixed_point() {
        let m = sample_map().cast::<f64>();
        let mom = map_moments(&sample_map());
        for s in 0..2 {
            let one = Tensor::new([1, 3, 4, 4], m.row(s).to_vec()).unwrap();
            let c = DriftConfig {
                gamma: 0.5,
                layer: 0,
                target_mean: mom[s].0.clone(),
                target_var: mom[s].1.clone(),
            };
            let out = style_drift_features(&one, &c).unwrap();
            for (a, b) in one.data().iter().zip(out.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let m = sample_map();
        assert!(style_drift_features(&m, &cfg(1.5)).is_err());
        let mut c = cfg(0.5);
        c.target_var[0] = -1.0;
        assert!(style_drift_features(&m, &c).is_err());
        c.target_var = vec![1.0];
        assert!(style_drift_features(&m, &c).is_err());
    }

    #[test]
    fn drift_csv_rows() {
        let mut out = Vec::new();
        let rows = [0.0, 0.5, 1.0].map(|g| DriftRow {
            gamma: g,
            accuracy_pct: 80.0,
        });
        write_drift_csv(&mut out, &rows).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "gamma,accuracy_pct\n0,80\n0.5,80\n1,80\n");
    }
}
