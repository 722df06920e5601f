//! Linear-probe baseline: multinomial logistic regression on raw image
//! features, `logits = x W^T + b`, trained full-batch in f64.

use serde::{Deserialize, Serialize};

use crate::classifier::argmax;
use crate::data::{FeatureDataset, FewShotSplit};
use crate::error::{Error, Result};
use crate::train::{accuracy, check_census, Method, RunResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// L2 strengths tried. The best val accuracy wins; ties go to the lower
    /// val loss, then to the earlier entry.
    pub l2_grid: Vec<f64>,
    pub iterations: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2_grid: vec![1e-4, 1e-3, 1e-2, 1e-1],
            iterations: 300,
            lr: 1.0,
        }
    }
}

/// Trained probe: `weights` is `[K, e]` row-major, `bias` is `[K]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub l2: f64,
}

impl LinearProbe {
    fn zeros(classes: usize, dim: usize, l2: f64) -> Self {
        Self {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            l2,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                let w = &self.weights[k * self.dim..(k + 1) * self.dim];
                self.bias[k] + w.iter().zip(x).map(|(w, &x)| w * x as f64).sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        let l: Vec<f32> = self.logits(x).into_iter().map(|v| v as f32).collect();
        argmax(&l)
    }

    /// Mean cross-entropy plus `l2 / 2 * |W|^2`, and its gradient when `grad` is set.
    fn loss(&self, xs: &[f32], ys: &[usize], mut grad: Option<(&mut [f64], &mut [f64])>) -> f64 {
        let n = ys.len() as f64;
        let mut total = 0.0;
        for (x, &y) in xs.chunks(self.dim).zip(ys) {
            let z = self.logits(x);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = exps.iter().sum();
            total += max + s.ln() - z[y];
            if let Some((gw, gb)) = grad.as_mut() {
                for k in 0..self.classes {
                    let d = (exps[k] / s - if k == y { 1.0 } else { 0.0 }) / n;
                    gb[k] += d;
                    for (g, &xv) in gw[k * self.dim..(k + 1) * self.dim].iter_mut().zip(x) {
                        *g += d * xv as f64;
                    }
                }
            }
        }
        let reg: f64 = self.weights.iter().map(|w| w * w).sum::<f64>() * self.l2 / 2.0;
        if let Some((gw, _)) = grad {
            for (g, w) in gw.iter_mut().zip(&self.weights) {
                *g += self.l2 * w;
            }
        }
        total / n + reg
    }

    fn fit(&mut self, xs: &[f32], ys: &[usize], cfg: &ProbeConfig) -> Result<Vec<f32>> {
        let mut trace = Vec::with_capacity(cfg.iterations);
        let mut gw = vec![0.0; self.weights.len()];
        let mut gb = vec![0.0; self.bias.len()];
        for step in 0..cfg.iterations {
            gw.fill(0.0);
            gb.fill(0.0);
            let loss = self.loss(xs, ys, Some((&mut gw, &mut gb)));
            if !loss.is_finite() {
                return Err(Error::Run {
                    step,
                    msg: format!("non-finite probe loss {loss}"),
                });
            }
            for (w, g) in self.weights.iter_mut().zip(&gw) {
                *w -= cfg.lr * g;
            }
            for (b, g) in self.bias.iter_mut().zip(&gb) {
                *b -= cfg.lr * g;
            }
            trace.push(loss as f32);
        }
        Ok(trace)
    }

    fn accuracy(&self, xs: &[f32], ys: &[usize]) -> f64 {
        let logits: Vec<Vec<f32>> = xs
            .chunks(self.dim)
            .map(|x| self.logits(x).into_iter().map(|v| v as f32).collect())
            .collect();
        accuracy(&logits, ys)
    }
}

/// Trains one probe per L2 strength, selects on the val split and reports
/// test accuracy of the selected probe. Without a val split the first grid
/// entry is used.
pub fn train_linear_probe(
    ds: &FeatureDataset,
    split: &FewShotSplit,
    cfg: &ProbeConfig,
) -> Result<(RunResult, LinearProbe)> {
    if cfg.l2_grid.is_empty() || cfg.l2_grid.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::Config("probe L2 grid must be non-empty and non-negative".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Config("probe learning rate must be positive".into()));
    }
    if split.indices.iter().any(|&i| !ds.train_indices().contains(&i)) || split.indices.is_empty() {
        return Err(Error::Contract("probe split must be a non-empty set of training rows".into()));
    }
    let (k, e) = (ds.num_classes(), ds.dim());
    let (xs, ys) = ds.gather(split.indices.iter().copied());
    let (vx, vy) = ds.gather(ds.val_indices());
    let mut best: Option<(f64, f64, LinearProbe, Vec<f32>)> = None;
    for &l2 in &cfg.l2_grid {
        let mut probe = LinearProbe::zeros(k, e, l2);
        check_census(Method::LinearProbe, k * (e + 1), probe.parameter_count())?;
        let trace = probe.fit(&xs, &ys, cfg)?;
        if vy.is_empty() {
            best = Some((0.0, 0.0, probe, trace));
            break;
        }
        let acc = probe.accuracy(&vx, &vy);
        let val_loss = LinearProbe { l2: 0.0, ..probe.clone() }.loss(&vx, &vy, None);
        let better = match &best {
            None => true,
            Some((ba, bl, _, _)) => acc > *ba || (acc == *ba && val_loss < *bl),
        };
        if better {
            best = Some((acc, val_loss, probe, trace));
        }
    }
    let (_, _, probe, trace) = best.expect("grid checked non-empty");
    let (tx, ty) = ds.gather(ds.test_indices());
    let fp = crate::archive::sha256_hex(
        [
            Method::LinearProbe.name(),
            &serde_json::to_string(cfg)?,
            &serde_json::to_string(split)?,
            ds.checksum(),
        ]
        .join("\n")
        .as_bytes(),
    );
    let result = RunResult {
        method: Method::LinearProbe,
        shots: split.shots,
        seed: split.seed,
        accuracy: probe.accuracy(&tx, &ty),
        epochs: cfg.iterations,
        steps_per_epoch: 1,
        steps: trace.len(),
        trainable_parameters: probe.parameter_count(),
        loss_trace: trace,
        fingerprint: fp,
        checkpoint: None,
    };
    Ok((result, probe))
}
