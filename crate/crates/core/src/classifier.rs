//! Cosine-similarity softmax head.
//!
//! `p(y = i | f) = softmax_i(cos(w_i, f) / tau)`. Zero-shot, ensembled and
//! learned-context classifiers all go through [`cosine_logits`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Real, Tape, Var};

pub const DEFAULT_TEMPERATURE: f32 = 0.01;

/// Softmax temperature `tau > 0`; logits are cosine similarities divided by it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f32", into = "f32")]
pub struct Temperature(f32);

impl Temperature {
    pub fn new(tau: f32) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(Error::Config(format!("temperature must be positive and finite, got {tau}")))
        }
    }

    pub fn value(self) -> f32 {
        self.0
    }

    pub fn logit_scale(self) -> f32 {
        1.0 / self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(DEFAULT_TEMPERATURE)
    }
}

impl TryFrom<f32> for Temperature {
    type Error = Error;
    fn try_from(v: f32) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Temperature> for f32 {
    fn from(t: Temperature) -> f32 {
        t.0
    }
}

/// How several prompt classifiers are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    /// Average unit-normalized class embeddings, then re-normalize.
    #[default]
    Embedding,
    /// Average the per-template logits.
    Logit,
}

/// `[N, K]` logits `cos(f_n, w_k) / tau` for features `[N, e]` and weights `[K, e]`.
pub fn cosine_logits<T: Real>(tape: &mut Tape<'_, T>, features: Var, weights: Var, tau: Temperature) -> Result<Var> {
    let (fs, ws) = (tape.shape(features), tape.shape(weights));
    if fs.len() != 2 || ws.len() != 2 || fs[1] != ws[1] {
        return Err(Error::dim("cosine_logits", fs, ws));
    }
    let f = tape.l2_normalize(features)?;
    let w = tape.l2_normalize(weights)?;
    let wt = tape.transpose(w)?;
    let cos = tape.matmul(f, wt)?;
    Ok(tape.scale(cos, T::of(tau.logit_scale() as f64)))
}

fn stack(weights: &[Vec<f32>]) -> Result<(Vec<f32>, usize)> {
    let e = weights.first().map(Vec::len).ok_or_else(|| Error::Contract("no class weights".into()))?;
    if let Some(bad) = weights.iter().find(|w| w.len() != e) {
        return Err(Error::dim("class weights", &[e], &[bad.len()]));
    }
    Ok((weights.concat(), e))
}

fn widen(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&x| x as f64).collect()
}

/// Logits for a batch of row-major features `[N, e]`. Evaluation runs in
/// double precision and rounds once at the end.
pub fn batch_logits(features: &[f32], weights: &[Vec<f32>], tau: Temperature) -> Result<Vec<Vec<f32>>> {
    let (w, e) = stack(weights)?;
    if e == 0 || features.len() % e != 0 {
        return Err(Error::dim("batch_logits", &[features.len()], &[e]));
    }
    let mut tape = Tape::<f64>::new();
    let f = tape.input(widen(features), vec![features.len() / e, e], false)?;
    let w = tape.input(widen(&w), vec![weights.len(), e], false)?;
    let logits = cosine_logits(&mut tape, f, w, tau)?;
    Ok(tape
        .value(logits)
        .chunks(weights.len())
        .map(|row| row.iter().map(|&v| v as f32).collect())
        .collect())
}

/// Class probabilities for one feature vector.
pub fn predict(feature: &[f32], weights: &[Vec<f32>], tau: Temperature) -> Result<Vec<f32>> {
    let (w, e) = stack(weights)?;
    if feature.len() != e {
        return Err(Error::dim("predict", &[feature.len()], &[e]));
    }
    let mut tape = Tape::<f64>::new();
    let f = tape.input(widen(feature), vec![1, e], false)?;
    let w = tape.input(widen(&w), vec![weights.len(), e], false)?;
    let logits = cosine_logits(&mut tape, f, w, tau)?;
    let p = tape.softmax(logits)?;
    Ok(tape.value(p).iter().map(|&v| v as f32).collect())
}

/// `-log softmax(logits)[label]`, computed with log-sum-exp.
pub fn cross_entropy(logits: &[f32], label: usize) -> Result<f32> {
    if label >= logits.len() {
        return Err(Error::Contract(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f32>().ln();
    Ok(lse - logits[label])
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f32]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn unit(v: &[f32]) -> Result<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Numeric("zero-norm or non-finite class embedding".into()));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Combines `P` prompt classifiers (`per_prompt[p][k]` is class `k`'s
/// feature under prompt `p`) into one: per class, normalize, average, re-normalize.
///
/// The average is a running mean, so identical prompts reproduce the
/// single-prompt result bit for bit.
pub fn ensemble_weights(per_prompt: &[Vec<Vec<f32>>]) -> Result<Vec<Vec<f32>>> {
    let first = per_prompt.first().ok_or_else(|| Error::Contract("ensemble of zero prompts".into()))?;
    let k = first.len();
    if let Some(bad) = per_prompt.iter().find(|p| p.len() != k) {
        return Err(Error::dim("ensemble_weights", &[k], &[bad.len()]));
    }
    (0..k)
        .map(|class| {
            let mut mean: Vec<f32> = Vec::new();
            for (p, prompt) in per_prompt.iter().enumerate() {
                let u = unit(&prompt[class])?;
                if p == 0 {
                    mean = u;
                    continue;
                }
                if u.len() != mean.len() {
                    return Err(Error::dim("ensemble_weights", &[mean.len()], &[u.len()]));
                }
                let n = (p + 1) as f32;
                for (m, x) in mean.iter_mut().zip(&u) {
                    *m += (x - *m) / n;
                }
            }
            unit(&mean)
        })
        .collect()
}
