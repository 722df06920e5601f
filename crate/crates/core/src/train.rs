//! Training loop, schedule, evaluation and the text-side baselines.
//!
//! Every trainer optimizes exactly one tensor with [`fit`]: the context
//! bank for CoOp, a shared bias or an `e x e` map for the text baselines.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::sha256_hex;
use crate::classifier::{argmax, batch_logits, cosine_logits, ensemble_weights, EnsembleMode, Temperature};
use crate::data::{FeatureDataset, FewShotSplit};
use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::prompt::{class_weights, ClassNameTable, ContextBank, PromptConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;
use crate::words::fill_template;

/// Mixed into the run seed for minibatch shuffling, so that context
/// initialization and batch order use independent streams.
const SHUFFLE_STREAM: u64 = 0x5eed_ba7c;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Coop,
    Zeroshot,
    Ensemble,
    LinearProbe,
    TextBias,
    TextTransform,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Coop,
        Method::Zeroshot,
        Method::Ensemble,
        Method::LinearProbe,
        Method::TextBias,
        Method::TextTransform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Coop => "coop",
            Method::Zeroshot => "zeroshot",
            Method::Ensemble => "ensemble",
            Method::LinearProbe => "linear-probe",
            Method::TextBias => "text-bias",
            Method::TextTransform => "text-transform",
        }
    }

    /// Whether the method learns from the few-shot split at all.
    pub fn is_trained(self) -> bool {
        !matches!(self, Method::Zeroshot | Method::Ensemble)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// TOML table keys are always strings, so shot counts arrive as `"16"`.
fn shot_keys<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<usize, usize>, D::Error> {
    BTreeMap::<String, usize>::deserialize(d)?
        .into_iter()
        .map(|(k, v)| {
            k.trim()
                .parse()
                .map(|k| (k, v))
                .map_err(|_| serde::de::Error::custom(format!("shot count '{k}' is not an integer")))
        })
        .collect()
}

fn default_epoch_map() -> BTreeMap<usize, usize> {
    BTreeMap::from([(1, 50), (2, 100), (4, 100), (8, 200), (16, 200)])
}

/// Optimizer and schedule settings.
///
/// `momentum`, `weight_decay` and the batch policy are not given by the
/// method description; the defaults here are conventional SGD settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    /// shots -> epochs. Shot counts missing from the map use the entry of
    /// the largest listed count below them.
    #[serde(deserialize_with = "shot_keys")]
    pub epochs_by_shots: BTreeMap<usize, usize>,
    /// Overrides `epochs_by_shots` when set.
    pub max_epochs: Option<usize>,
    pub batch_size: usize,
    /// Few-shot sets up to this size are trained full-batch.
    pub full_batch_limit: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub temperature: Temperature,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.002,
            warmup_lr: 1e-5,
            warmup_epochs: 1,
            epochs_by_shots: default_epoch_map(),
            max_epochs: None,
            batch_size: 32,
            full_batch_limit: 256,
            momentum: 0.9,
            weight_decay: 5e-4,
            temperature: Temperature::default(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(self.warmup_lr >= 0.0 && self.warmup_lr.is_finite()) {
            return bad("learning rates must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight decay non-negative");
        }
        if self.max_epochs.is_none() && self.epochs_by_shots.is_empty() {
            return bad("no epoch budget: set max_epochs or epochs_by_shots");
        }
        Ok(())
    }

    pub fn epochs_for(&self, shots: usize) -> Result<usize> {
        if let Some(e) = self.max_epochs {
            return Ok(e);
        }
        self.epochs_by_shots
            .range(..=shots)
            .next_back()
            .map(|(_, &e)| e)
            .ok_or_else(|| Error::Config(format!("no epoch budget for {shots} shots")))
    }

    pub fn schedule(&self, shots: usize, samples: usize) -> Result<Schedule> {
        self.validate()?;
        let steps_per_epoch = if samples <= self.full_batch_limit {
            1
        } else {
            samples.div_ceil(self.batch_size)
        };
        Ok(Schedule {
            epochs: self.epochs_for(shots)?,
            steps_per_epoch,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Learning rate for zero-based `step`.
///
/// Constant `warmup_lr` during the warmup epochs, then
/// `base_lr * (1 + cos(pi * t / T)) / 2` with `t` counted from the end of
/// warmup and `T` the remaining steps. `step == total_steps` is accepted
/// and gives the endpoint value 0.
pub fn lr_at(step: usize, cfg: &TrainConfig, schedule: &Schedule) -> f64 {
    let warmup = (cfg.warmup_epochs * schedule.steps_per_epoch).min(schedule.total_steps());
    if step < warmup {
        return cfg.warmup_lr;
    }
    let span = schedule.total_steps() - warmup;
    if span == 0 {
        return 0.0;
    }
    let t = (step - warmup).min(span) as f64 / span as f64;
    cfg.base_lr * (1.0 + (PI * t).cos()) / 2.0
}

/// SGD with momentum and coupled (L2-style) weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    buf: Option<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buf: None,
        }
    }

    /// Applies the accumulated gradient of `param`, then zeroes it.
    pub fn step(&mut self, param: &mut Tensor, lr: f64) -> Result<()> {
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        let grad = param
            .grad()
            .ok_or_else(|| Error::Contract("optimizer step without a gradient".into()))?;
        let g: Vec<f32> = param.data().iter().zip(grad).map(|(p, g)| g + wd * p).collect();
        let buf = match self.buf.take() {
            None => g,
            Some(mut b) => {
                for (b, g) in b.iter_mut().zip(&g) {
                    *b = mu * *b + g;
                }
                b
            }
        };
        for (p, b) in param.data_mut().iter_mut().zip(&buf) {
            *p -= lr * b;
        }
        self.buf = Some(buf);
        param.zero_grad();
        Ok(())
    }
}

/// Runs the schedule on a single trainable tensor.
///
/// `loss_and_grad(param, batch)` returns the mean loss over `batch` (row
/// indices into the training set) and its gradient. Returns the per-step
/// loss trace.
pub fn fit(
    param: &mut Tensor,
    samples: usize,
    cfg: &TrainConfig,
    schedule: &Schedule,
    mut loss_and_grad: impl FnMut(&Tensor, &[usize]) -> Result<(f32, Vec<f32>)>,
) -> Result<Vec<f32>> {
    if samples == 0 {
        return Err(Error::Contract("empty training set".into()));
    }
    if !param.requires_grad() {
        return Err(Error::Contract("cannot fit a frozen tensor".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..samples).collect();
    let mut trace = Vec::with_capacity(schedule.total_steps());
    let batch = if schedule.steps_per_epoch == 1 {
        samples
    } else {
        cfg.batch_size
    };
    for epoch in 0..schedule.epochs {
        if schedule.steps_per_epoch > 1 {
            order.shuffle(&mut rng);
        }
        for (i, chunk) in order.chunks(batch).enumerate().take(schedule.steps_per_epoch) {
            let step = epoch * schedule.steps_per_epoch + i;
            let (loss, grad) = loss_and_grad(param, chunk)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Run {
                    step,
                    msg: format!("non-finite loss {loss}"),
                });
            }
            param.accumulate_grad(&grad)?;
            sgd.step(param, lr_at(step, cfg, schedule))?;
            trace.push(loss);
        }
    }
    Ok(trace)
}

/// Fails unless `actual` trainable values equal the method's expected count.
pub fn check_census(method: Method, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Contract(format!(
            "{method}: expected {expected} trainable values, found {actual}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub shots: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub steps: usize,
    pub trainable_parameters: usize,
    /// Per-step training loss.
    pub loss_trace: Vec<f32>,
    /// SHA-256 over the method, config, split and input checksums.
    pub fingerprint: String,
    /// Saved checkpoint, relative to the run directory.
    pub checkpoint: Option<String>,
}

impl RunResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn fingerprint(parts: &[&str]) -> String {
    sha256_hex(parts.join("\n").as_bytes())
}

fn split_labels(ds: &FeatureDataset, split: &FewShotSplit) -> Result<(Vec<f32>, Vec<usize>)> {
    if split.indices.is_empty() {
        return Err(Error::Contract("few-shot split is empty".into()));
    }
    if let Some(&bad) = split.indices.iter().find(|&&i| !ds.train_indices().contains(&i)) {
        return Err(Error::Contract(format!("split index {bad} is not a training row")));
    }
    Ok(ds.gather(split.indices.iter().copied()))
}

fn batch_of(features: &[f32], labels: &[usize], dim: usize, rows: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let mut f = Vec::with_capacity(rows.len() * dim);
    let mut l = Vec::with_capacity(rows.len());
    for &r in rows {
        f.extend_from_slice(&features[r * dim..(r + 1) * dim]);
        l.push(labels[r]);
    }
    (f, l)
}

/// Top-1 accuracy of cosine classifier `weights` on the full test split.
pub fn evaluate(weights: &[Vec<f32>], ds: &FeatureDataset, tau: Temperature) -> Result<f64> {
    if weights.len() != ds.num_classes() {
        return Err(Error::dim("evaluate", &[weights.len()], &[ds.num_classes()]));
    }
    let (features, labels) = ds.gather(ds.test_indices());
    let logits = batch_logits(&features, weights, tau)?;
    Ok(accuracy(&logits, &labels))
}

pub fn accuracy(logits: &[Vec<f32>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits.iter().zip(labels).filter(|(l, &y)| argmax(l) == y).count();
    hits as f64 / labels.len() as f64
}

/// Per-template class features `[P][K][e]` for prompts `template` with the
/// class name substituted.
pub fn template_features(
    class_names: &[String],
    encoder: &EncoderWeights,
    vocab: &Vocabulary,
    templates: &[&str],
) -> Result<Vec<Vec<Vec<f32>>>> {
    if templates.is_empty() {
        return Err(Error::Config("at least one template is required".into()));
    }
    templates
        .iter()
        .map(|t| {
            class_names
                .iter()
                .map(|c| Ok(encoder.encode_text(&fill_template(t, c), vocab)?.vector))
                .collect()
        })
        .collect()
}

/// Zero-shot class weights: the embedding ensemble of `templates`. A
/// single template goes through the same path, so an ensemble of copies
/// of one template reproduces it exactly.
pub fn zero_shot_weights(
    class_names: &[String],
    encoder: &EncoderWeights,
    vocab: &Vocabulary,
    templates: &[&str],
) -> Result<Vec<Vec<f32>>> {
    ensemble_weights(&template_features(class_names, encoder, vocab, templates)?)
}

/// Zero-shot test logits under `mode`.
pub fn zero_shot_logits(
    ds: &FeatureDataset,
    encoder: &EncoderWeights,
    vocab: &Vocabulary,
    templates: &[&str],
    mode: EnsembleMode,
    tau: Temperature,
) -> Result<Vec<Vec<f32>>> {
    let (features, _) = ds.gather(ds.test_indices());
    match mode {
        EnsembleMode::Embedding => {
            let w = zero_shot_weights(ds.class_names(), encoder, vocab, templates)?;
            batch_logits(&features, &w, tau)
        }
        EnsembleMode::Logit => {
            let per = template_features(ds.class_names(), encoder, vocab, templates)?;
            let mut mean: Option<Vec<Vec<f32>>> = None;
            for (p, w) in per.iter().enumerate() {
                // Each template's classifier goes through the same
                // normalization as a one-template ensemble.
                let w = ensemble_weights(std::slice::from_ref(w))?;
                let l = batch_logits(&features, &w, tau)?;
                mean = Some(match mean {
                    None => l,
                    Some(mut m) => {
                        let n = (p + 1) as f32;
                        for (mr, lr) in m.iter_mut().zip(&l) {
                            for (a, b) in mr.iter_mut().zip(lr) {
                                *a += (b - *a) / n;
                            }
                        }
                        m
                    }
                });
            }
            Ok(mean.expect("templates checked non-empty"))
        }
    }
}

/// Zero-shot test accuracy.
pub fn zero_shot(
    ds: &FeatureDataset,
    encoder: &EncoderWeights,
    vocab: &Vocabulary,
    templates: &[&str],
    mode: EnsembleMode,
    tau: Temperature,
) -> Result<RunResult> {
    let logits = zero_shot_logits(ds, encoder, vocab, templates, mode, tau)?;
    let (_, labels) = ds.gather(ds.test_indices());
    let method = if templates.len() == 1 {
        Method::Zeroshot
    } else {
        Method::Ensemble
    };
    Ok(RunResult {
        method,
        shots: 0,
        seed: 0,
        accuracy: accuracy(&logits, &labels),
        epochs: 0,
        steps_per_epoch: 0,
        steps: 0,
        trainable_parameters: 0,
        loss_trace: Vec::new(),
        fingerprint: fingerprint(&[
            method.name(),
            &templates.join("|"),
            &serde_json::to_string(&mode)?,
            &tau.value().to_string(),
            ds.checksum(),
            &encoder.checksum()?,
        ]),
        checkpoint: None,
    })
}

struct Prepared {
    features: Vec<f32>,
    labels: Vec<usize>,
    schedule: Schedule,
}

fn prepare(ds: &FeatureDataset, split: &FewShotSplit, cfg: &TrainConfig) -> Result<Prepared> {
    let (features, labels) = split_labels(ds, split)?;
    let schedule = cfg.schedule(split.shots, labels.len())?;
    Ok(Prepared {
        features,
        labels,
        schedule,
    })
}

fn check_encoder_dim(encoder: &EncoderWeights, ds: &FeatureDataset) -> Result<()> {
    if encoder.config.embed_dim != ds.dim() {
        return Err(Error::Config(format!(
            "encoder emits {}-d features, dataset has {}-d features",
            encoder.config.embed_dim,
            ds.dim()
        )));
    }
    Ok(())
}

fn run_fingerprint(
    method: Method,
    extra: &str,
    cfg: &TrainConfig,
    split: &FewShotSplit,
    ds: &FeatureDataset,
    encoder: Option<&EncoderWeights>,
) -> Result<String> {
    let enc = match encoder {
        Some(e) => e.checksum()?,
        None => String::new(),
    };
    Ok(fingerprint(&[
        method.name(),
        extra,
        &serde_json::to_string(cfg)?,
        &serde_json::to_string(split)?,
        ds.checksum(),
        &enc,
    ]))
}

/// Trains a context bank on the few-shot split and evaluates it on the
/// full test split. Only the bank changes; the encoder is read-only.
pub fn train_coop(
    ds: &FeatureDataset,
    split: &FewShotSplit,
    prompt: &PromptConfig,
    encoder: &EncoderWeights,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<(RunResult, ContextBank)> {
    check_encoder_dim(encoder, ds)?;
    encoder.check_vocab(vocab)?;
    let names = ClassNameTable::new(ds.class_names(), vocab)?;
    prompt.validate(encoder.config.context_length, &names)?;
    let p = prepare(ds, split, cfg)?;
    let mut bank = ContextBank::init(prompt, vocab, &encoder.token_embedding, names.len(), cfg.seed)?;
    check_census(
        Method::Coop,
        prompt.parameter_count(names.len(), encoder.config.width),
        bank.parameter_count(),
    )?;
    let (dim, tau) = (ds.dim(), cfg.temperature);
    let trace = fit(&mut bank.vectors, p.labels.len(), cfg, &p.schedule, |vectors, rows| {
        let (f, l) = batch_of(&p.features, &p.labels, dim, rows);
        let mut tape = Tape::<f32>::new();
        let enc = encoder.register(&mut tape);
        let ctx = tape.leaf(vectors);
        let w = class_weights(&mut tape, ctx, prompt, &names, &enc)?;
        let x = tape.input(f, vec![rows.len(), dim], false)?;
        let logits = cosine_logits(&mut tape, x, w, tau)?;
        let loss = tape.cross_entropy(logits, &l)?;
        let grads = tape.backward(loss)?;
        let g = grads.get(ctx).ok_or_else(|| Error::Contract("context received no gradient".into()))?;
        Ok((tape.scalar(loss)?, g.to_vec()))
    })?;
    let weights = bank.class_features(&names, encoder)?;
    let result = RunResult {
        method: Method::Coop,
        shots: split.shots,
        seed: split.seed,
        accuracy: evaluate(&weights, ds, tau)?,
        epochs: p.schedule.epochs,
        steps_per_epoch: p.schedule.steps_per_epoch,
        steps: trace.len(),
        trainable_parameters: bank.parameter_count(),
        loss_trace: trace,
        fingerprint: run_fingerprint(
            Method::Coop,
            &serde_json::to_string(prompt)?,
            cfg,
            split,
            ds,
            Some(encoder),
        )?,
        checkpoint: None,
    };
    Ok((result, bank))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TextHead {
    Bias,
    Transform,
}

fn text_head_weights(zs: &[Vec<f32>], head: TextHead, param: &Tensor) -> Result<Vec<Vec<f32>>> {
    let e = zs[0].len();
    let mut tape = Tape::<f32>::new();
    let w0 = tape.input(zs.concat(), vec![zs.len(), e], false)?;
    let p = tape.leaf(param);
    let w = match head {
        TextHead::Bias => tape.add_row(w0, p)?,
        TextHead::Transform => tape.matmul(w0, p)?,
    };
    Ok(tape.value(w).chunks(e).map(<[f32]>::to_vec).collect())
}

fn train_text_head(
    head: TextHead,
    ds: &FeatureDataset,
    split: &FewShotSplit,
    encoder: &EncoderWeights,
    vocab: &Vocabulary,
    template: &str,
    cfg: &TrainConfig,
) -> Result<(RunResult, Tensor)> {
    check_encoder_dim(encoder, ds)?;
    let zs = zero_shot_weights(ds.class_names(), encoder, vocab, &[template])?;
    let p = prepare(ds, split, cfg)?;
    let e = ds.dim();
    let (method, mut param, expected) = match head {
        TextHead::Bias => (Method::TextBias, Tensor::zeros(vec![e]), e),
        TextHead::Transform => (
            Method::TextTransform,
            Tensor::from_fn(vec![e, e], |i| if i / e == i % e { 1.0 } else { 0.0 }),
            e * e,
        ),
    };
    param.set_requires_grad(true);
    check_census(method, expected, param.numel())?;
    let k = zs.len();
    let tau = cfg.temperature;
    let trace = fit(&mut param, p.labels.len(), cfg, &p.schedule, |param, rows| {
        let (f, l) = batch_of(&p.features, &p.labels, e, rows);
        let mut tape = Tape::<f32>::new();
        let w0 = tape.input(zs.concat(), vec![k, e], false)?;
        let pv = tape.leaf(param);
        let w = match head {
            TextHead::Bias => tape.add_row(w0, pv)?,
            TextHead::Transform => tape.matmul(w0, pv)?,
        };
        let x = tape.input(f, vec![rows.len(), e], false)?;
        let logits = cosine_logits(&mut tape, x, w, tau)?;
        let loss = tape.cross_entropy(logits, &l)?;
        let grads = tape.backward(loss)?;
        let g = grads.get(pv).ok_or_else(|| Error::Contract("head received no gradient".into()))?;
        Ok((tape.scalar(loss)?, g.to_vec()))
    })?;
    let weights = text_head_weights(&zs, head, &param)?;
    let result = RunResult {
        method,
        shots: split.shots,
        seed: split.seed,
        accuracy: evaluate(&weights, ds, tau)?,
        epochs: p.schedule.epochs,
        steps_per_epoch: p.schedule.steps_per_epoch,
        steps: trace.len(),
        trainable_parameters: param.numel(),
        loss_trace: trace,
        fingerprint: run_fingerprint(method, template, cfg, split, ds, Some(encoder))?,
        checkpoint: None,
    };
    Ok((result, param))
}

/// Zero-shot weights plus a learned shared bias `b` (initialized to zero).
pub fn train_text_bias(
    ds: &FeatureDataset,
    split: &FewShotSplit,
    encoder: &EncoderWeights,
    vocab: &Vocabulary,
    template: &str,
    cfg: &TrainConfig,
) -> Result<(RunResult, Tensor)> {
    train_text_head(TextHead::Bias, ds, split, encoder, vocab, template, cfg)
}

/// Zero-shot weights mapped by a learned `e x e` matrix (initialized to identity).
pub fn train_text_transform(
    ds: &FeatureDataset,
    split: &FewShotSplit,
    encoder: &EncoderWeights,
    vocab: &Vocabulary,
    template: &str,
    cfg: &TrainConfig,
) -> Result<(RunResult, Tensor)> {
    train_text_head(TextHead::Transform, ds, split, encoder, vocab, template, cfg)
}

/// Class weights of a trained text baseline.
pub fn text_bias_weights(zs: &[Vec<f32>], bias: &Tensor) -> Result<Vec<Vec<f32>>> {
    text_head_weights(zs, TextHead::Bias, bias)
}

pub fn text_transform_weights(zs: &[Vec<f32>], map: &Tensor) -> Result<Vec<Vec<f32>>> {
    text_head_weights(zs, TextHead::Transform, map)
}
