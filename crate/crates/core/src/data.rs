//! Precomputed image-feature datasets, few-shot sampling and a synthetic
//! generator.
//!
//! On disk a dataset is an [`Archive`] of kind `dataset` with two entries,
//! `features` (`[N, e]` f32) and `labels` (`[N]` u32). Samples are stored
//! split by split (train, then val, then test); the header `meta` holds
//! `{dim, num_samples, class_names, template, splits: {train, val, test}}`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::words::{CLASS_WORDS, DEFAULT_TEMPLATE};

/// Shot counts of the standard few-shot protocol.
pub const PROTOCOL_SHOTS: [usize; 5] = [1, 2, 4, 8, 16];
/// Seeds averaged by the standard protocol.
pub const PROTOCOL_SEEDS: [u64; 3] = [1, 2, 3];

const ARCHIVE_KIND: &str = "dataset";
const DIRECTION_ATTEMPTS: usize = 2000;
const DIRECTION_RESTARTS: usize = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    dim: usize,
    num_samples: usize,
    class_names: Vec<String>,
    template: Option<String>,
    splits: SplitSizes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    features: Vec<f32>,
    dim: usize,
    labels: Vec<u32>,
    class_names: Vec<String>,
    template: Option<String>,
    splits: SplitSizes,
    checksum: String,
}

fn feature_checksum(features: &[f32]) -> String {
    let bytes: Vec<u8> = features.iter().flat_map(|x| x.to_le_bytes()).collect();
    crate::archive::sha256_hex(&bytes)
}

impl FeatureDataset {
    /// Builds a validated dataset. Rows must be ordered train, val, test.
    pub fn new(
        features: Vec<f32>,
        dim: usize,
        labels: Vec<u32>,
        class_names: Vec<String>,
        template: Option<String>,
        splits: SplitSizes,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::Data(m));
        if dim == 0 || features.len() != labels.len() * dim {
            return bad(format!("{} feature values do not form {} rows of width {dim}", features.len(), labels.len()));
        }
        if splits.total() != labels.len() {
            return bad(format!("split sizes sum to {}, dataset has {} rows", splits.total(), labels.len()));
        }
        if splits.test == 0 {
            return bad("test split is empty".into());
        }
        if class_names.len() < 2 {
            return bad(format!("need at least 2 class names, got {}", class_names.len()));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= class_names.len()) {
            return bad(format!("label {l} but only {} class names declared", class_names.len()));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return bad("features contain non-finite values".into());
        }
        let checksum = feature_checksum(&features);
        Ok(Self {
            features,
            dim,
            labels,
            class_names,
            template,
            splits,
            checksum,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn template(&self) -> Option<&str> {
        self.template.as_deref()
    }

    pub fn splits(&self) -> SplitSizes {
        self.splits
    }

    /// SHA-256 of the feature block.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.splits.train
    }

    pub fn val_indices(&self) -> std::ops::Range<usize> {
        self.splits.train..self.splits.train + self.splits.val
    }

    pub fn test_indices(&self) -> std::ops::Range<usize> {
        self.splits.train + self.splits.val..self.len()
    }

    /// Row-major features for `indices`.
    pub fn gather(&self, indices: impl IntoIterator<Item = usize>) -> (Vec<f32>, Vec<usize>) {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in indices {
            feats.extend_from_slice(self.feature(i));
            labels.push(self.label(i));
        }
        (feats, labels)
    }

    pub fn to_archive(&self) -> Archive {
        let meta = DatasetMeta {
            dim: self.dim,
            num_samples: self.len(),
            class_names: self.class_names.clone(),
            template: self.template.clone(),
            splits: self.splits,
        };
        let mut a = Archive::new(ARCHIVE_KIND, serde_json::to_value(meta).expect("plain struct"));
        let t = Tensor::new(vec![self.len(), self.dim], self.features.clone()).expect("validated shape");
        a.push_tensor("features", &t);
        a.push_u32("labels", self.labels.clone());
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind != ARCHIVE_KIND {
            return Err(Error::Format(format!("expected a dataset file, found {}", a.kind)));
        }
        let meta: DatasetMeta =
            serde_json::from_value(a.meta.clone()).map_err(|e| Error::Format(format!("dataset header: {e}")))?;
        let features = a.tensor("features")?;
        let labels = a.u32s("labels")?.to_vec();
        if features.shape() != [meta.num_samples, meta.dim] || labels.len() != meta.num_samples {
            return Err(Error::Format(format!(
                "header declares {} x {} but blocks hold {:?} features and {} labels",
                meta.num_samples,
                meta.dim,
                features.shape(),
                labels.len()
            )));
        }
        Self::new(features.into_data(), meta.dim, labels, meta.class_names, meta.template, meta.splits)
            .map_err(|e| match e {
                Error::Data(m) => Error::Format(m),
                other => other,
            })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    /// Loads and validates a dataset file; any defect is a format error.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// A class-balanced few-shot subsample of the train split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FewShotSplit {
    pub shots: usize,
    pub seed: u64,
    /// Selected dataset rows, grouped by class and ascending within a class.
    pub indices: Vec<usize>,
}

/// Draws `shots` train examples per class without replacement.
///
/// Only labels are consulted, never feature values. Shot counts outside
/// [`PROTOCOL_SHOTS`] need `allow_any_shots`.
pub fn sample_shots(ds: &FeatureDataset, shots: usize, seed: u64, allow_any_shots: bool) -> Result<FewShotSplit> {
    if shots == 0 || (!allow_any_shots && !PROTOCOL_SHOTS.contains(&shots)) {
        return Err(Error::Config(format!(
            "{shots} shots is not one of {PROTOCOL_SHOTS:?} (pass allow_any_shots to override)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(shots * ds.num_classes());
    for (class, name) in ds.class_names().iter().enumerate() {
        let mut pool: Vec<usize> = ds.train_indices().filter(|&i| ds.label(i) == class).collect();
        if pool.len() < shots {
            return Err(Error::Data(format!(
                "class '{name}' has {} training examples, {shots} shots requested",
                pool.len()
            )));
        }
        let (chosen, _) = pool.partial_shuffle(&mut rng, shots);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        indices.extend(chosen);
    }
    Ok(FewShotSplit { shots, seed, indices })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Required `1 - cos` between every pair of class directions.
    pub margin: f32,
    /// Noise scale: each sample is `normalize(direction + noise * z / sqrt(dim))`
    /// with `z` standard normal, so the perturbation has norm about `noise`.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            dim: 32,
            train_per_class: 32,
            val_per_class: 8,
            test_per_class: 50,
            margin: 0.3,
            noise: 0.15,
            seed: 1,
        }
    }
}

/// A generated dataset together with the class directions it was drawn around.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: FeatureDataset,
    pub directions: Vec<Vec<f32>>,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn class_directions(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f32>>> {
    let max_cos = 1.0 - cfg.margin;
    'restart: for _ in 0..DIRECTION_RESTARTS {
        let mut dirs: Vec<Vec<f32>> = Vec::with_capacity(cfg.classes);
        while dirs.len() < cfg.classes {
            let accepted = (0..DIRECTION_ATTEMPTS).find_map(|_| {
                let c = random_unit(rng, cfg.dim);
                dirs.iter().all(|d| dot(d, &c) < max_cos).then_some(c)
            });
            match accepted {
                Some(c) => dirs.push(c),
                None => continue 'restart,
            }
        }
        return Ok(dirs);
    }
    Err(Error::Config(format!(
        "cannot place {} class directions in {} dimensions with margin {}",
        cfg.classes, cfg.dim, cfg.margin
    )))
}

/// Class clusters on the unit sphere, named after bundled English words.
pub fn make_synthetic(cfg: &SynthConfig) -> Result<Synthetic> {
    if cfg.classes < 2 || cfg.classes > CLASS_WORDS.len() {
        return Err(Error::Config(format!(
            "synthetic datasets support 2..={} classes, got {}",
            CLASS_WORDS.len(),
            cfg.classes
        )));
    }
    if cfg.dim == 0 || !(cfg.margin > 0.0) || !(cfg.noise >= 0.0) || cfg.test_per_class == 0 {
        return Err(Error::Config("dim and test size must be positive, margin > 0, noise >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let directions = class_directions(cfg, &mut rng)?;
    let scale = cfg.noise / (cfg.dim as f32).sqrt();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for per_class in [cfg.train_per_class, cfg.val_per_class, cfg.test_per_class] {
        for (class, dir) in directions.iter().enumerate() {
            for _ in 0..per_class {
                if cfg.noise == 0.0 {
                    features.extend_from_slice(dir);
                } else {
                    let v: Vec<f32> = dir
                        .iter()
                        .map(|&x| x + scale * { let z: f32 = StandardNormal.sample(&mut rng); z })
                        .collect();
                    let norm = dot(&v, &v).sqrt();
                    features.extend(v.iter().map(|x| x / norm));
                }
                labels.push(class as u32);
            }
        }
    }
    let k = cfg.classes;
    let splits = SplitSizes {
        train: cfg.train_per_class * k,
        val: cfg.val_per_class * k,
        test: cfg.test_per_class * k,
    };
    let names = CLASS_WORDS[..k].iter().map(|s| s.to_string()).collect();
    let dataset = FeatureDataset::new(
        features,
        cfg.dim,
        labels,
        names,
        Some(DEFAULT_TEMPLATE.to_string()),
        splits,
    )?;
    Ok(Synthetic { dataset, directions })
}
