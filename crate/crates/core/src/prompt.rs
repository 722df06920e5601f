//! Learnable context vectors and per-class prompt assembly.
//!
//! A prompt is the embedding sequence
//! `[SOS] V_1 .. V_M [CLASS] [EOS] [PAD]..` (end placement) or
//! `[SOS] V_1 .. V_h [CLASS] V_h+1 .. V_M [EOS] [PAD]..` with `h = ceil(M/2)`
//! (middle placement). `[CLASS]` expands to all subword embeddings of the
//! class name. SOS, EOS, PAD and class rows come from the frozen embedding
//! table; only the `V` rows are trainable.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::encoder::{EncoderVars, EncoderWeights};
use crate::error::{Error, Result};
use crate::tape::{Real, Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

pub const CONTEXT_INIT_STD: f32 = 0.02;
const ARCHIVE_KIND: &str = "context";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    #[default]
    End,
    Middle,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    /// One context shared by every class.
    #[default]
    Unified,
    /// An independent context per class.
    #[serde(rename = "csc")]
    ClassSpecific,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ContextInit {
    Random { std: f32 },
    /// Copy the embeddings of a phrase that tokenizes to exactly `M` subwords.
    Manual { phrase: String },
}

impl Default for ContextInit {
    fn default() -> Self {
        ContextInit::Random { std: CONTEXT_INIT_STD }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Number of context tokens `M`.
    pub n_ctx: usize,
    pub placement: Placement,
    pub sharing: Sharing,
    pub init: ContextInit,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            n_ctx: 16,
            placement: Placement::End,
            sharing: Sharing::Unified,
            init: ContextInit::default(),
        }
    }
}

impl PromptConfig {
    /// Context rows placed before the class name.
    pub fn front_len(&self) -> usize {
        match self.placement {
            Placement::End => self.n_ctx,
            Placement::Middle => self.n_ctx.div_ceil(2),
        }
    }

    pub fn validate(&self, context_length: usize, names: &ClassNameTable) -> Result<()> {
        if self.n_ctx == 0 {
            return Err(Error::Config("context length M must be at least 1".into()));
        }
        if let ContextInit::Random { std } = self.init {
            if !(std >= 0.0) || !std.is_finite() {
                return Err(Error::Config(format!("invalid init std {std}")));
            }
        }
        let needed = self.n_ctx + names.max_name_len() + 2;
        if needed > context_length {
            return Err(Error::Config(format!(
                "prompt needs {needed} positions (M={} + longest class name {} + 2) but the cap is {context_length}",
                self.n_ctx,
                names.max_name_len()
            )));
        }
        Ok(())
    }

    /// Trainable parameter count for `classes` classes and width `d`.
    pub fn parameter_count(&self, classes: usize, width: usize) -> usize {
        match self.sharing {
            Sharing::Unified => self.n_ctx * width,
            Sharing::ClassSpecific => classes * self.n_ctx * width,
        }
    }
}

/// Class names and their subword ids under one vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassNameTable {
    names: Vec<String>,
    token_ids: Vec<Vec<usize>>,
    sos: usize,
    eos: usize,
    pad: usize,
}

impl ClassNameTable {
    pub fn new<S: AsRef<str>>(names: &[S], vocab: &Vocabulary) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", names.len())));
        }
        let token_ids = names
            .iter()
            .map(|n| {
                let ids: Vec<usize> = vocab.tokenize(n.as_ref()).into_iter().map(|i| i as usize).collect();
                if ids.is_empty() {
                    Err(Error::Config(format!("class name '{}' has no subwords", n.as_ref())))
                } else {
                    Ok(ids)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            names: names.iter().map(|n| n.as_ref().to_string()).collect(),
            token_ids,
            sos: vocab.sos() as usize,
            eos: vocab.eos() as usize,
            pad: vocab.pad() as usize,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn token_ids(&self, i: usize) -> &[usize] {
        &self.token_ids[i]
    }

    pub fn max_name_len(&self) -> usize {
        self.token_ids.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Same table with classes reordered: entry `j` is old class `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            names: order.iter().map(|&i| self.names[i].clone()).collect(),
            token_ids: order.iter().map(|&i| self.token_ids[i].clone()).collect(),
            ..self.clone()
        }
    }
}

/// The learnable context: `[M, d]` (unified) or `[K, M, d]` (class-specific).
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBank {
    pub config: PromptConfig,
    pub vectors: Tensor,
}

impl ContextBank {
    pub fn init(
        config: &PromptConfig,
        vocab: &Vocabulary,
        word_embeddings: &Tensor,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if config.n_ctx == 0 {
            return Err(Error::Config("context length M must be at least 1".into()));
        }
        let d = word_embeddings.cols();
        let copies = match config.sharing {
            Sharing::Unified => 1,
            Sharing::ClassSpecific => classes,
        };
        let block = match &config.init {
            ContextInit::Random { std } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Tensor::randn(vec![copies * config.n_ctx, d], *std, &mut rng).into_data()
            }
            ContextInit::Manual { phrase } => {
                let ids = vocab.tokenize(phrase);
                if ids.len() != config.n_ctx {
                    return Err(Error::Config(format!(
                        "init phrase '{phrase}' has {} subwords, M is {}",
                        ids.len(),
                        config.n_ctx
                    )));
                }
                if let Some(bad) = ids.iter().find(|&&i| i as usize >= word_embeddings.rows()) {
                    return Err(Error::Contract(format!("token id {bad} outside the embedding table")));
                }
                let one: Vec<f32> = ids.iter().flat_map(|&i| word_embeddings.row(i as usize).iter().copied()).collect();
                one.repeat(copies)
            }
        };
        let shape = match config.sharing {
            Sharing::Unified => vec![config.n_ctx, d],
            Sharing::ClassSpecific => vec![classes, config.n_ctx, d],
        };
        Ok(Self {
            config: config.clone(),
            vectors: Tensor::new(shape, block)?.with_requires_grad(true),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.vectors.numel()
    }

    pub fn width(&self) -> usize {
        self.vectors.cols()
    }

    /// Number of classes for a class-specific bank.
    pub fn classes(&self) -> Option<usize> {
        match self.config.sharing {
            Sharing::Unified => None,
            Sharing::ClassSpecific => Some(self.vectors.shape()[0]),
        }
    }

    /// Context rows `[M, d]` used by class `i`.
    pub fn slot_rows(&self, class_index: usize) -> &[f32] {
        let block = self.config.n_ctx * self.width();
        match self.config.sharing {
            Sharing::Unified => self.vectors.data(),
            Sharing::ClassSpecific => &self.vectors.data()[class_index * block..(class_index + 1) * block],
        }
    }

    /// Class features `[K, e]` for evaluation (no gradient).
    pub fn class_features(&self, names: &ClassNameTable, encoder: &EncoderWeights) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::<f32>::new();
        let enc = encoder.register(&mut tape);
        let bank = tape.leaf(&self.vectors);
        let w = class_weights(&mut tape, bank, &self.config, names, &enc)?;
        let e = encoder.config.embed_dim;
        Ok(tape.value(w).chunks(e).map(<[f32]>::to_vec).collect())
    }

    pub fn to_archive(&self, class_names: &[String]) -> Archive {
        let meta = serde_json::json!({ "prompt": self.config, "class_names": class_names });
        let mut a = Archive::new(ARCHIVE_KIND, meta);
        a.push_tensor("context", &self.vectors);
        a
    }

    /// Loads a checkpoint, returning the bank and its class names.
    pub fn from_archive(a: &Archive) -> Result<(Self, Vec<String>)> {
        if a.kind != ARCHIVE_KIND {
            return Err(Error::Format(format!("expected a context file, found {}", a.kind)));
        }
        let config: PromptConfig = serde_json::from_value(a.meta["prompt"].clone())
            .map_err(|e| Error::Format(format!("prompt config: {e}")))?;
        let names: Vec<String> = serde_json::from_value(a.meta["class_names"].clone())
            .map_err(|e| Error::Format(format!("class names: {e}")))?;
        let vectors = a.tensor("context")?;
        let expected_rank = match config.sharing {
            Sharing::Unified => 2,
            Sharing::ClassSpecific => 3,
        };
        let s = vectors.shape();
        if s.len() != expected_rank || s[s.len() - 2] != config.n_ctx {
            return Err(Error::Format(format!("context tensor shape {s:?} does not match M={}", config.n_ctx)));
        }
        if !vectors.is_finite() {
            return Err(Error::Format("context tensor contains non-finite values".into()));
        }
        Ok((
            Self {
                config,
                vectors: vectors.with_requires_grad(true),
            },
            names,
        ))
    }

    pub fn save(&self, path: &Path, class_names: &[String]) -> Result<()> {
        self.to_archive(class_names).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Builds the `[L, d]` prompt for class `class_index`; returns it with the EOS row index.
pub fn assemble<T: Real>(
    tape: &mut Tape<'_, T>,
    bank: Var,
    config: &PromptConfig,
    names: &ClassNameTable,
    class_index: usize,
    token_table: Var,
    context_length: usize,
) -> Result<(Var, usize)> {
    if class_index >= names.len() {
        return Err(Error::Contract(format!("class {class_index} out of range for {} classes", names.len())));
    }
    let m = config.n_ctx;
    let class_ids = names.token_ids(class_index);
    let eos_index = 1 + m + class_ids.len();
    if eos_index >= context_length {
        return Err(Error::Config(format!(
            "prompt for '{}' needs {} positions, cap is {context_length}",
            names.names()[class_index],
            eos_index + 1
        )));
    }
    let ctx = match config.sharing {
        Sharing::Unified => bank,
        Sharing::ClassSpecific => {
            let d = *tape.shape(bank).last().unwrap_or(&0);
            let one = tape.slice_rows(bank, class_index, 1)?;
            tape.reshape(one, vec![m, d])?
        }
    };
    if tape.shape(ctx)[0] != m {
        return Err(Error::dim("assemble", tape.shape(ctx), &[m]));
    }
    let front = config.front_len();
    let sos = tape.gather(token_table, &[names.sos])?;
    let class_rows = tape.gather(token_table, class_ids)?;
    let mut tail_ids = vec![names.eos];
    tail_ids.resize(context_length - eos_index, names.pad);
    let tail = tape.gather(token_table, &tail_ids)?;

    let mut parts = vec![sos];
    if front == m {
        parts.extend([ctx, class_rows]);
    } else {
        let before = tape.slice_rows(ctx, 0, front)?;
        let after = tape.slice_rows(ctx, front, m - front)?;
        parts.extend([before, class_rows, after]);
    }
    parts.push(tail);
    Ok((tape.concat(&parts)?, eos_index))
}

/// Encodes every class prompt and stacks the features into `[K, e]`.
pub fn class_weights<T: Real>(
    tape: &mut Tape<'_, T>,
    bank: Var,
    config: &PromptConfig,
    names: &ClassNameTable,
    encoder: &EncoderVars,
) -> Result<Var> {
    let features = (0..names.len())
        .map(|i| {
            let (seq, eos) = assemble(
                tape,
                bank,
                config,
                names,
                i,
                encoder.token_embedding,
                encoder.config.context_length,
            )?;
            encoder.encode_sequence(tape, seq, eos)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&features)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&crate::words::default_corpus(), 512).unwrap()
    }

    fn table(v: &Vocabulary) -> Tensor {
        Tensor::from_fn(vec![v.len(), 4], |i| (i as f32 * 0.013).sin())
    }

    #[test]
    fn manual_init_copies_embedding_rows() {
        let v = vocab();
        let t = table(&v);
        let cfg = PromptConfig {
            n_ctx: 4,
            init: ContextInit::Manual {
                phrase: "a photo of a".into(),
            },
            ..Default::default()
        };
        let bank = ContextBank::init(&cfg, &v, &t, 3, 0).unwrap();
        let ids = v.tokenize("a photo of a");
        for (slot, &id) in ids.iter().enumerate() {
            assert_eq!(bank.vectors.row(slot), t.row(id as usize));
        }
        let bad = PromptConfig { n_ctx: 5, ..cfg };
        assert!(matches!(ContextBank::init(&bad, &v, &t, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn manual_csc_replicates_phrase() {
        let v = vocab();
        let t = table(&v);
        let cfg = PromptConfig {
            n_ctx: 4,
            sharing: Sharing::ClassSpecific,
            init: ContextInit::Manual {
                phrase: "a photo of a".into(),
            },
            ..Default::default()
        };
        let bank = ContextBank::init(&cfg, &v, &t, 3, 0).unwrap();
        assert_eq!(bank.vectors.shape(), &[3, 4, 4]);
        assert_eq!(bank.slot_rows(0), bank.slot_rows(2));
    }

    #[test]
    fn random_init_is_seeded() {
        let v = vocab();
        let t = table(&v);
        let cfg = PromptConfig::default();
        let a = ContextBank::init(&cfg, &v, &t, 3, 11).unwrap();
        let b = ContextBank::init(&cfg, &v, &t, 3, 11).unwrap();
        let c = ContextBank::init(&cfg, &v, &t, 3, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.vectors.requires_grad());
    }

    #[test]
    fn csc_parameter_count() {
        let cfg = PromptConfig {
            n_ctx: 16,
            sharing: Sharing::ClassSpecific,
            ..Default::default()
        };
        assert_eq!(cfg.parameter_count(10, 64), 10 * 16 * 64);
        let v = vocab();
        let t = Tensor::zeros(vec![v.len(), 64]);
        assert_eq!(ContextBank::init(&cfg, &v, &t, 10, 1).unwrap().parameter_count(), 10240);
    }

    fn assembled_rows(cfg: &PromptConfig, class: usize) -> (Vec<f32>, usize, Vocabulary) {
        let v = vocab();
        let t = table(&v);
        let names = ClassNameTable::new(&["dog", "hippopotamus"], &v).unwrap();
        let bank = ContextBank::init(cfg, &v, &t, 2, 5).unwrap();
        let mut tape = Tape::<f32>::new();
        let tv = tape.leaf(&t);
        let bv = tape.leaf(&bank.vectors);
        let (seq, eos) = assemble(&mut tape, bv, cfg, &names, class, tv, 24).unwrap();
        assert_eq!(tape.shape(seq), &[24, 4]);
        (tape.value(seq).to_vec(), eos, v)
    }

    #[test]
    fn end_placement_eos_index() {
        let cfg = PromptConfig {
            n_ctx: 2,
            ..Default::default()
        };
        let (_, eos, v) = assembled_rows(&cfg, 0);
        assert_eq!(v.tokenize("dog").len(), 1);
        assert_eq!(eos, 4);
    }

    #[test]
    fn mid_placement_splits_context() {
        let v = vocab();
        let t = table(&v);
        let names = ClassNameTable::new(&["dog", "cat"], &v).unwrap();
        for (m, before) in [(4usize, 2usize), (5, 3)] {
            let cfg = PromptConfig {
                n_ctx: m,
                placement: Placement::Middle,
                ..Default::default()
            };
            let bank = ContextBank::init(&cfg, &v, &t, 2, 5).unwrap();
            let mut tape = Tape::<f32>::new();
            let tv = tape.leaf(&t);
            let bv = tape.leaf(&bank.vectors);
            let (seq, eos) = assemble(&mut tape, bv, &cfg, &names, 0, tv, 16).unwrap();
            let rows = tape.value(seq);
            let dog = v.tokenize("dog")[0] as usize;
            assert_eq!(&rows[(1 + before) * 4..(2 + before) * 4], t.row(dog));
            assert_eq!(&rows[4..8], bank.vectors.row(0));
            assert_eq!(&rows[(2 + before) * 4..(3 + before) * 4], bank.vectors.row(before));
            let end_cfg = PromptConfig {
                placement: Placement::End,
                ..cfg.clone()
            };
            assert_eq!(eos, 1 + m + 1, "placement-invariant eos for M={m}");
            assert_eq!(end_cfg.front_len(), m);
        }
    }

    #[test]
    fn unified_prompts_differ_only_in_class_rows() {
        let cfg = PromptConfig {
            n_ctx: 3,
            ..Default::default()
        };
        let v = vocab();
        let t = table(&v);
        let names = ClassNameTable::new(&["dog", "cat"], &v).unwrap();
        let bank = ContextBank::init(&cfg, &v, &t, 2, 5).unwrap();
        let mut tape = Tape::<f32>::new();
        let tv = tape.leaf(&t);
        let bv = tape.leaf(&bank.vectors);
        let (a, _) = assemble(&mut tape, bv, &cfg, &names, 0, tv, 12).unwrap();
        let (b, _) = assemble(&mut tape, bv, &cfg, &names, 1, tv, 12).unwrap();
        let differing: Vec<usize> = tape
            .value(a)
            .chunks(4)
            .zip(tape.value(b).chunks(4))
            .enumerate()
            .filter(|(_, (x, y))| x != y)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(differing, vec![4]);
    }

    #[test]
    fn too_long_prompt_is_config_error() {
        let v = vocab();
        let names = ClassNameTable::new(&["dog", "hippopotamus"], &v).unwrap();
        let cfg = PromptConfig {
            n_ctx: 16,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(12, &names), Err(Error::Config(_))));
        assert!(cfg.validate(16 + names.max_name_len() + 2, &names).is_ok());
    }

    #[test]
    fn class_table_needs_two_classes() {
        let v = vocab();
        assert!(ClassNameTable::new(&["dog"], &v).is_err());
        assert!(ClassNameTable::new(&["dog", "  "], &v).is_err());
    }
}
