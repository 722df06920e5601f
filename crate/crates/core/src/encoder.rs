//! Frozen pre-layernorm Transformer text encoder.
//!
//! Each block computes `x + attn(ln1(x))` followed by `x + mlp(ln2(x))`, with
//! a tanh-GELU MLP of width `4 * width`. The text feature is the final
//! layernorm of the hidden state at the EOS row, multiplied by
//! `text_projection`. Attention is causal by default, so rows after EOS are
//! never computed: the forward pass only runs rows `0..=eos_index`, which
//! gives the same EOS feature as the full-length pass.
//!
//! Weights are stored as `x @ W` matrices, i.e. `[in, out]`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::tape::{Real, Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenSequence, Vocabulary};

/// Standard deviation of the token embedding table at init.
pub const EMBED_INIT_STD: f32 = 0.02;

/// Extra scale on residual-branch output projections at init. Keeps each
/// block close to the identity so embedding-scale inputs dominate the
/// residual stream. Twice or half this value makes short contexts train
/// noticeably slower.
pub const BRANCH_INIT_SCALE: f32 = 0.025;
const ARCHIVE_KIND: &str = "encoder";

fn default_causal() -> bool {
    true
}

fn default_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Transformer width `d` (also the word-embedding size).
    pub width: usize,
    /// Projected feature size `e`.
    pub embed_dim: usize,
    /// Sequence cap `L`.
    pub context_length: usize,
    pub vocab_size: usize,
    #[serde(default = "default_causal")]
    pub causal: bool,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            width: 64,
            embed_dim: 32,
            context_length: 32,
            vocab_size: 512,
            causal: true,
            eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return c(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.embed_dim == 0 || self.vocab_size == 0 {
            return c("embed_dim and vocab_size must be positive".into());
        }
        if self.context_length < 3 {
            return c(format!("context length {} cannot hold SOS, a token and EOS", self.context_length));
        }
        if !(self.eps > 0.0) {
            return c("layernorm eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub q_weight: Tensor,
    pub q_bias: Tensor,
    pub k_weight: Tensor,
    pub k_bias: Tensor,
    pub v_weight: Tensor,
    pub v_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

impl Block {
    fn named(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.q.weight", &self.q_weight),
            ("attn.q.bias", &self.q_bias),
            ("attn.k.weight", &self.k_weight),
            ("attn.k.bias", &self.k_bias),
            ("attn.v.weight", &self.v_weight),
            ("attn.v.bias", &self.v_bias),
            ("attn.out.weight", &self.out_weight),
            ("attn.out.bias", &self.out_bias),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("mlp.fc1.weight", &self.fc1_weight),
            ("mlp.fc1.bias", &self.fc1_bias),
            ("mlp.fc2.weight", &self.fc2_weight),
            ("mlp.fc2.bias", &self.fc2_bias),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub token_embedding: Tensor,
    pub positional_embedding: Tensor,
    pub blocks: Vec<Block>,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
    pub text_projection: Tensor,
    /// Softmax temperature shipped with imported weights, if any.
    pub temperature: Option<f32>,
}

/// A projected text feature.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeature {
    pub vector: Vec<f32>,
    pub source: String,
}

/// Expected `(name, shape)` pairs for a config, in storage order.
pub fn manifest(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (d, e, l, v) = (config.width, config.embed_dim, config.context_length, config.vocab_size);
    let mut out = vec![
        ("token_embedding".to_string(), vec![v, d]),
        ("positional_embedding".to_string(), vec![l, d]),
    ];
    for i in 0..config.layers {
        let shapes: [(&str, Vec<usize>); 16] = [
            ("ln1.gain", vec![d]),
            ("ln1.bias", vec![d]),
            ("attn.q.weight", vec![d, d]),
            ("attn.q.bias", vec![d]),
            ("attn.k.weight", vec![d, d]),
            ("attn.k.bias", vec![d]),
            ("attn.v.weight", vec![d, d]),
            ("attn.v.bias", vec![d]),
            ("attn.out.weight", vec![d, d]),
            ("attn.out.bias", vec![d]),
            ("ln2.gain", vec![d]),
            ("ln2.bias", vec![d]),
            ("mlp.fc1.weight", vec![d, 4 * d]),
            ("mlp.fc1.bias", vec![4 * d]),
            ("mlp.fc2.weight", vec![4 * d, d]),
            ("mlp.fc2.bias", vec![d]),
        ];
        out.extend(shapes.into_iter().map(|(n, s)| (format!("blocks.{i}.{n}"), s)));
    }
    out.push(("final_ln.gain".to_string(), vec![d]));
    out.push(("final_ln.bias".to_string(), vec![d]));
    out.push(("text_projection".to_string(), vec![d, e]));
    out
}

impl EncoderWeights {
    /// Seeded Gaussian initialization.
    ///
    /// Token embeddings use `EMBED_INIT_STD` (0.02) and positional
    /// embeddings half of that. Attention and MLP input projections use
    /// `width^-1/2` (`(2 width)^-1/2` for the MLP), residual output
    /// projections are further scaled by `(2 layers)^-1/2` and
    /// `BRANCH_INIT_SCALE`, and the text projection uses `width^-1/2`.
    /// Layernorm gains start at one; all biases start at zero.
    pub fn init_frozen(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, e) = (config.width, config.embed_dim);
        let inv_sqrt_d = (d as f32).powf(-0.5);
        let resid = BRANCH_INIT_SCALE * inv_sqrt_d * ((2 * config.layers.max(1)) as f32).powf(-0.5);
        let fc = ((2 * d) as f32).powf(-0.5);
        let mut randn = |shape: Vec<usize>, std: f32| Tensor::randn(shape, std, &mut rng);

        let token_embedding = randn(vec![config.vocab_size, d], EMBED_INIT_STD);
        let positional_embedding = randn(vec![config.context_length, d], EMBED_INIT_STD / 2.0);
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1_gain: Tensor::filled(vec![d], 1.0),
                ln1_bias: Tensor::zeros(vec![d]),
                q_weight: randn(vec![d, d], inv_sqrt_d),
                q_bias: Tensor::zeros(vec![d]),
                k_weight: randn(vec![d, d], inv_sqrt_d),
                k_bias: Tensor::zeros(vec![d]),
                v_weight: randn(vec![d, d], inv_sqrt_d),
                v_bias: Tensor::zeros(vec![d]),
                out_weight: randn(vec![d, d], resid),
                out_bias: Tensor::zeros(vec![d]),
                ln2_gain: Tensor::filled(vec![d], 1.0),
                ln2_bias: Tensor::zeros(vec![d]),
                fc1_weight: randn(vec![d, 4 * d], fc),
                fc1_bias: Tensor::zeros(vec![4 * d]),
                fc2_weight: randn(vec![4 * d, d], resid),
                fc2_bias: Tensor::zeros(vec![d]),
            })
            .collect();
        let text_projection = randn(vec![d, e], inv_sqrt_d);
        Ok(Self {
            config: config.clone(),
            token_embedding,
            positional_embedding,
            blocks,
            final_ln_gain: Tensor::filled(vec![d], 1.0),
            final_ln_bias: Tensor::zeros(vec![d]),
            text_projection,
            temperature: None,
        })
    }

    /// Every weight tensor with its storage name, in manifest order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("positional_embedding".to_string(), &self.positional_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("final_ln.gain".to_string(), &self.final_ln_gain));
        out.push(("final_ln.bias".to_string(), &self.final_ln_bias));
        out.push(("text_projection".to_string(), &self.text_projection));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_archive(&self) -> Archive {
        let mut meta = serde_json::json!({ "config": self.config });
        if let Some(t) = self.temperature {
            meta["temperature"] = serde_json::json!(t);
        }
        let mut a = Archive::new(ARCHIVE_KIND, meta);
        for (name, t) in self.named_tensors() {
            a.push_tensor(&name, t);
        }
        a
    }

    /// SHA-256 over the serialized weights.
    pub fn checksum(&self) -> Result<String> {
        Ok(crate::archive::sha256_hex(&self.to_archive().to_bytes()?))
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind != ARCHIVE_KIND {
            return Err(Error::Format(format!("expected an encoder file, found {}", a.kind)));
        }
        let config: EncoderConfig = serde_json::from_value(a.meta["config"].clone())
            .map_err(|e| Error::Format(format!("encoder config: {e}")))?;
        config.validate()?;
        let temperature = match &a.meta.get("temperature") {
            Some(v) => Some(
                v.as_f64()
                    .filter(|t| *t > 0.0)
                    .ok_or_else(|| Error::Format("temperature must be a positive number".into()))? as f32,
            ),
            None => None,
        };
        let expected = manifest(&config);
        if a.blobs.len() != expected.len() {
            return Err(Error::Format(format!(
                "encoder file has {} tensors, config implies {}",
                a.blobs.len(),
                expected.len()
            )));
        }
        let take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = a.tensor(name)?;
            if t.shape() != shape {
                return Err(Error::Format(format!("tensor '{name}' has shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!("tensor '{name}' contains non-finite values")));
            }
            Ok(t)
        };
        let mut it = expected.iter();
        let mut next = || {
            let (n, s) = it.next().expect("manifest length checked");
            take(n, s)
        };
        let token_embedding = next()?;
        let positional_embedding = next()?;
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(Block {
                ln1_gain: next()?,
                ln1_bias: next()?,
                q_weight: next()?,
                q_bias: next()?,
                k_weight: next()?,
                k_bias: next()?,
                v_weight: next()?,
                v_bias: next()?,
                out_weight: next()?,
                out_bias: next()?,
                ln2_gain: next()?,
                ln2_bias: next()?,
                fc1_weight: next()?,
                fc1_bias: next()?,
                fc2_weight: next()?,
                fc2_bias: next()?,
            });
        }
        Ok(Self {
            config,
            token_embedding,
            positional_embedding,
            blocks,
            final_ln_gain: next()?,
            final_ln_bias: next()?,
            text_projection: next()?,
            temperature,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Registers every weight on `tape` as a (frozen) leaf.
    pub fn register<'a, T: Real>(&'a self, tape: &mut Tape<'a, T>) -> EncoderVars {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1: (tape.leaf(&b.ln1_gain), tape.leaf(&b.ln1_bias)),
                q: (tape.leaf(&b.q_weight), tape.leaf(&b.q_bias)),
                k: (tape.leaf(&b.k_weight), tape.leaf(&b.k_bias)),
                v: (tape.leaf(&b.v_weight), tape.leaf(&b.v_bias)),
                out: (tape.leaf(&b.out_weight), tape.leaf(&b.out_bias)),
                ln2: (tape.leaf(&b.ln2_gain), tape.leaf(&b.ln2_bias)),
                fc1: (tape.leaf(&b.fc1_weight), tape.leaf(&b.fc1_bias)),
                fc2: (tape.leaf(&b.fc2_weight), tape.leaf(&b.fc2_bias)),
            })
            .collect();
        EncoderVars {
            config: self.config.clone(),
            token_embedding: tape.leaf(&self.token_embedding),
            positional_embedding: tape.leaf(&self.positional_embedding),
            blocks,
            final_ln: (tape.leaf(&self.final_ln_gain), tape.leaf(&self.final_ln_bias)),
            text_projection: tape.leaf(&self.text_projection),
        }
    }

    /// Feature for an already-framed token sequence.
    pub fn encode_tokens(&self, seq: &TokenSequence) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let vars = self.register(&mut tape);
        let embeds = embed_lookup(&mut tape, vars.token_embedding, seq)?;
        let out = vars.encode_sequence(&mut tape, embeds, seq.eos_index)?;
        Ok(tape.value(out).to_vec())
    }

    /// Tokenizes, embeds and encodes `text`.
    pub fn encode_text(&self, text: &str, vocab: &Vocabulary) -> Result<TextFeature> {
        self.check_vocab(vocab)?;
        let seq = vocab.encode(text, self.config.context_length)?;
        Ok(TextFeature {
            vector: self.encode_tokens(&seq)?,
            source: text.to_string(),
        })
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.len() != self.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but the encoder expects {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        Ok(())
    }
}

/// Row-gathers a token sequence from the embedding table.
pub fn embed_lookup<T: Real>(tape: &mut Tape<'_, T>, table: Var, seq: &TokenSequence) -> Result<Var> {
    tape.gather(table, &seq.ids_usize())
}

pub struct BlockVars {
    ln1: (Var, Var),
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
    out: (Var, Var),
    ln2: (Var, Var),
    fc1: (Var, Var),
    fc2: (Var, Var),
}

/// Encoder weights registered on one tape.
pub struct EncoderVars {
    pub config: EncoderConfig,
    pub token_embedding: Var,
    pub positional_embedding: Var,
    blocks: Vec<BlockVars>,
    final_ln: (Var, Var),
    text_projection: Var,
}

fn linear<T: Real>(tape: &mut Tape<'_, T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

impl EncoderVars {
    /// Encodes an `[L, width]` embedding sequence into a `[1, embed_dim]` feature
    /// read at `eos_index`.
    pub fn encode_sequence<T: Real>(&self, tape: &mut Tape<'_, T>, embeds: Var, eos_index: usize) -> Result<Var> {
        let cfg = &self.config;
        let expect = [cfg.context_length, cfg.width];
        if tape.shape(embeds) != expect {
            return Err(Error::dim("encode_sequence", tape.shape(embeds), &expect));
        }
        if eos_index >= cfg.context_length {
            return Err(Error::Contract(format!(
                "eos index {eos_index} outside context length {}",
                cfg.context_length
            )));
        }
        let rows = if cfg.causal { eos_index + 1 } else { cfg.context_length };
        let x = tape.slice_rows(embeds, 0, rows)?;
        let pos = tape.slice_rows(self.positional_embedding, 0, rows)?;
        let mut x = tape.add(x, pos)?;
        for b in &self.blocks {
            let h = tape.layernorm(x, b.ln1.0, b.ln1.1, cfg.eps)?;
            let q = linear(tape, h, b.q)?;
            let k = linear(tape, h, b.k)?;
            let v = linear(tape, h, b.v)?;
            let a = tape.attention(q, k, v, cfg.heads, cfg.causal)?;
            let a = linear(tape, a, b.out)?;
            x = tape.add(x, a)?;
            let h = tape.layernorm(x, b.ln2.0, b.ln2.1, cfg.eps)?;
            let h = linear(tape, h, b.fc1)?;
            let h = tape.gelu(h);
            let h = linear(tape, h, b.fc2)?;
            x = tape.add(x, h)?;
        }
        let eos = tape.slice_rows(x, eos_index, 1)?;
        let eos = tape.layernorm(eos, self.final_ln.0, self.final_ln.1, cfg.eps)?;
        tape.matmul(eos, self.text_projection)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            heads: 2,
            width: 16,
            embed_dim: 8,
            context_length: 12,
            vocab_size: 270,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = EncoderWeights::init_frozen(&small(), 7).unwrap();
        let b = EncoderWeights::init_frozen(&small(), 7).unwrap();
        let c = EncoderWeights::init_frozen(&small(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.named_tensors().iter().all(|(_, t)| !t.requires_grad()));
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = EncoderConfig {
            width: 32,
            heads: 5,
            ..Default::default()
        };
        assert!(matches!(EncoderWeights::init_frozen(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let mut w = EncoderWeights::init_frozen(&small(), 3).unwrap();
        w.temperature = Some(0.01);
        let bytes = w.to_archive().to_bytes().unwrap();
        let back = EncoderWeights::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_archive().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn manifest_matches_named_tensors() {
        let w = EncoderWeights::init_frozen(&small(), 3).unwrap();
        let names: Vec<_> = w.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        assert_eq!(names, manifest(&small()));
    }

    #[test]
    fn output_has_embed_dim_and_eos_index_is_checked() {
        let w = EncoderWeights::init_frozen(&small(), 3).unwrap();
        let mut tape = Tape::<f32>::new();
        let vars = w.register(&mut tape);
        let ids: Vec<usize> = (0..12).map(|i| 256 + (i % 3)).collect();
        let emb = tape.gather(vars.token_embedding, &ids).unwrap();
        let out = vars.encode_sequence(&mut tape, emb, 5).unwrap();
        assert_eq!(tape.shape(out), &[1, 8]);
        assert!(matches!(vars.encode_sequence(&mut tape, emb, 12), Err(Error::Contract(_))));
    }
}
