//! Gradient-check cases: one per differentiable op plus the full prompt path.

use ctxopt::classifier::{cosine_logits, Temperature};
use ctxopt::encoder::EncoderWeights;
use ctxopt::prompt::{class_weights, ClassNameTable, ContextBank, ContextInit, Placement, PromptConfig, Sharing};
use ctxopt::{Real, Result, Tape, Tensor, Var};

use super::{randn, Graph};

#[derive(Clone, Copy, Debug)]
pub enum OpCase {
    Matmul,
    Transpose,
    Add,
    Mul,
    AddRow,
    Scale,
    Gelu,
    LayerNorm,
    Softmax,
    Gather,
    Attention { causal: bool },
    L2Normalize,
    Concat,
    SliceRows,
    Reshape,
    Sum,
    CrossEntropy,
    CosineLogits,
}

pub const OP_CASES: &[OpCase] = &[
    OpCase::Matmul,
    OpCase::Transpose,
    OpCase::Add,
    OpCase::Mul,
    OpCase::AddRow,
    OpCase::Scale,
    OpCase::Gelu,
    OpCase::LayerNorm,
    OpCase::Softmax,
    OpCase::Gather,
    OpCase::Attention { causal: true },
    OpCase::Attention { causal: false },
    OpCase::L2Normalize,
    OpCase::Concat,
    OpCase::SliceRows,
    OpCase::Reshape,
    OpCase::Sum,
    OpCase::CrossEntropy,
    OpCase::CosineLogits,
];

impl OpCase {
    pub fn inputs(self, seed: u64) -> Vec<Tensor> {
        let r = |shape: Vec<usize>, k: u64| randn(shape, 1.0, seed * 31 + k);
        match self {
            OpCase::Matmul => vec![r(vec![3, 4], 0), r(vec![4, 5], 1)],
            OpCase::Add | OpCase::Mul => vec![r(vec![3, 4], 0), r(vec![3, 4], 1)],
            OpCase::AddRow => vec![r(vec![3, 4], 0), r(vec![4], 1)],
            OpCase::LayerNorm => vec![r(vec![3, 6], 0), r(vec![6], 1), r(vec![6], 2)],
            OpCase::Gather => vec![r(vec![5, 3], 0)],
            OpCase::Attention { .. } => vec![r(vec![4, 6], 0), r(vec![4, 6], 1), r(vec![4, 6], 2)],
            OpCase::Concat => vec![r(vec![2, 3], 0), r(vec![1, 3], 1), r(vec![3, 3], 2)],
            OpCase::CosineLogits => vec![r(vec![4, 5], 0), r(vec![3, 5], 1)],
            _ => vec![r(vec![3, 4], 0)],
        }
    }
}

impl Graph for OpCase {
    fn build<'a, T: Real>(&'a self, tape: &mut Tape<'a, T>, x: &[Var]) -> Result<Var> {
        match *self {
            OpCase::Matmul => tape.matmul(x[0], x[1]),
            OpCase::Transpose => tape.transpose(x[0]),
            OpCase::Add => tape.add(x[0], x[1]),
            OpCase::Mul => tape.mul(x[0], x[1]),
            OpCase::AddRow => tape.add_row(x[0], x[1]),
            OpCase::Scale => Ok(tape.scale(x[0], T::of(-2.5))),
            OpCase::Gelu => Ok(tape.gelu(x[0])),
            OpCase::LayerNorm => tape.layernorm(x[0], x[1], x[2], 1e-5),
            OpCase::Softmax => tape.softmax(x[0]),
            // Repeated ids must accumulate into the same table row.
            OpCase::Gather => tape.gather(x[0], &[4, 0, 4, 2, 4]),
            OpCase::Attention { causal } => tape.attention(x[0], x[1], x[2], 2, causal),
            OpCase::L2Normalize => tape.l2_normalize(x[0]),
            OpCase::Concat => tape.concat(&[x[2], x[0], x[1]]),
            OpCase::SliceRows => tape.slice_rows(x[0], 1, 2),
            OpCase::Reshape => tape.reshape(x[0], vec![2, 6]),
            OpCase::Sum => Ok(tape.sum(x[0])),
            OpCase::CrossEntropy => tape.cross_entropy(x[0], &[2, 0, 3]),
            OpCase::CosineLogits => cosine_logits(tape, x[0], x[1], Temperature::new(0.1)?),
        }
    }
}

/// Cross-entropy of cosine logits against prompts built from a context bank
/// and pushed through a frozen encoder. The only input is the bank.
pub struct PromptPath {
    pub encoder: EncoderWeights,
    pub names: ClassNameTable,
    pub prompt: PromptConfig,
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
    pub tau: Temperature,
}

impl PromptPath {
    /// 2-layer, width-16 encoder with three classes and six image features.
    pub fn new(sharing: Sharing, placement: Placement, seed: u64) -> (Self, Tensor) {
        let vocab = super::vocab();
        let encoder = super::encoder(&vocab, 2, 16, 8, seed);
        let names = ClassNameTable::new(&["dog", "sea lion", "violin"], &vocab).unwrap();
        let prompt = PromptConfig {
            n_ctx: 4,
            placement,
            sharing,
            init: ContextInit::default(),
        };
        let bank = ContextBank::init(&prompt, &vocab, &encoder.token_embedding, names.len(), seed).unwrap();
        let features = randn(vec![6, 8], 1.0, seed + 100).into_data();
        let path = Self {
            encoder,
            names,
            prompt,
            features,
            labels: vec![0, 1, 2, 2, 1, 0],
            tau: Temperature::new(0.1).unwrap(),
        };
        (path, bank.vectors)
    }
}

impl Graph for PromptPath {
    fn build<'a, T: Real>(&'a self, tape: &mut Tape<'a, T>, x: &[Var]) -> Result<Var> {
        let enc = self.encoder.register(tape);
        let w = class_weights(tape, x[0], &self.prompt, &self.names, &enc)?;
        let f = tape.input(T::lift(&self.features).into_owned(), vec![self.labels.len(), 8], false)?;
        let logits = cosine_logits(tape, f, w, self.tau)?;
        tape.cross_entropy(logits, &self.labels)
    }
}
