//! Helpers shared by the integration tests.
#![allow(dead_code)]

use ctxopt::encoder::{EncoderConfig, EncoderWeights};
use ctxopt::tokenizer::Vocabulary;
use ctxopt::{Real, Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A scalar-valued graph over a list of inputs, buildable in any precision.
pub trait Graph {
    fn build<'a, T: Real>(&'a self, tape: &mut Tape<'a, T>, inputs: &[Var]) -> Result<Var>;
}

/// Reduces a non-scalar output to a scalar with fixed, uneven weights so
/// every output element contributes a distinct gradient.
fn reduce<T: Real>(tape: &mut Tape<'_, T>, out: Var) -> Result<Var> {
    let n: usize = tape.shape(out).iter().product();
    if n == 1 {
        return Ok(out);
    }
    let w: Vec<T> = (0..n).map(|i| T::of(((i as f64) * 0.731 + 0.3).sin())).collect();
    let r = tape.input(w, tape.shape(out).to_vec(), false)?;
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn loss_f64<G: Graph>(g: &G, inputs: &[Vec<f64>], shapes: &[Vec<usize>]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(shapes)
        .map(|(x, s)| tape.input(x.clone(), s.clone(), false).unwrap())
        .collect();
    let out = g.build(&mut tape, &vars).unwrap();
    let loss = reduce(&mut tape, out).unwrap();
    tape.scalar(loss).unwrap()
}

/// Analytic single-precision gradients of `g` at `inputs`, one per input.
pub fn analytic<G: Graph>(g: &G, inputs: &[Tensor]) -> Vec<Vec<f32>> {
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.input(t.data().to_vec(), t.shape().to_vec(), true).unwrap())
        .collect();
    let out = g.build(&mut tape, &vars).unwrap();
    let loss = reduce(&mut tape, out).unwrap();
    let grads = tape.backward(loss).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect()
}

/// Central differences with step `h`, evaluated by replaying the graph in `f64`.
pub fn numeric<G: Graph>(g: &G, inputs: &[Tensor], h: f64) -> Vec<Vec<f64>> {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let base: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().iter().map(|&x| x as f64).collect()).collect();
    (0..inputs.len())
        .map(|i| {
            (0..base[i].len())
                .map(|j| {
                    let mut xs = base.clone();
                    xs[i][j] = base[i][j] + h;
                    let up = loss_f64(g, &xs, &shapes);
                    xs[i][j] = base[i][j] - h;
                    let down = loss_f64(g, &xs, &shapes);
                    (up - down) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm, 0 when both vanish.
pub fn relative_error(a: &[f32], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(&x, &y)| (x as f64 - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nn = n.iter().map(|y| y * y).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst relative error over every input of `g`.
pub fn grad_check<G: Graph>(g: &G, inputs: &[Tensor], h: f64) -> f64 {
    let a = analytic(g, inputs);
    let n = numeric(g, inputs, h);
    a.iter().zip(&n).map(|(a, n)| relative_error(a, n)).fold(0.0, f64::max)
}

pub fn randn(shape: Vec<usize>, std: f32, seed: u64) -> Tensor {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn vocab() -> Vocabulary {
    Vocabulary::build(&ctxopt::words::default_corpus(), 512).unwrap()
}

pub fn encoder(vocab: &Vocabulary, layers: usize, width: usize, embed_dim: usize, seed: u64) -> EncoderWeights {
    let cfg = EncoderConfig {
        layers,
        heads: 4,
        width,
        embed_dim,
        context_length: 16,
        vocab_size: vocab.len(),
        ..Default::default()
    };
    EncoderWeights::init_frozen(&cfg, seed).unwrap()
}
pub mod cases;
