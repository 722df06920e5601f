//! Nearest vocabulary words for learned context vectors.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::ContextBank;
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub token_id: usize,
    pub token: String,
    /// Euclidean distance, full precision.
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotReport {
    /// One-based slot position within the context.
    pub slot: usize,
    /// Class the slot belongs to, for class-specific banks.
    pub class: Option<String>,
    /// Ascending by distance, ties by token id. The first entry is the nearest word.
    pub neighbors: Vec<Neighbor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearestWordReport {
    pub top_n: usize,
    pub slots: Vec<SlotReport>,
}

impl NearestWordReport {
    /// One line per slot: `[class] slot m: word (1.2345), alt (2.3456), ...`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.slots {
            if let Some(c) = &s.class {
                let _ = write!(out, "[{c}] ");
            }
            let words: Vec<String> = s
                .neighbors
                .iter()
                .map(|n| format!("{} ({:.4})", n.token, n.distance))
                .collect();
            let _ = writeln!(out, "slot {}: {}", s.slot, words.join(", "));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `top_n` nearest rows of `table` to `query`, skipping `excluded` ids.
pub fn nearest_rows(
    query: &[f32],
    table: &Tensor,
    token_names: &dyn Fn(usize) -> String,
    excluded: &dyn Fn(usize) -> bool,
    top_n: usize,
) -> Result<Vec<Neighbor>> {
    if table.shape().len() != 2 || table.cols() != query.len() {
        return Err(Error::dim("nearest_rows", table.shape(), &[query.len()]));
    }
    let mut scored: Vec<(f64, usize)> = (0..table.rows())
        .filter(|&id| !excluded(id))
        .map(|id| {
            let d2: f64 = table
                .row(id)
                .iter()
                .zip(query)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum();
            (d2.sqrt(), id)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored
        .into_iter()
        .take(top_n)
        .map(|(distance, token_id)| Neighbor {
            token_id,
            token: token_names(token_id),
            distance,
        })
        .collect())
}

/// Reports the nearest non-special vocabulary words to every context slot
/// (per class for class-specific banks).
pub fn nearest_words(
    bank: &ContextBank,
    class_names: &[String],
    word_embeddings: &Tensor,
    vocab: &Vocabulary,
    top_n: usize,
) -> Result<NearestWordReport> {
    if top_n == 0 {
        return Err(Error::Config("top_n must be at least 1".into()));
    }
    if word_embeddings.rows() != vocab.len() {
        return Err(Error::dim("nearest_words", word_embeddings.shape(), &[vocab.len()]));
    }
    if word_embeddings.cols() != bank.width() {
        return Err(Error::dim("nearest_words", word_embeddings.shape(), bank.vectors.shape()));
    }
    let d = bank.width();
    let m = bank.config.n_ctx;
    let groups: Vec<Option<String>> = match bank.classes() {
        None => vec![None],
        Some(k) => (0..k)
            .map(|i| Some(class_names.get(i).cloned().unwrap_or_else(|| format!("class {i}"))))
            .collect(),
    };
    let names = |id: usize| vocab.token_str(id as u32);
    let special = |id: usize| vocab.is_special(id as u32);
    let mut slots = Vec::with_capacity(groups.len() * m);
    for (g, class) in groups.into_iter().enumerate() {
        let rows = bank.slot_rows(g);
        for s in 0..m {
            slots.push(SlotReport {
                slot: s + 1,
                class: class.clone(),
                neighbors: nearest_rows(&rows[s * d..(s + 1) * d], word_embeddings, &names, &special, top_n)?,
            });
        }
    }
    Ok(NearestWordReport { top_n, slots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{ContextInit, PromptConfig, Sharing};

    #[test]
    fn toy_table_brute_force() {
        let table = Tensor::new(vec![3, 2], vec![0.0, 0.0, 3.0, 4.0, 1.0, 1.0]).unwrap();
        let got = nearest_rows(&[0.9, 1.2], &table, &|i| format!("t{i}"), &|_| false, 3).unwrap();
        let ids: Vec<usize> = got.iter().map(|n| n.token_id).collect();
        assert_eq!(ids, [2, 0, 1]);
        assert!((got[1].distance - 1.5).abs() < 1e-6);
    }

    #[test]
    fn ties_go_to_lower_id() {
        let table = Tensor::new(vec![3, 1], vec![1.0, -1.0, 1.0]).unwrap();
        let got = nearest_rows(&[0.0], &table, &|i| i.to_string(), &|_| false, 3).unwrap();
        assert_eq!(got.iter().map(|n| n.token_id).collect::<Vec<_>>(), [0, 1, 2]);
    }

    #[test]
    fn manual_init_maps_back_to_its_words() {
        let vocab = Vocabulary::build(&crate::words::default_corpus(), 512).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        let table = Tensor::randn(vec![vocab.len(), 8], 0.02, &mut rng);
        for sharing in [Sharing::Unified, Sharing::ClassSpecific] {
            let cfg = PromptConfig {
                n_ctx: 4,
                sharing,
                init: ContextInit::Manual {
                    phrase: "a photo of a".into(),
                },
                ..Default::default()
            };
            let bank = ContextBank::init(&cfg, &vocab, &table, 2, 0).unwrap();
            let names = vec!["dog".to_string(), "cat".to_string()];
            let report = nearest_words(&bank, &names, &table, &vocab, 2).unwrap();
            let words: Vec<&str> = report.slots.iter().take(4).map(|s| s.neighbors[0].token.as_str()).collect();
            assert_eq!(words, ["a", "photo", "of", "a"]);
            assert!(report.slots.iter().all(|s| s.neighbors[0].distance == 0.0));
            assert!(report.to_text().contains("photo (0.0000)"));
        }
    }
}
