//! Lower-cased byte-level BPE with SOS/EOS framing.
//!
//! Ids `0..256` are raw bytes, followed by the three specials (SOS, EOS,
//! PAD) and then one id per merge rule, in the order the rules were learned.
//! Text is lower-cased and split into chunks (runs of alphanumeric chars;
//! every other non-space char stands alone) before merges are applied, so
//! punctuation always survives as its own token.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BYTE_TOKENS: usize = 256;
pub const NUM_SPECIALS: usize = 3;
/// Smallest legal vocabulary: every byte plus the specials.
pub const BASE_VOCAB: usize = BYTE_TOKENS + NUM_SPECIALS;
pub const DEFAULT_CONTEXT_LENGTH: usize = 77;
pub const DEFAULT_VOCAB_SIZE: usize = 512;

const SOS_STR: &str = "<|startoftext|>";
const EOS_STR: &str = "<|endoftext|>";
const PAD_STR: &str = "<|pad|>";
const FORMAT_VERSION: u32 = 1;

/// Framed token ids: `[SOS, subwords.., EOS, PAD..]`, exactly `cap` long.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub eos_index: usize,
    /// Subwords dropped by truncation.
    pub dropped: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    lookup: HashMap<Vec<u8>, u32>,
}

#[derive(Serialize, Deserialize)]
struct Specials {
    sos: u32,
    eos: u32,
    pad: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    version: u32,
    specials: Specials,
    tokens: Vec<String>,
    merges: Vec<[u32; 2]>,
}

/// Splits lower-cased text into merge chunks.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut chunks = Vec::new();
    let mut word = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            chunks.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            chunks.push(c.to_string());
        }
    }
    if !word.is_empty() {
        chunks.push(word);
    }
    chunks
}

fn merge_pair(ids: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

impl Vocabulary {
    /// Learns merges greedily by pair frequency until the vocabulary reaches
    /// `target_size`. Frequency ties go to the pair with the smaller ids.
    pub fn build<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Self> {
        if target_size < BASE_VOCAB {
            return Err(Error::Config(format!(
                "target vocabulary size {target_size} is below the {BASE_VOCAB} base tokens"
            )));
        }
        let mut words: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
        for line in corpus {
            for chunk in pre_tokenize(line.as_ref()) {
                *words.entry(chunk.bytes().map(u32::from).collect()).or_default() += 1;
            }
        }
        if words.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut vocab = Self::from_merges(Vec::new());
        while vocab.len() < target_size {
            let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
            for (w, &n) in &words {
                for p in w.windows(2) {
                    *counts.entry((p[0], p[1])).or_default() += n;
                }
            }
            // BTreeMap iteration is ascending, so the first maximum wins ties.
            let Some((&pair, _)) = counts.iter().fold(None, |best: Option<(&(u32, u32), &usize)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            }) else {
                return Err(Error::Config(format!(
                    "corpus supports only {} tokens, {target_size} requested",
                    vocab.len()
                )));
            };
            let new_id = vocab.len() as u32;
            words = words
                .into_iter()
                .fold(BTreeMap::new(), |mut acc, (w, n)| {
                    *acc.entry(merge_pair(&w, pair, new_id)).or_default() += n;
                    acc
                });
            vocab.push_merge(pair);
        }
        Ok(vocab)
    }

    fn from_merges(merges: Vec<(u32, u32)>) -> Self {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        tokens.push(SOS_STR.as_bytes().to_vec());
        tokens.push(EOS_STR.as_bytes().to_vec());
        tokens.push(PAD_STR.as_bytes().to_vec());
        let mut vocab = Self {
            tokens,
            merges: Vec::new(),
            ranks: HashMap::new(),
            lookup: HashMap::new(),
        };
        for m in merges {
            vocab.push_merge(m);
        }
        vocab
    }

    fn push_merge(&mut self, pair: (u32, u32)) {
        let mut bytes = self.tokens[pair.0 as usize].clone();
        bytes.extend_from_slice(&self.tokens[pair.1 as usize]);
        let id = self.tokens.len() as u32;
        self.ranks.insert(pair, self.merges.len() as u32);
        // Two merge paths can spell the same bytes; the first id wins lookups.
        self.lookup.entry(bytes.clone()).or_insert(id);
        self.tokens.push(bytes);
        self.merges.push(pair);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sos(&self) -> u32 {
        BYTE_TOKENS as u32
    }

    pub fn eos(&self) -> u32 {
        BYTE_TOKENS as u32 + 1
    }

    pub fn pad(&self) -> u32 {
        BYTE_TOKENS as u32 + 2
    }

    pub fn is_special(&self, id: u32) -> bool {
        (BYTE_TOKENS as u32..BASE_VOCAB as u32).contains(&id)
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Human-readable token text (lossy for partial UTF-8 sequences).
    pub fn token_str(&self, id: u32) -> String {
        String::from_utf8_lossy(&self.tokens[id as usize]).into_owned()
    }

    /// Id of the token whose bytes spell `s` exactly, if any.
    pub fn token_id(&self, s: &str) -> Option<u32> {
        if s.len() == 1 {
            return Some(s.as_bytes()[0] as u32);
        }
        self.lookup.get(s.as_bytes()).copied()
    }

    fn encode_chunk(&self, chunk: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = chunk.bytes().map(u32::from).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            ids = merge_pair(&ids, pair, (BASE_VOCAB as u32) + rank);
        }
        ids
    }

    /// Subword ids without framing.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        pre_tokenize(text).iter().flat_map(|c| self.encode_chunk(c)).collect()
    }

    /// Frames `text` as `[SOS, subwords.., EOS, PAD..]` of length `cap`.
    /// Overflow subwords are dropped before EOS.
    pub fn encode(&self, text: &str, cap: usize) -> Result<TokenSequence> {
        if cap < 3 {
            return Err(Error::Config(format!("context length {cap} cannot hold SOS, a token and EOS")));
        }
        let mut body = self.tokenize(text);
        if body.is_empty() {
            return Err(Error::Input("text is empty after normalization".into()));
        }
        let room = cap - 2;
        let dropped = body.len().saturating_sub(room);
        if dropped > 0 {
            log::warn!("truncated {dropped} subwords to fit context length {cap}");
            body.truncate(room);
        }
        let mut ids = Vec::with_capacity(cap);
        ids.push(self.sos());
        ids.extend(body);
        let eos_index = ids.len();
        ids.push(self.eos());
        ids.resize(cap, self.pad());
        Ok(TokenSequence { ids, eos_index, dropped })
    }

    pub fn to_json(&self) -> Result<String> {
        let table = byte_to_unicode();
        let tokens = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, bytes)| match i {
                _ if self.is_special(i as u32) => String::from_utf8(bytes.clone()).expect("ascii special"),
                _ => bytes.iter().map(|&b| table[b as usize]).collect(),
            })
            .collect();
        let file = VocabFile {
            version: FORMAT_VERSION,
            specials: Specials {
                sos: self.sos(),
                eos: self.eos(),
                pad: self.pad(),
            },
            tokens,
            merges: self.merges.iter().map(|&(a, b)| [a, b]).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(json).map_err(|e| Error::Format(format!("vocabulary: {e}")))?;
        if file.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported vocabulary version {}", file.version)));
        }
        let probe = Self::from_merges(Vec::new());
        if (file.specials.sos, file.specials.eos, file.specials.pad) != (probe.sos(), probe.eos(), probe.pad()) {
            return Err(Error::Format("unexpected special token ids".into()));
        }
        let mut merges = Vec::with_capacity(file.merges.len());
        for (rank, &[a, b]) in file.merges.iter().enumerate() {
            let new_id = (BASE_VOCAB + rank) as u32;
            if a >= new_id || b >= new_id || probe.is_special(a) || probe.is_special(b) {
                return Err(Error::Format(format!("merge {rank} references an underivable token")));
            }
            merges.push((a, b));
        }
        let vocab = Self::from_merges(merges);
        if vocab.len() != file.tokens.len() {
            return Err(Error::Format(format!(
                "token list has {} entries but merges imply {}",
                file.tokens.len(),
                vocab.len()
            )));
        }
        // The stored strings are redundant with the merges; check they agree.
        let table = byte_to_unicode();
        for (i, s) in file.tokens.iter().enumerate() {
            let expected: String = if vocab.is_special(i as u32) {
                String::from_utf8(vocab.tokens[i].clone()).expect("ascii special")
            } else {
                vocab.tokens[i].iter().map(|&b| table[b as usize]).collect()
            };
            if &expected != s {
                return Err(Error::Format(format!("token {i} does not match its merge rule")));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Reversible byte -> printable char table (the GPT-2 convention).
fn byte_to_unicode() -> Vec<char> {
    let printable = |b: u32| (b'!' as u32..=b'~' as u32).contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
    let mut next = 256u32;
    (0..256u32)
        .map(|b| {
            if printable(b) {
                char::from_u32(b).unwrap()
            } else {
                let c = char::from_u32(next).unwrap();
                next += 1;
                c
            }
        })
        .collect()
}
