// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level bigram language model with add-k or interpolated
//! Kneser–Ney smoothing.
//!
//! Each corpus line is a sentence; `<s>` precedes its first word and is
//! only ever a context. Words absent from training map to `<unk>`, which
//! is part of the vocabulary so that every context distribution sums to
//! one over the same support.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const UNK: &str = "<unk>";
pub const UNIGRAMS_FILE: &str = "unigrams.tsv";
pub const BIGRAMS_FILE: &str = "bigrams.tsv";
pub const HEADER_FILE: &str = "bigram.json";
const FORMAT: &str = "lenslab-bigram/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Smoothing {
    AddK { k: f64 },
    KneserNey { discount: f64 },
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::KneserNey { discount: 0.75 }
    }
}

impl Smoothing {
    fn validate(self) -> Result<Self> {
        match self {
            Smoothing::AddK { k } if !(k > 0.0 && k.is_finite()) => {
                Err(Error::Config(format!("add-k constant must be positive, got {k}")))
            }
            Smoothing::KneserNey { discount } if !(discount > 0.0 && discount < 1.0) => Err(
                Error::Config(format!("Kneser-Ney discount must lie in (0, 1), got {discount}")),
            ),
            s => Ok(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BigramModel {
    smoothing: Smoothing,
    /// Id 0 is `<unk>`; the rest are training types in sorted order.
    words: Vec<String>,
    index: HashMap<String, u32>,
    unigram: Vec<u64>,
    /// Keyed by `(context, word)`; context id `V` is `<s>`.
    bigram: BTreeMap<(u32, u32), u64>,
    /// Tokens following each context, `c(a·)`.
    context_total: Vec<u64>,
    /// Distinct words following each context, `N1+(a·)`.
    context_types: Vec<u64>,
    /// Distinct contexts preceding each word, `N1+(·w)`.
    continuation: Vec<u64>,
    bigram_types: u64,
    continued_types: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    smoothing: Smoothing,
    vocab_size: usize,
    tokens: u64,
}

/// Whitespace-split words per non-empty line.
pub fn corpus_sentences(text: &str) -> Vec<Vec<&str>> {
    text.lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>())
        .filter(|w| !w.is_empty())
        .collect()
}

impl BigramModel {
    pub fn train(text: &str, smoothing: Smoothing) -> Result<Self> {
        let sentences = corpus_sentences(text);
        Self::from_sentences(&sentences, smoothing)
    }

    pub fn from_sentences<S: AsRef<str>>(sentences: &[Vec<S>], smoothing: Smoothing) -> Result<Self> {
        let smoothing = smoothing.validate()?;
        let mut unigram: BTreeMap<&str, u64> = BTreeMap::new();
        for s in sentences {
            for w in s {
                let w = w.as_ref();
                if w == BOS || w == UNK {
                    return Err(Error::Data(format!("corpus contains reserved symbol {w}")));
                }
                *unigram.entry(w).or_default() += 1;
            }
        }
        if unigram.is_empty() {
            return Err(Error::Data("bigram corpus has no words".into()));
        }
        let mut bigram: BTreeMap<(String, String), u64> = BTreeMap::new();
        for s in sentences {
            let mut prev = BOS;
            for w in s {
                let w = w.as_ref();
                *bigram.entry((prev.to_string(), w.to_string())).or_default() += 1;
                prev = w;
            }
        }
        let unigrams = unigram.into_iter().map(|(w, c)| (w.to_string(), c)).collect();
        Self::from_counts(smoothing, unigrams, bigram)
    }

    fn from_counts(
        smoothing: Smoothing,
        unigrams: Vec<(String, u64)>,
        bigrams: BTreeMap<(String, String), u64>,
    ) -> Result<Self> {
        let mut words = vec![UNK.to_string()];
        let mut unigram = vec![0];
        for (w, c) in unigrams {
            words.push(w);
            unigram.push(c);
        }
        let index: HashMap<String, u32> =
            words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let v = words.len();
        let mut model = Self {
            smoothing,
            words,
            index,
            unigram,
            bigram: BTreeMap::new(),
            context_total: vec![0; v + 1],
            context_types: vec![0; v + 1],
            continuation: vec![0; v],
            bigram_types: 0,
            continued_types: 0,
        };
        for ((a, b), c) in bigrams {
            let ai = if a == BOS {
                v as u32
            } else {
                *model
                    .index
                    .get(&a)
                    .ok_or_else(|| Error::Data(format!("bigram context {a:?} not in unigrams")))?
            };
            let bi = *model
                .index
                .get(&b)
                .filter(|&&i| i != 0)
                .ok_or_else(|| Error::Data(format!("bigram word {b:?} not in unigrams")))?;
            if c == 0 {
                continue;
            }
            model.bigram.insert((ai, bi), c);
            model.context_total[ai as usize] += c;
            model.context_types[ai as usize] += 1;
            model.continuation[bi as usize] += 1;
            model.bigram_types += 1;
        }
        model.continued_types = model.continuation.iter().filter(|&&n| n > 0).count() as u64;
        Ok(model)
    }

    pub fn smoothing(&self) -> Smoothing {
        self.smoothing
    }

    /// Vocabulary size including `<unk>`.
    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// Vocabulary words, `<unk>` first.
    pub fn vocab(&self) -> &[String] {
        &self.words
    }

    fn word_id(&self, w: &str) -> u32 {
        self.index.get(w).copied().unwrap_or(0)
    }

    fn context_id(&self, w: &str) -> u32 {
        if w == BOS {
            self.words.len() as u32
        } else {
            self.word_id(w)
        }
    }

    fn continuation_prob(&self, b: u32, d: f64) -> f64 {
        let v = self.words.len() as f64;
        let total = self.bigram_types as f64;
        let n = self.continuation[b as usize] as f64;
        (n - d).max(0.0) / total + d * self.continued_types as f64 / total / v
    }

    fn prob_ids(&self, a: u32, b: u32) -> f64 {
        let c_ab = self.bigram.get(&(a, b)).copied().unwrap_or(0) as f64;
        let c_a = self.context_total[a as usize] as f64;
        match self.smoothing {
            Smoothing::AddK { k } => (c_ab + k) / (c_a + k * self.words.len() as f64),
            Smoothing::KneserNey { discount: d } => {
                let lower = self.continuation_prob(b, d);
                if c_a == 0.0 {
                    return lower;
                }
                let backoff = d * self.context_types[a as usize] as f64 / c_a;
                (c_ab - d).max(0.0) / c_a + backoff * lower
            }
        }
    }

    /// `p(word | context)`; `context` may be `<s>`, unknown words map to
    /// `<unk>`.
    pub fn prob(&self, context: &str, word: &str) -> f64 {
        self.prob_ids(self.context_id(context), self.word_id(word))
    }

    /// Surprisal in nats of each word given its predecessor, the first word
    /// given `<s>`.
    pub fn surprisal(&self, words: &[&str]) -> Vec<f64> {
        let mut prev = BOS;
        words
            .iter()
            .map(|w| {
                let s = -self.prob(prev, w).ln();
                prev = w;
                s
            })
            .collect()
    }

    /// Every context with at least one observed continuation, plus `<unk>`.
    pub fn contexts(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..=self.words.len())
            .filter(|&a| self.context_total[a] > 0 || a == 0)
            .map(|a| {
                if a == self.words.len() {
                    BOS.to_string()
                } else {
                    self.words[a].clone()
                }
            })
            .collect();
        out.sort();
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut uni = String::from("word\tcount\n");
        for (w, c) in self.words.iter().zip(&self.unigram).skip(1) {
            uni.push_str(&format!("{w}\t{c}\n"));
        }
        let mut rows: Vec<(&str, &str, u64)> = self
            .bigram
            .iter()
            .map(|(&(a, b), &c)| {
                let a = if a as usize == self.words.len() {
                    BOS
                } else {
                    self.words[a as usize].as_str()
                };
                (a, self.words[b as usize].as_str(), c)
            })
            .collect();
        rows.sort();
        let mut bi = String::from("context\tword\tcount\n");
        for (a, b, c) in rows {
            bi.push_str(&format!("{a}\t{b}\t{c}\n"));
        }
        let header = Header {
            format: FORMAT.into(),
            smoothing: self.smoothing,
            vocab_size: self.words.len(),
            tokens: self.unigram.iter().sum(),
        };
        let write = |name: &str, body: &str| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write(UNIGRAMS_FILE, &uni)?;
        write(BIGRAMS_FILE, &bi)?;
        let mut json = serde_json::to_string_pretty(&header).expect("header serializes");
        json.push('\n');
        write(HEADER_FILE, &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let hp = dir.join(HEADER_FILE);
        let header: Header = serde_json::from_str(&read(HEADER_FILE)?).map_err(|e| Error::json(&hp, e))?;
        if header.format != FORMAT {
            return Err(Error::Data(format!("unsupported bigram format {:?}", header.format)));
        }
        let bad = |file: &str, line: usize| Error::Parse {
            path: dir.join(file).display().to_string(),
            line,
            msg: "malformed count row".into(),
        };
        let mut unigrams = Vec::new();
        for (i, l) in read(UNIGRAMS_FILE)?.lines().enumerate().skip(1) {
            let (w, c) = l.split_once('\t').ok_or_else(|| bad(UNIGRAMS_FILE, i + 1))?;
            let c = c.parse().map_err(|_| bad(UNIGRAMS_FILE, i + 1))?;
            unigrams.push((w.to_string(), c));
        }
        let mut bigrams = BTreeMap::new();
        for (i, l) in read(BIGRAMS_FILE)?.lines().enumerate().skip(1) {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(BIGRAMS_FILE, i + 1));
            }
            let c = f[2].parse().map_err(|_| bad(BIGRAMS_FILE, i + 1))?;
            bigrams.insert((f[0].to_string(), f[1].to_string()), c);
        }
        let model = Self::from_counts(header.smoothing.validate()?, unigrams, bigrams)?;
        if model.vocab_size() != header.vocab_size {
            return Err(Error::Data("bigram header vocabulary size disagrees with counts".into()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn add_one_closed_form() {
        let m = BigramModel::train("a b a b", Smoothing::AddK { k: 1.0 }).unwrap();
        assert_eq!(m.vocab_size(), 3);
        assert_eq!(m.prob("a", "b"), 3.0 / 5.0);
        assert_eq!(m.prob("a", "a"), 1.0 / 5.0);
        assert_eq!(m.prob(BOS, "a"), 2.0 / 4.0);
        // Unseen context is uniform.
        assert_eq!(m.prob("zebra", "a"), 1.0 / 3.0);
    }

    #[test]
    fn surprisal_of_even_odds_is_ln_two() {
        let m = BigramModel::train("a b\na c", Smoothing::AddK { k: 1e-12 }).unwrap();
        let s = m.surprisal(&["a", "b"]);
        assert!((s[1] - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn tiny_k_approaches_certainty() {
        let text = "a b a b a b a b";
        let m = BigramModel::train(text, Smoothing::AddK { k: 1e-6 }).unwrap();
        assert!(m.surprisal(&["a", "b"])[1] < 1e-3);
    }

    #[test]
    fn empty_corpus_and_bad_smoothing() {
        assert!(BigramModel::train("  \n", Smoothing::default()).is_err());
        assert!(BigramModel::train("a", Smoothing::AddK { k: 0.0 }).is_err());
        assert!(BigramModel::train("a", Smoothing::KneserNey { discount: 1.0 }).is_err());
    }

    #[test]
    fn round_trip_preserves_probabilities() {
        let dir = tempfile::tempdir().unwrap();
        let m = BigramModel::train("the cat sat\nthe dog sat down\n", Smoothing::default()).unwrap();
        m.save(dir.path()).unwrap();
        let back = BigramModel::load(dir.path()).unwrap();
        assert_eq!(m, back);
        let bi = fs::read_to_string(dir.path().join(BIGRAMS_FILE)).unwrap();
        assert!(bi.starts_with("context\tword\tcount\n<s>\tthe\t2\n"));
    }

    fn sums(m: &BigramModel) -> Vec<f64> {
        let mut ctx = m.contexts();
        ctx.push("never-seen".into());
        ctx.iter()
            .map(|a| m.vocab().iter().map(|b| m.prob(a, b)).sum())
            .collect()
    }

    proptest! {
        #[test]
        fn every_context_normalizes(
            sents in prop::collection::vec(prop::collection::vec(0u8..6, 1..8), 1..20),
            d in 0.05f64..0.95,
            k in 0.01f64..3.0,
        ) {
            let sents: Vec<Vec<String>> = sents
                .iter()
                .map(|s| s.iter().map(|w| format!("w{w}")).collect())
                .collect();
            for sm in [Smoothing::KneserNey { discount: d }, Smoothing::AddK { k }] {
                let m = BigramModel::from_sentences(&sents, sm).unwrap();
                for s in sums(&m) {
                    prop_assert!((s - 1.0).abs() < 1e-9, "sum {s}");
                }
            }
        }

        #[test]
        fn add_k_is_monotone_in_pair_counts(extra in 1usize..5, k in 0.01f64..2.0) {
            let base = "a b\nb a\na a";
            let more = format!("{base}{}", "\na b".repeat(extra));
            let p0 = BigramModel::train(base, Smoothing::AddK { k }).unwrap().prob("a", "b");
            let p1 = BigramModel::train(&more, Smoothing::AddK { k }).unwrap().prob("a", "b");
            prop_assert!(p1 >= p0);
        }
    }
}
