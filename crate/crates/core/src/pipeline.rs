// SPDX-License-Identifier: MIT OR Apache-2.0

//! Glue from words to per-layer word surprisals to per-layer ΔLL.

use std::collections::HashMap;

use serde::Serialize;

use crate::corpus::WordRecord;
use crate::error::{Error, Result};
use crate::lens::{token_surprisals, word_surprisals, LensKind, SurprisalTable, TranslatorSet, WindowConfig};
use crate::model::ModelBundle;
use crate::psychofit::{build_design, evaluate_design, DeltaLL, DesignOptions, OlsFit};
use crate::tok::{align_words, Tokenizer, WordAlignment};

/// One sequence scored at every layer by one lens.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence {
    pub seq_id: String,
    /// Corpus `word_index` of each word, in order.
    pub word_indices: Vec<usize>,
    pub ids: Vec<u32>,
    /// Token spans into `ids` (after any BOS token).
    pub alignment: WordAlignment,
    pub table: SurprisalTable,
}

/// Tokenize the space-joined words, prepend the model's BOS token when it
/// has one, and compute token and word surprisals at every layer. Without
/// BOS the first token has no surprisal, so the first word's value covers
/// only its remaining tokens.
pub fn score_words(
    model: &ModelBundle,
    tokenizer: &Tokenizer,
    kind: LensKind,
    translators: Option<&TranslatorSet>,
    seq_id: &str,
    words: &[(usize, String)],
    window: WindowConfig,
) -> Result<ScoredSequence> {
    if words.is_empty() {
        return Err(Error::Data(format!("sequence {seq_id} has no words")));
    }
    let texts: Vec<String> = words.iter().map(|w| w.1.clone()).collect();
    if let Some(w) = texts.iter().find(|w| w.is_empty() || w.chars().any(char::is_whitespace)) {
        return Err(Error::Data(format!(
            "sequence {seq_id}: word {w:?} is empty or contains whitespace"
        )));
    }
    let text = texts.join(" ");
    let enc = tokenizer.encode(&text);
    let alignment = align_words(&texts, &enc.offsets, &text)
        .map_err(|e| Error::Alignment(format!("sequence {seq_id}: {e}")))?;
    let (ids, alignment) = match model.config.bos_token_id {
        Some(bos) => {
            let mut ids = Vec::with_capacity(enc.ids.len() + 1);
            ids.push(bos);
            ids.extend(&enc.ids);
            (ids, alignment.shifted(1))
        }
        None => (enc.ids, alignment),
    };
    let mut table = token_surprisals(model, kind, translators, &ids, window)
        .map_err(|e| match e {
            Error::SequenceTooLong { .. } | Error::TokenOutOfRange { .. } => {
                Error::Data(format!("sequence {seq_id}: {e}"))
            }
            other => other,
        })?;
    word_surprisals(&mut table, &alignment)?;
    Ok(ScoredSequence {
        seq_id: seq_id.to_string(),
        word_indices: words.iter().map(|w| w.0).collect(),
        ids,
        alignment,
        table,
    })
}

/// Word surprisals by `(seq_id, word_index)`, one value per layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WordSurprisalIndex {
    pub n_layers: usize,
    values: HashMap<(String, usize), Vec<f64>>,
}

impl WordSurprisalIndex {
    pub fn new(n_layers: usize) -> Self {
        Self {
            n_layers,
            values: HashMap::new(),
        }
    }

    pub fn insert(&mut self, seq: &ScoredSequence) {
        for (w, &idx) in seq.word_indices.iter().enumerate() {
            let per_layer = seq.table.word.iter().map(|l| l[w]).collect();
            self.values.insert((seq.seq_id.clone(), idx), per_layer);
        }
    }

    pub fn insert_values(&mut self, seq_id: &str, word_index: usize, per_layer: Vec<f64>) {
        self.values.insert((seq_id.to_string(), word_index), per_layer);
    }

    pub fn get(&self, seq_id: &str, word_index: usize, layer: usize) -> Option<f64> {
        self.values
            .get(&(seq_id.to_string(), word_index))
            .and_then(|v| v.get(layer.checked_sub(1)?).copied())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerFit {
    pub layer: usize,
    pub n_rows: usize,
    pub delta: DeltaLL,
    pub base: OlsFit,
    pub full: OlsFit,
}

/// ΔLL of every layer `1..=L` on one measure's records.
pub fn evaluate_layers(
    records: &[WordRecord],
    surprisal: &WordSurprisalIndex,
    options: DesignOptions,
) -> Result<Vec<LayerFit>> {
    (1..=surprisal.n_layers)
        .map(|layer| {
            let pair = build_design(records, |s, i| surprisal.get(s, i, layer), options)?;
            let (delta, base, full) = evaluate_design(&pair)?;
            Ok(LayerFit {
                layer,
                n_rows: pair.rows.len(),
                delta,
                base,
                full,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_toy_bundle, ModelConfig};

    fn words(ws: &[&str]) -> Vec<(usize, String)> {
        ws.iter().enumerate().map(|(i, w)| (i, w.to_string())).collect()
    }

    #[test]
    fn words_are_scored_at_every_layer() {
        let m = make_toy_bundle(7, ModelConfig::toy()).unwrap();
        let tok = Tokenizer::bytes_only();
        let s = score_words(&m, &tok, LensKind::Logit, None, "s1", &words(&["The", "cat", "sat."]), WindowConfig::default())
            .unwrap();
        assert_eq!(s.table.word.len(), 4);
        assert_eq!(s.table.word[0].len(), 3);
        // The bare space token at 3 belongs to no word.
        assert_eq!(s.alignment.spans[1], 4..7);
        let direct: f64 = (4..7).map(|k| s.table.token[2][k - 1]).sum();
        assert!((s.table.word[2][1] - direct).abs() < 1e-12);
        let mut idx = WordSurprisalIndex::new(4);
        idx.insert(&s);
        assert_eq!(idx.get("s1", 1, 3), Some(direct));
        assert_eq!(idx.get("s1", 1, 0), None);
    }

    #[test]
    fn bos_shifts_alignment_and_scores_first_word() {
        let mut c = ModelConfig::toy();
        c.bos_token_id = Some(0);
        let m = make_toy_bundle(7, c).unwrap();
        let tok = Tokenizer::bytes_only();
        let s = score_words(&m, &tok, LensKind::Logit, None, "s", &words(&["a", "b"]), WindowConfig::default()).unwrap();
        assert_eq!(s.ids[0], 0);
        assert_eq!(s.alignment.spans[0], 1..2);
        assert!(s.table.word[3][0] > 0.0);
    }

    #[test]
    fn whitespace_in_words_is_rejected() {
        let m = make_toy_bundle(7, ModelConfig::toy()).unwrap();
        let tok = Tokenizer::bytes_only();
        let r = score_words(&m, &tok, LensKind::Logit, None, "s", &words(&["a b"]), WindowConfig::default());
        assert!(r.is_err());
    }
}
