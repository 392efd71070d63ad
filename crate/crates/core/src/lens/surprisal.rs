// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::Array2;

use super::{layer_log_probs, LensKind, TranslatorSet};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tok::WordAlignment;

/// Sliding-window policy for sequences longer than the model context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    /// Window length; `None` means the model's `max_positions`.
    pub length: Option<usize>,
    /// Window stride; `None` means half the window length.
    pub stride: Option<usize>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            length: None,
            stride: None,
        }
    }
}

/// Per-layer surprisals (nats) for one sequence and one lens.
#[derive(Debug, Clone, PartialEq)]
pub struct SurprisalTable {
    pub lens: LensKind,
    pub n_layers: usize,
    /// `token[l - 1][t]` is the surprisal of `ids[t + 1]` at layer `l`.
    pub token: Vec<Vec<f64>>,
    /// `word[l - 1][w]`, filled by [`word_surprisals`].
    pub word: Vec<Vec<f64>>,
}

impl SurprisalTable {
    pub fn n_scored(&self) -> usize {
        self.token.first().map_or(0, Vec::len)
    }

    /// TSV rows `seq_id layer lens unit index surprisal_nats` for one layer.
    pub fn tsv_rows(&self, seq_id: &str, layer: usize, out: &mut String) {
        use std::fmt::Write;
        for (t, s) in self.token[layer - 1].iter().enumerate() {
            let _ = writeln!(out, "{seq_id}\t{layer}\t{}\ttoken\t{t}\t{s}", self.lens);
        }
        if let Some(words) = self.word.get(layer - 1) {
            for (w, s) in words.iter().enumerate() {
                let _ = writeln!(out, "{seq_id}\t{layer}\t{}\tword\t{w}\t{s}", self.lens);
            }
        }
    }
}

pub const SURPRISAL_TSV_HEADER: &str = "seq_id\tlayer\tlens\tunit\tindex\tsurprisal_nats\n";

/// Token surprisals at every layer. Position `t` predicts `ids[t + 1]`, so
/// the first token receives none. Sequences longer than the window are
/// scored with overlapping windows advancing by `stride`; each window only
/// scores targets past the previous window's end, so every target is
/// scored once and all but the first window's targets see at least
/// `length - stride` tokens of context.
pub fn token_surprisals(
    model: &ModelBundle,
    kind: LensKind,
    translators: Option<&TranslatorSet>,
    ids: &[u32],
    window: WindowConfig,
) -> Result<SurprisalTable> {
    if kind == LensKind::Tuned && translators.is_none() {
        return Err(Error::Precondition(
            "tuned lens requires translators".into(),
        ));
    }
    let n_layers = model.n_layers();
    let n = ids.len();
    let mut token = vec![vec![f64::NAN; n.saturating_sub(1)]; n_layers];
    let len = window.length.unwrap_or(model.config.max_positions);
    if len < 2 || len > model.config.max_positions {
        return Err(Error::Precondition(format!(
            "window length {len} outside 2..={}",
            model.config.max_positions
        )));
    }
    let stride = window.stride.unwrap_or(len / 2).max(1);
    if stride > len - 1 {
        return Err(Error::Precondition("window stride must be < window length".into()));
    }

    let mut next_target = 1;
    let mut start = 0;
    while next_target < n {
        let end = (start + len).min(n);
        let first = next_target.max(start + 1);
        let chunk = &ids[start..end];
        let stream = model.forward_capture(chunk)?;
        for layer in 1..=n_layers {
            let lp: Array2<f64> = layer_log_probs(model, &stream, layer, kind, translators)?;
            for target in first..end {
                let pos = target - 1 - start;
                let s = -lp[[pos, ids[target] as usize]];
                token[layer - 1][target - 1] = s.max(0.0);
            }
        }
        next_target = end;
        start += stride;
    }
    Ok(SurprisalTable {
        lens: kind,
        n_layers,
        token,
        word: Vec::new(),
    })
}

/// Sum token surprisals over each word's span (chain rule). A token at
/// sequence index 0 has no surprisal and contributes nothing.
pub fn word_surprisals(table: &mut SurprisalTable, align: &WordAlignment) -> Result<()> {
    let n_tokens = table.n_scored() + 1;
    let mut word = Vec::with_capacity(table.n_layers);
    for layer_vals in &table.token {
        let mut per_word = Vec::with_capacity(align.spans.len());
        for (w, span) in align.spans.iter().enumerate() {
            if span.end > n_tokens || span.is_empty() {
                return Err(Error::Alignment(format!(
                    "word {w} span {span:?} outside table of {n_tokens} tokens"
                )));
            }
            let s: f64 = span
                .clone()
                .filter(|&k| k > 0)
                .map(|k| layer_vals[k - 1])
                .sum();
            per_word.push(s);
        }
        word.push(per_word);
    }
    table.word = word;
    Ok(())
}

/// `exp(mean surprisal)` over all scored positions of `ids`.
pub fn perplexity(
    model: &ModelBundle,
    ids: &[u32],
    layer: usize,
    kind: LensKind,
    translators: Option<&TranslatorSet>,
) -> Result<f64> {
    if ids.len() < 2 {
        return Err(Error::Precondition("perplexity needs at least 2 tokens".into()));
    }
    if layer == 0 || layer > model.n_layers() {
        return Err(Error::Precondition(format!("layer {layer} out of range")));
    }
    let table = token_surprisals(model, kind, translators, ids, WindowConfig::default())?;
    let vals = &table.token[layer - 1];
    Ok((vals.iter().sum::<f64>() / vals.len() as f64).exp())
}
