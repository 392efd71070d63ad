// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE tokenization and subword-to-word alignment.
//!
//! Offsets are byte offsets into the UTF-8 input. A byte-level token may end
//! in the middle of a multi-byte character; decoding the full id sequence
//! always reproduces the input bytes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.json";
pub const MERGES_FILE: &str = "merges.txt";
pub const FLAGS_FILE: &str = "tokenizer_flags.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    ByteLevelBpe,
    /// One token per Unicode scalar, for toy fixtures.
    Char,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerFlags {
    pub mode: TokenizerMode,
    #[serde(default)]
    pub prefix_marker: Option<String>,
    #[serde(default)]
    pub unk_token: Option<String>,
}

/// GPT-2's reversible byte → printable-char table.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || b >= 0xAE;
        table[b as usize] = if printable {
            char::from(b)
        } else {
            let c = char::from_u32(256 + extra).expect("valid scalar");
            extra += 1;
            c
        };
    }
    table
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    flags: TokenizerFlags,
    vocab: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
}

/// Output of [`Tokenizer::encode`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Encoding {
    pub ids: Vec<u32>,
    /// Per-token `[start, end)` byte offsets into the input.
    pub offsets: Vec<Range<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Letter,
    Number,
    Other,
    Space,
}

fn class_of(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Number
    } else {
        CharClass::Other
    }
}

const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];

/// Splits text the way GPT-2's pre-tokenization pattern does:
/// contractions, ` ?\p{L}+`, ` ?\p{N}+`, ` ?[^\s\p{L}\p{N}]+`,
/// `\s+(?!\S)`, `\s+`. Returns byte ranges.
pub fn pretokenize(text: &str) -> Vec<Range<usize>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let byte_at = |i: usize| chars.get(i).map_or(text.len(), |&(b, _)| b);
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = byte_at(i);
        if let Some(c) = CONTRACTIONS.iter().find(|c| text[start..].starts_with(**c)) {
            let end = start + c.len();
            pieces.push(start..end);
            while i < chars.len() && byte_at(i) < end {
                i += 1;
            }
            continue;
        }
        let (c0, cls0) = (chars[i].1, class_of(chars[i].1));
        let next_cls = chars.get(i + 1).map(|&(_, c)| class_of(c));
        let run_from = if cls0 != CharClass::Space {
            Some(i)
        } else if c0 == ' ' && matches!(next_cls, Some(c) if c != CharClass::Space) {
            Some(i + 1)
        } else {
            None
        };
        if let Some(j) = run_from {
            let cls = class_of(chars[j].1);
            let mut k = j + 1;
            while k < chars.len() && class_of(chars[k].1) == cls {
                k += 1;
            }
            pieces.push(start..byte_at(k));
            i = k;
            continue;
        }
        let mut k = i + 1;
        while k < chars.len() && class_of(chars[k].1) == CharClass::Space {
            k += 1;
        }
        if k < chars.len() && k - i > 1 {
            k -= 1;
        }
        pieces.push(start..byte_at(k));
        i = k;
    }
    pieces
}

impl Tokenizer {
    /// Byte-level BPE with the given vocabulary and ordered merges.
    pub fn byte_level(
        vocab: HashMap<String, u32>,
        merges: Vec<(String, String)>,
    ) -> Result<Self> {
        let flags = TokenizerFlags {
            mode: TokenizerMode::ByteLevelBpe,
            prefix_marker: Some("\u{120}".into()),
            unk_token: None,
        };
        Self::build(flags, vocab, merges)
    }

    /// 256 single-byte tokens where id == byte value, no merges.
    pub fn bytes_only() -> Self {
        let enc = bytes_to_unicode();
        let vocab = (0..256u32)
            .map(|b| (enc[b as usize].to_string(), b))
            .collect();
        Self::byte_level(vocab, Vec::new()).expect("complete byte vocabulary")
    }

    /// Char-mode tokenizer over the given alphabet; unknown chars map to `unk`.
    pub fn char_level(alphabet: &[char], unk: &str) -> Result<Self> {
        let mut vocab = HashMap::new();
        vocab.insert(unk.to_string(), 0);
        for c in alphabet {
            let next = vocab.len() as u32;
            vocab.entry(c.to_string()).or_insert(next);
        }
        let flags = TokenizerFlags {
            mode: TokenizerMode::Char,
            prefix_marker: None,
            unk_token: Some(unk.to_string()),
        };
        Self::build(flags, vocab, Vec::new())
    }

    fn build(
        flags: TokenizerFlags,
        vocab: HashMap<String, u32>,
        merges: Vec<(String, String)>,
    ) -> Result<Self> {
        let n = vocab.len();
        let mut id_to_token = vec![None; n];
        for (tok, &id) in &vocab {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| Error::Tokenizer(format!("id {id} for {tok:?} is not dense in [0, {n})")))?;
            if slot.is_some() {
                return Err(Error::Tokenizer(format!("duplicate id {id}")));
            }
            *slot = Some(tok.clone());
        }
        let id_to_token: Vec<String> = id_to_token.into_iter().map(|t| t.expect("dense")).collect();

        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();

        match flags.mode {
            TokenizerMode::ByteLevelBpe => {
                if let Some(c) = byte_encoder.iter().find(|c| !vocab.contains_key(&c.to_string())) {
                    return Err(Error::Tokenizer(format!(
                        "byte-level vocabulary lacks base symbol {c:?}"
                    )));
                }
            }
            TokenizerMode::Char => {
                let unk = flags
                    .unk_token
                    .as_ref()
                    .ok_or_else(|| Error::Tokenizer("char mode requires unk_token".into()))?;
                if !vocab.contains_key(unk) {
                    return Err(Error::Tokenizer(format!("unk token {unk:?} not in vocabulary")));
                }
            }
        }

        // Every merge operand must already be producible; this rules out cycles.
        let mut producible: std::collections::HashSet<String> = match flags.mode {
            TokenizerMode::ByteLevelBpe => byte_encoder.iter().map(|c| c.to_string()).collect(),
            TokenizerMode::Char => vocab.keys().cloned().collect(),
        };
        let mut merge_ranks = HashMap::new();
        for (rank, (a, b)) in merges.iter().enumerate() {
            if !producible.contains(a) || !producible.contains(b) {
                return Err(Error::Tokenizer(format!(
                    "merge {rank} ({a} {b}) uses a symbol not produced by earlier merges"
                )));
            }
            let merged = format!("{a}{b}");
            if !vocab.contains_key(&merged) {
                return Err(Error::Tokenizer(format!("merge result {merged:?} not in vocabulary")));
            }
            producible.insert(merged);
            merge_ranks.entry((a.clone(), b.clone())).or_insert(rank);
        }

        Ok(Self {
            flags,
            vocab,
            id_to_token,
            merges,
            merge_ranks,
            byte_encoder,
            byte_decoder,
        })
    }

    pub fn flags(&self) -> &TokenizerFlags {
        &self.flags
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn id_to_token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    fn bpe(&self, symbols: &mut Vec<String>, spans: &mut Vec<(usize, usize)>) {
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merge_ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut i = 0;
            while i + 1 < symbols.len() {
                if &symbols[i] == a && &symbols[i + 1] == b {
                    let right = symbols.remove(i + 1);
                    symbols[i].push_str(&right);
                    let (_, end) = spans.remove(i + 1);
                    spans[i].1 = end;
                }
                i += 1;
            }
        }
    }

    pub fn encode(&self, text: &str) -> Encoding {
        match self.flags.mode {
            TokenizerMode::Char => self.encode_chars(text),
            TokenizerMode::ByteLevelBpe => self.encode_bytes(text),
        }
    }

    fn encode_chars(&self, text: &str) -> Encoding {
        let unk = self.flags.unk_token.as_deref().and_then(|u| self.token_to_id(u)).unwrap_or(0);
        let mut enc = Encoding::default();
        for (b, c) in text.char_indices() {
            enc.ids.push(self.token_to_id(c.encode_utf8(&mut [0; 4])).unwrap_or(unk));
            enc.offsets.push(b..b + c.len_utf8());
        }
        enc
    }

    fn encode_bytes(&self, text: &str) -> Encoding {
        let mut enc = Encoding::default();
        for piece in pretokenize(text) {
            let bytes = &text.as_bytes()[piece.clone()];
            let mut symbols: Vec<String> = bytes
                .iter()
                .map(|&b| self.byte_encoder[b as usize].to_string())
                .collect();
            let mut spans: Vec<(usize, usize)> = (0..bytes.len()).map(|i| (i, i + 1)).collect();
            self.bpe(&mut symbols, &mut spans);
            for (sym, (s, e)) in symbols.iter().zip(spans) {
                let id = self.vocab[sym.as_str()];
                enc.ids.push(id);
                enc.offsets.push(piece.start + s..piece.start + e);
            }
        }
        enc
    }

    /// Decode ids to raw bytes (byte-level) or concatenated chars.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self
                .id_to_token(id)
                .ok_or_else(|| Error::Tokenizer(format!("unknown id {id}")))?;
            match self.flags.mode {
                TokenizerMode::Char => out.extend_from_slice(tok.as_bytes()),
                TokenizerMode::ByteLevelBpe => {
                    for c in tok.chars() {
                        let b = self.byte_decoder.get(&c).ok_or_else(|| {
                            Error::Tokenizer(format!("token {tok:?} has a non-byte symbol"))
                        })?;
                        out.push(*b);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?)
            .map_err(|e| Error::Tokenizer(format!("decoded bytes are not UTF-8: {e}")))
    }

    /// Learn `n_merges` byte-level merges from a corpus. Ties between equally
    /// frequent pairs go to the lexicographically smallest pair.
    pub fn train_byte_level(corpus: &[&str], n_merges: usize) -> Self {
        let base = Self::bytes_only();
        let mut words: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for line in corpus {
            for piece in pretokenize(line) {
                let syms = line.as_bytes()[piece]
                    .iter()
                    .map(|&b| base.byte_encoder[b as usize].to_string())
                    .collect();
                *words.entry(syms).or_default() += 1;
            }
        }
        let mut vocab = base.vocab.clone();
        let mut merges = Vec::new();
        let mut words: Vec<(Vec<String>, usize)> = words.into_iter().collect();
        for _ in 0..n_merges {
            let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
            for (syms, n) in &words {
                for w in syms.windows(2) {
                    *counts.entry((w[0].clone(), w[1].clone())).or_default() += n;
                }
            }
            let Some((pair, _)) = counts
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            else {
                break;
            };
            let merged = format!("{}{}", pair.0, pair.1);
            let next = vocab.len() as u32;
            vocab.entry(merged.clone()).or_insert(next);
            for (syms, _) in words.iter_mut() {
                let mut i = 0;
                while i + 1 < syms.len() {
                    if syms[i] == pair.0 && syms[i + 1] == pair.1 {
                        syms.remove(i + 1);
                        syms[i] = merged.clone();
                    }
                    i += 1;
                }
            }
            merges.push(pair);
        }
        Self::byte_level(vocab, merges).expect("trained merges are consistent")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let flags_path = dir.join(FLAGS_FILE);
        let flags: TokenizerFlags = serde_json::from_str(
            &fs::read_to_string(&flags_path).map_err(|e| Error::io(&flags_path, e))?,
        )
        .map_err(|e| Error::json(&flags_path, e))?;
        let vocab_path = dir.join(VOCAB_FILE);
        let vocab: HashMap<String, u32> = serde_json::from_str(
            &fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?,
        )
        .map_err(|e| Error::json(&vocab_path, e))?;
        let merges_path = dir.join(MERGES_FILE);
        let mut merges = Vec::new();
        if merges_path.exists() {
            let text = fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
            for (i, line) in text.lines().enumerate() {
                if line.starts_with("#version") || line.trim().is_empty() {
                    continue;
                }
                let mut parts = line.split(' ');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(a), Some(b), None) => merges.push((a.to_string(), b.to_string())),
                    _ => {
                        return Err(Error::Parse {
                            path: merges_path.display().to_string(),
                            line: i + 1,
                            msg: format!("expected two symbols, got {line:?}"),
                        })
                    }
                }
            }
        }
        Self::build(flags, vocab, merges)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let sorted: BTreeMap<&str, u32> = self.vocab.iter().map(|(k, &v)| (k.as_str(), v)).collect();
        let write = |name: &str, body: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write(
            VOCAB_FILE,
            serde_json::to_string(&sorted).map_err(|e| Error::json(dir.join(VOCAB_FILE), e))? + "\n",
        )?;
        let mut merges = String::from("#version: 0.2\n");
        for (a, b) in &self.merges {
            merges.push_str(&format!("{a} {b}\n"));
        }
        write(MERGES_FILE, merges)?;
        write(
            FLAGS_FILE,
            serde_json::to_string_pretty(&self.flags).map_err(|e| Error::json(dir.join(FLAGS_FILE), e))?
                + "\n",
        )
    }
}

/// Token spans for each whitespace-delimited word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordAlignment {
    pub words: Vec<String>,
    /// Token index range per word.
    pub spans: Vec<Range<usize>>,
}

impl WordAlignment {
    pub fn n_tokens_covered(&self) -> usize {
        self.spans.iter().map(|s| s.len()).sum()
    }

    /// Shift every span, e.g. to account for a prepended BOS token.
    pub fn shifted(&self, by: usize) -> Self {
        Self {
            words: self.words.clone(),
            spans: self.spans.iter().map(|s| s.start + by..s.end + by).collect(),
        }
    }
}

/// Byte ranges of maximal whitespace-free runs.
pub fn word_byte_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = None;
    for (b, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(b),
            (true, Some(s)) => {
                spans.push(s..b);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(s..text.len());
    }
    spans
}

/// Assign each token to the word containing its first non-space byte.
pub fn align_words(
    words: &[String],
    offsets: &[Range<usize>],
    text: &str,
) -> Result<WordAlignment> {
    let word_spans = word_byte_spans(text);
    if word_spans.len() != words.len()
        || word_spans
            .iter()
            .zip(words)
            .any(|(s, w)| &text[s.clone()] != w.as_str())
    {
        return Err(Error::Alignment(
            "word list is not the whitespace split of the text".into(),
        ));
    }
    let word_of = |pos: usize| -> Option<usize> {
        let i = word_spans.partition_point(|s| s.end <= pos);
        (i < word_spans.len() && word_spans[i].start <= pos).then_some(i)
    };

    let mut spans: Vec<Option<Range<usize>>> = vec![None; words.len()];
    let mut last_word: Option<usize> = None;
    for (t, off) in offsets.iter().enumerate() {
        if off.end > text.len() || off.start > off.end {
            return Err(Error::Alignment(format!("token {t} offset {off:?} outside text")));
        }
        let mut owner = None;
        for pos in off.clone() {
            if let Some(w) = word_of(pos) {
                match owner {
                    None => owner = Some(w),
                    Some(o) if o != w => {
                        return Err(Error::Alignment(format!(
                            "token {t} straddles words {:?} and {:?}",
                            words[o], words[w]
                        )))
                    }
                    _ => {}
                }
            }
        }
        let Some(w) = owner else { continue };
        if last_word.is_some_and(|lw| lw > w) {
            return Err(Error::Alignment(format!("token {t} is out of order")));
        }
        match &mut spans[w] {
            None => spans[w] = Some(t..t + 1),
            Some(r) if r.end == t => r.end = t + 1,
            Some(_) => {
                return Err(Error::Alignment(format!(
                    "tokens of word {:?} are not contiguous",
                    words[w]
                )))
            }
        }
        last_word = Some(w);
    }
    let spans = spans
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::Alignment(format!("word {:?} has no tokens", words[i]))))
        .collect::<Result<Vec<_>>>()?;
    Ok(WordAlignment {
        words: words.to_vec(),
        spans,
    })
}
