// SPDX-License-Identifier: MIT OR Apache-2.0

//! Human reading data: TSV ingestion, subject averaging, zero-cost
//! filtering, baseline covariates and clause-final marking.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Measure {
    Spr,
    Fpgd,
    Maze,
    N400,
}

impl Measure {
    pub const ALL: [Measure; 4] = [Measure::Spr, Measure::Fpgd, Measure::Maze, Measure::N400];

    pub fn as_str(self) -> &'static str {
        match self {
            Measure::Spr => "SPR",
            Measure::Fpgd => "FPGD",
            Measure::Maze => "MAZE",
            Measure::N400 => "N400",
        }
    }

    /// Behavioral latencies, where a zero cost means "not measured".
    pub fn is_behavioral(self) -> bool {
        !matches!(self, Measure::N400)
    }

    pub fn units(self) -> &'static str {
        if self.is_behavioral() {
            "ms"
        } else {
            "uV"
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SPR" => Ok(Measure::Spr),
            "FPGD" => Ok(Measure::Fpgd),
            "MAZE" => Ok(Measure::Maze),
            "N400" => Ok(Measure::N400),
            other => Err(Error::Data(format!("unknown measure {other:?}"))),
        }
    }
}

/// Length and log-frequency of the word and its two predecessors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    /// `[t, t-1, t-2]`; lags are 0 when out of the sequence.
    pub length: [f64; 3],
    pub log_freq: [f64; 3],
    /// False when `t-1` or `t-2` falls outside the sequence.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordRecord {
    pub dataset_id: String,
    pub stimuli_id: String,
    pub seq_id: String,
    pub word_index: usize,
    pub word: String,
    pub measure: Measure,
    pub cost: f64,
    pub baseline_amplitude: Option<f64>,
    pub clause_final: Option<bool>,
    pub subject_count: usize,
    /// Text fed to the model for this word, when it differs from `word`.
    pub token_override: Option<String>,
    pub pos: Option<String>,
    pub covariates: Option<Covariates>,
}

impl WordRecord {
    pub fn model_text(&self) -> &str {
        self.token_override.as_deref().unwrap_or(&self.word)
    }
}

/// Dataset-level fields that a reading TSV does not carry per row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadingSchema {
    pub dataset_id: String,
    pub stimuli_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LoadReport {
    pub rows: usize,
    pub records: usize,
    pub dropped_zero_cost: usize,
}

/// Numeric-aware ordering so that `"2" < "10"`.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        _ => a.cmp(b),
    }
}

fn sort_records(records: &mut [WordRecord]) {
    records.sort_by(|a, b| {
        natural_cmp(&a.seq_id, &b.seq_id)
            .then(a.word_index.cmp(&b.word_index))
            .then(a.measure.cmp(&b.measure))
    });
}

/// Tab-separated table with `#` comments and a header row.
pub(crate) struct Tsv {
    pub header: Vec<String>,
    pub rows: Vec<(usize, Vec<String>)>,
}

impl Tsv {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Data("empty table: no header row".into()))?;
        let header = header.split('\t').map(|s| s.trim().to_string()).collect();
        let rows = lines
            .map(|(i, l)| (i + 1, l.split('\t').map(|s| s.to_string()).collect()))
            .collect();
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn require(&self, name: &str, path: &str) -> Result<usize> {
        self.column(name).ok_or_else(|| Error::Parse {
            path: path.to_string(),
            line: 1,
            msg: format!("missing required column {name:?}"),
        })
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "t" | "yes" => Some(true),
        "0" | "false" | "f" | "no" => Some(false),
        _ => None,
    }
}

/// Parse a reading TSV and average per-subject rows into one record per
/// `(seq_id, word_index, measure)`.
pub fn parse_reading_tsv(
    text: &str,
    origin: &str,
    schema: &ReadingSchema,
) -> Result<(Vec<WordRecord>, LoadReport)> {
    let tsv = Tsv::parse(text)?;
    let c_seq = tsv.require("seq_id", origin)?;
    let c_idx = tsv.require("word_index", origin)?;
    let c_word = tsv.require("word", origin)?;
    let c_measure = tsv.require("measure", origin)?;
    let c_cost = tsv.require("cost", origin)?;
    let c_baseline = tsv.column("baseline_amplitude");
    let c_clause = tsv.column("clause_final");
    let c_override = tsv.column("token_override");
    let c_pos = tsv.column("pos");

    struct Group {
        word: String,
        costs: Vec<f64>,
        baselines: Vec<f64>,
        clause_final: Option<bool>,
        token_override: Option<String>,
        pos: Option<String>,
    }
    let mut groups: BTreeMap<(String, usize, Measure), Group> = BTreeMap::new();
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };

    for (line, row) in &tsv.rows {
        let field = |c: usize| row.get(c).map(String::as_str).unwrap_or("");
        let opt = |c: Option<usize>| c.map(field).filter(|s| !s.trim().is_empty());
        let seq = field(c_seq).trim().to_string();
        if seq.is_empty() {
            return Err(err(*line, "empty seq_id".into()));
        }
        let idx: usize = field(c_idx)
            .trim()
            .parse()
            .map_err(|_| err(*line, format!("non-integer word_index {:?}", field(c_idx))))?;
        let word = field(c_word).trim().to_string();
        if word.is_empty() {
            return Err(err(*line, "empty word".into()));
        }
        let measure: Measure = field(c_measure).parse().map_err(|e| err(*line, format!("{e}")))?;
        let cost: f64 = field(c_cost)
            .trim()
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| err(*line, format!("non-numeric cost {:?}", field(c_cost))))?;
        let baseline = match opt(c_baseline) {
            Some(s) => Some(
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(*line, format!("non-numeric baseline_amplitude {s:?}")))?,
            ),
            None => None,
        };
        let clause = match opt(c_clause) {
            Some(s) => Some(
                parse_bool(s).ok_or_else(|| err(*line, format!("bad clause_final flag {s:?}")))?,
            ),
            None => None,
        };

        let g = groups.entry((seq.clone(), idx, measure)).or_insert_with(|| Group {
            word: word.clone(),
            costs: Vec::new(),
            baselines: Vec::new(),
            clause_final: clause,
            token_override: opt(c_override).map(|s| s.trim().to_string()),
            pos: opt(c_pos).map(|s| s.trim().to_string()),
        });
        if g.word != word {
            return Err(err(
                *line,
                format!("word {word:?} conflicts with {:?} at {seq}/{idx}", g.word),
            ));
        }
        g.costs.push(cost);
        if let Some(b) = baseline {
            g.baselines.push(b);
        }
    }

    // Summing sorted values makes the mean independent of row order.
    let avg = |vals: &mut Vec<f64>| {
        vals.sort_by(|a, b| a.total_cmp(b));
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let mut records: Vec<WordRecord> = groups
        .into_iter()
        .map(|((seq_id, word_index, measure), mut g)| WordRecord {
            dataset_id: schema.dataset_id.clone(),
            stimuli_id: schema.stimuli_id.clone(),
            seq_id,
            word_index,
            word: g.word,
            measure,
            cost: avg(&mut g.costs),
            baseline_amplitude: (!g.baselines.is_empty()).then(|| avg(&mut g.baselines)),
            clause_final: g.clause_final,
            subject_count: g.costs.len(),
            token_override: g.token_override,
            pos: g.pos,
            covariates: None,
        })
        .collect();
    sort_records(&mut records);
    let report = LoadReport {
        rows: tsv.rows.len(),
        records: records.len(),
        dropped_zero_cost: 0,
    };
    Ok((records, report))
}

pub fn load_reading_tsv(path: &Path, schema: &ReadingSchema) -> Result<(Vec<WordRecord>, LoadReport)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_reading_tsv(&text, &path.display().to_string(), schema)
}

/// Drop zero-cost rows for behavioral measures; N400 rows pass through.
pub fn preprocess(records: Vec<WordRecord>, measure: Measure) -> (Vec<WordRecord>, usize) {
    let before = records.len();
    let kept: Vec<WordRecord> = records
        .into_iter()
        .filter(|r| r.measure == measure)
        .filter(|r| !(measure.is_behavioral() && r.cost == 0.0))
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Per-million word frequencies with a floor for unseen words.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    per_million: HashMap<String, f64>,
    pub floor: f64,
}

pub const DEFAULT_FREQ_FLOOR: f64 = 0.01;

/// Lowercase and strip surrounding punctuation, as display words in reading
/// corpora carry attached punctuation.
pub fn normalize_word(word: &str) -> String {
    let trimmed = word.trim_matches(|c: char| !c.is_alphanumeric());
    if trimmed.is_empty() {
        word.to_lowercase()
    } else {
        trimmed.to_lowercase()
    }
}

impl FrequencyTable {
    pub fn new(entries: impl IntoIterator<Item = (String, f64)>, floor: f64) -> Self {
        let mut per_million = HashMap::new();
        for (w, f) in entries {
            *per_million.entry(normalize_word(&w)).or_insert(0.0) += f;
        }
        Self { per_million, floor }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let tsv = Tsv::parse(text)?;
        let cw = tsv.require("word", origin)?;
        let cf = tsv.require("per_million", origin)?;
        let mut entries = Vec::with_capacity(tsv.rows.len());
        for (line, row) in &tsv.rows {
            let w = row.get(cw).map(|s| s.trim()).unwrap_or("");
            let f = row
                .get(cf)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|f| f.is_finite() && *f >= 0.0)
                .ok_or_else(|| Error::Parse {
                    path: origin.into(),
                    line: *line,
                    msg: "per_million must be a non-negative number".into(),
                })?;
            if !w.is_empty() {
                entries.push((w.to_string(), f));
            }
        }
        Ok(Self::new(entries, DEFAULT_FREQ_FLOOR))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Build from raw counts in a word list (tests and toy fixtures).
    pub fn from_counts<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, f64> = HashMap::new();
        let mut total = 0.0;
        for w in words {
            *counts.entry(normalize_word(w)).or_insert(0.0) += 1.0;
            total += 1.0;
        }
        let scale = if total > 0.0 { 1e6 / total } else { 0.0 };
        Self {
            per_million: counts.into_iter().map(|(w, c)| (w, c * scale)).collect(),
            floor: DEFAULT_FREQ_FLOOR,
        }
    }

    pub fn per_million(&self, word: &str) -> f64 {
        self.per_million.get(&normalize_word(word)).copied().unwrap_or(0.0)
    }

    /// `ln(per_million + floor)`
    pub fn log_freq(&self, word: &str) -> f64 {
        (self.per_million(word) + self.floor).ln()
    }

    /// Rows sorted by word, for serialization.
    pub fn to_tsv(&self) -> String {
        let mut rows: Vec<(&String, &f64)> = self.per_million.iter().collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::from("word\tper_million\n");
        for (w, f) in rows {
            out.push_str(&format!("{w}\t{f}\n"));
        }
        out
    }
}

/// Character length (Unicode scalars) of a word.
pub fn word_length(word: &str) -> f64 {
    word.chars().count() as f64
}

/// Attach length and frequency of `w_t`, `w_{t-1}`, `w_{t-2}`. Context is
/// looked up by `word_index` among the given records of the same sequence,
/// so attach before filtering if filtered words should still serve as
/// spillover context.
pub fn attach_covariates(records: &mut [WordRecord], freq: &FrequencyTable) {
    let mut by_seq: HashMap<&str, HashMap<usize, &str>> = HashMap::new();
    for r in records.iter() {
        by_seq
            .entry(r.seq_id.as_str())
            .or_default()
            .insert(r.word_index, r.word.as_str());
    }
    let covs: Vec<Covariates> = records
        .iter()
        .map(|r| {
            let words = &by_seq[r.seq_id.as_str()];
            let lag = |k: usize| r.word_index.checked_sub(k).and_then(|i| words.get(&i).copied());
            let ctx = [Some(r.word.as_str()), lag(1), lag(2)];
            let mut length = [0.0; 3];
            let mut log_freq = [0.0; 3];
            for (i, w) in ctx.iter().enumerate() {
                if let Some(w) = w {
                    length[i] = word_length(w);
                    log_freq[i] = freq.log_freq(w);
                }
            }
            Covariates {
                length,
                log_freq,
                complete: ctx.iter().all(Option::is_some),
            }
        })
        .collect();
    for (r, c) in records.iter_mut().zip(covs) {
        r.covariates = Some(c);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClauseFinalMode {
    Column,
    #[serde(alias = "punct")]
    Punctuation,
}

const CLAUSE_PUNCT: [char; 6] = ['.', ',', ';', ':', '!', '?'];

/// Whether a display word ends a clause by punctuation.
pub fn ends_clause(word: &str) -> bool {
    let core = word.trim_end_matches(['"', '\'', ')', ']', '}', '\u{201d}', '\u{2019}']);
    core.ends_with(CLAUSE_PUNCT)
}

pub fn mark_clause_final(records: &mut [WordRecord], mode: ClauseFinalMode) -> Result<()> {
    match mode {
        ClauseFinalMode::Column => {
            if let Some(r) = records.iter().find(|r| r.clause_final.is_none()) {
                return Err(Error::Data(format!(
                    "clause_final column missing for {}/{}",
                    r.seq_id, r.word_index
                )));
            }
        }
        ClauseFinalMode::Punctuation => {
            let mut last: HashMap<String, usize> = HashMap::new();
            for r in records.iter() {
                let e = last.entry(r.seq_id.clone()).or_insert(r.word_index);
                *e = (*e).max(r.word_index);
            }
            for r in records.iter_mut() {
                r.clause_final = Some(ends_clause(&r.word) || last[&r.seq_id] == r.word_index);
            }
        }
    }
    Ok(())
}

/// Fraction of positions on which two flag sequences agree.
pub fn flag_agreement(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Words of each sequence in order, keyed by sequence id.
pub fn sequence_words(records: &[WordRecord]) -> Vec<(String, Vec<(usize, String)>)> {
    let mut seqs: BTreeMap<(usize, String), Vec<(usize, String)>> = BTreeMap::new();
    let mut order: HashMap<String, usize> = HashMap::new();
    let mut sorted: Vec<&WordRecord> = records.iter().collect();
    sorted.sort_by(|a, b| natural_cmp(&a.seq_id, &b.seq_id).then(a.word_index.cmp(&b.word_index)));
    for r in sorted {
        let n = order.len();
        let rank = *order.entry(r.seq_id.clone()).or_insert(n);
        let words = seqs.entry((rank, r.seq_id.clone())).or_default();
        if words.last().map(|(i, _)| *i) != Some(r.word_index) {
            words.push((r.word_index, r.model_text().to_string()));
        }
    }
    seqs.into_iter().map(|((_, id), w)| (id, w)).collect()
}
