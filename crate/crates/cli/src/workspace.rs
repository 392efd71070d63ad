// SPDX-License-Identifier: MIT OR Apache-2.0

//! Loaded models and datasets, plus the content-addressed surprisal units
//! (model × dataset × lens) that the other commands build on.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use lenslab::corpus::{
    attach_covariates, flag_agreement, load_reading_tsv, mark_clause_final, sequence_words,
    FrequencyTable, LoadReport, Measure, ReadingSchema, WordRecord,
};
use lenslab::lens::{LensKind, TranslatorSet, WindowConfig};
use lenslab::pipeline::{score_words, WordSurprisalIndex};
use lenslab::{ModelBundle, Tokenizer};

use crate::config::{DatasetEntry, ModelEntry, RunConfig, TranslatorSource};
use crate::io::{hash_dir, sha256_hex, write_atomic};
use crate::ConfigError;

/// Bumped whenever the cached unit layout or its computation changes.
const UNIT_VERSION: u32 = 1;

pub struct LoadedModel {
    pub entry: ModelEntry,
    pub bundle: ModelBundle,
    pub tokenizer: Tokenizer,
    pub hash: String,
}

impl LoadedModel {
    pub fn param_count(&self) -> u64 {
        self.entry
            .param_count
            .unwrap_or(self.bundle.parameter_count() as u64)
    }
}

pub struct LoadedDataset {
    pub entry: DatasetEntry,
    pub measure: Measure,
    /// Subject-averaged records with covariates (before zero-cost filtering).
    pub records: Vec<WordRecord>,
    pub load: LoadReport,
    pub sequences: Vec<(String, Vec<(usize, String)>)>,
    pub words_hash: String,
    /// Agreement of punctuation-based and column clause flags, when the
    /// file carries the column.
    pub clause_agreement: Option<f64>,
}

pub struct Workspace {
    pub cfg: RunConfig,
    pub models: Vec<LoadedModel>,
    pub datasets: Vec<LoadedDataset>,
    pub freq: FrequencyTable,
    pub freq_source: String,
    pub pool: rayon::ThreadPool,
}

pub const WORKERS_ENV: &str = "LENSLAB_WORKERS";

pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| ConfigError(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?)
}

pub fn load_model(entry: &ModelEntry) -> Result<LoadedModel> {
    let bundle = ModelBundle::load(&entry.bundle)
        .with_context(|| format!("loading model {:?} from {}", entry.id, entry.bundle.display()))?;
    let tokenizer = Tokenizer::load(&entry.bundle)
        .with_context(|| format!("loading tokenizer of model {:?}", entry.id))?;
    if tokenizer.vocab_size() > bundle.vocab_size() {
        return Err(anyhow!(
            "model {:?}: tokenizer has {} tokens but the model only {}",
            entry.id,
            tokenizer.vocab_size(),
            bundle.vocab_size()
        ));
    }
    Ok(LoadedModel {
        entry: entry.clone(),
        hash: hash_dir(&entry.bundle)?,
        bundle,
        tokenizer,
    })
}

fn load_dataset(entry: &DatasetEntry) -> Result<(Vec<WordRecord>, LoadReport, Measure)> {
    let schema = ReadingSchema {
        dataset_id: entry.id.clone(),
        stimuli_id: entry.stimuli_id().to_string(),
    };
    let (records, load) = load_reading_tsv(&entry.path, &schema)?;
    let first = records
        .first()
        .ok_or_else(|| anyhow!("dataset {:?} has no rows", entry.id))?
        .measure;
    let measure = entry.measure.unwrap_or(first);
    if let Some(r) = records.iter().find(|r| r.measure != measure) {
        return Err(anyhow!(
            "dataset {:?} mixes measures {measure} and {}; split it into one file per measure",
            entry.id,
            r.measure
        ));
    }
    Ok((records, load, measure))
}

impl Workspace {
    pub fn load(cfg: RunConfig) -> Result<Self> {
        let pool = thread_pool()?;
        let models = pool.install(|| {
            cfg.models
                .par_iter()
                .map(load_model)
                .collect::<Result<Vec<_>>>()
        })?;
        let mut raw = Vec::new();
        for d in &cfg.datasets {
            raw.push(load_dataset(d)?);
        }
        let (freq, freq_source) = match &cfg.frequency {
            Some(p) => {
                let name = p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
                (FrequencyTable::load(p)?, format!("{name} (sha256 {})", crate::io::hash_file(p)?))
            }
            None => {
                warn!("no frequency table configured; counting frequencies from the datasets");
                let words = raw.iter().flat_map(|(r, _, _)| r.iter().map(|w| w.word.as_str()));
                (FrequencyTable::from_counts(words), "dataset word counts".to_string())
            }
        };
        let mut datasets = Vec::new();
        for (entry, (mut records, load, measure)) in cfg.datasets.iter().zip(raw) {
            attach_covariates(&mut records, &freq);
            let clause_agreement = if records.iter().all(|r| r.clause_final.is_some()) {
                let mut punct = records.clone();
                mark_clause_final(&mut punct, lenslab::corpus::ClauseFinalMode::Punctuation)?;
                let a: Vec<bool> = records.iter().map(|r| r.clause_final == Some(true)).collect();
                let b: Vec<bool> = punct.iter().map(|r| r.clause_final == Some(true)).collect();
                Some(flag_agreement(&a, &b))
            } else {
                None
            };
            if let Some(mode) = cfg.clause_final.mode() {
                mark_clause_final(&mut records, mode)
                    .with_context(|| format!("marking clause-final words of {:?}", entry.id))?;
            }
            let sequences = sequence_words(&records);
            let words_hash = sha256_hex(serde_json::to_string(&sequences)?.as_bytes());
            datasets.push(LoadedDataset {
                entry: entry.clone(),
                measure,
                records,
                load,
                sequences,
                words_hash,
                clause_agreement,
            });
        }
        Ok(Self {
            cfg,
            models,
            datasets,
            freq,
            freq_source,
            pool,
        })
    }

    pub fn out(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.cfg.out_dir.join(rel)
    }

    pub fn translator_dir(&self, model: &str) -> PathBuf {
        self.out(Path::new("translators").join(model))
    }

    pub fn window(&self) -> WindowConfig {
        WindowConfig {
            length: self.cfg.analysis.window,
            stride: self.cfg.analysis.stride,
        }
    }

    /// Translators for a tuned-lens unit plus a hash identifying them.
    pub fn translators(&self, model: &LoadedModel) -> Result<(TranslatorSet, String)> {
        let b = &model.bundle;
        let set = match model.entry.translators {
            TranslatorSource::Identity => {
                return Ok((TranslatorSet::identity(b.d_model(), b.n_layers()), "identity".into()))
            }
            TranslatorSource::Imported => model.entry.translator_path.clone().expect("validated"),
            TranslatorSource::Trained => {
                let dir = self.translator_dir(&model.entry.id);
                if !dir.join(lenslab::store::MANIFEST_FILE).is_file() {
                    return Err(ConfigError(format!(
                        "tuned lens requested for model {:?} but no trained translators exist at {}; \
                         run `lenslab fit-lens` first (or set translators = \"identity\" or \"imported\")",
                        model.entry.id,
                        dir.display()
                    ))
                    .into());
                }
                dir
            }
        };
        let translators = TranslatorSet::load(&set)
            .with_context(|| format!("loading translators from {}", set.display()))?;
        translators.check_compatible(b)?;
        Ok((translators, hash_dir(&set)?))
    }

    pub fn model(&self, id: &str) -> Option<&LoadedModel> {
        self.models.iter().find(|m| m.entry.id == id)
    }

    /// All (model, dataset, lens) units for the configured lens selection,
    /// in a fixed order.
    pub fn units(&self) -> Vec<(usize, usize, LensKind)> {
        let mut out = Vec::new();
        for di in 0..self.datasets.len() {
            for mi in 0..self.models.len() {
                for k in self.cfg.lens.kinds() {
                    out.push((mi, di, k));
                }
            }
        }
        out
    }

    /// Check up front that every tuned-lens unit has translators.
    pub fn check_translators(&self) -> Result<()> {
        if self.cfg.lens.kinds().contains(&LensKind::Tuned) {
            for m in &self.models {
                self.translators(m)?;
            }
        }
        Ok(())
    }

    /// Compute (or reuse) every unit in parallel.
    pub fn all_units(&self) -> Result<Vec<UnitResult>> {
        self.check_translators()?;
        let units = self.units();
        self.pool.install(|| {
            units
                .par_iter()
                .map(|&(m, d, k)| self.unit(&self.models[m], &self.datasets[d], k))
                .collect()
        })
    }

    pub fn unit(&self, model: &LoadedModel, dataset: &LoadedDataset, kind: LensKind) -> Result<UnitResult> {
        let translators = match kind {
            LensKind::Logit => None,
            LensKind::Tuned => Some(self.translators(model)?),
        };
        let window = self.window();
        let key_doc = serde_json::json!({
            "version": UNIT_VERSION,
            "model": model.hash,
            "words": dataset.words_hash,
            "lens": kind,
            "translators": translators.as_ref().map(|t| t.1.clone()),
            "window": [window.length, window.stride],
        });
        let key = sha256_hex(key_doc.to_string().as_bytes());
        let path = self.out(Path::new("cache").join("units").join(format!("{key}.json")));
        if let Ok(bytes) = fs::read(&path) {
            match serde_json::from_slice::<UnitResult>(&bytes) {
                Ok(u) if u.key == key => return Ok(u),
                _ => warn!("ignoring unreadable cache entry {}", path.display()),
            }
        }
        info!("scoring {} / {} / {kind}", model.entry.id, dataset.entry.id);
        let mut sequences = Vec::with_capacity(dataset.sequences.len());
        for (seq_id, words) in &dataset.sequences {
            let s = score_words(
                &model.bundle,
                &model.tokenizer,
                kind,
                translators.as_ref().map(|t| &t.0),
                seq_id,
                words,
                window,
            )
            .with_context(|| format!("dataset {:?}, model {:?}", dataset.entry.id, model.entry.id))?;
            sequences.push(SeqSurprisal {
                seq_id: seq_id.clone(),
                word_indices: s.word_indices,
                token: s.table.token,
                word: s.table.word,
            });
        }
        let unit = UnitResult {
            key,
            model: model.entry.id.clone(),
            dataset: dataset.entry.id.clone(),
            lens: kind,
            n_layers: model.bundle.n_layers(),
            sequences,
        };
        write_atomic(&path, &serde_json::to_vec(&unit)?)?;
        Ok(unit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqSurprisal {
    pub seq_id: String,
    pub word_indices: Vec<usize>,
    /// `token[l - 1][t]`
    pub token: Vec<Vec<f64>>,
    /// `word[l - 1][w]`
    pub word: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitResult {
    pub key: String,
    pub model: String,
    pub dataset: String,
    pub lens: LensKind,
    pub n_layers: usize,
    pub sequences: Vec<SeqSurprisal>,
}

impl UnitResult {
    pub fn index(&self) -> WordSurprisalIndex {
        let mut idx = WordSurprisalIndex::new(self.n_layers);
        for s in &self.sequences {
            for (w, &wi) in s.word_indices.iter().enumerate() {
                idx.insert_values(&s.seq_id, wi, s.word.iter().map(|l| l[w]).collect());
            }
        }
        idx
    }

    /// `exp(mean token surprisal)` per layer over all sequences.
    pub fn perplexity(&self) -> Vec<f64> {
        (0..self.n_layers)
            .map(|l| {
                let (sum, n) = self.sequences.iter().fold((0.0, 0usize), |(s, n), q| {
                    (s + q.token[l].iter().sum::<f64>(), n + q.token[l].len())
                });
                (sum / n.max(1) as f64).exp()
            })
            .collect()
    }

    /// Word surprisals of one layer in sequence order, keyed for alignment.
    pub fn layer_words(&self, layer: usize) -> BTreeMap<(String, usize), f64> {
        let mut out = BTreeMap::new();
        for s in &self.sequences {
            for (w, &wi) in s.word_indices.iter().enumerate() {
                out.insert((s.seq_id.clone(), wi), s.word[layer - 1][w]);
            }
        }
        out
    }
}
