// SPDX-License-Identifier: MIT OR Apache-2.0

//! `surprisal`, `fit-lens`, `evaluate`, `ngram-train` and
//! `validate-bundle`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use lenslab::corpus::{preprocess, WordRecord};
use lenslab::lens::train::{train_translators, CurvePoint};
use lenslab::lens::{LensKind, SURPRISAL_TSV_HEADER};
use lenslab::ngram::{corpus_sentences, BigramModel, HEADER_FILE};
use lenslab::pipeline::{evaluate_layers, LayerFit};
use lenslab::psychofit::{DeltaLLRecord, DesignOptions, SURPRISAL};
use lenslab::{ModelBundle, Tokenizer};

use crate::config::TranslatorSource;
use crate::io::{sha256_hex, write_atomic, write_dir_atomic};
use crate::workspace::{LoadedModel, UnitResult, Workspace};

pub const FIT_FILE: &str = "fit.json";
pub const KL_CURVES_FILE: &str = "kl_curves.tsv";

// ---------------------------------------------------------------- surprisal

/// Write `surprisal/<model>/<lens>/<dataset>/layer_<l>.tsv` for every unit.
/// Token rows are indexed by scored position, word rows by the corpus
/// word index.
pub fn cmd_surprisal(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let units = ws.all_units()?;
    let mut written = Vec::new();
    for u in &units {
        let dir = ws.out(
            Path::new("surprisal")
                .join(&u.model)
                .join(u.lens.as_str())
                .join(&u.dataset),
        );
        for layer in 1..=u.n_layers {
            let mut out = String::from(SURPRISAL_TSV_HEADER);
            for s in &u.sequences {
                for (t, v) in s.token[layer - 1].iter().enumerate() {
                    let _ = writeln!(out, "{}\t{layer}\t{}\ttoken\t{t}\t{v}", s.seq_id, u.lens);
                }
                for (w, v) in s.word[layer - 1].iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{}\t{layer}\t{}\tword\t{}\t{v}",
                        s.seq_id, u.lens, s.word_indices[w]
                    );
                }
            }
            let path = dir.join(format!("layer_{layer}.tsv"));
            write_atomic(&path, out.as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}

// ----------------------------------------------------------------- fit-lens

/// Token sequences for translator training: the configured corpus, or the
/// datasets' own sentences when none is given.
fn training_sequences(ws: &Workspace, model: &LoadedModel) -> Result<(Vec<Vec<u32>>, String)> {
    let lines: Vec<String> = match &ws.cfg.lens_training.corpus {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading lens corpus {}", p.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
        None => ws
            .datasets
            .iter()
            .flat_map(|d| d.sequences.iter())
            .map(|(_, w)| w.iter().map(|x| x.1.as_str()).collect::<Vec<_>>().join(" "))
            .collect(),
    };
    let corpus_hash = sha256_hex(lines.join("\n").as_bytes());
    let max = model.bundle.config.max_positions;
    let seqs = lines
        .iter()
        .map(|l| {
            let mut ids = Vec::new();
            ids.extend(model.bundle.config.bos_token_id);
            ids.extend(model.tokenizer.encode(l).ids);
            ids.truncate(max);
            ids
        })
        .filter(|ids| ids.len() >= 2)
        .collect::<Vec<_>>();
    if seqs.is_empty() {
        return Err(anyhow!("no training text for the tuned lens of model {:?}", model.entry.id));
    }
    Ok((seqs, corpus_hash))
}

#[derive(Debug, Serialize, serde::Deserialize)]
struct FitRecord {
    key: String,
    model: String,
    hyper: lenslab::lens::train::TrainHyper,
    n_sequences: usize,
}

pub fn kl_curves_tsv(curves: &[CurvePoint]) -> String {
    let mut out = String::from("layer\tstep\ttrain_kl\tval_kl\n");
    for c in curves {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", c.layer, c.step, c.train_kl, c.val_kl);
    }
    out
}

/// Train translators for every model whose source is `trained`, writing
/// `translators/<model>/` (tensors, `kl_curves.tsv`, `fit.json`). Up-to-date
/// outputs are kept.
pub fn cmd_fit_lens(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let targets: Vec<&LoadedModel> = ws
        .models
        .iter()
        .filter(|m| m.entry.translators == TranslatorSource::Trained)
        .collect();
    if targets.is_empty() {
        warn!("no model takes trained translators; nothing to fit");
    }
    ws.pool.install(|| {
        targets
            .par_iter()
            .map(|m| fit_one(ws, m))
            .collect::<Result<Vec<_>>>()
    })
}

fn fit_one(ws: &Workspace, model: &LoadedModel) -> Result<PathBuf> {
    let dir = ws.translator_dir(&model.entry.id);
    let (seqs, corpus_hash) = training_sequences(ws, model)?;
    let hyper = ws.cfg.lens_training.hyper(ws.cfg.seed);
    let key = sha256_hex(
        serde_json::json!({"model": model.hash, "corpus": corpus_hash, "hyper": hyper})
            .to_string()
            .as_bytes(),
    );
    if let Ok(text) = fs::read_to_string(dir.join(FIT_FILE)) {
        if serde_json::from_str::<FitRecord>(&text).is_ok_and(|f| f.key == key) {
            info!("translators for {} are up to date", model.entry.id);
            return Ok(dir);
        }
    }
    info!("fitting translators for {} on {} sequences", model.entry.id, seqs.len());
    let trained = train_translators(&model.bundle, &seqs, &hyper)
        .with_context(|| format!("fitting the tuned lens of model {:?}", model.entry.id))?;
    let record = FitRecord {
        key,
        model: model.entry.id.clone(),
        hyper,
        n_sequences: seqs.len(),
    };
    write_dir_atomic(&dir, |tmp| {
        trained.translators.save(tmp)?;
        fs::write(tmp.join(KL_CURVES_FILE), kl_curves_tsv(&trained.curves))?;
        fs::write(tmp.join(FIT_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
        Ok(())
    })?;
    Ok(dir)
}

// ----------------------------------------------------------------- evaluate

/// One unit's layer sweep.
pub struct UnitEvaluation {
    pub model: usize,
    pub dataset: usize,
    pub lens: LensKind,
    pub unit: UnitResult,
    /// Records after zero-cost filtering.
    pub records: Vec<WordRecord>,
    pub fits: Vec<LayerFit>,
    /// Clause-final subset; `Err` holds the reason it could not be fit.
    pub clause_fits: Option<std::result::Result<Vec<LayerFit>, String>>,
}

impl UnitEvaluation {
    pub fn delta_records(&self, ws: &Workspace, fits: &[LayerFit]) -> Vec<DeltaLLRecord> {
        fits.iter()
            .map(|f| DeltaLLRecord {
                dataset_id: ws.datasets[self.dataset].entry.id.clone(),
                model_id: ws.models[self.model].entry.id.clone(),
                lens: self.lens,
                layer: f.layer,
                n_layers: self.unit.n_layers,
                n_rows: f.n_rows,
                delta_ll: f.delta.total,
                delta_ll_per_row: f.delta.per_row,
            })
            .collect()
    }
}

pub fn design_options(ws: &Workspace) -> DesignOptions {
    DesignOptions {
        clause_final_only: false,
        include_incomplete: ws.cfg.analysis.include_incomplete,
    }
}

/// Fit every layer of every unit.
pub fn evaluate_all(ws: &Workspace) -> Result<Vec<UnitEvaluation>> {
    let units = ws.all_units()?;
    let keys = ws.units();
    let options = design_options(ws);
    ws.pool.install(|| {
        keys.into_par_iter()
            .zip(units.into_par_iter())
            .map(|((m, d, lens), unit)| {
                let ds = &ws.datasets[d];
                let (records, _) = preprocess(ds.records.clone(), ds.measure);
                let index = unit.index();
                let fits = evaluate_layers(&records, &index, options).with_context(|| {
                    format!("evaluating {} / {} / {lens}", ws.models[m].entry.id, ds.entry.id)
                })?;
                let clause_fits = ws.cfg.clause_final.mode().map(|_| {
                    let o = DesignOptions {
                        clause_final_only: true,
                        ..options
                    };
                    evaluate_layers(&records, &index, o).map_err(|e| e.to_string())
                });
                Ok(UnitEvaluation {
                    model: m,
                    dataset: d,
                    lens,
                    unit,
                    records,
                    fits,
                    clause_fits,
                })
            })
            .collect()
    })
}

/// All ΔLL records, plus the clause-final ones when that mode is on.
pub fn collect_records(ws: &Workspace, evals: &[UnitEvaluation]) -> (Vec<DeltaLLRecord>, Vec<DeltaLLRecord>) {
    let mut all = Vec::new();
    let mut clause = Vec::new();
    for e in evals {
        all.extend(e.delta_records(ws, &e.fits));
        if let Some(Ok(f)) = &e.clause_fits {
            clause.extend(e.delta_records(ws, f));
        }
    }
    (all, clause)
}

pub fn delta_ll_tsv(records: &[DeltaLLRecord]) -> String {
    let mut out = String::from(DeltaLLRecord::TSV_HEADER);
    for r in records {
        out.push_str(&r.tsv_row());
    }
    out
}

#[derive(Serialize)]
struct LayerReport {
    layer: usize,
    n_rows: usize,
    delta_ll: f64,
    delta_ll_per_row: f64,
    base_loglik: f64,
    full_loglik: f64,
    surprisal_coef: Option<f64>,
    dropped_columns: Vec<String>,
}

#[derive(Serialize)]
struct UnitReport {
    model: String,
    dataset: String,
    lens: LensKind,
    layers: Vec<LayerReport>,
    clause_final_layers: Option<Vec<LayerReport>>,
    clause_final_skipped: Option<String>,
}

#[derive(Serialize)]
struct DatasetReport {
    id: String,
    stimuli: String,
    measure: lenslab::corpus::Measure,
    rows: usize,
    records: usize,
    dropped_zero_cost: usize,
    clause_flag_agreement: Option<f64>,
}

#[derive(Serialize)]
struct FitReport {
    seed: u64,
    frequency_source: String,
    clause_final: crate::config::ClauseFinal,
    include_incomplete: bool,
    datasets: Vec<DatasetReport>,
    units: Vec<UnitReport>,
    notes: Vec<String>,
}

fn layer_reports(fits: &[LayerFit]) -> Vec<LayerReport> {
    fits.iter()
        .map(|f| LayerReport {
            layer: f.layer,
            n_rows: f.n_rows,
            delta_ll: f.delta.total,
            delta_ll_per_row: f.delta.per_row,
            base_loglik: f.base.loglik,
            full_loglik: f.full.loglik,
            surprisal_coef: f.full.coef(SURPRISAL),
            dropped_columns: f.full.dropped.clone(),
        })
        .collect()
}

/// Notes about results that downstream analyses must exclude.
pub fn nonfinite_notes(records: &[DeltaLLRecord]) -> Vec<String> {
    records
        .iter()
        .filter(|r| !r.delta_ll_per_row.is_finite())
        .map(|r| {
            format!(
                "{}/{}/{} layer {}: ΔLL is {} (exact fit); excluded from analyses",
                r.dataset_id, r.model_id, r.lens, r.layer, r.delta_ll_per_row
            )
        })
        .collect()
}

/// Write `delta_ll.tsv`, `delta_ll_clause_final.tsv` (clause-final mode
/// only) and `fit_report.json`.
pub fn cmd_evaluate(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let evals = evaluate_all(ws)?;
    let (all, clause) = collect_records(ws, &evals);
    let mut notes = nonfinite_notes(&all);
    for n in &notes {
        warn!("{n}");
    }
    let mut written = Vec::new();
    let p = ws.out("delta_ll.tsv");
    write_atomic(&p, delta_ll_tsv(&all).as_bytes())?;
    written.push(p);
    if ws.cfg.clause_final.mode().is_some() {
        let p = ws.out("delta_ll_clause_final.tsv");
        write_atomic(&p, delta_ll_tsv(&clause).as_bytes())?;
        written.push(p);
    }
    let mut units = Vec::new();
    for e in &evals {
        let (clause_final_layers, clause_final_skipped) = match &e.clause_fits {
            None => (None, None),
            Some(Ok(f)) => (Some(layer_reports(f)), None),
            Some(Err(msg)) => {
                let note = format!(
                    "{}/{}/{}: clause-final subset not fit: {msg}",
                    ws.datasets[e.dataset].entry.id, ws.models[e.model].entry.id, e.lens
                );
                warn!("{note}");
                notes.push(note);
                (None, Some(msg.clone()))
            }
        };
        units.push(UnitReport {
            model: ws.models[e.model].entry.id.clone(),
            dataset: ws.datasets[e.dataset].entry.id.clone(),
            lens: e.lens,
            layers: layer_reports(&e.fits),
            clause_final_layers,
            clause_final_skipped,
        });
    }
    let report = FitReport {
        seed: ws.cfg.seed,
        frequency_source: ws.freq_source.clone(),
        clause_final: ws.cfg.clause_final,
        include_incomplete: ws.cfg.analysis.include_incomplete,
        datasets: ws
            .datasets
            .iter()
            .map(|d| DatasetReport {
                id: d.entry.id.clone(),
                stimuli: d.entry.stimuli_id().to_string(),
                measure: d.measure,
                rows: d.load.rows,
                records: d.load.records,
                dropped_zero_cost: preprocess(d.records.clone(), d.measure).1,
                clause_flag_agreement: d.clause_agreement,
            })
            .collect(),
        units,
        notes,
    };
    let p = ws.out("fit_report.json");
    write_atomic(&p, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    written.push(p);
    Ok(written)
}

// -------------------------------------------------------------- ngram-train

pub fn ngram_dir(ws: &Workspace) -> PathBuf {
    ws.out("ngram")
}

/// Training text: the configured corpus, else the datasets' sentences.
fn ngram_text(ws: &Workspace) -> Result<String> {
    match &ws.cfg.ngram.corpus {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading n-gram corpus {}", p.display())),
        None => Ok(ws
            .datasets
            .iter()
            .flat_map(|d| d.sequences.iter())
            .map(|(_, w)| w.iter().map(|x| x.1.as_str()).collect::<Vec<_>>().join(" ") + "\n")
            .collect()),
    }
}

pub fn cmd_ngram_train(ws: &Workspace) -> Result<BigramModel> {
    let text = ngram_text(ws)?;
    if corpus_sentences(&text).is_empty() {
        return Err(anyhow!("the bigram training corpus is empty"));
    }
    let model = BigramModel::train(&text, ws.cfg.ngram.smoothing)?;
    write_dir_atomic(&ngram_dir(ws), |tmp| Ok(model.save(tmp)?))?;
    Ok(model)
}

/// The saved bigram model when it matches the configured smoothing,
/// otherwise a freshly trained (and saved) one.
pub fn bigram_model(ws: &Workspace) -> Result<BigramModel> {
    let dir = ngram_dir(ws);
    if dir.join(HEADER_FILE).is_file() {
        if let Ok(m) = BigramModel::load(&dir) {
            let text = ngram_text(ws)?;
            let fresh = BigramModel::train(&text, ws.cfg.ngram.smoothing)?;
            if m == fresh {
                return Ok(m);
            }
            warn!("saved bigram model is stale; retraining");
        }
    }
    cmd_ngram_train(ws)
}

// ---------------------------------------------------------- validate-bundle

#[derive(Debug, Serialize)]
pub struct BundleSummary {
    pub architecture: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub parameters: usize,
    pub tokenizer_vocab: Option<usize>,
}

/// Load a bundle (and its tokenizer when present) and run one forward pass.
pub fn cmd_validate_bundle(dir: &Path) -> Result<BundleSummary> {
    let bundle = ModelBundle::load(dir)?;
    let tokenizer_vocab = if dir.join(lenslab::tok::VOCAB_FILE).is_file() {
        let t = Tokenizer::load(dir)?;
        if t.vocab_size() > bundle.vocab_size() {
            return Err(anyhow!(
                "tokenizer has {} tokens but the model only {}",
                t.vocab_size(),
                bundle.vocab_size()
            ));
        }
        Some(t.vocab_size())
    } else {
        None
    };
    let n = bundle.config.max_positions.min(8);
    let ids: Vec<u32> = (0..n as u32).map(|i| i % bundle.vocab_size() as u32).collect();
    let logits = bundle.forward(&ids)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(anyhow!("forward pass produced non-finite logits"));
    }
    Ok(BundleSummary {
        architecture: bundle.architecture.clone(),
        n_layers: bundle.n_layers(),
        d_model: bundle.d_model(),
        n_heads: bundle.config.n_heads,
        vocab_size: bundle.vocab_size(),
        max_positions: bundle.config.max_positions,
        parameters: bundle.parameter_count(),
        tokenizer_vocab,
    })
}
