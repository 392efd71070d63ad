// SPDX-License-Identifier: MIT OR Apache-2.0

//! `make-toy`: a self-contained fixture with three tiny random models, three
//! reading datasets whose costs carry a planted surprisal effect from a
//! known layer, text corpora and a ready-to-run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use lenslab::corpus::{word_length, FrequencyTable};
use lenslab::lens::{LensKind, WindowConfig};
use lenslab::pipeline::score_words;
use lenslab::synth::{generate_sentences, plant_costs, SynthSentence};
use lenslab::{make_toy_bundle, ModelBundle, ModelConfig, Tokenizer};

use crate::io::write_atomic;

/// `(id, seed, n_layers, d_model, n_heads)`
pub const TOY_MODELS: [(&str, u64, usize, usize, usize); 3] =
    [("toy-s", 11, 2, 16, 2), ("toy", 7, 4, 32, 4), ("toy-l", 13, 6, 48, 4)];

/// Which layer of the `toy` model each dataset's costs were planted from.
pub const PLANTED_LAYERS: [(&str, usize); 3] = [("spr", 2), ("maze", 3), ("n400", 4)];

pub fn toy_config(n_layers: usize, d_model: usize, n_heads: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model,
        n_heads,
        ..ModelConfig::toy()
    }
}

/// Word surprisals of `sentences` at `layer` of `model` (logit lens).
pub fn planted_signal(model: &ModelBundle, sentences: &[SynthSentence], layer: usize) -> Result<Vec<Vec<f64>>> {
    let tok = Tokenizer::bytes_only();
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let words: Vec<(usize, String)> = s.words.iter().cloned().enumerate().collect();
            let scored = score_words(model, &tok, LensKind::Logit, None, &i.to_string(), &words, WindowConfig::default())?;
            Ok(scored.table.word[layer - 1].clone())
        })
        .collect()
}

struct DatasetSpec<'a> {
    measure: &'a str,
    sentences: &'a [SynthSentence],
    signal: Vec<Vec<f64>>,
    subjects: usize,
    /// Planted slope per nat and offset.
    slope: f64,
    offset: f64,
    /// Words whose every subject cost is zero (skipped words).
    zero_cost: &'a [(usize, usize)],
    baseline: bool,
    seed: u64,
}

fn reading_tsv(spec: &DatasetSpec<'_>) -> String {
    let flat_signal: Vec<f64> = spec.signal.iter().flatten().copied().collect();
    let lengths: Vec<f64> = spec
        .sentences
        .iter()
        .flat_map(|s| s.words.iter().map(|w| word_length(w)))
        .collect();
    let length_coef = if spec.baseline { 0.0 } else { 0.3 };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid");
    let baselines: Vec<f64> = (0..flat_signal.len()).map(|_| unit.sample(&mut rng)).collect();
    let costs = plant_costs(&flat_signal, &lengths, spec.slope, length_coef, 0.5, spec.offset, spec.seed);
    let subject_sd = spec.slope.abs() * 0.2;
    let mut out = String::from("subject\tseq_id\tword_index\tword\tmeasure\tcost\tpos\tclause_final");
    out.push_str(if spec.baseline { "\tbaseline_amplitude\n" } else { "\n" });
    for subj in 0..spec.subjects {
        let mut k = 0;
        for (si, s) in spec.sentences.iter().enumerate() {
            for (wi, w) in s.words.iter().enumerate() {
                let mut cost = costs[k] + subject_sd * unit.sample(&mut rng);
                if spec.baseline {
                    cost += 0.5 * baselines[k];
                }
                if spec.zero_cost.contains(&(si, wi)) {
                    cost = 0.0;
                }
                let _ = write!(
                    out,
                    "s{subj}\t{si}\t{wi}\t{w}\t{}\t{cost:.6}\t{}\t{}",
                    spec.measure,
                    s.pos[wi],
                    u8::from(s.clause_final[wi])
                );
                if spec.baseline {
                    let _ = write!(out, "\t{:.6}", baselines[k]);
                }
                out.push('\n');
                k += 1;
            }
        }
    }
    out
}

fn lines(sentences: &[SynthSentence]) -> String {
    sentences.iter().map(|s| s.text() + "\n").collect()
}

/// Write the fixture into `dir` and return the path of its configuration.
pub fn make_toy(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let tok = Tokenizer::bytes_only();
    let mut planted_model = None;
    for (id, seed, l, d, h) in TOY_MODELS {
        let bundle = make_toy_bundle(seed, toy_config(l, d, h))?;
        let bdir = dir.join("models").join(id);
        if bdir.exists() {
            fs::remove_dir_all(&bdir)?;
        }
        bundle.save(&bdir)?;
        tok.save(&bdir)?;
        if id == "toy" {
            planted_model = Some(bundle);
        }
    }
    let model = planted_model.expect("toy model is listed");

    let stories = generate_sentences(1000, 60);
    let maze_items = generate_sentences(2000, 60);
    let spr = DatasetSpec {
        measure: "SPR",
        sentences: &stories,
        signal: planted_signal(&model, &stories, PLANTED_LAYERS[0].1)?,
        subjects: 3,
        slope: 5.0,
        offset: 300.0,
        zero_cost: &[(3, 2), (17, 4), (40, 1)],
        baseline: false,
        seed: 1,
    };
    let maze = DatasetSpec {
        measure: "MAZE",
        sentences: &maze_items,
        signal: planted_signal(&model, &maze_items, PLANTED_LAYERS[1].1)?,
        subjects: 2,
        slope: 8.0,
        offset: 900.0,
        zero_cost: &[],
        baseline: false,
        seed: 2,
    };
    let n400 = DatasetSpec {
        measure: "N400",
        sentences: &stories,
        signal: planted_signal(&model, &stories, PLANTED_LAYERS[2].1)?,
        subjects: 2,
        slope: -0.8,
        offset: 0.0,
        zero_cost: &[],
        baseline: true,
        seed: 3,
    };
    let data = dir.join("data");
    write_atomic(&data.join("spr.tsv"), reading_tsv(&spr).as_bytes())?;
    write_atomic(&data.join("maze.tsv"), reading_tsv(&maze).as_bytes())?;
    write_atomic(&data.join("n400.tsv"), reading_tsv(&n400).as_bytes())?;

    let lens_corpus = generate_sentences(3000, 200);
    let bigram_corpus = generate_sentences(4000, 500);
    write_atomic(&data.join("lens_corpus.txt"), lines(&lens_corpus).as_bytes())?;
    write_atomic(&data.join("bigram_corpus.txt"), lines(&bigram_corpus).as_bytes())?;
    let freq = FrequencyTable::from_counts(
        bigram_corpus
            .iter()
            .chain(&stories)
            .chain(&maze_items)
            .flat_map(|s| s.words.iter().map(String::as_str)),
    );
    write_atomic(&data.join("freq.tsv"), freq.to_tsv().as_bytes())?;

    let mut cfg = String::from(
        "# Toy fixture: three random byte-level models and planted reading data.\n\
         # Run `lenslab fit-lens` before commands that use the tuned lens.\n\
         seed = 0\nout_dir = \"out\"\nlens = \"both\"\nclause_final = \"column\"\nfrequency = \"data/freq.tsv\"\n\n",
    );
    for (id, ..) in TOY_MODELS {
        let _ = write!(
            cfg,
            "[[models]]\nid = \"{id}\"\nbundle = \"models/{id}\"\nfamily = \"toy\"\n\n"
        );
    }
    for (id, stimuli, measure) in [("spr", "stories", "SPR"), ("maze", "maze_items", "MAZE"), ("n400", "stories", "N400")] {
        let _ = write!(
            cfg,
            "[[datasets]]\nid = \"{id}\"\npath = \"data/{id}.tsv\"\nstimuli = \"{stimuli}\"\nmeasure = \"{measure}\"\n\n"
        );
    }
    cfg.push_str(
        "[lens_training]\ncorpus = \"data/lens_corpus.txt\"\nsteps = 60\nbatch = 32\nlr = 0.5\neval_every = 20\n\n\
         [ngram]\ncorpus = \"data/bigram_corpus.txt\"\nsmoothing = { method = \"kneser_ney\", discount = 0.75 }\n\n\
         [analysis]\nreference_model = \"toy-l\"\n",
    );
    let path = dir.join(crate::config::DEFAULT_CONFIG_FILE);
    write_atomic(&path, cfg.as_bytes())?;
    Ok(path)
}
