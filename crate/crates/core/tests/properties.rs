// SPDX-License-Identifier: MIT OR Apache-2.0

//! Property tests for the regression, corpus and meta-analysis layers.

use std::collections::HashMap;

use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use lenslab::corpus::{
    attach_covariates, ends_clause, flag_agreement, mark_clause_final, parse_reading_tsv, preprocess,
    ClauseFinalMode, FrequencyTable, Measure, ReadingSchema, WordRecord,
};
use lenslab::lens::LensKind;
use lenslab::meta::{
    best_layer, contextualization_correlation, corrected_dll_curves, interaction_regression,
    residual_error_regression, win_rate, InteractionFit, SettingRow, TokenErrorRow,
};
use lenslab::psychofit::{delta_ll, ols_fit, DeltaLLRecord, DesignMatrix, INTERCEPT};
use lenslab::stats::{mean, pearson, sample_variance};
use lenslab::synth::generate_sentences;

// ---------------------------------------------------------------------------
// Least squares
// ---------------------------------------------------------------------------

/// Intercept plus `cols` random predictors over `rows` rows.
fn design_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..4, 10usize..40).prop_flat_map(|(cols, rows)| {
        (
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, rows), cols),
            prop::collection::vec(-50.0f64..50.0, rows),
        )
    })
}

fn design(cols: &[Vec<f64>], y: &[f64], order: &[usize]) -> DesignMatrix {
    let n = y.len();
    let mut names = vec![INTERCEPT.to_string()];
    names.extend((0..cols.len()).map(|j| format!("x{j}")));
    let x = Array2::from_shape_fn((n, cols.len() + 1), |(i, j)| {
        if j == 0 {
            1.0
        } else {
            cols[j - 1][order[i]]
        }
    });
    DesignMatrix::new(names, x, order.iter().map(|&i| y[i]).collect()).unwrap()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loglik_equals_sum_of_row_log_densities((cols, y) in design_strategy()) {
        let order: Vec<usize> = (0..y.len()).collect();
        let fit = ols_fit(&design(&cols, &y, &order)).unwrap();
        prop_assert!(rel_close(fit.loglik, fit.loglik_by_rows(), 1e-9));
    }

    #[test]
    fn adding_a_predictor_never_lowers_the_likelihood((cols, y) in design_strategy()) {
        let order: Vec<usize> = (0..y.len()).collect();
        let full = ols_fit(&design(&cols, &y, &order)).unwrap();
        let base = ols_fit(&design(&cols[..cols.len() - 1], &y, &order)).unwrap();
        let gain = delta_ll(&base, &full).unwrap();
        prop_assert!(gain.total >= -1e-9, "ΔLL {}", gain.total);
        prop_assert!(rel_close(gain.total, full.loglik - base.loglik, 1e-7));
    }

    #[test]
    fn fit_is_invariant_to_row_order((cols, y) in design_strategy(), seed in any::<u64>()) {
        let identity: Vec<usize> = (0..y.len()).collect();
        let mut shuffled = identity.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = ols_fit(&design(&cols, &y, &identity)).unwrap();
        let b = ols_fit(&design(&cols, &y, &shuffled)).unwrap();
        prop_assert!(rel_close(a.loglik, b.loglik, 1e-9));
        for (u, v) in a.beta.iter().zip(&b.beta) {
            prop_assert!(rel_close(*u, *v, 1e-7), "{u} vs {v}");
        }
    }

    #[test]
    fn coefficients_scale_with_the_response(
        (cols, y) in design_strategy(),
        c in prop_oneof![0.01f64..100.0, -100.0f64..-0.01],
    ) {
        let order: Vec<usize> = (0..y.len()).collect();
        let scaled: Vec<f64> = y.iter().map(|v| v * c).collect();
        let a = ols_fit(&design(&cols, &y, &order)).unwrap();
        let b = ols_fit(&design(&cols, &scaled, &order)).unwrap();
        for (u, v) in a.beta.iter().zip(&b.beta) {
            prop_assert!((u * c - v).abs() <= 1e-7 * (1.0 + v.abs()), "{} vs {v}", u * c);
        }
        let n = y.len() as f64;
        prop_assert!(rel_close(b.loglik, a.loglik - n * c.abs().ln(), 1e-9));
    }
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

fn record(seq: &str, idx: usize, word: &str, measure: Measure, cost: f64) -> WordRecord {
    WordRecord {
        dataset_id: "d".into(),
        stimuli_id: "s".into(),
        seq_id: seq.into(),
        word_index: idx,
        word: word.into(),
        measure,
        cost,
        baseline_amplitude: None,
        clause_final: None,
        subject_count: 1,
        token_override: None,
        pos: None,
        covariates: None,
    }
}

fn measure_strategy() -> impl Strategy<Value = Measure> {
    prop::sample::select(Measure::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn preprocessing_keeps_a_subset(
        rows in prop::collection::vec((measure_strategy(), prop_oneof![Just(0.0), 1.0f64..500.0]), 0..60),
        measure in measure_strategy(),
    ) {
        let records: Vec<WordRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, (m, c))| record("1", i, "w", *m, *c))
            .collect();
        let (kept, dropped) = preprocess(records.clone(), measure);
        prop_assert_eq!(kept.len() + dropped, records.len());
        let mut it = records.iter();
        for k in &kept {
            // Order-preserving subsequence of the input.
            prop_assert!(it.any(|r| r == k));
            prop_assert_eq!(k.measure, measure);
            if measure.is_behavioral() {
                prop_assert!(k.cost != 0.0);
            }
        }
        let expected = records
            .iter()
            .filter(|r| r.measure == measure && !(measure.is_behavioral() && r.cost == 0.0))
            .count();
        prop_assert_eq!(kept.len(), expected);
    }

    #[test]
    fn subject_averages_ignore_row_order(
        costs in prop::collection::vec(prop::collection::vec(0.1f64..900.0, 6), 1..5),
        seed in any::<u64>(),
    ) {
        let mut rows = Vec::new();
        for (s, subj) in costs.iter().enumerate() {
            for (k, c) in subj.iter().enumerate() {
                rows.push(format!("s{s}\t{}\t{}\tw{k}\tSPR\t{c}", k / 3, k % 3));
            }
        }
        let header = "subject\tseq_id\tword_index\tword\tmeasure\tcost\n";
        let schema = ReadingSchema { dataset_id: "d".into(), stimuli_id: "s".into() };
        let (a, _) = parse_reading_tsv(&(header.to_string() + &rows.join("\n")), "a", &schema).unwrap();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (b, _) = parse_reading_tsv(&(header.to_string() + &rows.join("\n")), "b", &schema).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), 6);
        for r in &a {
            prop_assert_eq!(r.subject_count, costs.len());
            let k = r.word_index + 3 * r.seq_id.parse::<usize>().unwrap();
            let m = costs.iter().map(|s| s[k]).sum::<f64>() / costs.len() as f64;
            prop_assert!((r.cost - m).abs() <= 1e-9 * m);
        }
    }

    #[test]
    fn covariates_depend_only_on_two_preceding_words(
        words in prop::collection::vec("[a-z]{1,9}", 3..15),
        target in any::<prop::sample::Index>(),
        replacement in "[A-Z]{10,12}",
    ) {
        let freq = FrequencyTable::from_counts(words.iter().map(String::as_str));
        let build = |ws: &[String]| {
            let mut rs: Vec<WordRecord> = ws
                .iter()
                .enumerate()
                .map(|(i, w)| record("1", i, w, Measure::Spr, 1.0))
                .collect();
            rs.push(record("2", 0, "other", Measure::Spr, 1.0));
            attach_covariates(&mut rs, &freq);
            rs
        };
        let before = build(&words);
        let k = target.index(words.len());
        let mut changed = words.clone();
        changed[k] = replacement;
        let after = build(&changed);
        for (i, (a, b)) in before.iter().zip(&after).enumerate() {
            let ca = a.covariates.unwrap();
            let cb = b.covariates.unwrap();
            let in_reach = a.seq_id == "1" && i >= k && i <= k + 2;
            if !in_reach {
                prop_assert_eq!(ca, cb, "word {} changed", i);
            } else {
                prop_assert!(ca.length[i - k] != cb.length[i - k]);
            }
            prop_assert_eq!(ca.complete, a.seq_id == "1" && i >= 2);
        }
    }
}

#[test]
fn punctuation_flags_agree_with_grammar_clause_ends() {
    let sentences = generate_sentences(21, 200);
    let mut records = Vec::new();
    for (si, s) in sentences.iter().enumerate() {
        for (wi, w) in s.words.iter().enumerate() {
            let mut r = record(&si.to_string(), wi, w, Measure::Spr, 1.0);
            r.clause_final = Some(s.clause_final[wi]);
            records.push(r);
        }
    }
    let column: Vec<bool> = records.iter().map(|r| r.clause_final.unwrap()).collect();
    mark_clause_final(&mut records, ClauseFinalMode::Column).unwrap();
    let mut punct = records.clone();
    mark_clause_final(&mut punct, ClauseFinalMode::Punctuation).unwrap();
    let flags: Vec<bool> = punct.iter().map(|r| r.clause_final.unwrap()).collect();
    for (i, r) in punct.iter().enumerate() {
        let last = records.get(i + 1).map_or(true, |n| n.seq_id != r.seq_id);
        assert_eq!(flags[i], ends_clause(&r.word) || last);
    }
    let agreement = flag_agreement(&column, &flags);
    let manual = column.iter().zip(&flags).filter(|(a, b)| a == b).count() as f64 / column.len() as f64;
    assert_eq!(agreement, manual);
    // Sentence ends carry a period, so every one is flagged both ways.
    assert!(agreement > 0.8, "agreement {agreement}");
    assert!(agreement < 1.0, "commas are omitted for some clause ends");
}

// ---------------------------------------------------------------------------
// Meta-analysis
// ---------------------------------------------------------------------------

fn dll_record(model: &str, layer: usize, n_layers: usize, v: f64) -> DeltaLLRecord {
    DeltaLLRecord {
        dataset_id: "d".into(),
        model_id: model.into(),
        lens: LensKind::Logit,
        layer,
        n_layers,
        n_rows: 100,
        delta_ll: v * 100.0,
        delta_ll_per_row: v,
    }
}

fn pearson_by_formula(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let n = x.len() as f64;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0);
    cov / (sample_variance(x) * sample_variance(y)).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn best_layer_matches_a_linear_scan(
        values in prop::collection::vec(prop::sample::select(vec![-0.5, 0.0, 0.25, 0.5, 1.0]), 1..12),
        seed in any::<u64>(),
    ) {
        let n = values.len();
        let mut recs: Vec<DeltaLLRecord> =
            values.iter().enumerate().map(|(i, v)| dll_record("m", i + 1, n, *v)).collect();
        recs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let refs: Vec<&DeltaLLRecord> = recs.iter().collect();
        let (layer, v) = best_layer(&refs).unwrap();
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let first = values.iter().position(|x| *x == max).unwrap() + 1;
        prop_assert_eq!((layer, v), (first, max));
    }

    #[test]
    fn pearson_matches_the_textbook_formula(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..50),
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let r = pearson(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!((r - pearson_by_formula(&x, &y)).abs() < 1e-10);
        prop_assert!((pearson(&y, &x).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn win_rate_is_the_fraction_of_internal_winners(
        values in prop::collection::vec(-1.0f64..1.0, 2..16),
        reference in -1.0f64..1.0,
    ) {
        let n = values.len();
        let recs: Vec<DeltaLLRecord> =
            values.iter().enumerate().map(|(i, v)| dll_record("m", i + 1, n, *v)).collect();
        let refs: Vec<&DeltaLLRecord> = recs.iter().collect();
        let w = win_rate(&refs, reference).unwrap();
        prop_assert!((0.0..=1.0).contains(&w));
        let wins = values[..n - 1].iter().filter(|v| **v > reference).count();
        prop_assert_eq!(w, wins as f64 / (n - 1) as f64);
    }

    #[test]
    fn interaction_fit_ignores_row_order(seed in any::<u64>(), shuffle in any::<u64>()) {
        let mut rows = setting_rows(seed, &[[0.0, 0.0, 0.0]; 3], 0.01);
        let a = interaction_regression(&rows).unwrap();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let b = interaction_regression(&rows).unwrap();
        for m in [Measure::Spr, Measure::N400] {
            let (x, y) = (a.interaction(m).unwrap(), b.interaction(m).unwrap());
            prop_assert!((x.estimate - y.estimate).abs() < 1e-10);
            prop_assert!((x.std_err - y.std_err).abs() < 1e-10);
        }
    }
}

/// Full factorial of 2 stimuli × 3 models × 2 lenses × 3 measures × 8 depths.
/// `curves[m]` is `[a, b, c]` of `a + b·d + c·d²` for MAZE, N400, SPR (in
/// that order); nuisance effects are random with the first level at 0.
fn setting_rows(seed: u64, curves: &[[f64; 3]; 3], noise: f64) -> Vec<SettingRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut effect = |levels: &[&str]| -> HashMap<String, f64> {
        levels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.to_string(), if i == 0 { 0.0 } else { unit.sample(&mut rng) }))
            .collect()
    };
    let stimuli = effect(&["items", "stories"]);
    let models = effect(&["a", "b", "c"]);
    let lenses = effect(&["logit", "tuned"]);
    let measures = [Measure::Maze, Measure::N400, Measure::Spr];
    let mut rows = Vec::new();
    for st in ["items", "stories"] {
        for md in ["a", "b", "c"] {
            for ln in ["logit", "tuned"] {
                for (mi, m) in measures.iter().enumerate() {
                    for l in 1..=8 {
                        let d = l as f64 / 8.0;
                        let [a, b, c] = curves[mi];
                        let v = stimuli[st] + models[md] + lenses[ln] + a + b * d + c * d * d
                            + noise * unit.sample(&mut rng);
                        rows.push(SettingRow {
                            stimuli: st.into(),
                            model: md.into(),
                            lens: ln.into(),
                            measure: *m,
                            depth: d,
                            delta_ll: v,
                        });
                    }
                }
            }
        }
    }
    rows
}

#[test]
fn corrected_curves_recover_planted_quadratics() {
    for seed in 0..5u64 {
        let curves = [[0.02, 0.01, -0.03], [0.5, -0.2, 0.1], [0.1, 0.3, -0.25]];
        let rows = setting_rows(seed, &curves, 0.0);
        let fit: InteractionFit = interaction_regression(&rows).unwrap();
        // No FPGD rows, so the first level in string order is the reference.
        assert_eq!(fit.reference_measure, Measure::Maze);
        let out = corrected_dll_curves(&rows, &fit).unwrap();
        assert_eq!(out.len(), 3);
        for c in &out {
            let mi = [Measure::Maze, Measure::N400, Measure::Spr].iter().position(|m| *m == c.measure).unwrap();
            for (got, want) in c.coefficients.iter().zip(&curves[mi]) {
                assert!((got - want).abs() < 1e-8, "{:?}: {got} vs {want}", c.measure);
            }
            assert_eq!(c.points.len(), 2 * 3 * 2 * 8);
        }
    }
}

#[test]
fn residual_regression_recovers_a_length_effect() {
    let pos_tags = ["DET", "NOUN", "VERB", "ADJ"];
    let mut within = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let rows: Vec<TokenErrorRow> = (0..600)
            .map(|i| {
                let length = 1.0 + (i % 11) as f64;
                let freq = unit.sample(&mut rng);
                let position = (i % 17) as f64;
                let pos = pos_tags[i % 4];
                let model = if i % 2 == 0 { "a" } else { "b" };
                let error_decrease = 0.36 * length - 0.1 * freq + 0.02 * position
                    + if model == "b" { 0.5 } else { 0.0 }
                    + unit.sample(&mut rng);
                TokenErrorRow {
                    model: model.into(),
                    length,
                    freq,
                    position,
                    pos: Some(pos.into()),
                    has_punct: i % 5 == 0,
                    has_num: i % 7 == 0,
                    error_decrease,
                }
            })
            .collect();
        let fit = residual_error_regression(&rows).unwrap();
        let c = fit.coef_table().into_iter().find(|c| c.name == "length").unwrap();
        if (c.estimate - 0.36).abs() <= 3.0 * c.std_err {
            within += 1;
        }
    }
    assert!(within >= 19, "{within}/20 within 3 SE");
}

#[test]
fn contextualization_tracks_a_constructed_mixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let n = 300;
    let bigram: Vec<f64> = (0..n).map(|_| unit.sample(&mut rng)).collect();
    let reference: Vec<f64> = (0..n).map(|_| unit.sample(&mut rng)).collect();
    // Layer l mixes in more of the reference series with depth.
    let n_layers = 6;
    let layers: Vec<Vec<f64>> = (1..=n_layers)
        .map(|l| {
            let w = l as f64 / n_layers as f64;
            bigram.iter().zip(&reference).map(|(b, r)| (1.0 - w) * b + w * r).collect()
        })
        .collect();
    let c = contextualization_correlation(&layers, &bigram, &reference).unwrap();
    assert_eq!(c.layers.len(), n_layers);
    for (l, lc) in c.layers.iter().enumerate() {
        assert_eq!(lc.layer, l + 1);
        assert!((lc.r_bigram - pearson(&layers[l], &bigram).unwrap()).abs() < 1e-15);
        assert!((lc.r_reference - pearson(&layers[l], &reference).unwrap()).abs() < 1e-15);
    }
    assert!(c.layers.windows(2).all(|w| w[1].r_bigram < w[0].r_bigram));
    assert!(c.layers.windows(2).all(|w| w[1].r_reference > w[0].r_reference));
    assert!(c.depth_vs_bigram.unwrap() < -0.9);
    assert!(c.depth_vs_reference.unwrap() > 0.9);
    // Constant series have no correlation.
    let flat = vec![vec![1.0; n]; 3];
    let c = contextualization_correlation(&flat, &bigram, &reference).unwrap();
    assert!(c.layers.iter().all(|l| l.r_bigram.is_nan()));
    assert_eq!(c.depth_vs_bigram, None);
}

#[test]
fn best_layer_of_nothing_is_an_error() {
    assert!(best_layer(&[]).is_err());
    let only_final = [dll_record("m", 1, 1, 0.3)];
    let refs: Vec<&DeltaLLRecord> = only_final.iter().collect();
    assert!(win_rate(&refs, 0.0).is_err());
}
