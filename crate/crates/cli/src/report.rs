// SPDX-License-Identifier: MIT OR Apache-2.0

//! `report` (all meta-analyses) and `correlate` (bigram
//! contextualization).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{anyhow, Result};
use log::warn;

use lenslab::corpus::{word_length, Measure, WordRecord};
use lenslab::lens::LensKind;
use lenslab::meta::{
    best_layer, coef_table_tsv, contextualization_correlation, corrected_dll_curves, depth_binned_table,
    interaction_regression, residual_error_regression, scaling_effect, squared_error_decrease, table1_tsv,
    table2_tsv, win_rate_table, Contextualization, InteractionFit, ScalingMode, SettingRow, TokenErrorRow,
};
use lenslab::plot::{Chart, Style};
use lenslab::psychofit::{build_design, Coefficient, DeltaLLRecord};
use lenslab::stats::t_test_mean_positive;

use crate::commands::{bigram_model, collect_records, design_options, evaluate_all, nonfinite_notes, UnitEvaluation};
use crate::io::write_atomic;
use crate::workspace::{LoadedModel, Workspace};

fn skipped(reason: &str) -> String {
    format!("# skipped: {reason}\n")
}

fn skipped_svg(title: &str, reason: &str) -> String {
    Chart::new(&format!("{title} (skipped: {reason})"), "", "").render()
}

struct Writer<'a> {
    ws: &'a Workspace,
    written: Vec<PathBuf>,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.ws.out(name);
        write_atomic(&p, body.as_bytes())?;
        self.written.push(p);
        Ok(())
    }
}

/// Write every meta-analysis output. Analyses whose preconditions fail
/// (too few models, measures or layers) leave a `# skipped:` file behind
/// instead of aborting the report.
pub fn cmd_report(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let evals = evaluate_all(ws)?;
    let (all, clause) = collect_records(ws, &evals);
    for n in nonfinite_notes(&all).iter().chain(&nonfinite_notes(&clause)) {
        warn!("{n}");
    }
    let finite = |rs: &[DeltaLLRecord]| -> Vec<DeltaLLRecord> {
        rs.iter().filter(|r| r.delta_ll_per_row.is_finite()).cloned().collect()
    };
    let records = finite(&all);
    let clause = finite(&clause);
    let mut w = Writer { ws, written: Vec::new() };

    w.put("table1.tsv", &table1_tsv(&depth_binned_table(&records)?))?;
    if ws.cfg.clause_final.mode().is_some() {
        let body = if clause.is_empty() {
            skipped("no clause-final subset could be fit")
        } else {
            table1_tsv(&depth_binned_table(&clause)?)
        };
        w.put("table3.tsv", &body)?;
    }

    let families: BTreeMap<String, String> = ws
        .models
        .iter()
        .map(|m| (m.entry.id.clone(), m.entry.family.clone()))
        .collect();
    let body = match win_rate_table(&records, &families) {
        Ok(rows) => table2_tsv(&rows),
        Err(e) => skipped(&e.to_string()),
    };
    w.put("table2.tsv", &body)?;

    let (tsv, ttest, svg) = scaling(ws, &records)?;
    w.put("scaling.tsv", &tsv)?;
    w.put("scaling_ttest.tsv", &ttest)?;
    w.put("scaling.svg", &svg)?;

    w.put("ppl.tsv", &perplexity_tsv(ws, &evals))?;

    if ws.cfg.analysis.interaction {
        let (coefs, curves_tsv, curves_svg) = interaction(ws, &records);
        w.put("interaction_coefs.tsv", &coefs)?;
        w.put("corrected_curves.tsv", &curves_tsv)?;
        w.put("corrected_curves.svg", &curves_svg)?;
    }
    if ws.cfg.analysis.error_regression {
        w.put("error_regression.tsv", &error_regression(ws, &evals)?)?;
    }
    if ws.cfg.analysis.contextualization {
        let (tsv, summary, svg) = contextualization(ws)?;
        w.put("contextualization.tsv", &tsv)?;
        w.put("contextualization_summary.tsv", &summary)?;
        w.put("contextualization.svg", &svg)?;
    }
    Ok(w.written)
}

/// Records grouped by (dataset, lens) then model, in config order.
type SettingGroups<'a> = Vec<((String, LensKind), Vec<(&'a LoadedModel, Vec<&'a DeltaLLRecord>)>)>;

fn by_setting<'a>(ws: &'a Workspace, records: &'a [DeltaLLRecord]) -> SettingGroups<'a> {
    let mut out = Vec::new();
    for d in &ws.datasets {
        for lens in ws.cfg.lens.kinds() {
            let mut models = Vec::new();
            for m in &ws.models {
                let recs: Vec<&DeltaLLRecord> = records
                    .iter()
                    .filter(|r| r.dataset_id == d.entry.id && r.lens == lens && r.model_id == m.entry.id)
                    .collect();
                if !recs.is_empty() {
                    models.push((m, recs));
                }
            }
            out.push(((d.entry.id.clone(), lens), models));
        }
    }
    out
}

fn scaling(ws: &Workspace, records: &[DeltaLLRecord]) -> Result<(String, String, String)> {
    let mut tsv = String::from("dataset\tlens\tmode\tn_models\tr\tslope_x1000\tdegenerate\n");
    let mut notes = String::new();
    let mut rs: BTreeMap<(LensKind, &str), Vec<f64>> = BTreeMap::new();
    let mut chart = Chart::new("Best-layer ΔLL vs model size", "log10 parameters", "ΔLL per word x 1000");
    for ((dataset, lens), models) in by_setting(ws, records) {
        for mode in [ScalingMode::BestLayer, ScalingMode::LastLayer] {
            let mut pts = Vec::new();
            for (m, recs) in &models {
                let v = match mode {
                    ScalingMode::BestLayer => best_layer(recs)?.1,
                    ScalingMode::LastLayer => match recs.iter().find(|r| r.layer == r.n_layers) {
                        Some(r) => r.delta_ll_per_row,
                        None => continue,
                    },
                };
                pts.push((m.param_count() as f64, v));
            }
            match scaling_effect(&pts) {
                Ok(e) => {
                    let _ = writeln!(
                        tsv,
                        "{dataset}\t{lens}\t{}\t{}\t{:.6}\t{:.6}\t{}",
                        mode.as_str(),
                        e.n,
                        e.r,
                        e.slope * 1000.0,
                        e.degenerate
                    );
                    if !e.degenerate {
                        rs.entry((lens, mode.as_str())).or_default().push(e.r);
                    }
                }
                Err(e) => {
                    let _ = writeln!(notes, "# skipped {dataset}/{lens}/{}: {e}", mode.as_str());
                }
            }
            if mode == ScalingMode::BestLayer && !pts.is_empty() {
                chart = chart.with_series(
                    &format!("{dataset} ({lens})"),
                    pts.iter().map(|(p, v)| (p.log10(), v * 1000.0)).collect(),
                    Style::Points,
                );
            }
        }
    }
    tsv.push_str(&notes);
    let mut ttest = String::from("lens\tmode\tn_datasets\tmean_r\tt\tp_one_sided\n");
    for ((lens, mode), vals) in &rs {
        match t_test_mean_positive(vals) {
            Ok(t) => {
                let _ = writeln!(ttest, "{lens}\t{mode}\t{}\t{:.6}\t{:.4}\t{:.4e}", t.n, t.mean, t.t, t.p);
            }
            Err(e) => {
                let _ = writeln!(ttest, "# skipped {lens}/{mode}: {e}");
            }
        }
    }
    if rs.is_empty() {
        ttest.push_str(&skipped("no dataset has three or more models"));
    }
    Ok((tsv, ttest, chart.render()))
}

fn perplexity_tsv(ws: &Workspace, evals: &[UnitEvaluation]) -> String {
    let mut out = String::from("model\tdataset\tlens\tlayer\tperplexity\n");
    for e in evals {
        for (i, p) in e.unit.perplexity().iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6}",
                ws.models[e.model].entry.id,
                ws.datasets[e.dataset].entry.id,
                e.lens,
                i + 1,
                p
            );
        }
    }
    out
}

/// Setting rows for the interaction regression, one per finite record.
pub fn setting_rows(ws: &Workspace, records: &[DeltaLLRecord]) -> Result<Vec<SettingRow>> {
    let info: HashMap<&str, (&str, Measure)> = ws
        .datasets
        .iter()
        .map(|d| (d.entry.id.as_str(), (d.entry.stimuli_id(), d.measure)))
        .collect();
    records
        .iter()
        .map(|r| {
            let (stim, measure) = info[r.dataset_id.as_str()];
            Ok(SettingRow::from_record(r, stim, measure)?)
        })
        .collect()
}

fn interaction(ws: &Workspace, records: &[DeltaLLRecord]) -> (String, String, String) {
    let title = "Corrected ΔLL by relative depth";
    let fit = setting_rows(ws, records).and_then(|rows| {
        let fit = interaction_regression(&rows)?;
        let curves = corrected_dll_curves(&rows, &fit)?;
        Ok((fit, curves))
    });
    let (fit, curves) = match fit {
        Ok(v) => v,
        Err(e) => {
            let r = e.to_string();
            return (skipped(&r), skipped(&r), skipped_svg(title, &r));
        }
    };
    let mut coefs = coef_table_tsv(&fit.fit.coef_table());
    let _ = writeln!(coefs, "# reference measure: {}", fit.reference_measure);
    for m in Measure::ALL {
        if let Some(c) = fit.interaction(m) {
            let _ = writeln!(coefs, "# {}: estimate {:.6}, p {:.3e}", InteractionFit::interaction_name(m), c.estimate, c.p);
        }
    }
    let mut tsv = String::from("measure\tintercept\tdepth\tdepth_sq\tn_points\n");
    let mut chart = Chart::new(title, "relative depth", "corrected ΔLL per word");
    for c in &curves {
        let [a, b, q] = c.coefficients;
        let _ = writeln!(tsv, "{}\t{a:.6}\t{b:.6}\t{q:.6}\t{}", c.measure, c.points.len());
        let grid: Vec<(f64, f64)> = (0..=20).map(|i| i as f64 / 20.0).map(|d| (d, c.eval(d))).collect();
        chart = chart
            .with_series(&format!("{} settings", c.measure), c.points.clone(), Style::Points)
            .with_series(&format!("{} fit", c.measure), grid, Style::Line);
    }
    tsv.push_str("# corrected ΔLL = raw ΔLL minus fitted stimuli, model and lens effects; the intercept is retained\n");
    (coefs, tsv, chart.render())
}

fn coef_rows(prefix: &str, coefs: &[Coefficient], out: &mut String) {
    for line in coef_table_tsv(coefs).lines().skip(1) {
        let _ = writeln!(out, "{prefix}\t{line}");
    }
}

fn has_punct(w: &str) -> bool {
    w.chars().any(|c| c.is_ascii_punctuation())
}

fn has_num(w: &str) -> bool {
    w.chars().any(|c| c.is_ascii_digit())
}

/// Squared-error decrease at each model's best layer, regressed on word
/// features, per (dataset, lens).
fn error_regression(ws: &Workspace, evals: &[UnitEvaluation]) -> Result<String> {
    let mut out = String::from("dataset\tlens\tterm\testimate\tstd_err\tt\tp\tci_low\tci_high\n");
    let mut groups: BTreeMap<(usize, LensKind), Vec<TokenErrorRow>> = BTreeMap::new();
    let mut notes = String::new();
    for e in evals {
        let recs = e.delta_records(ws, &e.fits);
        let finite: Vec<&DeltaLLRecord> = recs.iter().filter(|r| r.delta_ll_per_row.is_finite()).collect();
        if finite.is_empty() {
            continue;
        }
        let (best, _) = best_layer(&finite)?;
        let fit = &e.fits[best - 1];
        let index = e.unit.index();
        let pair = build_design(&e.records, |s, i| index.get(s, i, best), design_options(ws))?;
        let dec = squared_error_decrease(&fit.base.residuals, &fit.full.residuals)?;
        let lookup: HashMap<(&str, usize), &WordRecord> =
            e.records.iter().map(|r| ((r.seq_id.as_str(), r.word_index), r)).collect();
        let rows = groups.entry((e.dataset, e.lens)).or_default();
        for ((seq, idx), d) in pair.rows.iter().zip(dec) {
            let r = lookup[&(seq.as_str(), *idx)];
            rows.push(TokenErrorRow {
                model: ws.models[e.model].entry.id.clone(),
                length: word_length(&r.word),
                freq: r.covariates.as_ref().map_or(0.0, |c| c.log_freq[0]),
                position: r.word_index as f64,
                pos: r.pos.clone(),
                has_punct: has_punct(&r.word),
                has_num: has_num(&r.word),
                error_decrease: d,
            });
        }
    }
    for ((d, lens), rows) in &groups {
        let id = &ws.datasets[*d].entry.id;
        match residual_error_regression(rows) {
            Ok(fit) => coef_rows(&format!("{id}\t{lens}"), &fit.coef_table(), &mut out),
            Err(e) => {
                let _ = writeln!(notes, "# skipped {id}/{lens}: {e}");
            }
        }
    }
    out.push_str(&notes);
    Ok(out)
}

fn reference_model(ws: &Workspace) -> Result<&LoadedModel> {
    match &ws.cfg.analysis.reference_model {
        Some(id) => ws.model(id).ok_or_else(|| anyhow!("unknown reference model {id:?}")),
        None => ws
            .models
            .iter()
            .rev()
            .max_by_key(|m| m.param_count())
            .ok_or_else(|| anyhow!("no models configured")),
    }
}

/// Per model and lens: correlations of each layer's word surprisal with
/// bigram surprisal and with the reference model's final logit-lens layer,
/// pooled over all datasets.
pub fn contextualization_results(ws: &Workspace) -> Result<Vec<(String, LensKind, Contextualization)>> {
    let bigram = bigram_model(ws)?;
    let reference = reference_model(ws)?;
    let mut bigram_s = Vec::new();
    let mut ref_s = Vec::new();
    for d in &ws.datasets {
        let u = ws.unit(reference, d, LensKind::Logit)?;
        for (s, (_, words)) in u.sequences.iter().zip(&d.sequences) {
            let texts: Vec<&str> = words.iter().map(|w| w.1.as_str()).collect();
            bigram_s.extend(bigram.surprisal(&texts));
            ref_s.extend(&s.word[u.n_layers - 1]);
        }
    }
    let mut out = Vec::new();
    for m in &ws.models {
        for lens in ws.cfg.lens.kinds() {
            let mut layers = vec![Vec::new(); m.bundle.n_layers()];
            for d in &ws.datasets {
                let u = ws.unit(m, d, lens)?;
                for s in &u.sequences {
                    for (l, vals) in s.word.iter().enumerate() {
                        layers[l].extend(vals);
                    }
                }
            }
            out.push((m.entry.id.clone(), lens, contextualization_correlation(&layers, &bigram_s, &ref_s)?));
        }
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map_or("NA".into(), |v| format!("{v:.6}"))
}

fn contextualization(ws: &Workspace) -> Result<(String, String, String)> {
    let title = "Correlation with bigram surprisal by relative depth";
    let results = contextualization_results(ws)?;
    let mut tsv = String::from("model\tlens\tlayer\tdepth\tr_bigram\tr_reference\n");
    let mut summary = String::from("model\tlens\tr_depth_bigram\tr_depth_reference\n");
    let mut chart = Chart::new(title, "relative depth", "Pearson r with bigram surprisal");
    for (model, lens, c) in &results {
        for l in &c.layers {
            let _ = writeln!(
                tsv,
                "{model}\t{lens}\t{}\t{:.6}\t{:.6}\t{:.6}",
                l.layer, l.depth, l.r_bigram, l.r_reference
            );
        }
        let _ = writeln!(summary, "{model}\t{lens}\t{}\t{}", opt(c.depth_vs_bigram), opt(c.depth_vs_reference));
        chart = chart.with_series(
            &format!("{model} ({lens})"),
            c.layers.iter().map(|l| (l.depth, l.r_bigram)).collect(),
            Style::LinePoints,
        );
    }
    let reference = reference_model(ws)?;
    let _ = writeln!(tsv, "# reference: final layer of {} (logit lens)", reference.entry.id);
    Ok((tsv, summary, chart.render()))
}

/// `correlate`: the contextualization outputs on their own.
pub fn cmd_correlate(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let (tsv, summary, svg) = contextualization(ws)?;
    let mut w = Writer { ws, written: Vec::new() };
    w.put("contextualization.tsv", &tsv)?;
    w.put("contextualization_summary.tsv", &summary)?;
    w.put("contextualization.svg", &svg)?;
    Ok(w.written)
}
