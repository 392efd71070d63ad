// SPDX-License-Identifier: MIT OR Apache-2.0

//! Second-order analyses over ΔLL records: depth bins, best layers, win
//! rates, scaling, the layer-depth × measure interaction, corrected ΔLL
//! curves, residual-error regression and contextualization correlations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::Array2;
use serde::Serialize;

use crate::corpus::Measure;
use crate::error::{Error, Result};
use crate::lens::LensKind;
use crate::psychofit::{ols_fit, Coefficient, DeltaLLRecord, DesignMatrix, OlsFit, INTERCEPT};
use crate::stats::pearson;

pub const N_DEPTH_BINS: usize = 5;
pub const DEPTH_BIN_LABELS: [&str; N_DEPTH_BINS] = ["0-0.2", "0.2-0.4", "0.4-0.6", "0.6-0.8", "0.8-1.0"];
pub const DEPTH_BIN_FOOTER: &str =
    "# relative depth = layer / n_layers; bins are half-open [lo, hi), the last closed at 1.0";

/// `l / L` for `1 <= l <= L`.
pub fn relative_depth(layer: usize, n_layers: usize) -> Result<f64> {
    if layer == 0 || layer > n_layers {
        return Err(Error::Precondition(format!(
            "layer {layer} outside 1..={n_layers}"
        )));
    }
    Ok(layer as f64 / n_layers as f64)
}

/// Bin index of `l / L` in integer arithmetic, so boundaries are exact.
pub fn depth_bin(layer: usize, n_layers: usize) -> Result<usize> {
    relative_depth(layer, n_layers)?;
    Ok((N_DEPTH_BINS * layer / n_layers).min(N_DEPTH_BINS - 1))
}

/// Layer with the largest per-row ΔLL; ties go to the shallower layer.
pub fn best_layer(records: &[&DeltaLLRecord]) -> Result<(usize, f64)> {
    let mut sorted: Vec<&&DeltaLLRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.layer);
    let mut best: Option<(usize, f64)> = None;
    for r in sorted {
        if best.map_or(true, |(_, v)| r.delta_ll_per_row > v) {
            best = Some((r.layer, r.delta_ll_per_row));
        }
    }
    best.ok_or_else(|| Error::Precondition("best layer of an empty record set".into()))
}

type Key = (String, LensKind);

fn group_by_setting(records: &[DeltaLLRecord]) -> BTreeMap<Key, BTreeMap<String, Vec<&DeltaLLRecord>>> {
    let mut out: BTreeMap<Key, BTreeMap<String, Vec<&DeltaLLRecord>>> = BTreeMap::new();
    for r in records {
        out.entry((r.dataset_id.clone(), r.lens))
            .or_default()
            .entry(r.model_id.clone())
            .or_default()
            .push(r);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthBinnedRow {
    pub dataset_id: String,
    pub lens: LensKind,
    /// Mean per-row ΔLL per bin, averaged across models having that bin.
    pub bins: [Option<f64>; N_DEPTH_BINS],
    /// Layers contributing to each bin, summed over models.
    pub counts: [usize; N_DEPTH_BINS],
    pub n_models: usize,
    pub best_bin: Option<usize>,
}

/// Per (dataset, lens): each model's layers are averaged within bins, then
/// bin means are averaged across models.
pub fn depth_binned_table(records: &[DeltaLLRecord]) -> Result<Vec<DepthBinnedRow>> {
    let mut rows = Vec::new();
    for ((dataset_id, lens), models) in group_by_setting(records) {
        let mut sums = [0.0; N_DEPTH_BINS];
        let mut n_models_in = [0usize; N_DEPTH_BINS];
        let mut counts = [0usize; N_DEPTH_BINS];
        for recs in models.values() {
            let mut s = [0.0; N_DEPTH_BINS];
            let mut c = [0usize; N_DEPTH_BINS];
            for r in recs {
                let b = depth_bin(r.layer, r.n_layers)?;
                s[b] += r.delta_ll_per_row;
                c[b] += 1;
            }
            for b in 0..N_DEPTH_BINS {
                if c[b] > 0 {
                    sums[b] += s[b] / c[b] as f64;
                    n_models_in[b] += 1;
                    counts[b] += c[b];
                }
            }
        }
        let mut bins = [None; N_DEPTH_BINS];
        for b in 0..N_DEPTH_BINS {
            if n_models_in[b] > 0 {
                bins[b] = Some(sums[b] / n_models_in[b] as f64);
            }
        }
        let best_bin = (0..N_DEPTH_BINS)
            .filter_map(|b| bins[b].map(|v| (b, v)))
            .fold(None, |acc: Option<(usize, f64)>, (b, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((b, v)),
            })
            .map(|(b, _)| b);
        rows.push(DepthBinnedRow {
            dataset_id,
            lens,
            bins,
            counts,
            n_models: models.len(),
            best_bin,
        });
    }
    Ok(rows)
}

pub fn table1_tsv(rows: &[DepthBinnedRow]) -> String {
    let mut out = String::from("dataset\tlens\tn_models");
    for l in DEPTH_BIN_LABELS {
        let _ = write!(out, "\t{l}");
    }
    out.push_str("\tbest_bin\n");
    for r in rows {
        let _ = write!(out, "{}\t{}\t{}", r.dataset_id, r.lens, r.n_models);
        for b in r.bins {
            match b {
                Some(v) => {
                    let _ = write!(out, "\t{:.4}", v * 1000.0);
                }
                None => out.push_str("\tNA"),
            }
        }
        let best = r.best_bin.map_or("NA", |b| DEPTH_BIN_LABELS[b]);
        let _ = writeln!(out, "\t{best}");
    }
    out.push_str(DEPTH_BIN_FOOTER);
    out.push_str("\n# values are per-row delta log-likelihood x 1000, averaged across models\n");
    out
}

/// Fraction of internal layers (`1..L`, excluding `L`) whose ΔLL strictly
/// exceeds `reference`.
pub fn win_rate(records: &[&DeltaLLRecord], reference: f64) -> Result<f64> {
    let internal: Vec<&&DeltaLLRecord> = records.iter().filter(|r| r.layer < r.n_layers).collect();
    if internal.is_empty() {
        return Err(Error::Precondition("win rate needs at least one internal layer".into()));
    }
    let wins = internal.iter().filter(|r| r.delta_ll_per_row > reference).count();
    Ok(wins as f64 / internal.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WinRateRow {
    pub dataset_id: String,
    pub lens: LensKind,
    pub model_id: String,
    pub family: String,
    /// Best last-layer ΔLL among the family's models.
    pub reference: f64,
    pub win_rate: f64,
}

/// Win rates of every model against the best last-layer ΔLL in its
/// family. `families` maps model id to family name.
pub fn win_rate_table(
    records: &[DeltaLLRecord],
    families: &BTreeMap<String, String>,
) -> Result<Vec<WinRateRow>> {
    let mut rows = Vec::new();
    for ((dataset_id, lens), models) in group_by_setting(records) {
        let family_of = |m: &str| {
            families
                .get(m)
                .cloned()
                .ok_or_else(|| Error::Config(format!("model {m:?} has no registered family")))
        };
        let mut reference: BTreeMap<String, f64> = BTreeMap::new();
        for (model, recs) in &models {
            let fam = family_of(model)?;
            if let Some(last) = recs.iter().find(|r| r.layer == r.n_layers) {
                let e = reference.entry(fam).or_insert(f64::NEG_INFINITY);
                *e = e.max(last.delta_ll_per_row);
            }
        }
        for (model, recs) in &models {
            let fam = family_of(model)?;
            let Some(&refv) = reference.get(&fam) else {
                return Err(Error::Data(format!(
                    "family {fam:?} has no last-layer result for {dataset_id}/{lens}"
                )));
            };
            rows.push(WinRateRow {
                dataset_id: dataset_id.clone(),
                lens,
                model_id: model.clone(),
                family: fam,
                reference: refv,
                win_rate: win_rate(recs, refv)?,
            });
        }
    }
    Ok(rows)
}

pub fn table2_tsv(rows: &[WinRateRow]) -> String {
    let mut out = String::from("dataset\tlens\tmodel\tfamily\treference_delta_ll_x1000\twin_rate\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.4}\t{:.4}",
            r.dataset_id,
            r.lens,
            r.model_id,
            r.family,
            r.reference * 1000.0,
            r.win_rate
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingEffect {
    pub n: usize,
    /// Pearson r between log10(params) and ΔLL; 0 when degenerate.
    pub r: f64,
    /// OLS slope of ΔLL on log10(params); 0 when degenerate.
    pub slope: f64,
    pub degenerate: bool,
}

/// Points are `(parameter count, ΔLL)`.
pub fn scaling_effect(points: &[(f64, f64)]) -> Result<ScalingEffect> {
    if points.len() < 3 {
        return Err(Error::Precondition(format!(
            "scaling effect needs at least 3 models, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| !(p.0 > 0.0) || !p.1.is_finite()) {
        return Err(Error::Numeric("scaling points need positive sizes and finite ΔLL".into()));
    }
    let x: Vec<f64> = points.iter().map(|p| p.0.log10()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    match pearson(&x, &y) {
        Some(r) => {
            let mx = crate::stats::mean(&x);
            let my = crate::stats::mean(&y);
            let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
            Ok(ScalingEffect {
                n: points.len(),
                r,
                slope: sxy / sxx,
                degenerate: false,
            })
        }
        None => Ok(ScalingEffect {
            n: points.len(),
            r: 0.0,
            slope: 0.0,
            degenerate: true,
        }),
    }
}

/// Which layer of each model represents it in the scaling analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    BestLayer,
    LastLayer,
}

impl ScalingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScalingMode::BestLayer => "best_layer",
            ScalingMode::LastLayer => "last_layer",
        }
    }
}

/// One regression setting for the interaction analysis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SettingRow {
    pub stimuli: String,
    pub model: String,
    pub lens: String,
    pub measure: Measure,
    pub depth: f64,
    pub delta_ll: f64,
}

impl SettingRow {
    pub fn from_record(r: &DeltaLLRecord, stimuli: &str, measure: Measure) -> Result<Self> {
        Ok(Self {
            stimuli: stimuli.to_string(),
            model: r.model_id.clone(),
            lens: r.lens.to_string(),
            measure,
            depth: relative_depth(r.layer, r.n_layers)?,
            delta_ll: r.delta_ll_per_row,
        })
    }
}

pub const LAYER_DEPTH: &str = "layer_depth";

/// Treatment coding against `reference` (default: first sorted level).
fn dummies(
    factor: &str,
    values: &[String],
    reference: Option<&str>,
) -> (Vec<String>, Vec<Vec<f64>>, String) {
    let levels: BTreeSet<&str> = values.iter().map(String::as_str).collect();
    let reference = reference
        .filter(|r| levels.contains(r))
        .unwrap_or_else(|| levels.iter().next().copied().unwrap_or(""))
        .to_string();
    let mut names = Vec::new();
    let mut cols = Vec::new();
    for lvl in levels.iter().filter(|l| **l != reference) {
        names.push(format!("{factor}[T.{lvl}]"));
        cols.push(values.iter().map(|v| f64::from(u8::from(v == lvl))).collect());
    }
    (names, cols, reference)
}

fn design_from_columns(names: Vec<String>, cols: Vec<Vec<f64>>, y: Vec<f64>) -> Result<DesignMatrix> {
    let n = y.len();
    let x = Array2::from_shape_fn((n, cols.len()), |(i, j)| cols[j][i]);
    DesignMatrix::new(names, x, y)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InteractionFit {
    pub fit: OlsFit,
    pub reference_measure: Measure,
    /// Columns holding stimuli, model and lens effects.
    pub nuisance: Vec<String>,
    #[serde(skip)]
    pub design: DesignMatrix,
}

impl InteractionFit {
    pub fn interaction_name(measure: Measure) -> String {
        format!("measure[T.{measure}]:{LAYER_DEPTH}")
    }

    pub fn interaction(&self, measure: Measure) -> Option<Coefficient> {
        let name = Self::interaction_name(measure);
        self.fit.coef_table().into_iter().find(|c| c.name == name)
    }
}

/// `ΔLL ~ stimuli + model + lens + layer_depth + measure + layer_depth × measure`
/// with FPGD as the reference measure when present.
pub fn interaction_regression(rows: &[SettingRow]) -> Result<InteractionFit> {
    let measures: BTreeSet<Measure> = rows.iter().map(|r| r.measure).collect();
    if measures.len() < 2 {
        return Err(Error::Precondition(
            "interaction regression needs at least two measures".into(),
        ));
    }
    let depths: BTreeSet<u64> = rows.iter().map(|r| r.depth.to_bits()).collect();
    if depths.len() < 2 {
        return Err(Error::Precondition(
            "interaction regression needs at least two layer depths".into(),
        ));
    }
    let col = |f: fn(&SettingRow) -> String| rows.iter().map(f).collect::<Vec<_>>();
    let n = rows.len();
    let mut names = vec![INTERCEPT.to_string()];
    let mut cols = vec![vec![1.0; n]];
    let mut nuisance = Vec::new();
    for (factor, values) in [
        ("stimuli", col(|r| r.stimuli.clone())),
        ("model", col(|r| r.model.clone())),
        ("lens", col(|r| r.lens.clone())),
    ] {
        let (nm, cs, _) = dummies(factor, &values, None);
        nuisance.extend(nm.iter().cloned());
        names.extend(nm);
        cols.extend(cs);
    }
    let depth: Vec<f64> = rows.iter().map(|r| r.depth).collect();
    names.push(LAYER_DEPTH.into());
    cols.push(depth.clone());
    let mvals = col(|r| r.measure.to_string());
    let (mnames, mcols, mref) = dummies("measure", &mvals, Some(Measure::Fpgd.as_str()));
    let mut inter_names = Vec::new();
    let mut inter_cols = Vec::new();
    for (nm, c) in mnames.iter().zip(&mcols) {
        inter_names.push(format!("{nm}:{LAYER_DEPTH}"));
        inter_cols.push(c.iter().zip(&depth).map(|(a, d)| a * d).collect::<Vec<_>>());
    }
    names.extend(mnames);
    cols.extend(mcols);
    names.extend(inter_names);
    cols.extend(inter_cols);

    let design = design_from_columns(names, cols, rows.iter().map(|r| r.delta_ll).collect())?;
    let fit = ols_fit(&design)?;
    Ok(InteractionFit {
        fit,
        reference_measure: mref.parse()?,
        nuisance,
        design,
    })
}

pub fn coef_table_tsv(coefs: &[Coefficient]) -> String {
    let mut out = String::from("term\testimate\tstd_err\tt\tp\tci_low\tci_high\n");
    for c in coefs {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.3}\t{:.3e}\t{:.6}\t{:.6}",
            c.name, c.estimate, c.std_err, c.t, c.p, c.ci_low, c.ci_high
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectedCurve {
    pub measure: Measure,
    /// `a + b·depth + c·depth²`
    pub coefficients: [f64; 3],
    /// `(depth, corrected ΔLL)` per setting row of this measure.
    pub points: Vec<(f64, f64)>,
}

impl CorrectedCurve {
    pub fn eval(&self, depth: f64) -> f64 {
        let [a, b, c] = self.coefficients;
        a + b * depth + c * depth * depth
    }
}

/// Raw ΔLL minus the fitted stimuli, model and lens contributions (the
/// intercept stays in), with a quadratic in depth fitted per measure.
pub fn corrected_dll_curves(rows: &[SettingRow], fit: &InteractionFit) -> Result<Vec<CorrectedCurve>> {
    if rows.len() != fit.design.n_rows() {
        return Err(Error::Precondition("setting rows do not match the interaction fit".into()));
    }
    let nuisance_idx: Vec<usize> = fit
        .nuisance
        .iter()
        .filter_map(|n| fit.design.column(n))
        .collect();
    let mut by_measure: BTreeMap<Measure, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let nuis: f64 = nuisance_idx
            .iter()
            .map(|&j| fit.design.x[[i, j]] * fit.fit.beta[j])
            .sum();
        by_measure.entry(r.measure).or_default().push((r.depth, r.delta_ll - nuis));
    }
    let mut out = Vec::new();
    for (measure, pts) in by_measure {
        let names = vec![INTERCEPT.into(), "depth".into(), "depth_sq".into()];
        let cols = vec![
            vec![1.0; pts.len()],
            pts.iter().map(|p| p.0).collect(),
            pts.iter().map(|p| p.0 * p.0).collect(),
        ];
        let design = design_from_columns(names, cols, pts.iter().map(|p| p.1).collect())?;
        let f = ols_fit(&design)?;
        out.push(CorrectedCurve {
            measure,
            coefficients: [f.beta[0], f.beta[1], f.beta[2]],
            points: pts,
        });
    }
    Ok(out)
}

/// Per-token decrease in squared residual error from the baseline to the
/// surprisal-augmented regression.
pub fn squared_error_decrease(base_residuals: &[f64], full_residuals: &[f64]) -> Result<Vec<f64>> {
    if base_residuals.len() != full_residuals.len() {
        return Err(Error::Precondition("residual vectors differ in length".into()));
    }
    Ok(base_residuals
        .iter()
        .zip(full_residuals)
        .map(|(b, f)| b * b - f * f)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenErrorRow {
    pub model: String,
    pub length: f64,
    pub freq: f64,
    pub position: f64,
    pub pos: Option<String>,
    pub has_punct: bool,
    pub has_num: bool,
    pub error_decrease: f64,
}

/// `error_decrease ~ model + length + freq + position + POS + has_punct + has_num`
pub fn residual_error_regression(rows: &[TokenErrorRow]) -> Result<OlsFit> {
    if let Some(i) = rows.iter().position(|r| r.pos.is_none()) {
        return Err(Error::Data(format!("token row {i} lacks the pos feature column")));
    }
    let n = rows.len();
    let mut names = vec![INTERCEPT.to_string()];
    let mut cols = vec![vec![1.0; n]];
    let models: Vec<String> = rows.iter().map(|r| r.model.clone()).collect();
    let (nm, cs, _) = dummies("model", &models, None);
    names.extend(nm);
    cols.extend(cs);
    for (name, f) in [
        ("length", (|r: &TokenErrorRow| r.length) as fn(&TokenErrorRow) -> f64),
        ("freq", |r| r.freq),
        ("position", |r| r.position),
    ] {
        names.push(name.into());
        cols.push(rows.iter().map(f).collect());
    }
    let pos: Vec<String> = rows.iter().map(|r| r.pos.clone().unwrap_or_default()).collect();
    let (nm, cs, _) = dummies("POS", &pos, None);
    names.extend(nm);
    cols.extend(cs);
    names.push("has_punct".into());
    cols.push(rows.iter().map(|r| f64::from(u8::from(r.has_punct))).collect());
    names.push("has_num".into());
    cols.push(rows.iter().map(|r| f64::from(u8::from(r.has_num))).collect());
    let design = design_from_columns(names, cols, rows.iter().map(|r| r.error_decrease).collect())?;
    ols_fit(&design)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerCorrelation {
    pub layer: usize,
    pub depth: f64,
    pub r_bigram: f64,
    pub r_reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Contextualization {
    pub layers: Vec<LayerCorrelation>,
    /// Correlation of relative depth with `r_bigram` across layers.
    pub depth_vs_bigram: Option<f64>,
    pub depth_vs_reference: Option<f64>,
}

/// `layers[l - 1]` holds layer `l`'s word surprisals, aligned with
/// `bigram` and `reference`. Zero-variance series yield `NaN` correlations.
pub fn contextualization_correlation(
    layers: &[Vec<f64>],
    bigram: &[f64],
    reference: &[f64],
) -> Result<Contextualization> {
    let n = bigram.len();
    if n < 3 {
        return Err(Error::Precondition(format!(
            "contextualization needs at least 3 aligned words, got {n}"
        )));
    }
    if reference.len() != n || layers.iter().any(|l| l.len() != n) {
        return Err(Error::Precondition("surprisal series are not aligned".into()));
    }
    let big_l = layers.len();
    let per_layer: Vec<LayerCorrelation> = layers
        .iter()
        .enumerate()
        .map(|(i, s)| LayerCorrelation {
            layer: i + 1,
            depth: (i + 1) as f64 / big_l as f64,
            r_bigram: pearson(s, bigram).unwrap_or(f64::NAN),
            r_reference: pearson(s, reference).unwrap_or(f64::NAN),
        })
        .collect();
    let depth: Vec<f64> = per_layer.iter().map(|c| c.depth).collect();
    let second = |f: fn(&LayerCorrelation) -> f64| {
        let v: Vec<f64> = per_layer.iter().map(f).collect();
        if depth.len() < 3 || v.iter().any(|x| !x.is_finite()) {
            None
        } else {
            pearson(&depth, &v)
        }
    };
    Ok(Contextualization {
        depth_vs_bigram: second(|c| c.r_bigram),
        depth_vs_reference: second(|c| c.r_reference),
        layers: per_layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(model: &str, layer: usize, n_layers: usize, v: f64) -> DeltaLLRecord {
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

    #[test]
    fn depth_endpoints_and_boundaries() {
        assert_eq!(relative_depth(5, 5).unwrap(), 1.0);
        assert_eq!(depth_bin(5, 5).unwrap(), 4);
        assert_eq!(depth_bin(1, 5).unwrap(), 1);
        assert!(relative_depth(0, 5).is_err());
        assert!(depth_bin(6, 5).is_err());
    }

    #[test]
    fn forty_eight_layer_occupancy() {
        let mut occ = [0; 5];
        for l in 1..=48 {
            occ[depth_bin(l, 48).unwrap()] += 1;
        }
        assert_eq!(occ, [9, 10, 9, 10, 10]);
    }

    #[test]
    fn best_layer_ties_go_shallow() {
        let recs: Vec<_> = [1.0, 3.0, 3.0, 2.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| rec("m", i + 1, 4, v))
            .collect();
        let refs: Vec<&DeltaLLRecord> = recs.iter().collect();
        assert_eq!(best_layer(&refs).unwrap(), (2, 3.0));
        assert_eq!(best_layer(&refs[..1]).unwrap().0, 1);
        assert!(best_layer(&[]).is_err());
    }

    #[test]
    fn win_rate_bounds() {
        let recs: Vec<_> = (1..=5).map(|l| rec("m", l, 5, l as f64)).collect();
        let refs: Vec<&DeltaLLRecord> = recs.iter().collect();
        assert_eq!(win_rate(&refs, 100.0).unwrap(), 0.0);
        assert_eq!(win_rate(&refs, -1.0).unwrap(), 1.0);
        assert_eq!(win_rate(&refs, 2.5).unwrap(), 0.5);
        // Against the model's own best layer nothing strictly wins.
        let best = best_layer(&refs).unwrap().1;
        assert!(win_rate(&refs, best).unwrap() < 1.0);
    }

    #[test]
    fn family_reference_uses_best_last_layer() {
        let mut recs: Vec<_> = (1..=4).map(|l| rec("small", l, 4, [5.0, 4.0, 3.0, 1.0][l - 1])).collect();
        recs.extend((1..=4).map(|l| rec("big", l, 4, [0.5, 2.5, 2.5, 2.0][l - 1])));
        let fam: BTreeMap<String, String> =
            [("small", "g"), ("big", "g")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let rows = win_rate_table(&recs, &fam).unwrap();
        assert!(rows.iter().all(|r| r.reference == 2.0));
        let small = rows.iter().find(|r| r.model_id == "small").unwrap();
        assert_eq!(small.win_rate, 1.0);
        let big = rows.iter().find(|r| r.model_id == "big").unwrap();
        assert!((big.win_rate - 2.0 / 3.0).abs() < 1e-15);
        assert!(win_rate_table(&recs, &BTreeMap::new()).is_err());
    }

    #[test]
    fn binned_table_partitions_layers() {
        let mut recs: Vec<_> = (1..=12).map(|l| rec("a", l, 12, l as f64)).collect();
        recs.extend((1..=6).map(|l| rec("b", l, 6, 1.0)));
        let rows = depth_binned_table(&recs).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].counts.iter().sum::<usize>(), 18);
        assert_eq!(rows[0].n_models, 2);
        assert_eq!(rows[0].best_bin, Some(4));
        let tsv = table1_tsv(&rows);
        assert!(tsv.contains("0.8-1.0"));
        assert!(tsv.contains(DEPTH_BIN_FOOTER));
    }

    #[test]
    fn scaling_cases() {
        let perfect = [(1e8, 1.0), (1e9, 2.0), (1e10, 3.0)];
        let e = scaling_effect(&perfect).unwrap();
        assert!((e.r - 1.0).abs() < 1e-15 && (e.slope - 1.0).abs() < 1e-12);
        let flat = scaling_effect(&[(1e8, 1.0), (1e9, 1.0), (1e10, 1.0)]).unwrap();
        assert!(flat.degenerate && flat.r == 0.0);
        assert!(scaling_effect(&perfect[..2]).is_err());
    }

    #[test]
    fn single_measure_interaction_rejected() {
        let rows: Vec<SettingRow> = (1..=4)
            .map(|l| SettingRow {
                stimuli: "s".into(),
                model: "m".into(),
                lens: "logit".into(),
                measure: Measure::Spr,
                depth: l as f64 / 4.0,
                delta_ll: 1.0,
            })
            .collect();
        assert!(matches!(interaction_regression(&rows), Err(Error::Precondition(_))));
    }

    #[test]
    fn interaction_coding_and_flat_curves() {
        let mut rows = Vec::new();
        for m in [Measure::Fpgd, Measure::Maze, Measure::Spr] {
            for model in ["m1", "m2"] {
                for l in 1..=6 {
                    rows.push(SettingRow {
                        stimuli: "s".into(),
                        model: model.into(),
                        lens: "logit".into(),
                        measure: m,
                        depth: l as f64 / 6.0,
                        delta_ll: 0.25,
                    });
                }
            }
        }
        let fit = interaction_regression(&rows).unwrap();
        assert_eq!(fit.reference_measure, Measure::Fpgd);
        assert!(fit.fit.names.contains(&"measure[T.MAZE]:layer_depth".to_string()));
        assert!(fit.fit.names.contains(&"model[T.m2]".to_string()));
        assert!(!fit.fit.names.iter().any(|n| n.contains("FPGD")));
        for c in corrected_dll_curves(&rows, &fit).unwrap() {
            assert!((c.coefficients[0] - 0.25).abs() < 1e-8);
            assert!(c.coefficients[1].abs() < 1e-8 && c.coefficients[2].abs() < 1e-8);
        }
    }

    #[test]
    fn contextualization_identities() {
        let big = vec![1.0, 2.0, 5.0, 3.0];
        let neg: Vec<f64> = big.iter().map(|v| -v).collect();
        let c = contextualization_correlation(&[big.clone(), neg], &big, &big).unwrap();
        assert_eq!(c.layers[0].r_bigram, 1.0);
        assert_eq!(c.layers[1].r_bigram, -1.0);
        assert!(contextualization_correlation(&[vec![1.0, 2.0]], &[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn residual_regression_needs_pos_and_handles_zero_target() {
        let rows: Vec<TokenErrorRow> = (0..30)
            .map(|i| TokenErrorRow {
                model: if i % 2 == 0 { "a" } else { "b" }.into(),
                length: (i % 7) as f64,
                freq: (i % 5) as f64,
                position: i as f64,
                pos: Some(if i % 3 == 0 { "NOUN" } else { "VERB" }.into()),
                has_punct: i % 4 == 0,
                has_num: i % 9 == 0,
                error_decrease: 0.0,
            })
            .collect();
        let fit = residual_error_regression(&rows).unwrap();
        assert!(fit.beta.iter().all(|b| b.abs() < 1e-10));
        let mut bad = rows.clone();
        bad[3].pos = None;
        assert!(residual_error_regression(&bad).is_err());
    }
}
