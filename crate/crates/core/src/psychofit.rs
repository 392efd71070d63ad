// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ordinary least squares by Householder QR, Gaussian log-likelihood at
//! the MLE variance, and the baseline vs. baseline+surprisal comparison.

use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;
use serde::Serialize;

use crate::corpus::{Measure, WordRecord};
use crate::error::{Error, Result};
use crate::lens::LensKind;
use crate::stats::{student_t_quantile, student_t_two_sided};

/// Columns whose remaining norm after orthogonalization falls below this
/// fraction of their original norm are treated as linearly dependent.
pub const RANK_TOLERANCE: f64 = 1e-9;

/// Residual sums of squares at or below this fraction of `Σy²` count as an
/// exact fit, whose log-likelihood is reported as `+∞`.
pub const EXACT_FIT_TOLERANCE: f64 = 1e-24;

pub const INTERCEPT: &str = "Intercept";

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    pub x: Array2<f64>,
    pub y: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(names: Vec<String>, x: Array2<f64>, y: Vec<f64>) -> Result<Self> {
        if x.ncols() != names.len() {
            return Err(Error::Precondition(format!(
                "{} column names for {} columns",
                names.len(),
                x.ncols()
            )));
        }
        if x.nrows() != y.len() {
            return Err(Error::Precondition(format!(
                "{} rows but {} responses",
                x.nrows(),
                y.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(Error::Precondition(format!("duplicate column name {n:?}")));
            }
        }
        Ok(Self { names, x, y })
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OlsFit {
    pub names: Vec<String>,
    /// One entry per column; dropped columns hold 0.
    pub beta: Vec<f64>,
    /// Standard errors; `NaN` for dropped columns or when `n == rank`.
    pub std_err: Vec<f64>,
    pub dropped: Vec<String>,
    pub rss: f64,
    pub sigma2_mle: f64,
    /// `+∞` for an exact fit.
    pub loglik: f64,
    pub n: usize,
    pub p: usize,
    pub rank: usize,
    #[serde(skip)]
    pub residuals: Vec<f64>,
    #[serde(skip)]
    y_fingerprint: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_err: f64,
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl OlsFit {
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.beta[i])
    }

    pub fn is_dropped(&self, name: &str) -> bool {
        self.dropped.iter().any(|d| d == name)
    }

    pub fn df_resid(&self) -> usize {
        self.n - self.rank
    }

    /// Estimates with t statistics, two-sided p-values and 95% intervals,
    /// for the columns kept in the fit.
    pub fn coef_table(&self) -> Vec<Coefficient> {
        let df = self.df_resid() as f64;
        let q = if df > 0.0 { student_t_quantile(0.975, df) } else { f64::NAN };
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| !self.is_dropped(n))
            .map(|(i, name)| {
                let est = self.beta[i];
                let se = self.std_err[i];
                let t = est / se;
                let p = if t.is_nan() {
                    f64::NAN
                } else {
                    student_t_two_sided(t, df)
                };
                Coefficient {
                    name: name.clone(),
                    estimate: est,
                    std_err: se,
                    t,
                    p,
                    ci_low: est - q * se,
                    ci_high: est + q * se,
                }
            })
            .collect()
    }

    /// `Σ` of `n` log-densities `N(residual; 0, σ²_MLE)`; equals `loglik`.
    pub fn loglik_by_rows(&self) -> f64 {
        if self.loglik.is_infinite() {
            return f64::INFINITY;
        }
        let s2 = self.sigma2_mle;
        let c = -0.5 * (2.0 * std::f64::consts::PI * s2).ln();
        self.residuals.iter().map(|r| c - r * r / (2.0 * s2)).sum()
    }
}

/// Gaussian log-likelihood at the MLE variance `rss / n`.
pub fn gaussian_loglik(rss: f64, n: usize) -> f64 {
    let n = n as f64;
    -0.5 * n * ((2.0 * std::f64::consts::PI * rss / n).ln() + 1.0)
}

fn fingerprint(y: &[f64]) -> (f64, f64) {
    let mut s = y.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    (s.iter().sum(), s.iter().map(|v| v * v).sum())
}

pub fn ols_fit(design: &DesignMatrix) -> Result<OlsFit> {
    let (n, p) = design.x.dim();
    if n <= p {
        return Err(Error::Precondition(format!(
            "least squares needs more rows than columns (n = {n}, p = {p})"
        )));
    }
    for (j, name) in design.names.iter().enumerate() {
        let col = design.x.column(j);
        if col.iter().all(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("column {name:?} is entirely NaN")));
        }
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value in column {name:?}")));
        }
    }
    if design.y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite response value".into()));
    }

    // Householder QR over the kept columns, built one column at a time.
    let mut a = design.x.clone();
    let mut qty = design.y.clone();
    let mut kept: Vec<usize> = Vec::with_capacity(p);
    let mut dropped = Vec::new();
    for j in 0..p {
        let orig_norm = design.x.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        let k = kept.len();
        let rest: f64 = (k..n).map(|i| a[[i, j]] * a[[i, j]]).sum::<f64>().sqrt();
        if orig_norm == 0.0 || rest <= RANK_TOLERANCE * orig_norm {
            dropped.push(j);
            continue;
        }
        let alpha = if a[[k, j]] > 0.0 { -rest } else { rest };
        let mut v: Vec<f64> = (k..n).map(|i| a[[i, j]]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            // Apply to this and all later columns and to y.
            for c in j..p {
                let dot: f64 = v.iter().enumerate().map(|(r, vi)| vi * a[[k + r, c]]).sum();
                let f = 2.0 * dot / vnorm2;
                for (r, vi) in v.iter().enumerate() {
                    a[[k + r, c]] -= f * vi;
                }
            }
            let dot: f64 = v.iter().enumerate().map(|(r, vi)| vi * qty[k + r]).sum();
            let f = 2.0 * dot / vnorm2;
            for (r, vi) in v.iter().enumerate() {
                qty[k + r] -= f * vi;
            }
        }
        kept.push(j);
    }
    let rank = kept.len();

    // Back-substitute R b = (Qᵀy)[..rank].
    let r_at = |row: usize, kc: usize| a[[row, kept[kc]]];
    let mut b = vec![0.0; rank];
    for i in (0..rank).rev() {
        let mut s = qty[i];
        for c in i + 1..rank {
            s -= r_at(i, c) * b[c];
        }
        b[i] = s / r_at(i, i);
    }
    // R⁻¹ for the standard errors.
    let mut rinv = vec![vec![0.0; rank]; rank];
    for col in 0..rank {
        for i in (0..=col).rev() {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for c in i + 1..=col {
                s -= r_at(i, c) * rinv[c][col];
            }
            rinv[i][col] = s / r_at(i, i);
        }
    }

    let mut beta = vec![0.0; p];
    for (kc, &j) in kept.iter().enumerate() {
        beta[j] = b[kc];
    }
    let residuals: Vec<f64> = (0..n)
        .map(|i| {
            let fitted: f64 = (0..p).map(|j| design.x[[i, j]] * beta[j]).sum();
            design.y[i] - fitted
        })
        .collect();
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let y2: f64 = design.y.iter().map(|v| v * v).sum();
    let exact = rss <= EXACT_FIT_TOLERANCE * y2;
    let sigma2_mle = rss / n as f64;
    let loglik = if exact {
        f64::INFINITY
    } else {
        gaussian_loglik(rss, n)
    };
    let s2_unbiased = if n > rank { rss / (n - rank) as f64 } else { f64::NAN };
    let mut std_err = vec![f64::NAN; p];
    for (kc, &j) in kept.iter().enumerate() {
        let v: f64 = rinv[kc].iter().map(|x| x * x).sum();
        std_err[j] = (s2_unbiased * v).sqrt();
    }

    Ok(OlsFit {
        names: design.names.clone(),
        beta,
        std_err,
        dropped: dropped.iter().map(|&j| design.names[j].clone()).collect(),
        rss,
        sigma2_mle,
        loglik,
        n,
        p,
        rank,
        residuals,
        y_fingerprint: fingerprint(&design.y),
    })
}

/// Log-likelihood gain of a nested fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaLL {
    pub total: f64,
    pub per_row: f64,
}

/// `full.loglik − base.loglik`, computed as `n/2 · ln(rss_base / rss_full)`
/// to avoid cancellation between two large log-likelihoods.
pub fn delta_ll(base: &OlsFit, full: &OlsFit) -> Result<DeltaLL> {
    if base.n != full.n || base.y_fingerprint != full.y_fingerprint {
        return Err(Error::Precondition("fits are on different responses".into()));
    }
    if let Some(missing) = base.names.iter().find(|n| !full.names.contains(n)) {
        return Err(Error::Precondition(format!(
            "models are not nested: base column {missing:?} absent from full model"
        )));
    }
    let n = full.n as f64;
    let total = match (base.loglik.is_infinite(), full.loglik.is_infinite()) {
        (false, true) => f64::INFINITY,
        (true, true) => 0.0,
        (true, false) => f64::NEG_INFINITY,
        (false, false) => -0.5 * n * ((full.rss - base.rss) / base.rss).ln_1p(),
    };
    Ok(DeltaLL {
        total,
        per_row: total / n,
    })
}

/// Baseline predictors in design order; the current-word surprisal is
/// appended last for the full model.
pub const BASELINE_COLUMNS: [&str; 9] = [
    INTERCEPT,
    "surprisal_prev1",
    "surprisal_prev2",
    "length",
    "freq",
    "length_prev1",
    "freq_prev1",
    "length_prev2",
    "freq_prev2",
];
pub const BASELINE_AMPLITUDE: &str = "baseline_amplitude";
pub const SURPRISAL: &str = "surprisal";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DesignOptions {
    /// Keep only records flagged clause-final.
    pub clause_final_only: bool,
    /// Keep records lacking two words of context, zero-filling the lags.
    pub include_incomplete: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignPair {
    pub base: DesignMatrix,
    pub full: DesignMatrix,
    /// `(seq_id, word_index)` per row.
    pub rows: Vec<(String, usize)>,
}

/// Assemble the baseline and full designs for one measure. `surprisal`
/// returns the word surprisal of `(seq_id, word_index)` at the layer under
/// evaluation. Records must carry covariates.
pub fn build_design(
    records: &[WordRecord],
    surprisal: impl Fn(&str, usize) -> Option<f64>,
    options: DesignOptions,
) -> Result<DesignPair> {
    let measure = match records.first() {
        Some(r) => r.measure,
        None => return Err(Error::Precondition("no records to build a design from".into())),
    };
    if records.iter().any(|r| r.measure != measure) {
        return Err(Error::Precondition("records mix several measures".into()));
    }
    let with_baseline = measure == Measure::N400;

    let mut base_names: Vec<String> = BASELINE_COLUMNS.iter().map(|s| s.to_string()).collect();
    if with_baseline {
        base_names.push(BASELINE_AMPLITUDE.into());
    }
    let mut full_names = base_names.clone();
    full_names.push(SURPRISAL.into());

    let mut missing: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut data: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    let mut rows = Vec::new();
    for r in records {
        let cov = r.covariates.ok_or_else(|| {
            Error::Precondition(format!("covariates not attached to {}/{}", r.seq_id, r.word_index))
        })?;
        if !cov.complete && !options.include_incomplete {
            continue;
        }
        if options.clause_final_only && r.clause_final != Some(true) {
            continue;
        }
        let mut s = [0.0; 3];
        for (k, slot) in s.iter_mut().enumerate() {
            let Some(idx) = r.word_index.checked_sub(k) else { continue };
            // Words are non-empty, so a zero lag length marks an absent lag.
            if k > 0 && !cov.complete && cov.length[k] == 0.0 {
                continue;
            }
            match surprisal(&r.seq_id, idx) {
                Some(v) if v.is_finite() => *slot = v,
                _ => missing.entry(r.seq_id.as_str()).or_default().push(idx),
            }
        }
        let mut row = vec![
            1.0,
            s[1],
            s[2],
            cov.length[0],
            cov.log_freq[0],
            cov.length[1],
            cov.log_freq[1],
            cov.length[2],
            cov.log_freq[2],
        ];
        if with_baseline {
            row.push(r.baseline_amplitude.ok_or_else(|| {
                Error::Data(format!(
                    "N400 record {}/{} lacks baseline_amplitude",
                    r.seq_id, r.word_index
                ))
            })?);
        }
        row.push(s[0]);
        data.push(row);
        y.push(r.cost);
        rows.push((r.seq_id.clone(), r.word_index));
    }
    if let Some((seq, idx)) = missing.into_iter().next() {
        let mut idx = idx;
        idx.sort_unstable();
        idx.dedup();
        return Err(Error::MissingSurprisal {
            seq_id: seq.to_string(),
            indices: idx,
        });
    }

    let n = data.len();
    let pf = full_names.len();
    let full_x = Array2::from_shape_fn((n, pf), |(i, j)| data[i][j]);
    let base_x = full_x.slice(ndarray::s![.., ..pf - 1]).to_owned();
    Ok(DesignPair {
        base: DesignMatrix::new(base_names, base_x, y.clone())?,
        full: DesignMatrix::new(full_names, full_x, y)?,
        rows,
    })
}

/// One ΔLL measurement: a dataset scored by one layer of one model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaLLRecord {
    pub dataset_id: String,
    pub model_id: String,
    pub lens: LensKind,
    pub layer: usize,
    pub n_layers: usize,
    pub n_rows: usize,
    pub delta_ll: f64,
    pub delta_ll_per_row: f64,
}

impl DeltaLLRecord {
    pub const TSV_HEADER: &'static str =
        "dataset\tmodel\tlens\tlayer\tn_rows\tdelta_ll\tdelta_ll_x1000\n";

    /// The per-row gain in the `delta_ll` column, ×1000 alongside.
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            self.dataset_id,
            self.model_id,
            self.lens,
            self.layer,
            self.n_rows,
            self.delta_ll_per_row,
            self.delta_ll_per_row * 1000.0
        )
    }
}

/// Fit both designs and return the gain with the two fits.
pub fn evaluate_design(pair: &DesignPair) -> Result<(DeltaLL, OlsFit, OlsFit)> {
    let base = ols_fit(&pair.base)?;
    let full = ols_fit(&pair.full)?;
    let d = delta_ll(&base, &full)?;
    Ok((d, base, full))
}
