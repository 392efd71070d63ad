// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tuned-lens translator training.
//!
//! Each translator `(W, b)` is fit independently by minibatch gradient
//! descent on the mean KL divergence between the model's final next-token
//! distribution and the lens distribution at its layer. Training runs in
//! `f64` on a copy of the projection head.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Translator, TranslatorSet};
use crate::error::{Error, Result};
use crate::model::ModelBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// `KL(final || lens)`
    #[default]
    Forward,
    /// `KL(lens || final)`
    Reverse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub val_fraction: f64,
    pub cosine: bool,
    pub direction: KlDirection,
    pub seed: u64,
    /// Record a curve point every this many steps (0 = only start and end).
    pub eval_every: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.5,
            steps: 200,
            batch: 64,
            val_fraction: 0.2,
            cosine: true,
            direction: KlDirection::Forward,
            seed: 0,
            eval_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub layer: usize,
    pub step: usize,
    pub train_kl: f64,
    pub val_kl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub translators: TranslatorSet,
    pub curves: Vec<CurvePoint>,
}

/// `f64` copy of the final layernorm and unembedding.
#[derive(Debug, Clone)]
pub struct LensHead {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
    pub unembed: Array2<f64>,
    pub eps: f64,
}

struct Forward {
    xhat: Array2<f64>,
    inv_sigma: Array1<f64>,
    log_q: Array2<f64>,
}

impl LensHead {
    pub fn from_model(model: &ModelBundle) -> Self {
        Self {
            gain: model.final_norm.gain.mapv(f64::from),
            bias: model.final_norm.bias.mapv(f64::from),
            unembed: model.unembedding.mapv(f64::from),
            eps: f64::from(model.config.ln_epsilon),
        }
    }

    fn forward(&self, z: &Array2<f64>) -> Forward {
        let (n, d) = z.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_sigma = Array1::zeros(n);
        for (i, row) in z.outer_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_sigma[i] = inv;
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * inv;
            }
        }
        let y = &xhat * &self.gain + &self.bias;
        let mut log_q = y.dot(&self.unembed);
        for mut row in log_q.outer_iter_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        Forward {
            xhat,
            inv_sigma,
            log_q,
        }
    }

    /// Lens log-probabilities for pre-translated states `z = h W + b`.
    pub fn log_probs(&self, z: &Array2<f64>) -> Array2<f64> {
        self.forward(z).log_q
    }
}

fn translate(h: ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    h.dot(w) + b
}

fn row_kl(log_p: ndarray::ArrayView1<f64>, log_q: ndarray::ArrayView1<f64>) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum()
}

fn mean_kl(log_final: ArrayView2<f64>, log_q: &Array2<f64>, direction: KlDirection) -> f64 {
    let n = log_q.nrows();
    let total: f64 = (0..n)
        .map(|i| match direction {
            KlDirection::Forward => row_kl(log_final.row(i), log_q.row(i)),
            KlDirection::Reverse => row_kl(log_q.row(i), log_final.row(i)),
        })
        .sum();
    total / n as f64
}

/// Mean KL objective over a batch of hidden states `h` (`[n, d]`) with
/// final-layer log-probabilities `log_final` (`[n, |V|]`).
pub fn objective(
    head: &LensHead,
    w: &Array2<f64>,
    b: &Array1<f64>,
    h: ArrayView2<f64>,
    log_final: ArrayView2<f64>,
    direction: KlDirection,
) -> f64 {
    let fw = head.forward(&translate(h, w, b));
    mean_kl(log_final, &fw.log_q, direction)
}

/// Objective value and its analytic gradient with respect to `W` and `b`.
pub fn objective_and_grad(
    head: &LensHead,
    w: &Array2<f64>,
    b: &Array1<f64>,
    h: ArrayView2<f64>,
    log_final: ArrayView2<f64>,
    direction: KlDirection,
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = h.nrows();
    let d = w.nrows();
    let fw = head.forward(&translate(h, w, b));
    let loss = mean_kl(log_final, &fw.log_q, direction);

    // d loss / d logits, row-wise.
    let mut g = Array2::zeros(fw.log_q.raw_dim());
    for i in 0..n {
        let lq = fw.log_q.row(i);
        let lp = log_final.row(i);
        let mut gi = g.row_mut(i);
        match direction {
            KlDirection::Forward => {
                for k in 0..lq.len() {
                    gi[k] = lq[k].exp() - lp[k].exp();
                }
            }
            KlDirection::Reverse => {
                let kl = row_kl(lq, lp);
                for k in 0..lq.len() {
                    let q = lq[k].exp();
                    gi[k] = q * (lq[k] - lp[k] - kl);
                }
            }
        }
    }
    g /= n as f64;

    let dy = g.dot(&head.unembed.t());
    let dxhat = &dy * &head.gain;
    let mut dz = Array2::zeros((n, d));
    for i in 0..n {
        let dx = dxhat.row(i);
        let xh = fw.xhat.row(i);
        let m1 = dx.sum() / d as f64;
        let m2 = dx.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dz[[i, j]] = fw.inv_sigma[i] * (dx[j] - m1 - xh[j] * m2);
        }
    }
    let dw = h.t().dot(&dz);
    let db = dz.sum_axis(Axis(0));
    (loss, dw, db)
}

/// Hidden states per non-final layer plus final log-probabilities, one row
/// per corpus position.
struct TrainingData {
    states: Vec<Array2<f64>>,
    log_final: Array2<f64>,
}

fn collect(model: &ModelBundle, corpus: &[Vec<u32>]) -> Result<TrainingData> {
    let n_layers = model.n_layers();
    let d = model.d_model();
    let v = model.vocab_size();
    let max = model.config.max_positions;
    let mut states: Vec<Vec<f64>> = vec![Vec::new(); n_layers.saturating_sub(1)];
    let mut finals: Vec<f64> = Vec::new();
    let mut rows = 0;
    for seq in corpus {
        for chunk in seq.chunks(max) {
            let rs = model.forward_capture(chunk)?;
            for (l, buf) in states.iter_mut().enumerate() {
                buf.extend(rs.states[l].iter().map(|&x| f64::from(x)));
            }
            for row in rs.final_logits.outer_iter() {
                finals.extend(super::log_softmax(row));
            }
            rows += chunk.len();
        }
    }
    Ok(TrainingData {
        states: states
            .into_iter()
            .map(|s| Array2::from_shape_vec((rows, d), s).expect("rows * d"))
            .collect(),
        log_final: Array2::from_shape_vec((rows, v), finals).expect("rows * v"),
    })
}

/// Train one translator per non-final layer.
pub fn train_translators(
    model: &ModelBundle,
    corpus: &[Vec<u32>],
    hyper: &TrainHyper,
) -> Result<TrainOutput> {
    if hyper.batch == 0 {
        return Err(Error::Precondition("batch must be positive".into()));
    }
    if !(0.0..1.0).contains(&hyper.val_fraction) {
        return Err(Error::Precondition("val_fraction must lie in [0, 1)".into()));
    }
    let data = collect(model, corpus)?;
    let n = data.log_final.nrows();
    let n_val = ((n as f64 * hyper.val_fraction).round() as usize).max(1).min(n);
    if n.saturating_sub(n_val) < hyper.batch {
        return Err(Error::Precondition(format!(
            "corpus supplies {} training positions, fewer than batch {}",
            n.saturating_sub(n_val),
            hyper.batch
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(hyper.seed));
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut val_idx = val_idx.to_vec();
    val_idx.sort_unstable();
    let train_idx = train_idx.to_vec();
    // Train-curve points are measured on a bounded, fixed subset.
    let mut probe_idx: Vec<usize> = train_idx.iter().copied().take(2048).collect();
    probe_idx.sort_unstable();

    let head = LensHead::from_model(model);
    let d = model.d_model();
    let n_layers = model.n_layers();
    let val_final = data.log_final.select(Axis(0), &val_idx);
    let probe_final = data.log_final.select(Axis(0), &probe_idx);

    let mut translators = Vec::new();
    let mut curves = Vec::new();
    for layer in 1..n_layers {
        let h_all = &data.states[layer - 1];
        let h_val = h_all.select(Axis(0), &val_idx);
        let h_probe = h_all.select(Axis(0), &probe_idx);
        let mut w = Array2::<f64>::eye(d);
        let mut b = Array1::<f64>::zeros(d);
        let record = |step: usize, w: &Array2<f64>, b: &Array1<f64>| CurvePoint {
            layer,
            step,
            train_kl: objective(&head, w, b, h_probe.view(), probe_final.view(), hyper.direction),
            val_kl: objective(&head, w, b, h_val.view(), val_final.view(), hyper.direction),
        };
        curves.push(record(0, &w, &b));

        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ (layer as u64).wrapping_mul(0x9E37_79B9));
        for step in 0..hyper.steps {
            let batch: Vec<usize> = train_idx
                .choose_multiple(&mut rng, hyper.batch)
                .copied()
                .collect();
            let hb = h_all.select(Axis(0), &batch);
            let fb = data.log_final.select(Axis(0), &batch);
            let (loss, dw, db) =
                objective_and_grad(&head, &w, &b, hb.view(), fb.view(), hyper.direction);
            if !loss.is_finite() {
                return Err(Error::Diverged { layer, step });
            }
            let lr = if hyper.cosine {
                let frac = step as f64 / hyper.steps as f64;
                hyper.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            } else {
                hyper.lr
            };
            w.scaled_add(-lr, &dw);
            b.scaled_add(-lr, &db);
            if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Diverged { layer, step });
            }
            let done = step + 1;
            if hyper.eval_every > 0 && done % hyper.eval_every == 0 && done != hyper.steps {
                curves.push(record(done, &w, &b));
            }
        }
        if hyper.steps > 0 {
            let last = record(hyper.steps, &w, &b);
            if !last.val_kl.is_finite() {
                return Err(Error::Diverged {
                    layer,
                    step: hyper.steps,
                });
            }
            curves.push(last);
        }
        translators.push(Translator {
            layer,
            weight: w.mapv(|v| v as f32),
            bias: b.mapv(|v| v as f32),
        });
    }
    Ok(TrainOutput {
        translators: TranslatorSet {
            d_model: d,
            n_layers,
            translators,
        },
        curves,
    })
}
