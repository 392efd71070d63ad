// SPDX-License-Identifier: MIT OR Apache-2.0

//! Independent reference implementations checked against the library:
//! a plain-loop f64 forward pass, a numerically integrated Student-t CDF,
//! tokenizer round trips and word-alignment partitions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lenslab::stats::student_t_cdf;
use lenslab::synth::generate_sentences;
use lenslab::{align_words, make_toy_bundle, ModelBundle, ModelConfig, Tokenizer};

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

type Mat = Vec<Vec<f64>>;

fn layer_norm(x: &[f64], gain: &[f32], bias: &[f32], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * f64::from(gain[i]) + f64::from(bias[i]))
        .collect()
}

/// `x · W + b` with `W` stored `[in, out]`.
fn affine(x: &[f64], w: &ndarray::Array2<f32>, b: &ndarray::Array1<f32>) -> Vec<f64> {
    (0..w.ncols())
        .map(|j| f64::from(b[j]) + (0..w.nrows()).map(|i| x[i] * f64::from(w[[i, j]])).sum::<f64>())
        .collect()
}

fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Residual states after each block plus final logits, all in f64.
fn naive_forward(m: &ModelBundle, ids: &[u32]) -> (Vec<Mat>, Mat) {
    let cfg = &m.config;
    let (d, h) = (cfg.d_model, cfg.n_heads);
    let dh = d / h;
    let eps = f64::from(cfg.ln_epsilon);
    let t_len = ids.len();
    let mut x: Mat = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            (0..d)
                .map(|k| f64::from(m.token_embedding[[id as usize, k]]) + f64::from(m.position_embedding[[t, k]]))
                .collect()
        })
        .collect();
    let mut states = Vec::new();
    for b in &m.blocks {
        let qkv: Mat = x
            .iter()
            .map(|row| affine(&layer_norm(row, b.ln_1.gain.as_slice().unwrap(), b.ln_1.bias.as_slice().unwrap(), eps), &b.attn_qkv_w, &b.attn_qkv_b))
            .collect();
        let mut merged = vec![vec![0.0; d]; t_len];
        for head in 0..h {
            let q = |t: usize, k: usize| qkv[t][head * dh + k];
            let key = |t: usize, k: usize| qkv[t][d + head * dh + k];
            let v = |t: usize, k: usize| qkv[t][2 * d + head * dh + k];
            for i in 0..t_len {
                // Causal: only positions j <= i take part.
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|k| q(i, k) * key(j, k)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = w.iter().sum();
                for k in 0..dh {
                    merged[i][head * dh + k] = (0..=i).map(|j| w[j] / z * v(j, k)).sum();
                }
            }
        }
        for t in 0..t_len {
            let out = affine(&merged[t], &b.attn_out_w, &b.attn_out_b);
            for k in 0..d {
                x[t][k] += out[k];
            }
            let a = layer_norm(&x[t], b.ln_2.gain.as_slice().unwrap(), b.ln_2.bias.as_slice().unwrap(), eps);
            let hidden: Vec<f64> = affine(&a, &b.mlp_in_w, &b.mlp_in_b).into_iter().map(gelu_tanh).collect();
            let out = affine(&hidden, &b.mlp_out_w, &b.mlp_out_b);
            for k in 0..d {
                x[t][k] += out[k];
            }
        }
        states.push(x.clone());
    }
    let logits = x
        .iter()
        .map(|row| {
            let n = layer_norm(row, m.final_norm.gain.as_slice().unwrap(), m.final_norm.bias.as_slice().unwrap(), eps);
            (0..m.unembedding.ncols())
                .map(|v| (0..d).map(|k| n[k] * f64::from(m.unembedding[[k, v]])).sum())
                .collect()
        })
        .collect();
    (states, logits)
}

fn close(a: f32, b: f64) -> bool {
    (f64::from(a) - b).abs() <= 2e-4 * (1.0 + b.abs())
}

#[test]
fn forward_pass_matches_plain_loop_reference() {
    for (seed, layers, d, heads) in [(3u64, 2usize, 16usize, 2usize), (5, 3, 32, 4)] {
        let cfg = ModelConfig {
            n_layers: layers,
            d_model: d,
            n_heads: heads,
            ..ModelConfig::toy()
        };
        let model = make_toy_bundle(seed, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u32> = (0..24).map(|_| rng.gen_range(0..model.vocab_size() as u32)).collect();
        let (states, logits) = naive_forward(&model, &ids);
        let captured = model.forward_capture(&ids).unwrap();
        assert_eq!(captured.n_layers(), layers);
        for (l, st) in states.iter().enumerate() {
            for (t, row) in st.iter().enumerate() {
                for (k, &v) in row.iter().enumerate() {
                    let got = captured.states[l][[t, k]];
                    assert!(close(got, v), "layer {} pos {t} dim {k}: {got} vs {v}", l + 1);
                }
            }
        }
        let fwd = model.forward(&ids).unwrap();
        for (t, row) in logits.iter().enumerate() {
            for (v, &want) in row.iter().enumerate() {
                assert!(close(fwd[[t, v]], want), "logit {t},{v}: {} vs {want}", fwd[[t, v]]);
                assert_eq!(fwd[[t, v]], captured.final_logits[[t, v]]);
            }
        }
    }
}

#[test]
fn later_tokens_do_not_change_earlier_states() {
    let model = make_toy_bundle(9, ModelConfig::toy()).unwrap();
    let ids: Vec<u32> = (0..20).map(|i| (i * 37 % 250) as u32).collect();
    let full = model.forward_capture(&ids).unwrap();
    let prefix = model.forward_capture(&ids[..12]).unwrap();
    for l in 0..full.n_layers() {
        for t in 0..12 {
            for k in 0..model.d_model() {
                let (a, b) = (full.states[l][[t, k]], prefix.states[l][[t, k]]);
                assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "layer {l} pos {t}");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Student-t CDF
// ---------------------------------------------------------------------------

/// `Γ(x)` for positive integers and half-integers.
fn gamma_half_integer(x: f64) -> f64 {
    let mut x = x;
    let mut acc = 1.0;
    while x > 1.0 {
        x -= 1.0;
        acc *= x;
    }
    if (x - 0.5).abs() < 1e-12 {
        acc * std::f64::consts::PI.sqrt()
    } else {
        acc
    }
}

fn t_density(t: f64, df: f64) -> f64 {
    let c = gamma_half_integer((df + 1.0) / 2.0) / ((df * std::f64::consts::PI).sqrt() * gamma_half_integer(df / 2.0));
    c * (1.0 + t * t / df).powf(-(df + 1.0) / 2.0)
}

/// `1/2 + ∫₀ᵗ f`, by composite Simpson's rule.
fn t_cdf_by_quadrature(t: f64, df: f64) -> f64 {
    let n = 20_000;
    let h = t / n as f64;
    let mut s = t_density(0.0, df) + t_density(t, df);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * t_density(i as f64 * h, df);
    }
    0.5 + s * h / 3.0
}

#[test]
fn student_t_cdf_matches_quadrature() {
    let mut checked = 0;
    for df in [1.0, 2.0, 3.0, 5.0, 10.0, 30.0] {
        for t in [-6.0, -2.5, -1.0, -0.3, 0.0, 0.7, 1.96, 4.0] {
            let want = t_cdf_by_quadrature(t, df);
            let got = student_t_cdf(t, df);
            assert!((got - want).abs() < 1e-6, "df {df} t {t}: {got} vs {want}");
            checked += 1;
        }
    }
    assert!(checked >= 34);
    // Closed forms: df = 1 is Cauchy, df = 2 has an algebraic CDF.
    for t in [-3.0f64, -0.5, 0.25, 2.0, 10.0] {
        let cauchy = 0.5 + t.atan() / std::f64::consts::PI;
        assert!((student_t_cdf(t, 1.0) - cauchy).abs() < 1e-10);
        let two = 0.5 + t / (2.0 * (2.0 + t * t).sqrt());
        assert!((student_t_cdf(t, 2.0) - two).abs() < 1e-10);
    }
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

fn trained_tokenizer() -> Tokenizer {
    let corpus: Vec<String> = generate_sentences(77, 400).iter().map(|s| s.text()).collect();
    let refs: Vec<&str> = corpus.iter().map(String::as_str).collect();
    Tokenizer::train_byte_level(&refs, 300)
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 14] = [
        "the", " dog", "ran", " ", "  ", "\n", ",", "'s", "42", "é", "naïve", "日本", "🙂", "\t",
    ];
    let n = rng.gen_range(0..12);
    let mut s = String::new();
    for _ in 0..n {
        if rng.gen_bool(0.3) {
            s.push(char::from_u32(rng.gen_range(0x20..0x2FF)).unwrap_or('x'));
        } else {
            s.push_str(PIECES[rng.gen_range(0..PIECES.len())]);
        }
    }
    s
}

#[test]
fn byte_level_encoding_round_trips() {
    let tok = trained_tokenizer();
    assert!(tok.merges().len() > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let text = random_text(&mut rng);
        let enc = tok.encode(&text);
        assert_eq!(enc.ids.len(), enc.offsets.len());
        assert_eq!(tok.decode(&enc.ids).unwrap(), text);
        // Offsets tile the text.
        let mut pos = 0;
        for off in &enc.offsets {
            assert_eq!(off.start, pos, "{text:?}");
            pos = off.end;
        }
        assert_eq!(pos, text.len());
    }
}

#[test]
fn word_alignment_partitions_tokens() {
    let tok = trained_tokenizer();
    for (i, s) in generate_sentences(5, 100).iter().enumerate() {
        // Vary the spacing so that whitespace-only tokens appear.
        let sep = if i % 3 == 0 { "   " } else { " " };
        let text = s.words.join(sep);
        let enc = tok.encode(&text);
        let al = align_words(&s.words, &enc.offsets, &text).unwrap();
        assert_eq!(al.spans.len(), s.words.len());
        let mut owned = vec![false; enc.ids.len()];
        let mut prev_end = 0;
        for span in &al.spans {
            assert!(!span.is_empty());
            assert!(span.start >= prev_end, "spans overlap or are out of order");
            for t in prev_end..span.start {
                assert!(text[enc.offsets[t].clone()].trim().is_empty(), "gap token is not whitespace");
            }
            for t in span.clone() {
                owned[t] = true;
            }
            prev_end = span.end;
        }
        for (t, o) in owned.iter().enumerate() {
            if !o {
                assert!(text[enc.offsets[t].clone()].trim().is_empty());
            }
        }
        // Each word's tokens decode to the word, up to surrounding spaces.
        for (w, span) in s.words.iter().zip(&al.spans) {
            let piece = tok.decode(&enc.ids[span.clone()]).unwrap();
            assert_eq!(piece.trim(), w);
        }
    }
}
