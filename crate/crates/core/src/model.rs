// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with residual-stream capture.
//!
//! Blocks are pre-layernorm GPT-2 style:
//! `x += attn(ln_1(x)); x += mlp(ln_2(x))`, with learned absolute position
//! embeddings. The residual stream after block `l` (1-based) is what the
//! lenses read. The embedding output (layer 0) is never exposed.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Tensor, TensorStore};

pub const ARCH_GPT2: &str = "gpt2";

/// Additive pre-softmax mask for future positions.
const CAUSAL_MASK: f32 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub ln_epsilon: f32,
    pub tied_unembedding: bool,
    /// MLP hidden width; `4 * d_model` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_mlp: Option<usize>,
    /// Prepended to every scored sequence when present, so that the first
    /// word also receives a surprisal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bos_token_id: Option<u32>,
}

impl ModelConfig {
    /// The desk-scale fixture used throughout the tests.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            vocab_size: 256,
            max_positions: 128,
            ln_epsilon: 1e-5,
            tied_unembedding: false,
            d_mlp: None,
            bos_token_id: None,
        }
    }

    pub fn mlp_width(&self) -> usize {
        self.d_mlp.unwrap_or(4 * self.d_model)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1");
        }
        if self.d_model == 0 || self.n_heads == 0 {
            return bad("d_model and n_heads must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2");
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive");
        }
        if !(self.ln_epsilon > 0.0 && self.ln_epsilon.is_finite()) {
            return bad("ln_epsilon must be a small positive real");
        }
        if self.mlp_width() == 0 {
            return bad("d_mlp must be positive");
        }
        if let Some(bos) = self.bos_token_id {
            if bos as usize >= self.vocab_size {
                return bad("bos_token_id outside the vocabulary");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f32>,
    pub bias: Array1<f32>,
}

impl LayerNorm {
    pub fn apply(&self, x: ArrayView2<f32>, eps: f32) -> Array2<f32> {
        let mut out = Array2::zeros(x.raw_dim());
        for (row, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
            let n = row.len() as f32;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (i, v) in row.iter().enumerate() {
                dst[i] = (v - mean) * inv * self.gain[i] + self.bias[i];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln_1: LayerNorm,
    /// `[d, 3d]`, columns ordered q | k | v.
    pub attn_qkv_w: Array2<f32>,
    pub attn_qkv_b: Array1<f32>,
    pub attn_out_w: Array2<f32>,
    pub attn_out_b: Array1<f32>,
    pub ln_2: LayerNorm,
    pub mlp_in_w: Array2<f32>,
    pub mlp_in_b: Array1<f32>,
    pub mlp_out_w: Array2<f32>,
    pub mlp_out_b: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub architecture: String,
    /// `[|V|, d]`
    pub token_embedding: Array2<f32>,
    /// `[max_positions, d]`
    pub position_embedding: Array2<f32>,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    /// `W_U`, `[d, |V|]`
    pub unembedding: Array2<f32>,
}

/// Hidden states captured during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStream {
    /// `states[l - 1]` is the `[T, d]` residual stream after block `l`.
    pub states: Vec<Array2<f32>>,
    /// `[T, |V|]`
    pub final_logits: Array2<f32>,
}

impl ResidualStream {
    pub fn n_layers(&self) -> usize {
        self.states.len()
    }

    pub fn n_positions(&self) -> usize {
        self.final_logits.nrows()
    }

    /// Residual vector at 1-based `layer` and position `t`.
    pub fn state(&self, layer: usize, t: usize) -> ArrayView1<'_, f32> {
        self.states[layer - 1].row(t)
    }
}

fn tensor_name(layer: usize, leaf: &str) -> String {
    format!("h.{layer}.{leaf}")
}

fn to_array1(t: &Tensor) -> Array1<f32> {
    Array1::from_vec(t.data.clone())
}

fn to_array2(t: &Tensor) -> Array2<f32> {
    Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
        .expect("shape checked by TensorStore::expect")
}

fn from_array1(a: &Array1<f32>) -> Tensor {
    Tensor::new(vec![a.len()], a.to_vec())
}

fn from_array2(a: &Array2<f32>) -> Tensor {
    Tensor::new(
        vec![a.nrows(), a.ncols()],
        a.as_standard_layout().iter().copied().collect(),
    )
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

impl ModelBundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let store = TensorStore::load(dir)?;
        Self::from_store(&store)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_store().save(dir)
    }

    pub fn from_store(store: &TensorStore) -> Result<Self> {
        if store.kind != "model" {
            return Err(Error::Bundle(format!(
                "expected a model bundle, found kind {:?}",
                store.kind
            )));
        }
        let architecture = store
            .architecture
            .clone()
            .ok_or_else(|| Error::Bundle("manifest lacks an architecture tag".into()))?;
        if architecture != ARCH_GPT2 {
            return Err(Error::Bundle(format!(
                "unsupported architecture {architecture:?}"
            )));
        }
        let config: ModelConfig = serde_json::from_value(
            store
                .metadata
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Bundle("manifest lacks model config".into()))?,
        )
        .map_err(|e| Error::Bundle(format!("bad model config: {e}")))?;
        config.validate()?;

        let d = config.d_model;
        let v = config.vocab_size;
        let m = config.mlp_width();
        let vec_d = |name: &str| store.expect(name, &[d]).map(to_array1);
        let ln = |prefix: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                gain: vec_d(&format!("{prefix}.weight"))?,
                bias: vec_d(&format!("{prefix}.bias"))?,
            })
        };

        let token_embedding = to_array2(store.expect("wte.weight", &[v, d])?);
        let position_embedding =
            to_array2(store.expect("wpe.weight", &[config.max_positions, d])?);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let n = |leaf: &str| tensor_name(i, leaf);
            blocks.push(Block {
                ln_1: ln(&n("ln_1"))?,
                attn_qkv_w: to_array2(store.expect(&n("attn.c_attn.weight"), &[d, 3 * d])?),
                attn_qkv_b: to_array1(store.expect(&n("attn.c_attn.bias"), &[3 * d])?),
                attn_out_w: to_array2(store.expect(&n("attn.c_proj.weight"), &[d, d])?),
                attn_out_b: vec_d(&n("attn.c_proj.bias"))?,
                ln_2: ln(&n("ln_2"))?,
                mlp_in_w: to_array2(store.expect(&n("mlp.c_fc.weight"), &[d, m])?),
                mlp_in_b: to_array1(store.expect(&n("mlp.c_fc.bias"), &[m])?),
                mlp_out_w: to_array2(store.expect(&n("mlp.c_proj.weight"), &[m, d])?),
                mlp_out_b: vec_d(&n("mlp.c_proj.bias"))?,
            });
        }
        let final_norm = ln("ln_f")?;

        let unembedding = match store.tensors.get("lm_head.weight") {
            Some(_) => {
                let w = to_array2(store.expect("lm_head.weight", &[d, v])?);
                if config.tied_unembedding && w != token_embedding.t() {
                    return Err(Error::Bundle(
                        "tied_unembedding is set but lm_head.weight differs from wte.weight^T"
                            .into(),
                    ));
                }
                w
            }
            None if config.tied_unembedding => token_embedding.t().to_owned(),
            None => return Err(Error::MissingTensor("lm_head.weight".into())),
        };

        Ok(Self {
            config,
            architecture,
            token_embedding,
            position_embedding,
            blocks,
            final_norm,
            unembedding,
        })
    }

    pub fn to_store(&self) -> TensorStore {
        let mut s = TensorStore::new("model");
        s.architecture = Some(self.architecture.clone());
        s.metadata = serde_json::json!({ "config": self.config });
        s.insert("wte.weight", from_array2(&self.token_embedding));
        s.insert("wpe.weight", from_array2(&self.position_embedding));
        for (i, b) in self.blocks.iter().enumerate() {
            let n = |leaf: &str| tensor_name(i, leaf);
            s.insert(n("ln_1.weight"), from_array1(&b.ln_1.gain));
            s.insert(n("ln_1.bias"), from_array1(&b.ln_1.bias));
            s.insert(n("attn.c_attn.weight"), from_array2(&b.attn_qkv_w));
            s.insert(n("attn.c_attn.bias"), from_array1(&b.attn_qkv_b));
            s.insert(n("attn.c_proj.weight"), from_array2(&b.attn_out_w));
            s.insert(n("attn.c_proj.bias"), from_array1(&b.attn_out_b));
            s.insert(n("ln_2.weight"), from_array1(&b.ln_2.gain));
            s.insert(n("ln_2.bias"), from_array1(&b.ln_2.bias));
            s.insert(n("mlp.c_fc.weight"), from_array2(&b.mlp_in_w));
            s.insert(n("mlp.c_fc.bias"), from_array1(&b.mlp_in_b));
            s.insert(n("mlp.c_proj.weight"), from_array2(&b.mlp_out_w));
            s.insert(n("mlp.c_proj.bias"), from_array1(&b.mlp_out_b));
        }
        s.insert("ln_f.weight", from_array1(&self.final_norm.gain));
        s.insert("ln_f.bias", from_array1(&self.final_norm.bias));
        if !self.config.tied_unembedding {
            s.insert("lm_head.weight", from_array2(&self.unembedding));
        }
        s
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        if let Some(&id) = ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, ids: &[u32]) -> Array2<f32> {
        let d = self.config.d_model;
        let mut x = Array2::zeros((ids.len(), d));
        for (t, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(t);
            row.assign(&self.token_embedding.row(id as usize));
            row += &self.position_embedding.row(t);
        }
        x
    }

    fn attention(&self, block: &Block, a: &Array2<f32>) -> Array2<f32> {
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let t_len = a.nrows();
        let mut qkv = a.dot(&block.attn_qkv_w);
        qkv += &block.attn_qkv_b;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut merged = Array2::<f32>::zeros((t_len, d));
        for h in 0..self.config.n_heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut scores = q.dot(&k.t());
            for i in 0..t_len {
                let mut row = scores.row_mut(i);
                for j in 0..t_len {
                    row[j] *= scale;
                    if j > i {
                        row[j] += CAUSAL_MASK;
                    }
                }
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                row.mapv_inplace(|s| (s - max).exp());
                let sum = row.sum();
                row /= sum;
            }
            merged
                .slice_mut(s![.., h * dh..(h + 1) * dh])
                .assign(&scores.dot(&v));
        }
        let mut out = merged.dot(&block.attn_out_w);
        out += &block.attn_out_b;
        out
    }

    fn mlp(&self, block: &Block, a: &Array2<f32>) -> Array2<f32> {
        let mut hidden = a.dot(&block.mlp_in_w);
        hidden += &block.mlp_in_b;
        hidden.mapv_inplace(gelu);
        let mut out = hidden.dot(&block.mlp_out_w);
        out += &block.mlp_out_b;
        out
    }

    fn run(&self, ids: &[u32], capture: bool) -> Result<(Vec<Array2<f32>>, Array2<f32>)> {
        self.check_ids(ids)?;
        let eps = self.config.ln_epsilon;
        let mut x = self.embed(ids);
        let mut states = Vec::new();
        for block in &self.blocks {
            let a = block.ln_1.apply(x.view(), eps);
            x += &self.attention(block, &a);
            let m = block.ln_2.apply(x.view(), eps);
            x += &self.mlp(block, &m);
            if capture {
                states.push(x.clone());
            }
        }
        let logits = self.project(x.view());
        Ok((states, logits))
    }

    /// Forward pass capturing the residual stream after every block.
    pub fn forward_capture(&self, ids: &[u32]) -> Result<ResidualStream> {
        let (states, final_logits) = self.run(ids, true)?;
        Ok(ResidualStream {
            states,
            final_logits,
        })
    }

    /// Forward pass returning only the final logits.
    pub fn forward(&self, ids: &[u32]) -> Result<Array2<f32>> {
        self.run(ids, false).map(|(_, logits)| logits)
    }

    /// Final layernorm followed by `W_U`, applied row-wise to `[n, d]`.
    pub fn project(&self, h: ArrayView2<f32>) -> Array2<f32> {
        let normed = self.final_norm.apply(h, self.config.ln_epsilon);
        normed.dot(&self.unembedding)
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = self.token_embedding.len() + self.position_embedding.len();
        for b in &self.blocks {
            n += b.ln_1.gain.len() * 4
                + b.attn_qkv_w.len()
                + b.attn_qkv_b.len()
                + b.attn_out_w.len()
                + b.attn_out_b.len()
                + b.mlp_in_w.len()
                + b.mlp_in_b.len()
                + b.mlp_out_w.len()
                + b.mlp_out_b.len();
        }
        n += self.final_norm.gain.len() * 2;
        if !self.config.tied_unembedding {
            n += self.unembedding.len();
        }
        n
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }
}

/// Deterministic pseudo-random bundle for desk-scale tests.
///
/// Weights are scaled so that lens distributions are far from uniform
/// and differ across layers; they are not meant to model language.
pub fn make_toy_bundle(seed: u64, config: ModelConfig) -> Result<ModelBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let v = config.vocab_size;
    let m = config.mlp_width();
    let mut matrix = |rows: usize, cols: usize, std: f32| -> Array2<f32> {
        let normal = Normal::new(0.0f32, std).expect("positive std");
        Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
    };
    let token_embedding = matrix(v, d, 1.0);
    let position_embedding = matrix(config.max_positions, d, 0.3);
    let mut blocks = Vec::with_capacity(config.n_layers);
    let fan_d = 1.0 / (d as f32).sqrt();
    let fan_m = 1.0 / (m as f32).sqrt();
    for _ in 0..config.n_layers {
        blocks.push(Block {
            ln_1: LayerNorm {
                gain: Array1::ones(d),
                bias: Array1::zeros(d),
            },
            attn_qkv_w: matrix(d, 3 * d, 1.5 * fan_d),
            attn_qkv_b: Array1::zeros(3 * d),
            attn_out_w: matrix(d, d, fan_d),
            attn_out_b: Array1::zeros(d),
            ln_2: LayerNorm {
                gain: Array1::ones(d),
                bias: Array1::zeros(d),
            },
            mlp_in_w: matrix(d, m, fan_d),
            mlp_in_b: matrix(1, m, 0.1).remove_axis(Axis(0)),
            mlp_out_w: matrix(m, d, fan_m),
            mlp_out_b: Array1::zeros(d),
        });
    }
    let final_norm = LayerNorm {
        gain: Array1::ones(d),
        bias: matrix(1, d, 0.1).remove_axis(Axis(0)),
    };
    let unembedding = if config.tied_unembedding {
        token_embedding.t().to_owned()
    } else {
        matrix(d, v, 2.0 * fan_d)
    };
    Ok(ModelBundle {
        config,
        architecture: ARCH_GPT2.into(),
        token_embedding,
        position_embedding,
        blocks,
        final_norm,
        unembedding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelBundle {
        make_toy_bundle(7, ModelConfig::toy()).unwrap()
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut c = ModelConfig::toy();
        c.n_heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.n_heads = 4;
        c.vocab_size = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_token_state_shapes() {
        let rs = toy().forward_capture(&[5]).unwrap();
        assert_eq!(rs.states.len(), 4);
        for s in &rs.states {
            assert_eq!(s.dim(), (1, 32));
        }
        assert_eq!(rs.final_logits.dim(), (1, 256));
    }

    #[test]
    fn toy_bundle_is_seed_deterministic() {
        let a = make_toy_bundle(7, ModelConfig::toy()).unwrap();
        let b = make_toy_bundle(7, ModelConfig::toy()).unwrap();
        assert_eq!(a.to_store().tensors, b.to_store().tensors);
        let c = make_toy_bundle(8, ModelConfig::toy()).unwrap();
        assert_ne!(a.token_embedding, c.token_embedding);
    }

    #[test]
    fn sixteen_token_forward_is_finite() {
        let ids: Vec<u32> = (0..16).map(|i| (i * 13 % 256) as u32).collect();
        let rs = toy().forward_capture(&ids).unwrap();
        assert!(rs.states.iter().all(|s| s.iter().all(|v| v.is_finite())));
        assert!(rs.final_logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn capture_does_not_change_logits() {
        let m = toy();
        let ids = [1, 2, 3, 200, 17];
        assert_eq!(m.forward_capture(&ids).unwrap().final_logits, m.forward(&ids).unwrap());
    }

    #[test]
    fn rejects_long_and_out_of_range_inputs() {
        let m = toy();
        let long = vec![0u32; 129];
        assert!(matches!(
            m.forward(&long),
            Err(Error::SequenceTooLong { len: 129, max: 128 })
        ));
        assert!(matches!(
            m.forward(&[3, 256]),
            Err(Error::TokenOutOfRange { id: 256, .. })
        ));
    }

    #[test]
    fn tied_bundle_derives_unembedding() {
        let mut c = ModelConfig::toy();
        c.tied_unembedding = true;
        let m = make_toy_bundle(1, c).unwrap();
        assert_eq!(m.unembedding, m.token_embedding.t());
        let back = ModelBundle::from_store(&m.to_store()).unwrap();
        assert_eq!(back, m);
    }
}
