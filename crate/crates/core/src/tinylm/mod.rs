//! A toy decoder-only transformer: learned additive positions, RMSNorm,
//! causal multi-head attention and a SiLU-gated feed-forward network.
//!
//! Each block contributes seven quantizable linear layers, enumerated in the
//! fixed order q, k, v, o, gate, up, down. Token/position embeddings, norm
//! gains and the LM head are never quantized.

mod corpus;
mod forward;
mod io;

pub use corpus::{load_sequences, save_sequences, Corpus};
pub use forward::{perplexity, perplexity_from_logits, ActivationProbe};
pub use io::{load_model, read_model, save_model, write_model};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::substream;
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const RMSNORM_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TinyModelSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Fraction of FFN input channels that carry a synthetic scale outlier.
    pub outlier_fraction: f32,
    /// Magnitude of the synthetic outlier.
    pub outlier_boost: f32,
}

impl Default for TinyModelSpec {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            d_ff: 128,
            max_seq_len: 128,
            seed: 0,
            outlier_fraction: 0.01,
            outlier_boost: 32.0,
        }
    }
}

impl TinyModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_blocks == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return bad("all dimensions must be at least 1");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 1]");
        }
        if !(self.outlier_boost.is_finite() && self.outlier_boost > 0.0) {
            return bad("outlier_boost must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of quantizable linear layers.
    pub fn n_layers(&self) -> usize {
        LayerKind::ALL.len() * self.n_blocks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    QProj,
    KProj,
    VProj,
    OProj,
    GateProj,
    UpProj,
    DownProj,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::QProj,
        LayerKind::KProj,
        LayerKind::VProj,
        LayerKind::OProj,
        LayerKind::GateProj,
        LayerKind::UpProj,
        LayerKind::DownProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::QProj => "q_proj",
            LayerKind::KProj => "k_proj",
            LayerKind::VProj => "v_proj",
            LayerKind::OProj => "o_proj",
            LayerKind::GateProj => "gate_proj",
            LayerKind::UpProj => "up_proj",
            LayerKind::DownProj => "down_proj",
        }
    }

    /// Tensor name suffix used in GGUF exports.
    pub fn gguf_name(self) -> &'static str {
        match self {
            LayerKind::QProj => "attn_q",
            LayerKind::KProj => "attn_k",
            LayerKind::VProj => "attn_v",
            LayerKind::OProj => "attn_output",
            LayerKind::GateProj => "ffn_gate",
            LayerKind::UpProj => "ffn_up",
            LayerKind::DownProj => "ffn_down",
        }
    }

    pub fn position(self) -> usize {
        LayerKind::ALL.iter().position(|&k| k == self).expect("kind listed")
    }
}

/// One quantizable linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    pub block_index: usize,
    pub in_features: usize,
    pub out_features: usize,
    pub weights: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f32>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl Block {
    pub fn weight(&self, kind: LayerKind) -> &Matrix {
        match kind {
            LayerKind::QProj => &self.wq,
            LayerKind::KProj => &self.wk,
            LayerKind::VProj => &self.wv,
            LayerKind::OProj => &self.wo,
            LayerKind::GateProj => &self.w_gate,
            LayerKind::UpProj => &self.w_up,
            LayerKind::DownProj => &self.w_down,
        }
    }

    pub fn weight_mut(&mut self, kind: LayerKind) -> &mut Matrix {
        match kind {
            LayerKind::QProj => &mut self.wq,
            LayerKind::KProj => &mut self.wk,
            LayerKind::VProj => &mut self.wv,
            LayerKind::OProj => &mut self.wo,
            LayerKind::GateProj => &mut self.w_gate,
            LayerKind::UpProj => &mut self.w_up,
            LayerKind::DownProj => &mut self.w_down,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    pub spec: TinyModelSpec,
    /// `vocab_size x d_model`
    pub tok_embedding: Matrix,
    /// `max_seq_len x d_model`, added to token embeddings.
    pub pos_embedding: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f32>,
    /// `vocab_size x d_model`
    pub lm_head: Matrix,
}

impl TinyModel {
    pub fn n_layers(&self) -> usize {
        self.blocks.len() * LayerKind::ALL.len()
    }

    /// (block, kind) of the quantizable layer with flat index `idx`.
    pub fn locate(&self, idx: usize) -> Result<(usize, LayerKind)> {
        if idx >= self.n_layers() {
            return Err(Error::Shape(format!("layer index {idx} out of {}", self.n_layers())));
        }
        Ok((idx / 7, LayerKind::ALL[idx % 7]))
    }

    pub fn layer_weight(&self, idx: usize) -> Result<&Matrix> {
        let (b, k) = self.locate(idx)?;
        Ok(self.blocks[b].weight(k))
    }

    pub fn layer_weight_mut(&mut self, idx: usize) -> Result<&mut Matrix> {
        let (b, k) = self.locate(idx)?;
        Ok(self.blocks[b].weight_mut(k))
    }

    pub fn layer_name(block: usize, kind: LayerKind) -> String {
        format!("blocks.{block}.{}", kind.name())
    }

    pub fn layer_record(&self, idx: usize) -> Result<LayerRecord> {
        let (b, kind) = self.locate(idx)?;
        let w = self.blocks[b].weight(kind);
        Ok(LayerRecord {
            name: Self::layer_name(b, kind),
            kind,
            block_index: b,
            in_features: w.cols,
            out_features: w.rows,
            weights: w.clone(),
        })
    }

    /// All quantizable layers in canonical order.
    pub fn layer_records(&self) -> Vec<LayerRecord> {
        (0..self.n_layers())
            .map(|i| self.layer_record(i).expect("index in range"))
            .collect()
    }

    /// Number of parameters outside the quantizable set (embeddings, norms,
    /// LM head).
    pub fn unquantized_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.spec.d_model;
        let mut out = vec![
            ("token_embd.weight".to_string(), vec![d, self.spec.vocab_size]),
            ("pos_embd.weight".to_string(), vec![d, self.spec.max_seq_len]),
        ];
        for b in 0..self.blocks.len() {
            out.push((format!("blk.{b}.attn_norm.weight"), vec![d]));
            out.push((format!("blk.{b}.ffn_norm.weight"), vec![d]));
        }
        out.push(("output_norm.weight".to_string(), vec![d]));
        out.push(("output.weight".to_string(), vec![d, self.spec.vocab_size]));
        out
    }

    /// Channels of the FFN input that received the synthetic outlier, in
    /// ascending order. Deterministic from the spec.
    pub fn outlier_channels(spec: &TinyModelSpec) -> Vec<usize> {
        if spec.outlier_fraction <= 0.0 {
            return Vec::new();
        }
        let count = ((spec.outlier_fraction * spec.d_model as f32).round() as usize).clamp(1, spec.d_model);
        let mut rng = substream(spec.seed, "model.outliers");
        let mut chans = rand::seq::index::sample(&mut rng, spec.d_model, count).into_vec();
        chans.sort_unstable();
        chans
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut crate::rng::Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    Matrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| dist.sample(rng) as f32).collect(),
    }
}

/// Deterministically builds a model from its spec.
///
/// Linear weights are Gaussian with std `0.02 * sqrt(2 / fan_in)`;
/// embeddings use std 0.02. Norm gains start at one. For the selected
/// outlier channels `c`, every block multiplies column `c` of the gate and
/// up projections by `outlier_boost` and divides the FFN norm gain at `c` by
/// the same factor, so the FFN computes the same function while its weights
/// carry a per-channel magnitude disparity and the activation scale of that
/// channel shrinks by the same ratio.
pub fn generate_model(spec: &TinyModelSpec) -> Result<TinyModel> {
    spec.validate()?;
    let d = spec.d_model;
    let ff = spec.d_ff;
    let mut rng = substream(spec.seed, "model");
    let lin_std = |fan_in: usize| 0.02 * (2.0 / fan_in as f64).sqrt();

    let tok_embedding = gaussian_matrix(spec.vocab_size, d, 0.02, &mut rng);
    let pos_embedding = gaussian_matrix(spec.max_seq_len, d, 0.02, &mut rng);
    let outliers = TinyModel::outlier_channels(spec);
    let mut blocks = Vec::with_capacity(spec.n_blocks);
    for _ in 0..spec.n_blocks {
        let wq = gaussian_matrix(d, d, lin_std(d), &mut rng);
        let wk = gaussian_matrix(d, d, lin_std(d), &mut rng);
        let wv = gaussian_matrix(d, d, lin_std(d), &mut rng);
        let wo = gaussian_matrix(d, d, lin_std(d), &mut rng);
        let mut w_gate = gaussian_matrix(ff, d, lin_std(d), &mut rng);
        let mut w_up = gaussian_matrix(ff, d, lin_std(d), &mut rng);
        let w_down = gaussian_matrix(d, ff, lin_std(ff), &mut rng);
        let mut ffn_norm = vec![1.0f32; d];
        if !outliers.is_empty() {
            let mut col_scale = vec![1.0f32; d];
            for &c in &outliers {
                col_scale[c] = spec.outlier_boost;
                ffn_norm[c] /= spec.outlier_boost;
            }
            w_gate.scale_columns(&col_scale)?;
            w_up.scale_columns(&col_scale)?;
        }
        blocks.push(Block {
            attn_norm: vec![1.0; d],
            wq,
            wk,
            wv,
            wo,
            ffn_norm,
            w_gate,
            w_up,
            w_down,
        });
    }
    let lm_head = gaussian_matrix(spec.vocab_size, d, lin_std(d), &mut rng);
    Ok(TinyModel {
        spec: *spec,
        tok_embedding,
        pos_embedding,
        blocks,
        final_norm: vec![1.0; d],
        lm_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_generation() {
        let spec = TinyModelSpec { seed: 11, ..Default::default() };
        let a = generate_model(&spec).unwrap();
        let b = generate_model(&spec).unwrap();
        assert_eq!(write_model(&a), write_model(&b));
        let c = generate_model(&TinyModelSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn seven_layers_per_block() {
        let spec = TinyModelSpec { n_blocks: 2, ..Default::default() };
        let m = generate_model(&spec).unwrap();
        let recs = m.layer_records();
        assert_eq!(recs.len(), 14);
        assert_eq!(spec.n_layers(), 14);
        assert_eq!(recs[3].name, "blocks.0.o_proj");
        assert_eq!(recs[11].kind, LayerKind::GateProj);
        assert_eq!(recs[11].block_index, 1);
        let gate = &recs[4];
        assert_eq!((gate.out_features, gate.in_features), (spec.d_ff, spec.d_model));
        let down = &recs[6];
        assert_eq!((down.out_features, down.in_features), (spec.d_model, spec.d_ff));
    }

    fn gate_column_ratio(m: &TinyModel) -> f64 {
        let mut norms = m.blocks[0].w_gate.column_norms();
        let max = norms.iter().cloned().fold(0.0, f64::max);
        norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        max / norms[norms.len() / 2]
    }

    #[test]
    fn outlier_fraction_controls_gate_column_spread() {
        let clean = generate_model(&TinyModelSpec { outlier_fraction: 0.0, seed: 3, ..Default::default() }).unwrap();
        assert!(gate_column_ratio(&clean) < 5.0);
        let noisy = generate_model(&TinyModelSpec { seed: 3, ..Default::default() }).unwrap();
        assert!(gate_column_ratio(&noisy) > 16.0);
        assert_eq!(TinyModel::outlier_channels(&noisy.spec).len(), 1);
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            TinyModelSpec { d_model: 30, n_heads: 4, ..Default::default() },
            TinyModelSpec { vocab_size: 1, ..Default::default() },
            TinyModelSpec { n_blocks: 0, ..Default::default() },
        ] {
            assert!(matches!(generate_model(&spec), Err(Error::InvalidSpec(_))));
        }
    }
}
