//! Activation-scale calibration and the 11-dimensional layer embedding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tinylm::{LayerKind, LayerRecord, TinyModel};
use crate::{Error, Result};

pub const EMBEDDING_DIM: usize = 11;
pub const STANDARDIZE_EPS: f64 = 1e-8;

/// Activation statistics of one quantizable layer's input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerActStats {
    pub name: String,
    /// Per input channel, max |activation| observed.
    pub act_scales: Vec<f32>,
    pub mean_act_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub layers: Vec<LayerActStats>,
    pub sequences_seen: usize,
}

impl CalibrationStats {
    fn from_scales(model: &TinyModel, scales: Vec<Vec<f32>>, sequences_seen: usize) -> Self {
        let layers = scales
            .into_iter()
            .enumerate()
            .map(|(i, act_scales)| {
                let (b, k) = model.locate(i).expect("index in range");
                LayerActStats {
                    name: TinyModel::layer_name(b, k),
                    mean_act_scale: mean(&act_scales),
                    act_scales,
                }
            })
            .collect();
        Self { layers, sequences_seen }
    }

    /// Element-wise max of two statistics gathered on the same model.
    pub fn merge(&self, other: &CalibrationStats) -> Result<CalibrationStats> {
        if self.layers.len() != other.layers.len()
            || self
                .layers
                .iter()
                .zip(&other.layers)
                .any(|(a, b)| a.act_scales.len() != b.act_scales.len())
        {
            return Err(Error::Shape("calibration statistics of different models".into()));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                let act_scales: Vec<f32> = a.act_scales.iter().zip(&b.act_scales).map(|(x, y)| x.max(*y)).collect();
                LayerActStats {
                    name: a.name.clone(),
                    mean_act_scale: mean(&act_scales),
                    act_scales,
                }
            })
            .collect();
        Ok(CalibrationStats {
            layers,
            sequences_seen: self.sequences_seen + other.sequences_seen,
        })
    }
}

fn mean(v: &[f32]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64
    }
}

fn sequence_scales(model: &TinyModel, seq: &[u32]) -> Result<Vec<Vec<f32>>> {
    let mut scales: Vec<Vec<f32>> = model.layer_records().iter().map(|r| vec![0.0; r.in_features]).collect();
    model.forward_probed(seq, &mut |layer, _rows, x| {
        let s = &mut scales[layer];
        for row in x.chunks(s.len()) {
            for (m, v) in s.iter_mut().zip(row) {
                *m = m.max(v.abs());
            }
        }
    })?;
    Ok(scales)
}

/// Max |input activation| per channel for every quantizable layer, over the
/// first `n_sequences` calibration sequences (fewer if the split is shorter).
pub fn collect_act_scales(model: &TinyModel, calibration: &[Vec<u32>], n_sequences: usize) -> Result<CalibrationStats> {
    if calibration.is_empty() {
        return Err(Error::EmptyCorpus("calibration split"));
    }
    if n_sequences == 0 {
        return Err(Error::Invalid("n_sequences must be at least 1".into()));
    }
    let used = &calibration[..n_sequences.min(calibration.len())];
    let per_seq: Vec<Vec<Vec<f32>>> = used
        .par_iter()
        .map(|s| sequence_scales(model, s))
        .collect::<Result<_>>()?;
    let mut acc: Vec<Vec<f32>> = model.layer_records().iter().map(|r| vec![0.0; r.in_features]).collect();
    for seq in per_seq {
        for (a, s) in acc.iter_mut().zip(seq) {
            for (x, y) in a.iter_mut().zip(s) {
                *x = x.max(y);
            }
        }
    }
    Ok(CalibrationStats::from_scales(model, acc, used.len()))
}

/// Decision context of the layer being embedded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingContext {
    pub layer_index: usize,
    pub n_layers: usize,
    pub prev_bits: Option<u8>,
    pub running_avg_bits: f64,
}

impl EmbeddingContext {
    pub fn first(n_layers: usize) -> Self {
        Self {
            layer_index: 0,
            n_layers,
            prev_bits: None,
            running_avg_bits: 0.0,
        }
    }

    /// Records `bits` for the current layer and moves to the next one (the
    /// index stays on the last layer once the stack is exhausted).
    pub fn advance(&mut self, bits: u8) {
        let k = (self.layer_index + 1) as f64;
        self.running_avg_bits = ((k - 1.0) / k) * self.running_avg_bits + f64::from(bits) / k;
        self.prev_bits = Some(bits);
        if self.layer_index + 1 < self.n_layers {
            self.layer_index += 1;
        }
    }
}

pub type LayerEmbedding = [f64; EMBEDDING_DIM];

pub fn kind_code(kind: LayerKind) -> f64 {
    match kind {
        LayerKind::QProj | LayerKind::KProj | LayerKind::VProj => 0.0,
        LayerKind::OProj => 0.25,
        LayerKind::GateProj => 0.5,
        LayerKind::UpProj => 0.6,
        LayerKind::DownProj => 0.75,
    }
}

/// 0.0 for the bottom tenth of the stack, 1.0 for the top tenth, else 0.5.
pub fn position_category(i: usize, n: usize) -> f64 {
    let (i, n) = (i as f64, n as f64);
    if i < 0.1 * n {
        0.0
    } else if i >= 0.9 * n {
        1.0
    } else {
        0.5
    }
}

/// Static (weight and activation) part of the embedding: dims 1 to 9.
pub fn static_features(layer: &LayerRecord, stats: &LayerActStats, layer_index: usize, n_layers: usize) -> [f64; 9] {
    let w = &layer.weights.data;
    let n = w.len().max(1) as f64;
    let mean_w = w.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let var = w.iter().map(|&x| (f64::from(x) - mean_w).powi(2)).sum::<f64>() / n;
    let mean_abs = w.iter().map(|&x| f64::from(x).abs()).sum::<f64>() / n;
    let max_act = stats.act_scales.iter().cloned().fold(0.0f32, f32::max) as f64;
    let depth = if n_layers > 1 {
        layer_index as f64 / (n_layers - 1) as f64
    } else {
        0.0
    };
    [
        depth,
        (layer.in_features as f64 / 16.0).log2(),
        (layer.out_features as f64 / 16.0).log2(),
        (var.sqrt() * 10.0).min(1.0),
        (mean_abs * 10.0).min(1.0),
        kind_code(layer.kind),
        position_category(layer_index, n_layers),
        (stats.mean_act_scale * 100.0).min(1.0),
        (max_act * 1000.0).min(1.0),
    ]
}

pub fn context_features(ctx: &EmbeddingContext) -> [f64; 2] {
    [
        ctx.prev_bits.map_or(0.0, |b| f64::from(b) / 8.0),
        ctx.running_avg_bits / 8.0,
    ]
}

pub fn build_embedding(layer: &LayerRecord, stats: &LayerActStats, ctx: &EmbeddingContext) -> Result<LayerEmbedding> {
    if ctx.layer_index >= ctx.n_layers {
        return Err(Error::Invalid(format!(
            "layer index {} out of {}",
            ctx.layer_index, ctx.n_layers
        )));
    }
    if stats.act_scales.len() != layer.in_features {
        return Err(Error::Shape(format!(
            "{} activation scales for {} input features",
            stats.act_scales.len(),
            layer.in_features
        )));
    }
    let s = static_features(layer, stats, ctx.layer_index, ctx.n_layers);
    let c = context_features(ctx);
    let mut e = [0.0; EMBEDDING_DIM];
    e[..9].copy_from_slice(&s);
    e[9..].copy_from_slice(&c);
    Ok(e)
}

/// Per-dimension mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Invalid(format!(
                "standardization needs at least 2 embeddings, got {}",
                rows.len()
            )));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("embeddings of unequal length".into()));
        }
        let n = rows.len() as f64;
        let mu: Vec<f64> = (0..dim).map(|d| rows.iter().map(|r| r[d]).sum::<f64>() / n).collect();
        let sigma = (0..dim)
            .map(|d| (rows.iter().map(|r| (r[d] - mu[d]).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        Ok(Self { mu, sigma })
    }

    pub fn apply(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mu.len() {
            return Err(Error::Shape(format!("embedding of length {} for a {}-dim standardizer", row.len(), self.mu.len())));
        }
        Ok(row
            .iter()
            .zip(self.mu.iter().zip(&self.sigma))
            .map(|(x, (m, s))| (x - m) / (s + STANDARDIZE_EPS))
            .collect())
    }
}

/// Standardizes full embeddings across layers; returns the standardized
/// rows together with the fitted statistics.
pub fn standardize(embeddings: &[LayerEmbedding]) -> Result<(Vec<Vec<f64>>, Standardizer)> {
    let rows: Vec<Vec<f64>> = embeddings.iter().map(|e| e.to_vec()).collect();
    let st = Standardizer::fit(&rows)?;
    let out = rows.iter().map(|r| st.apply(r)).collect::<Result<_>>()?;
    Ok((out, st))
}

/// Per-model features used to build states: static features of every layer
/// standardized across layers. Context features are appended raw when a
/// state is assembled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFeatures {
    pub names: Vec<String>,
    pub raw: Vec<Vec<f64>>,
    pub standardized: Vec<Vec<f64>>,
    pub standardizer: Standardizer,
}

impl LayerFeatures {
    /// Features of `layers` (indices into the model), positioned by their
    /// order within `layers`.
    pub fn for_layers(model: &TinyModel, stats: &CalibrationStats, layers: &[usize]) -> Result<Self> {
        if stats.layers.len() != model.n_layers() {
            return Err(Error::Shape("calibration statistics do not match the model".into()));
        }
        let n = layers.len();
        let mut names = Vec::with_capacity(n);
        let mut raw = Vec::with_capacity(n);
        for (pos, &idx) in layers.iter().enumerate() {
            let rec = model.layer_record(idx)?;
            raw.push(static_features(&rec, &stats.layers[idx], pos, n).to_vec());
            names.push(rec.name);
        }
        let standardizer = Standardizer::fit(&raw)?;
        let standardized = raw.iter().map(|r| standardizer.apply(r)).collect::<Result<_>>()?;
        Ok(Self {
            names,
            raw,
            standardized,
            standardizer,
        })
    }

    /// Standardizes `raw` static features with externally supplied
    /// statistics, e.g. those of the model a policy was trained on.
    pub fn with_standardizer(names: Vec<String>, raw: Vec<Vec<f64>>, standardizer: Standardizer) -> Result<Self> {
        if names.len() != raw.len() {
            return Err(Error::Shape(format!("{} names for {} feature rows", names.len(), raw.len())));
        }
        let standardized = raw.iter().map(|r| standardizer.apply(r)).collect::<Result<_>>()?;
        Ok(Self {
            names,
            raw,
            standardized,
            standardizer,
        })
    }

    pub fn for_model(model: &TinyModel, stats: &CalibrationStats) -> Result<Self> {
        let all: Vec<usize> = (0..model.n_layers()).collect();
        Self::for_layers(model, stats, &all)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Policy input for position `i` under `ctx`.
    pub fn state(&self, i: usize, ctx: &EmbeddingContext) -> Vec<f64> {
        let mut s = self.standardized[i].clone();
        s.extend(context_features(ctx));
        s
    }
}

/// One layer of the exported embedding table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub layer_name: String,
    pub kind: LayerKind,
    pub block: usize,
    /// Standardized static dims followed by the context dims of an episode
    /// start (no previous decision).
    pub dims: Vec<f64>,
}

/// Calibration artifact: activation statistics plus the standardized
/// embedding table. `mu`/`sigma` cover all 11 dims; the context dims enter
/// unscaled and carry identity statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingExport {
    pub layers: Vec<EmbeddingRecord>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub stats: CalibrationStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl EmbeddingExport {
    pub fn new(model: &TinyModel, stats: &CalibrationStats, config_hash: Option<String>) -> Result<Self> {
        let features = LayerFeatures::for_model(model, stats)?;
        let start = EmbeddingContext::first(features.len());
        let layers = (0..features.len())
            .map(|i| {
                let rec = model.layer_record(i)?;
                Ok(EmbeddingRecord {
                    layer_name: rec.name,
                    kind: rec.kind,
                    block: rec.block_index,
                    dims: features.state(i, &start),
                })
            })
            .collect::<Result<_>>()?;
        let mut mu = features.standardizer.mu.clone();
        let mut sigma = features.standardizer.sigma.clone();
        mu.extend([0.0; EMBEDDING_DIM - 9]);
        sigma.extend([1.0; EMBEDDING_DIM - 9]);
        Ok(Self {
            layers,
            mu,
            sigma,
            stats: stats.clone(),
            config_hash,
        })
    }
}
