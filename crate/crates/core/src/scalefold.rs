//! Scale folding: moves per-channel activation magnitude into the consuming
//! weight columns and compensates in the preceding RMSNorm gain, so the
//! full-precision forward pass is unchanged.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationStats;
use crate::tinylm::{LayerKind, TinyModel};
use crate::{Error, Result};

pub const FOLD_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScales {
    pub s_attn: Vec<f32>,
    pub s_ffn: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldParams {
    pub blocks: Vec<BlockScales>,
}

/// `s = sqrt(act_scale) + eps`, normalized to unit mean.
pub fn scales_from_activations(act_scales: &[f32]) -> Result<Vec<f32>> {
    if act_scales.is_empty() {
        return Err(Error::Invalid("no activation scales".into()));
    }
    if act_scales.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::Invalid("activation scales must be finite and non-negative".into()));
    }
    let s: Vec<f64> = act_scales.iter().map(|&a| f64::from(a).sqrt() + f64::from(FOLD_EPS)).collect();
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    Ok(s.iter().map(|x| (x / mean) as f32).collect())
}

pub fn compute_block_scales(stats: &CalibrationStats, block: usize) -> Result<BlockScales> {
    let layer = |kind: LayerKind| {
        stats
            .layers
            .get(block * LayerKind::ALL.len() + kind.position())
            .ok_or_else(|| Error::Invalid(format!("no calibration statistics for block {block}")))
    };
    Ok(BlockScales {
        s_attn: scales_from_activations(&layer(LayerKind::QProj)?.act_scales)?,
        s_ffn: scales_from_activations(&layer(LayerKind::GateProj)?.act_scales)?,
    })
}

pub fn compute_fold_scales(stats: &CalibrationStats, n_blocks: usize) -> Result<FoldParams> {
    let blocks = (0..n_blocks).map(|b| compute_block_scales(stats, b)).collect::<Result<_>>()?;
    Ok(FoldParams { blocks })
}

fn check_scales(s: &[f32], d: usize) -> Result<()> {
    if s.len() != d {
        return Err(Error::Shape(format!("{} fold scales for d_model {d}", s.len())));
    }
    if s.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::Invalid("fold scales must be finite and positive".into()));
    }
    Ok(())
}

/// Folds one block in place.
pub fn fold_block(model: &mut TinyModel, block: usize, scales: &BlockScales) -> Result<()> {
    let d = model.spec.d_model;
    check_scales(&scales.s_attn, d)?;
    check_scales(&scales.s_ffn, d)?;
    let blk = model
        .blocks
        .get_mut(block)
        .ok_or_else(|| Error::Invalid(format!("block {block} out of range")))?;
    fold_one(blk, scales)
}

fn fold_one(blk: &mut crate::tinylm::Block, scales: &BlockScales) -> Result<()> {
    for w in [&mut blk.wq, &mut blk.wk, &mut blk.wv] {
        w.scale_columns(&scales.s_attn)?;
    }
    for (g, s) in blk.attn_norm.iter_mut().zip(&scales.s_attn) {
        *g /= s;
    }
    blk.w_gate.scale_columns(&scales.s_ffn)?;
    blk.w_up.scale_columns(&scales.s_ffn)?;
    for (g, s) in blk.ffn_norm.iter_mut().zip(&scales.s_ffn) {
        *g /= s;
    }
    Ok(())
}

/// Folds every block in place.
pub fn fold_model(model: &mut TinyModel, params: &FoldParams) -> Result<()> {
    if params.blocks.len() != model.blocks.len() {
        return Err(Error::Shape(format!(
            "fold parameters for {} blocks, model has {}",
            params.blocks.len(),
            model.blocks.len()
        )));
    }
    let d = model.spec.d_model;
    for s in &params.blocks {
        check_scales(&s.s_attn, d)?;
        check_scales(&s.s_ffn, d)?;
    }
    model
        .blocks
        .par_iter_mut()
        .zip(&params.blocks)
        .try_for_each(|(blk, s)| fold_one(blk, s))
}

impl FoldParams {
    /// Element-wise reciprocal; folding with it undoes a fold.
    pub fn inverse(&self) -> FoldParams {
        let inv = |v: &Vec<f32>| v.iter().map(|x| 1.0 / x).collect();
        FoldParams {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockScales {
                    s_attn: inv(&b.s_attn),
                    s_ffn: inv(&b.s_ffn),
                })
                .collect(),
        }
    }

    /// Flattened `[attn_0, ffn_0, attn_1, ffn_1, ...]`.
    pub fn flatten(&self) -> Vec<Vec<f32>> {
        self.blocks
            .iter()
            .flat_map(|b| [b.s_attn.clone(), b.s_ffn.clone()])
            .collect()
    }
}
