//! Quality oracles (exact perplexity and a reconstruction-error proxy) and
//! exhaustive allocation search.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::quantcore::{apply_assignments, mean_bits, reconstruction_error, BitPalette};
use crate::rlenv::{composite_reward, RewardConfig};
use crate::scalefold::{fold_model, FoldParams};
use crate::tinylm::{perplexity, TinyModel};
use crate::{Error, Result};

pub const SEARCH_BOUND: u128 = 1_000_000;
pub const TABLE_BOUND: u128 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    ExactPpl,
    Proxy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub ppl: f64,
    pub per_layer_errors: Vec<f64>,
    pub kind: OracleKind,
    pub wall_ms: f64,
}

/// `ppl_base * exp(kappa * mean(errors))`.
pub fn proxy_ppl(ppl_base: f64, errors: &[f64], kappa: f64) -> f64 {
    if errors.is_empty() {
        return ppl_base;
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    ppl_base * (kappa * mean).exp()
}

/// Scores bit assignments for a fixed set of layers of one model.
///
/// Layers outside `layers` stay in full precision. Assignments are given in
/// the order of `layers`.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub kind: OracleKind,
    model: TinyModel,
    evaluation: Vec<Vec<u32>>,
    fold: Option<FoldParams>,
    layers: Vec<usize>,
    group_size: usize,
    kappa: f64,
    ppl_base: f64,
    /// Per selected layer, per palette entry: relative reconstruction error.
    error_table: Vec<Vec<f64>>,
    palette: BitPalette,
}

impl Oracle {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: OracleKind,
        model: TinyModel,
        evaluation: Vec<Vec<u32>>,
        fold: Option<FoldParams>,
        layers: Vec<usize>,
        palette: BitPalette,
        group_size: usize,
        kappa: f64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("oracle needs at least one layer".into()));
        }
        if let Some(&bad) = layers.iter().find(|&&l| l >= model.n_layers()) {
            return Err(Error::Invalid(format!("layer {bad} out of {}", model.n_layers())));
        }
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(Error::Config("kappa must be finite and non-negative".into()));
        }
        let ppl_base = perplexity(&model, &evaluation)?;
        let mut folded = model.clone();
        if let Some(fp) = &fold {
            fold_model(&mut folded, fp)?;
        }
        let error_table = layers
            .par_iter()
            .map(|&l| {
                let w = folded.layer_weight(l)?;
                palette
                    .bits()
                    .iter()
                    .map(|&b| reconstruction_error(w, b, group_size))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            kind,
            model,
            evaluation,
            fold,
            layers,
            group_size,
            kappa,
            ppl_base,
            error_table,
            palette,
        })
    }

    pub fn ppl_base(&self) -> f64 {
        self.ppl_base
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn palette(&self) -> &BitPalette {
        &self.palette
    }

    pub fn model(&self) -> &TinyModel {
        &self.model
    }

    pub fn fold(&self) -> Option<&FoldParams> {
        self.fold.as_ref()
    }

    fn check(&self, bits: &[u8]) -> Result<()> {
        if bits.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} bit-widths for {} layers",
                bits.len(),
                self.layers.len()
            )));
        }
        if let Some(b) = bits.iter().find(|&&b| !self.palette.contains(b)) {
            return Err(Error::Invalid(format!("bit-width {b} is not in the palette")));
        }
        Ok(())
    }

    fn table_errors(&self, bits: &[u8]) -> Vec<f64> {
        bits.iter()
            .zip(&self.error_table)
            .map(|(b, row)| row[self.palette.bits().iter().position(|p| p == b).expect("checked")])
            .collect()
    }

    /// Exact perplexity of the quantized model on the evaluation split.
    pub fn exact(&self, bits: &[u8]) -> Result<OracleResult> {
        self.check(bits)?;
        let t = Instant::now();
        let assignments: Vec<(usize, u8)> = self.layers.iter().copied().zip(bits.iter().copied()).collect();
        let (q, report) = apply_assignments(&self.model, &assignments, self.fold.as_ref(), self.group_size)?;
        let ppl = perplexity(&q, &self.evaluation)?;
        Ok(OracleResult {
            ppl,
            per_layer_errors: report.iter().map(|e| e.rel_frob_error).collect(),
            kind: OracleKind::ExactPpl,
            wall_ms: t.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn proxy(&self, bits: &[u8]) -> Result<OracleResult> {
        self.check(bits)?;
        let t = Instant::now();
        let errors = self.table_errors(bits);
        Ok(OracleResult {
            ppl: proxy_ppl(self.ppl_base, &errors, self.kappa),
            per_layer_errors: errors,
            kind: OracleKind::Proxy,
            wall_ms: t.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Evaluates with the configured oracle kind.
    pub fn evaluate(&self, bits: &[u8]) -> Result<OracleResult> {
        match self.kind {
            OracleKind::ExactPpl => self.exact(bits),
            OracleKind::Proxy => self.proxy(bits),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub bits: Vec<u8>,
    pub avg_bits: f64,
    pub ppl: f64,
    pub r_q: f64,
    pub r_b: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: SearchRow,
    pub evaluated: u64,
    /// Every candidate in enumeration order, kept for small searches.
    pub table: Option<Vec<SearchRow>>,
}

/// Allocation with enumeration index `idx`: an odometer over the palette
/// with the last layer as the least significant digit.
pub fn allocation_at(idx: u64, n_layers: usize, palette: &BitPalette) -> Vec<u8> {
    let p = palette.len() as u64;
    let mut bits = vec![0u8; n_layers];
    let mut rest = idx;
    for slot in bits.iter_mut().rev() {
        *slot = palette.bits()[(rest % p) as usize];
        rest /= p;
    }
    bits
}

fn score(oracle: &Oracle, bits: Vec<u8>, reward: &RewardConfig) -> Result<SearchRow> {
    let res = oracle.evaluate(&bits)?;
    let avg = mean_bits(&bits);
    let (r_q, r_b, r) = composite_reward(res.ppl, oracle.ppl_base(), avg, reward)?;
    Ok(SearchRow {
        bits,
        avg_bits: avg,
        ppl: res.ppl,
        r_q,
        r_b,
        reward: r,
    })
}

/// Enumerates every allocation of the oracle's layers and returns the one
/// with the highest composite reward; ties go to the lexicographically
/// smallest bit vector.
pub fn brute_force_search(oracle: &Oracle, reward: &RewardConfig) -> Result<SearchResult> {
    let l = oracle.layers().len();
    let palette = oracle.palette().clone();
    let count = (palette.len() as u128).checked_pow(l as u32).unwrap_or(u128::MAX);
    if count > SEARCH_BOUND {
        return Err(Error::SearchTooLarge {
            count,
            bound: SEARCH_BOUND,
        });
    }
    let n = count as u64;
    let keep = count <= TABLE_BOUND;
    let chunk = 4096u64;
    let n_chunks = n.div_ceil(chunk);
    let parts: Vec<(SearchRow, Vec<SearchRow>)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut best: Option<SearchRow> = None;
            let mut rows = Vec::new();
            for idx in c * chunk..((c + 1) * chunk).min(n) {
                let row = score(oracle, allocation_at(idx, l, &palette), reward)?;
                if best.as_ref().is_none_or(|b| row.reward > b.reward) {
                    best = Some(row.clone());
                }
                if keep {
                    rows.push(row);
                }
            }
            Ok((best.expect("chunk is non-empty"), rows))
        })
        .collect::<Result<_>>()?;
    // chunks are in index order, so strict improvement keeps the earliest
    let mut best: Option<SearchRow> = None;
    let mut table = keep.then(Vec::new);
    for (b, rows) in parts {
        if best.as_ref().is_none_or(|cur| b.reward > cur.reward) {
            best = Some(b);
        }
        if let Some(t) = table.as_mut() {
            t.extend(rows);
        }
    }
    Ok(SearchResult {
        best: best.expect("at least one candidate"),
        evaluated: n,
        table,
    })
}

/// Writes `bits...,avg_bits,ppl,r_q,r_b,R` rows.
pub fn write_search_csv(path: &Path, rows: &[SearchRow]) -> Result<()> {
    let mut out = Vec::new();
    let l = rows.first().map_or(0, |r| r.bits.len());
    let mut header: Vec<String> = (0..l).map(|i| format!("b{i}")).collect();
    header.extend(["avg_bits", "ppl", "r_q", "r_b", "R"].map(String::from));
    writeln!(out, "{}", header.join(",")).expect("write to vec");
    for r in rows {
        let bits: Vec<String> = r.bits.iter().map(|b| b.to_string()).collect();
        writeln!(out, "{},{},{},{},{},{}", bits.join(","), r.avg_bits, r.ppl, r.r_q, r.r_b, r.reward).expect("write to vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
