//! Per-group asymmetric affine weight quantization.
//!
//! Each output row is split into contiguous groups of `group_size` input
//! channels (the last group may be short). A group with range `[lo, hi]`
//! (widened to include zero) gets scale `s = max((hi - lo) / (2^b - 1), 1e-8)`,
//! zero-point `z = clamp(round(-lo / s), 0, 2^b - 1)` and codes
//! `clamp(round(w / s + z), 0, 2^b - 1)`. Dequantization is `s * (code - z)`.
//! Rounding is half away from zero throughout.

use serde::{Deserialize, Serialize};

use crate::ggufx::GgufTypeMap;
use crate::scalefold::{fold_model, FoldParams};
use crate::tensor::{relative_frobenius_error, Matrix};
use crate::tinylm::{TinyModel, TinyModelSpec};
use crate::{Error, Result};

pub const DEFAULT_GROUP_SIZE: usize = 128;
pub const SCALE_FLOOR: f32 = 1e-8;

/// Allowed bit-widths, strictly ascending, each in `[2, 8]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct BitPalette(Vec<u8>);

impl BitPalette {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Config("bit palette is empty".into()));
        }
        if bits.iter().any(|b| !(2..=8).contains(b)) {
            return Err(Error::Config(format!("bit palette {bits:?} has widths outside [2, 8]")));
        }
        if bits.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("bit palette {bits:?} is not strictly ascending")));
        }
        Ok(Self(bits))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn min(&self) -> u8 {
        self.0[0]
    }

    pub fn max(&self) -> u8 {
        self.0[self.0.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, b: u8) -> bool {
        self.0.contains(&b)
    }
}

impl Default for BitPalette {
    fn default() -> Self {
        Self(vec![3, 4, 5])
    }
}

impl TryFrom<Vec<u8>> for BitPalette {
    type Error = Error;
    fn try_from(v: Vec<u8>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BitPalette> for Vec<u8> {
    fn from(p: BitPalette) -> Self {
        p.0
    }
}

/// Bit-packed codes, least significant bit first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedCodes {
    pub bits: u8,
    pub len: usize,
    pub bytes: Vec<u8>,
}

impl PackedCodes {
    pub fn pack(codes: &[u8], bits: u8) -> Self {
        let nbits = codes.len() * bits as usize;
        let mut bytes = vec![0u8; nbits.div_ceil(8)];
        for (i, &c) in codes.iter().enumerate() {
            let mut pos = i * bits as usize;
            for k in 0..bits {
                if (c >> k) & 1 == 1 {
                    bytes[pos / 8] |= 1 << (pos % 8);
                }
                pos += 1;
            }
        }
        Self {
            bits,
            len: codes.len(),
            bytes,
        }
    }

    pub fn get(&self, i: usize) -> u8 {
        let mut pos = i * self.bits as usize;
        let mut c = 0u8;
        for k in 0..self.bits {
            if (self.bytes[pos / 8] >> (pos % 8)) & 1 == 1 {
                c |= 1 << k;
            }
            pos += 1;
        }
        c
    }

    pub fn unpack(&self) -> Vec<u8> {
        (0..self.len).map(|i| self.get(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub bits: u8,
    pub group_size: usize,
    pub rows: usize,
    pub cols: usize,
    /// One per group, row-major over (row, group).
    pub scales: Vec<f32>,
    pub zero_points: Vec<u8>,
    pub codes: PackedCodes,
}

impl QuantizedLayer {
    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }
}

/// Quantized form of one group: `(scale, zero_point, codes)`.
pub fn quantize_group(values: &[f32], bits: u8) -> (f32, u8, Vec<u8>) {
    let qmax = ((1u32 << bits) - 1) as f32;
    let (mut lo, mut hi) = (0.0f32, 0.0f32);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let scale = ((hi - lo) / qmax).max(SCALE_FLOOR);
    // Code decisions use the stored f32 scale but f64 arithmetic, so every
    // code is the true nearest grid point.
    let (s, q) = (f64::from(scale), f64::from(qmax));
    let zero = (-f64::from(lo) / s).round().clamp(0.0, q);
    let codes = values
        .iter()
        .map(|&v| (f64::from(v) / s + zero).round().clamp(0.0, q) as u8)
        .collect();
    (scale, zero as u8, codes)
}

pub fn dequantize_value(scale: f32, zero: u8, code: u8) -> f32 {
    scale * (i32::from(code) - i32::from(zero)) as f32
}

fn check_bits(bits: u8) -> Result<()> {
    if (2..=8).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("bit-width {bits} outside [2, 8]")))
    }
}

pub fn quantize_layer(w: &Matrix, bits: u8, group_size: usize) -> Result<QuantizedLayer> {
    check_bits(bits)?;
    if group_size == 0 {
        return Err(Error::Invalid("group size must be at least 1".into()));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("weights to quantize".into()));
    }
    let groups = w.cols.div_ceil(group_size);
    let mut scales = Vec::with_capacity(w.rows * groups);
    let mut zero_points = Vec::with_capacity(w.rows * groups);
    let mut codes = Vec::with_capacity(w.len());
    for r in 0..w.rows {
        for g in w.row(r).chunks(group_size) {
            let (s, z, c) = quantize_group(g, bits);
            scales.push(s);
            zero_points.push(z);
            codes.extend(c);
        }
    }
    Ok(QuantizedLayer {
        bits,
        group_size,
        rows: w.rows,
        cols: w.cols,
        scales,
        zero_points,
        codes: PackedCodes::pack(&codes, bits),
    })
}

pub fn dequantize_layer(q: &QuantizedLayer) -> Result<Matrix> {
    let groups = q.groups_per_row();
    if q.scales.len() != q.rows * groups
        || q.zero_points.len() != q.scales.len()
        || q.codes.len != q.rows * q.cols
        || q.codes.bits != q.bits
    {
        return Err(Error::Shape("quantized layer metadata is inconsistent".into()));
    }
    let mut data = Vec::with_capacity(q.rows * q.cols);
    for r in 0..q.rows {
        for c in 0..q.cols {
            let g = r * groups + c / q.group_size;
            data.push(dequantize_value(
                q.scales[g],
                q.zero_points[g],
                q.codes.get(r * q.cols + c),
            ));
        }
    }
    Matrix::from_vec(q.rows, q.cols, data)
}

/// `dequantize(quantize(w))`.
pub fn fake_quantize(w: &Matrix, bits: u8, group_size: usize) -> Result<Matrix> {
    dequantize_layer(&quantize_layer(w, bits, group_size)?)
}

/// Relative Frobenius reconstruction error of one matrix at `bits`.
pub fn reconstruction_error(w: &Matrix, bits: u8, group_size: usize) -> Result<f64> {
    Ok(relative_frobenius_error(w, &fake_quantize(w, bits, group_size)?))
}

/// Relative error of `W diag(a)` at `bits`, where `a` holds the
/// per-input-channel activation scales: the error as seen by the layer's
/// typical inputs rather than in raw weight space.
pub fn weighted_reconstruction_error(w: &Matrix, bits: u8, group_size: usize, act_scales: &[f32]) -> Result<f64> {
    if act_scales.len() != w.cols {
        return Err(Error::Shape(format!(
            "{} activation scales for {} input channels",
            act_scales.len(),
            w.cols
        )));
    }
    let q = fake_quantize(w, bits, group_size)?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for r in 0..w.rows {
        for ((&x, &y), &a) in w.row(r).iter().zip(q.row(r)).zip(act_scales) {
            let a = f64::from(a);
            num += ((f64::from(x) - f64::from(y)) * a).powi(2);
            den += (f64::from(x) * a).powi(2);
        }
    }
    Ok(if den == 0.0 { 0.0 } else { (num / den).sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub name: String,
    pub bits: u8,
    pub rel_frob_error: f64,
}

/// Replaces each assigned layer `(index, bits)` by its fake-quantized
/// weights, after folding the whole model when `fold` is given. Layers not
/// listed stay in full precision.
pub fn apply_assignments(
    model: &TinyModel,
    assignments: &[(usize, u8)],
    fold: Option<&FoldParams>,
    group_size: usize,
) -> Result<(TinyModel, Vec<LayerError>)> {
    let mut out = model.clone();
    if let Some(fp) = fold {
        fold_model(&mut out, fp)?;
    }
    let mut report = Vec::with_capacity(assignments.len());
    for &(idx, bits) in assignments {
        let rec_name = {
            let (b, k) = out.locate(idx)?;
            TinyModel::layer_name(b, k)
        };
        let w = out.layer_weight_mut(idx)?;
        let q = fake_quantize(w, bits, group_size)?;
        let err = relative_frobenius_error(w, &q);
        *w = q;
        report.push(LayerError {
            name: rec_name,
            bits,
            rel_frob_error: err,
        });
    }
    Ok((out, report))
}

/// Fake-quantizes every quantizable layer with its allocated width.
pub fn apply_allocation(
    model: &TinyModel,
    bits: &[u8],
    fold: Option<&FoldParams>,
    group_size: usize,
) -> Result<(TinyModel, Vec<LayerError>)> {
    if bits.len() != model.n_layers() {
        return Err(Error::Shape(format!(
            "allocation covers {} layers but the model has {}",
            bits.len(),
            model.n_layers()
        )));
    }
    let assignments: Vec<(usize, u8)> = bits.iter().copied().enumerate().collect();
    apply_assignments(model, &assignments, fold, group_size)
}

/// Container bytes for the allocation: quantized layers in their mapped
/// block layout plus every other tensor at 2 bytes per element.
pub fn model_bytes(bits: &[u8], spec: &TinyModelSpec, map: &GgufTypeMap) -> Result<u64> {
    if bits.len() != spec.n_layers() {
        return Err(Error::Shape(format!(
            "allocation covers {} layers but the model has {}",
            bits.len(),
            spec.n_layers()
        )));
    }
    let (d, ff, v) = (spec.d_model, spec.d_ff, spec.vocab_size);
    let layer_elems = |i: usize| match i % 7 {
        0..=3 => d * d,
        _ => d * ff,
    };
    let mut total = 0u64;
    for (i, &b) in bits.iter().enumerate() {
        let e = map.map_bits(b)?;
        total += (layer_elems(i).div_ceil(e.block_size) * e.block_bytes) as u64;
    }
    let unquantized = 2 * v * d + spec.max_seq_len * d + (2 * spec.n_blocks + 1) * d;
    total += 2 * unquantized as u64;
    Ok(total)
}

/// Per-layer bit assignment with summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub bits: Vec<u8>,
    pub avg_bits: f64,
    pub model_bytes: u64,
}

impl Allocation {
    pub fn new(bits: Vec<u8>, palette: &BitPalette, spec: &TinyModelSpec, map: &GgufTypeMap) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| !palette.contains(b)) {
            return Err(Error::Invalid(format!("bit-width {b} is not in the palette {:?}", palette.bits())));
        }
        let model_bytes = model_bytes(&bits, spec, map)?;
        Ok(Self {
            avg_bits: mean_bits(&bits),
            bits,
            model_bytes,
        })
    }
}

pub fn mean_bits(bits: &[u8]) -> f64 {
    if bits.is_empty() {
        return 0.0;
    }
    bits.iter().map(|&b| f64::from(b)).sum::<f64>() / bits.len() as f64
}

/// Allocation file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub palette: BitPalette,
    pub bits: Vec<u8>,
    pub avg_bits: f64,
    pub model_bytes: u64,
    pub per_layer: Vec<LayerError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<FoldParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::tinylm::{generate_model, perplexity, Corpus};
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = substream(seed, "qtest");
        let n = Normal::new(0.0f32, 1.0).unwrap();
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn hand_evaluated_two_bit_group() {
        let w = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let q = quantize_layer(&w, 2, 128).unwrap();
        assert_eq!(q.scales, vec![1.0 / 3.0]);
        assert_eq!(q.zero_points, vec![0]);
        assert_eq!(q.codes.unpack(), vec![0, 3]);
        assert_eq!(dequantize_layer(&q).unwrap().data, vec![0.0, 1.0]);
    }

    #[test]
    fn constant_groups() {
        let zeros = Matrix::zeros(1, 8);
        let q = quantize_layer(&zeros, 3, 8).unwrap();
        assert_eq!(q.scales[0], SCALE_FLOOR);
        assert_eq!(dequantize_layer(&q).unwrap(), zeros);
        for v in [0.7f32, -2.5, 1e-9] {
            let w = Matrix::from_vec(1, 5, vec![v; 5]).unwrap();
            let back = fake_quantize(&w, 3, 128).unwrap();
            assert!(back.data.iter().all(|x| (x - v).abs() <= 1e-6), "{v} -> {:?}", back.data);
        }
    }

    #[test]
    fn error_bound_on_random_matrix() {
        let w = random_matrix(4, 256, 1);
        let q = quantize_layer(&w, 4, 128).unwrap();
        let back = dequantize_layer(&q).unwrap();
        assert_eq!(q.groups_per_row(), 2);
        for r in 0..4 {
            for c in 0..256 {
                let s = q.scales[r * 2 + c / 128];
                assert!((w.get(r, c) - back.get(r, c)).abs() <= s / 2.0 + 1e-6);
            }
        }
    }

    #[test]
    fn short_last_group_and_bad_input() {
        let w = random_matrix(3, 10, 2);
        let q = quantize_layer(&w, 5, 4).unwrap();
        assert_eq!(q.scales.len(), 9);
        let mut nan = w.clone();
        nan.data[3] = f32::NAN;
        assert!(matches!(quantize_layer(&nan, 4, 4), Err(Error::NonFinite(_))));
        assert!(quantize_layer(&w, 9, 4).is_err());
        assert!(quantize_layer(&w, 4, 0).is_err());
    }

    #[test]
    fn zero_codes_dequantize_to_zero() {
        let q = QuantizedLayer {
            bits: 4,
            group_size: 2,
            rows: 2,
            cols: 3,
            scales: vec![0.5; 4],
            zero_points: vec![0; 4],
            codes: PackedCodes::pack(&[0; 6], 4),
        };
        assert_eq!(dequantize_layer(&q).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn error_non_increasing_in_bits() {
        for seed in 0..4 {
            let w = random_matrix(16, 256, 10 + seed);
            let errs: Vec<f64> = (3..=8).map(|b| reconstruction_error(&w, b, 128).unwrap()).collect();
            for pair in errs.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-9, "{errs:?}");
            }
        }
    }

    #[test]
    fn palette_validation() {
        assert!(BitPalette::new(vec![]).is_err());
        assert!(BitPalette::new(vec![4, 3]).is_err());
        assert!(BitPalette::new(vec![1, 4]).is_err());
        assert!(BitPalette::new(vec![3, 4, 4]).is_err());
        let p = BitPalette::new(vec![3, 4, 5, 6]).unwrap();
        assert_eq!((p.min(), p.max()), (3, 6));
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, "[3,4,5,6]");
        assert!(serde_json::from_str::<BitPalette>("[5,3]").is_err());
    }

    #[test]
    fn model_bytes_block_layouts() {
        let map = GgufTypeMap::default();
        let spec = TinyModelSpec {
            vocab_size: 32,
            d_model: 32,
            n_heads: 1,
            n_blocks: 1,
            d_ff: 32,
            max_seq_len: 4,
            ..Default::default()
        };
        // 7 layers of 32x32 = 1024 elements = 32 blocks
        let unq = 2 * (2 * 32 * 32 + 4 * 32 + 3 * 32) as u64;
        assert_eq!(model_bytes(&[4; 7], &spec, &map).unwrap(), 7 * 32 * 18 + unq);
        assert_eq!(model_bytes(&[8; 7], &spec, &map).unwrap(), 7 * 32 * 34 + unq);
        assert!(model_bytes(&[4; 6], &spec, &map).is_err());
    }

    #[test]
    fn two_block_all_q4_hand_ledger() {
        let spec = TinyModelSpec::default(); // 256 vocab, d 64, ff 128, 2 blocks, ctx 128
        let bytes = model_bytes(&[4; 14], &spec, &GgufTypeMap::default()).unwrap();
        // attention: 4 x (64*64/32 = 128 blocks) ; ffn: 3 x (64*128/32 = 256 blocks); 18 B/block
        let per_block = (4 * 128 + 3 * 256) * 18;
        // tok_embd 256*64, output 256*64, pos 128*64, norms 5*64 at 2 bytes
        let fp16 = 2 * (256 * 64 + 256 * 64 + 128 * 64 + 5 * 64);
        assert_eq!(bytes, (2 * per_block + fp16) as u64);
    }

    #[test]
    fn allocation_statistics() {
        let spec = TinyModelSpec::default();
        let a = Allocation::new(vec![3, 4, 5, 4, 4, 3, 5, 4, 4, 4, 3, 5, 5, 3], &BitPalette::default(), &spec, &GgufTypeMap::default()).unwrap();
        assert!((a.avg_bits - 56.0 / 14.0).abs() < 1e-12);
        assert!(Allocation::new(vec![6; 14], &BitPalette::default(), &spec, &GgufTypeMap::default()).is_err());
    }

    #[test]
    fn eight_bit_is_near_lossless() {
        let spec = TinyModelSpec { seed: 4, ..Default::default() };
        let model = generate_model(&spec).unwrap();
        let corpus = Corpus::synthetic(256, 0, 6, 48, 1.2, 4).unwrap();
        let base = perplexity(&model, &corpus.evaluation).unwrap();
        let (q, report) = apply_allocation(&model, &[8; 14], None, 32).unwrap();
        let ppl = perplexity(&q, &corpus.evaluation).unwrap();
        assert!((ppl / base - 1.0).abs() < 0.005, "{base} vs {ppl}");
        assert_eq!(report.len(), 14);

        let (_, low) = apply_allocation(&model, &[3; 14], None, 128).unwrap();
        assert!(low.iter().all(|e| e.rel_frob_error > 0.0));
        assert!(apply_allocation(&model, &[3; 13], None, 128).is_err());
    }

    proptest! {
        #[test]
        fn codes_pack_round_trip(bits in 2u8..=8, raw in proptest::collection::vec(any::<u8>(), 0..100)) {
            let codes: Vec<u8> = raw.iter().map(|c| c & ((1u16 << bits) - 1) as u8).collect();
            prop_assert_eq!(PackedCodes::pack(&codes, bits).unpack(), codes);
        }

        #[test]
        fn requantization_is_idempotent(
            bits in 2u8..=8,
            vals in proptest::collection::vec(-10.0f32..10.0, 1..300),
            gs in 1usize..150,
        ) {
            let w = Matrix::from_vec(1, vals.len(), vals).unwrap();
            let q1 = quantize_layer(&w, bits, gs).unwrap();
            let q2 = quantize_layer(&dequantize_layer(&q1).unwrap(), bits, gs).unwrap();
            prop_assert_eq!(q1.codes, q2.codes);
        }

        #[test]
        fn groups_quantize_independently(
            bits in 2u8..=8,
            vals in proptest::collection::vec(-5.0f32..5.0, 1..200),
            gs in 1usize..64,
        ) {
            let w = Matrix::from_vec(1, vals.len(), vals.clone()).unwrap();
            let whole = quantize_layer(&w, bits, gs).unwrap();
            let mut codes = Vec::new();
            let mut scales = Vec::new();
            for g in vals.chunks(gs) {
                let (s, _, c) = quantize_group(g, bits);
                scales.push(s);
                codes.extend(c);
            }
            prop_assert_eq!(whole.codes.unpack(), codes);
            prop_assert_eq!(whole.scales, scales);
        }
    }
}
