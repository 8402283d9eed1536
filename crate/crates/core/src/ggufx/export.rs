use std::path::Path;

use rayon::prelude::*;

use super::blocks::{decode_tensor, encode_tensor, round_trip, QK};
use super::format::{parse_document, write_document, GgufDocument, GgufValue, SizeLedger, DEFAULT_ALIGNMENT};
use super::{GgufTypeMap, PayloadType};
use crate::quantcore::mean_bits;
use crate::scalefold::{fold_model, FoldParams};
use crate::tensor::Matrix;
use crate::tinylm::{Block, LayerKind, TinyModel, TinyModelSpec};
use crate::{Error, Result};

pub const ARCH: &str = "tinylm";

#[derive(Debug, Clone, Default)]
pub struct ExportOptions {
    pub name: String,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExportSummary {
    pub ledger: SizeLedger,
    pub avg_bits: f64,
    pub nominal_types: Vec<String>,
    pub payload_types: Vec<PayloadType>,
}

fn gguf_layer_name(block: usize, kind: LayerKind) -> String {
    format!("blk.{block}.{}.weight", kind.gguf_name())
}

fn matrix_dims(m: &Matrix) -> Vec<u64> {
    vec![m.cols as u64, m.rows as u64]
}

fn folded_copy(model: &TinyModel, fold: Option<&FoldParams>) -> Result<TinyModel> {
    let mut m = model.clone();
    if let Some(fp) = fold {
        fold_model(&mut m, fp)?;
    }
    Ok(m)
}

fn check_allocation(model: &TinyModel, bits: &[u8], map: &GgufTypeMap) -> Result<Vec<PayloadType>> {
    if bits.len() != model.n_layers() {
        return Err(Error::Shape(format!(
            "allocation covers {} layers but the model has {}",
            bits.len(),
            model.n_layers()
        )));
    }
    bits.iter()
        .enumerate()
        .map(|(i, &b)| {
            let e = map.map_bits(b)?;
            let w = model.layer_weight(i)?;
            if w.cols % QK != 0 {
                let (blk, kind) = model.locate(i)?;
                return Err(Error::Invalid(format!(
                    "unencodable dims: {} has {} input features, not a multiple of {QK}",
                    TinyModel::layer_name(blk, kind),
                    w.cols
                )));
            }
            Ok(e.payload)
        })
        .collect()
}

/// Weights a reader of the exported file recovers for every quantizable
/// layer: the folded weights passed through their payload codec.
pub fn expected_layer_weights(
    model: &TinyModel,
    bits: &[u8],
    fold: Option<&FoldParams>,
    map: &GgufTypeMap,
) -> Result<Vec<Matrix>> {
    let types = check_allocation(model, bits, map)?;
    let folded = folded_copy(model, fold)?;
    types
        .par_iter()
        .enumerate()
        .map(|(i, &ty)| {
            let w = folded.layer_weight(i)?;
            Matrix::from_vec(w.rows, w.cols, round_trip(&w.data, ty)?)
        })
        .collect()
}

/// Serializes the folded, block-quantized model.
pub fn export_gguf(
    model: &TinyModel,
    bits: &[u8],
    fold: Option<&FoldParams>,
    map: &GgufTypeMap,
    opts: &ExportOptions,
) -> Result<(Vec<u8>, ExportSummary)> {
    map.validate()?;
    let types = check_allocation(model, bits, map)?;
    let folded = folded_copy(model, fold)?;
    let nominal_types: Vec<String> = bits
        .iter()
        .map(|&b| map.map_bits(b).map(|e| e.label))
        .collect::<Result<_>>()?;
    let avg_bits = mean_bits(bits);
    let spec = &model.spec;

    let mut meta: Vec<(String, GgufValue)> = vec![
        ("general.architecture".into(), GgufValue::String(ARCH.into())),
        ("general.name".into(), GgufValue::String(opts.name.clone())),
        ("general.alignment".into(), GgufValue::U32(DEFAULT_ALIGNMENT)),
        ("general.quantization_type".into(), GgufValue::String("mixed-precision".into())),
        (format!("{ARCH}.vocab_size"), GgufValue::U32(spec.vocab_size as u32)),
        (format!("{ARCH}.context_length"), GgufValue::U32(spec.max_seq_len as u32)),
        (format!("{ARCH}.embedding_length"), GgufValue::U32(spec.d_model as u32)),
        (format!("{ARCH}.feed_forward_length"), GgufValue::U32(spec.d_ff as u32)),
        (format!("{ARCH}.block_count"), GgufValue::U32(spec.n_blocks as u32)),
        (format!("{ARCH}.attention.head_count"), GgufValue::U32(spec.n_heads as u32)),
        (
            format!("{ARCH}.attention.layer_norm_rms_epsilon"),
            GgufValue::F32(crate::tinylm::RMSNORM_EPS),
        ),
        (format!("{ARCH}.seed"), GgufValue::U64(spec.seed)),
        (format!("{ARCH}.outlier_fraction"), GgufValue::F32(spec.outlier_fraction)),
        (format!("{ARCH}.outlier_boost"), GgufValue::F32(spec.outlier_boost)),
        (
            "ramp.bit_allocation".into(),
            GgufValue::i32s(&bits.iter().map(|&b| i32::from(b)).collect::<Vec<_>>()),
        ),
        ("ramp.nominal_types".into(), GgufValue::strings(&nominal_types)),
        (
            "ramp.payload_types".into(),
            GgufValue::strings(&types.iter().map(|t| t.name()).collect::<Vec<_>>()),
        ),
        ("ramp.avg_bits".into(), GgufValue::F32(avg_bits as f32)),
        ("ramp.folded".into(), GgufValue::Bool(fold.is_some())),
    ];
    if let Some(fp) = fold {
        let arrays = fp.flatten().iter().map(|v| GgufValue::f32s(v)).collect();
        meta.push(("ramp.fold_scales".into(), GgufValue::array(9, arrays)));
    }
    if let Some(h) = &opts.config_hash {
        meta.push(("ramp.config_hash".into(), GgufValue::String(h.clone())));
    }

    let f16 = |name: String, dims: Vec<u64>, data: &[f32]| -> Result<_> {
        Ok((name, dims, PayloadType::F16, encode_tensor(data, PayloadType::F16)?))
    };
    let d = spec.d_model as u64;
    let mut tensors = vec![
        f16("token_embd.weight".into(), matrix_dims(&folded.tok_embedding), &folded.tok_embedding.data)?,
        f16("pos_embd.weight".into(), matrix_dims(&folded.pos_embedding), &folded.pos_embedding.data)?,
    ];
    let encoded: Vec<Vec<u8>> = types
        .par_iter()
        .enumerate()
        .map(|(i, &ty)| encode_tensor(&folded.layer_weight(i)?.data, ty))
        .collect::<Result<_>>()?;
    let mut encoded = encoded.into_iter();
    for (b, blk) in folded.blocks.iter().enumerate() {
        for kind in LayerKind::ALL {
            if kind == LayerKind::QProj {
                tensors.push(f16(format!("blk.{b}.attn_norm.weight"), vec![d], &blk.attn_norm)?);
            }
            if kind == LayerKind::GateProj {
                tensors.push(f16(format!("blk.{b}.ffn_norm.weight"), vec![d], &blk.ffn_norm)?);
            }
            let idx = b * LayerKind::ALL.len() + kind.position();
            tensors.push((
                gguf_layer_name(b, kind),
                matrix_dims(blk.weight(kind)),
                types[idx],
                encoded.next().expect("one payload per layer"),
            ));
        }
    }
    tensors.push(f16("output_norm.weight".into(), vec![d], &folded.final_norm)?);
    tensors.push(f16("output.weight".into(), matrix_dims(&folded.lm_head), &folded.lm_head.data)?);

    let (bytes, ledger) = write_document(&meta, &tensors, DEFAULT_ALIGNMENT)?;
    Ok((
        bytes,
        ExportSummary {
            ledger,
            avg_bits,
            nominal_types,
            payload_types: types,
        },
    ))
}

pub fn write_gguf(
    path: &Path,
    model: &TinyModel,
    bits: &[u8],
    fold: Option<&FoldParams>,
    map: &GgufTypeMap,
    opts: &ExportOptions,
) -> Result<ExportSummary> {
    let (bytes, summary) = export_gguf(model, bits, fold, map, opts)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(summary)
}

pub fn read_gguf(path: &Path) -> Result<GgufDocument> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_document(&bytes)
}

fn meta_usize(doc: &GgufDocument, key: &str) -> Result<usize> {
    doc.get(key)
        .and_then(GgufValue::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::Invalid(format!("missing or non-integer metadata {key}")))
}

fn meta_f32(doc: &GgufDocument, key: &str) -> Result<f32> {
    doc.get(key)
        .and_then(GgufValue::as_f64)
        .map(|v| v as f32)
        .ok_or_else(|| Error::Invalid(format!("missing or non-numeric metadata {key}")))
}

/// Bit allocation stored in the file.
pub fn stored_allocation(doc: &GgufDocument) -> Result<Vec<u8>> {
    doc.get("ramp.bit_allocation")
        .and_then(GgufValue::as_array)
        .ok_or_else(|| Error::Invalid("missing ramp.bit_allocation".into()))?
        .iter()
        .map(|v| {
            v.as_u64()
                .and_then(|b| u8::try_from(b).ok())
                .ok_or_else(|| Error::Invalid("ramp.bit_allocation holds a non-bit value".into()))
        })
        .collect()
}

/// Rebuilds an executable model (dequantized) from an exported file.
pub fn model_from_gguf(doc: &GgufDocument) -> Result<TinyModel> {
    let arch = doc.get("general.architecture").and_then(GgufValue::as_str);
    if arch != Some(ARCH) {
        return Err(Error::Invalid(format!("architecture {arch:?} is not {ARCH}")));
    }
    let spec = TinyModelSpec {
        vocab_size: meta_usize(doc, &format!("{ARCH}.vocab_size"))?,
        d_model: meta_usize(doc, &format!("{ARCH}.embedding_length"))?,
        n_heads: meta_usize(doc, &format!("{ARCH}.attention.head_count"))?,
        n_blocks: meta_usize(doc, &format!("{ARCH}.block_count"))?,
        d_ff: meta_usize(doc, &format!("{ARCH}.feed_forward_length"))?,
        max_seq_len: meta_usize(doc, &format!("{ARCH}.context_length"))?,
        seed: doc.get(&format!("{ARCH}.seed")).and_then(GgufValue::as_u64).unwrap_or(0),
        outlier_fraction: meta_f32(doc, &format!("{ARCH}.outlier_fraction"))?,
        outlier_boost: meta_f32(doc, &format!("{ARCH}.outlier_boost"))?,
    };
    spec.validate()?;
    let matrix = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
        let info = doc
            .tensor(name)
            .ok_or_else(|| Error::Invalid(format!("missing tensor {name}")))?;
        if info.dims != [cols as u64, rows as u64] {
            return Err(Error::Shape(format!("tensor {name} has dims {:?}, expected [{cols}, {rows}]", info.dims)));
        }
        Matrix::from_vec(rows, cols, decode_tensor(doc.tensor_bytes(info), info.ty, rows * cols)?)
    };
    let vector = |name: &str, n: usize| -> Result<Vec<f32>> {
        let info = doc
            .tensor(name)
            .ok_or_else(|| Error::Invalid(format!("missing tensor {name}")))?;
        if info.dims != [n as u64] {
            return Err(Error::Shape(format!("tensor {name} has dims {:?}, expected [{n}]", info.dims)));
        }
        decode_tensor(doc.tensor_bytes(info), info.ty, n)
    };
    let (d, ff, v) = (spec.d_model, spec.d_ff, spec.vocab_size);
    let mut blocks = Vec::with_capacity(spec.n_blocks);
    for b in 0..spec.n_blocks {
        let w = |kind: LayerKind, rows, cols| matrix(&gguf_layer_name(b, kind), rows, cols);
        blocks.push(Block {
            attn_norm: vector(&format!("blk.{b}.attn_norm.weight"), d)?,
            wq: w(LayerKind::QProj, d, d)?,
            wk: w(LayerKind::KProj, d, d)?,
            wv: w(LayerKind::VProj, d, d)?,
            wo: w(LayerKind::OProj, d, d)?,
            ffn_norm: vector(&format!("blk.{b}.ffn_norm.weight"), d)?,
            w_gate: w(LayerKind::GateProj, ff, d)?,
            w_up: w(LayerKind::UpProj, ff, d)?,
            w_down: w(LayerKind::DownProj, d, ff)?,
        });
    }
    Ok(TinyModel {
        spec,
        tok_embedding: matrix("token_embd.weight", v, d)?,
        pos_embedding: matrix("pos_embd.weight", spec.max_seq_len, d)?,
        blocks,
        final_norm: vector("output_norm.weight", d)?,
        lm_head: matrix("output.weight", v, d)?,
    })
}
