//! `RMPM` model files.
//!
//! Little-endian: magic `RMPM`, version `u32`, then the spec (`vocab_size`,
//! `d_model`, `n_heads`, `n_blocks`, `d_ff`, `max_seq_len` as `u32`, `seed`
//! as `u64`, `outlier_fraction` and `outlier_boost` as `f32`), then `f32`
//! payloads: token embedding, positional embedding, per block (attention
//! norm, q, k, v, o, FFN norm, gate, up, down), final norm, LM head.

use std::path::Path;

use super::{Block, TinyModel, TinyModelSpec};
use crate::binio::{put_f32s, put_u32, put_u64, Reader};
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RMPM";
pub const VERSION: u32 = 1;

pub fn write_model(model: &TinyModel) -> Vec<u8> {
    let s = &model.spec;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    for v in [s.vocab_size, s.d_model, s.n_heads, s.n_blocks, s.d_ff, s.max_seq_len] {
        put_u32(&mut buf, v as u32);
    }
    put_u64(&mut buf, s.seed);
    put_f32s(&mut buf, &[s.outlier_fraction, s.outlier_boost]);
    put_f32s(&mut buf, &model.tok_embedding.data);
    put_f32s(&mut buf, &model.pos_embedding.data);
    for b in &model.blocks {
        put_f32s(&mut buf, &b.attn_norm);
        for w in [&b.wq, &b.wk, &b.wv, &b.wo] {
            put_f32s(&mut buf, &w.data);
        }
        put_f32s(&mut buf, &b.ffn_norm);
        for w in [&b.w_gate, &b.w_up, &b.w_down] {
            put_f32s(&mut buf, &w.data);
        }
    }
    put_f32s(&mut buf, &model.final_norm);
    put_f32s(&mut buf, &model.lm_head.data);
    buf
}

pub fn read_model(data: &[u8]) -> Result<TinyModel> {
    let mut r = Reader::new(data, "model file");
    if r.bytes(4)? != MAGIC {
        return Err(r.err_at(0, "bad magic, expected RMPM"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            what: "model file",
            found: version,
            expected: VERSION,
        });
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let spec = TinyModelSpec {
        vocab_size: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        n_blocks: dims[3],
        d_ff: dims[4],
        max_seq_len: dims[5],
        seed: r.u64()?,
        outlier_fraction: r.f32()?,
        outlier_boost: r.f32()?,
    };
    spec.validate()?;
    let (d, ff) = (spec.d_model, spec.d_ff);
    let mat = |r: &mut Reader, rows: usize, cols: usize| -> Result<Matrix> {
        let n = rows.checked_mul(cols).ok_or_else(|| r.err("tensor too large"))?;
        Matrix::from_vec(rows, cols, r.f32_vec(n)?)
    };
    let tok_embedding = mat(&mut r, spec.vocab_size, d)?;
    let pos_embedding = mat(&mut r, spec.max_seq_len, d)?;
    let mut blocks = Vec::with_capacity(spec.n_blocks);
    for _ in 0..spec.n_blocks {
        let attn_norm = r.f32_vec(d)?;
        let wq = mat(&mut r, d, d)?;
        let wk = mat(&mut r, d, d)?;
        let wv = mat(&mut r, d, d)?;
        let wo = mat(&mut r, d, d)?;
        let ffn_norm = r.f32_vec(d)?;
        let w_gate = mat(&mut r, ff, d)?;
        let w_up = mat(&mut r, ff, d)?;
        let w_down = mat(&mut r, d, ff)?;
        blocks.push(Block {
            attn_norm,
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
    let final_norm = r.f32_vec(d)?;
    let lm_head = mat(&mut r, spec.vocab_size, d)?;
    if r.remaining() != 0 {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    Ok(TinyModel {
        spec,
        tok_embedding,
        pos_embedding,
        blocks,
        final_norm,
        lm_head,
    })
}

pub fn save_model(model: &TinyModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TinyModel> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&data)
}
