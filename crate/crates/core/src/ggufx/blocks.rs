//! ggml block codecs: 32 values per block with an f16 scale.

use half::f16;

use super::PayloadType;
use crate::{Error, Result};

pub const QK: usize = 32;

fn check_len(values: &[f32]) -> Result<()> {
    if values.len() != QK {
        return Err(Error::Shape(format!("a block holds {QK} values, got {}", values.len())));
    }
    Ok(())
}

/// Signed value with the largest magnitude (first one on ties).
fn signed_max(values: &[f32]) -> f32 {
    let mut best = 0.0f32;
    for &v in values {
        if v.abs() > best.abs() {
            best = v;
        }
    }
    best
}

/// Scale as stored (f16) and as used for code computation.
fn rounded_scale(d: f32) -> (f16, f32) {
    let h = if d == 0.0 { f16::ZERO } else { f16::from_f32(d) };
    (h, h.to_f32())
}

fn code(v: f32, d: f32, offset: f32, max: f32) -> u8 {
    if d == 0.0 {
        return offset as u8;
    }
    ((v / d).round() + offset).clamp(0.0, max) as u8
}

pub fn encode_q4_0(values: &[f32]) -> Result<[u8; 18]> {
    check_len(values)?;
    let (h, d) = rounded_scale(signed_max(values) / -8.0);
    let mut out = [0u8; 18];
    out[..2].copy_from_slice(&h.to_le_bytes());
    for j in 0..QK / 2 {
        let lo = code(values[j], d, 8.0, 15.0);
        let hi = code(values[j + QK / 2], d, 8.0, 15.0);
        out[2 + j] = lo | (hi << 4);
    }
    Ok(out)
}

pub fn decode_q4_0(block: &[u8]) -> Result<[f32; QK]> {
    if block.len() != 18 {
        return Err(Error::Shape(format!("Q4_0 block of {} bytes", block.len())));
    }
    let d = f16::from_le_bytes([block[0], block[1]]).to_f32();
    let mut out = [0.0f32; QK];
    for j in 0..QK / 2 {
        let b = block[2 + j];
        out[j] = (i32::from(b & 0x0f) - 8) as f32 * d;
        out[j + QK / 2] = (i32::from(b >> 4) - 8) as f32 * d;
    }
    Ok(out)
}

pub fn encode_q5_0(values: &[f32]) -> Result<[u8; 22]> {
    check_len(values)?;
    let (h, d) = rounded_scale(signed_max(values) / -16.0);
    let mut out = [0u8; 22];
    out[..2].copy_from_slice(&h.to_le_bytes());
    let mut qh = 0u32;
    for j in 0..QK / 2 {
        let c0 = code(values[j], d, 16.0, 31.0);
        let c1 = code(values[j + QK / 2], d, 16.0, 31.0);
        out[6 + j] = (c0 & 0x0f) | ((c1 & 0x0f) << 4);
        qh |= u32::from(c0 >> 4) << j;
        qh |= u32::from(c1 >> 4) << (j + QK / 2);
    }
    out[2..6].copy_from_slice(&qh.to_le_bytes());
    Ok(out)
}

pub fn decode_q5_0(block: &[u8]) -> Result<[f32; QK]> {
    if block.len() != 22 {
        return Err(Error::Shape(format!("Q5_0 block of {} bytes", block.len())));
    }
    let d = f16::from_le_bytes([block[0], block[1]]).to_f32();
    let qh = u32::from_le_bytes([block[2], block[3], block[4], block[5]]);
    let mut out = [0.0f32; QK];
    for j in 0..QK / 2 {
        let b = block[6 + j];
        let c0 = u32::from(b & 0x0f) | (((qh >> j) & 1) << 4);
        let c1 = u32::from(b >> 4) | (((qh >> (j + QK / 2)) & 1) << 4);
        out[j] = (c0 as i32 - 16) as f32 * d;
        out[j + QK / 2] = (c1 as i32 - 16) as f32 * d;
    }
    Ok(out)
}

pub fn encode_q8_0(values: &[f32]) -> Result<[u8; 34]> {
    check_len(values)?;
    let amax = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let (h, d) = rounded_scale(amax / 127.0);
    let mut out = [0u8; 34];
    out[..2].copy_from_slice(&h.to_le_bytes());
    for (o, &v) in out[2..].iter_mut().zip(values) {
        let q = if d == 0.0 { 0.0 } else { (v / d).round().clamp(-127.0, 127.0) };
        *o = (q as i8) as u8;
    }
    Ok(out)
}

pub fn decode_q8_0(block: &[u8]) -> Result<[f32; QK]> {
    if block.len() != 34 {
        return Err(Error::Shape(format!("Q8_0 block of {} bytes", block.len())));
    }
    let d = f16::from_le_bytes([block[0], block[1]]).to_f32();
    let mut out = [0.0f32; QK];
    for (o, &b) in out.iter_mut().zip(&block[2..]) {
        *o = f32::from(b as i8) * d;
    }
    Ok(out)
}

/// Encodes a flat tensor. Quantized payloads pad a trailing partial block
/// with zeros.
pub fn encode_tensor(values: &[f32], ty: PayloadType) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ty.tensor_bytes(values.len()));
    match ty {
        PayloadType::F32 => values.iter().for_each(|v| out.extend(v.to_le_bytes())),
        PayloadType::F16 => values.iter().for_each(|v| out.extend(f16::from_f32(*v).to_le_bytes())),
        _ => {
            let mut block = [0.0f32; QK];
            for chunk in values.chunks(QK) {
                block.fill(0.0);
                block[..chunk.len()].copy_from_slice(chunk);
                match ty {
                    PayloadType::Q4_0 => out.extend(encode_q4_0(&block)?),
                    PayloadType::Q5_0 => out.extend(encode_q5_0(&block)?),
                    _ => out.extend(encode_q8_0(&block)?),
                }
            }
        }
    }
    Ok(out)
}

/// Decodes `n` values from a payload written by [`encode_tensor`].
pub fn decode_tensor(bytes: &[u8], ty: PayloadType, n: usize) -> Result<Vec<f32>> {
    if bytes.len() != ty.tensor_bytes(n) {
        return Err(Error::Shape(format!(
            "{} payload of {} bytes for {n} values (expected {})",
            ty.name(),
            bytes.len(),
            ty.tensor_bytes(n)
        )));
    }
    let mut out = Vec::with_capacity(n.div_ceil(ty.block_size()) * ty.block_size());
    match ty {
        PayloadType::F32 => out.extend(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))),
        PayloadType::F16 => out.extend(bytes.chunks_exact(2).map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())),
        PayloadType::Q4_0 => {
            for b in bytes.chunks_exact(18) {
                out.extend(decode_q4_0(b)?);
            }
        }
        PayloadType::Q5_0 => {
            for b in bytes.chunks_exact(22) {
                out.extend(decode_q5_0(b)?);
            }
        }
        PayloadType::Q8_0 => {
            for b in bytes.chunks_exact(34) {
                out.extend(decode_q8_0(b)?);
            }
        }
    }
    out.truncate(n);
    Ok(out)
}

/// `decode(encode(values))`.
pub fn round_trip(values: &[f32], ty: PayloadType) -> Result<Vec<f32>> {
    decode_tensor(&encode_tensor(values, ty)?, ty, values.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    const QUANT: [PayloadType; 3] = [PayloadType::Q4_0, PayloadType::Q5_0, PayloadType::Q8_0];

    #[test]
    fn zero_block() {
        for ty in QUANT {
            let bytes = encode_tensor(&[0.0; 32], ty).unwrap();
            assert_eq!(&bytes[..2], &[0, 0]);
            assert_eq!(decode_tensor(&bytes, ty, 32).unwrap(), vec![0.0; 32]);
        }
        let q4 = encode_q4_0(&[0.0; 32]).unwrap();
        assert!(q4[2..].iter().all(|&b| b == 0x88));
        let q5 = encode_q5_0(&[0.0; 32]).unwrap();
        assert_eq!(&q5[2..6], &[0xff; 4]);
        assert!(q5[6..].iter().all(|&b| b == 0));
    }

    #[test]
    fn q8_extremes_saturate() {
        let d = 0.5f32;
        let mut v = [0.0f32; 32];
        v[0] = 127.0 * d;
        v[1] = -127.0 * d;
        v[2] = 3.0 * d;
        let b = encode_q8_0(&v).unwrap();
        assert_eq!(f16::from_le_bytes([b[0], b[1]]).to_f32(), d);
        assert_eq!(b[2] as i8, 127);
        assert_eq!(b[3] as i8, -127);
        assert_eq!(b[4] as i8, 3);
        assert_eq!(decode_q8_0(&b).unwrap()[..3], [63.5, -63.5, 1.5]);
    }

    #[test]
    fn q4_hand_example() {
        // max magnitude -8 -> d = 1; codes v + 8
        let mut v = [0.0f32; 32];
        v[0] = -8.0;
        v[1] = 7.0;
        v[16] = 3.0;
        v[17] = 9.0; // |9| > 8 makes it the max: d = -9/8
        let b = encode_q4_0(&v[..]).unwrap();
        let d = f16::from_le_bytes([b[0], b[1]]).to_f32();
        assert_eq!(d, -1.125);
        let back = decode_q4_0(&b).unwrap();
        assert_eq!(back[17], 9.0); // code 0 -> -8 * -1.125
        assert_eq!(b[2 + 1] & 0x0f, 2); // 7 / -1.125 = -6.2 -> -6 + 8
    }

    #[test]
    fn wrong_counts_rejected() {
        assert!(encode_q4_0(&[0.0; 31]).is_err());
        assert!(decode_q8_0(&[0; 33]).is_err());
        assert!(decode_tensor(&[0; 17], PayloadType::Q4_0, 32).is_err());
    }

    #[test]
    fn partial_blocks_pad_with_zeros() {
        let v: Vec<f32> = (0..40).map(|i| i as f32 * 0.1 - 2.0).collect();
        for ty in QUANT {
            let bytes = encode_tensor(&v, ty).unwrap();
            assert_eq!(bytes.len(), 2 * ty.block_bytes());
            assert_eq!(decode_tensor(&bytes, ty, 40).unwrap().len(), 40);
        }
        let f = round_trip(&v, PayloadType::F32).unwrap();
        assert_eq!(f, v);
    }

    #[test]
    fn encode_decode_encode_is_byte_identical() {
        // holds whenever the stored scale is a normal f16; subnormal scales
        // lose precision and are covered separately below
        let mut rng = substream(17, "blocks");
        let mut checked = 0;
        for i in 0..10_000 {
            let scale: f32 = 10f32.powf(rng.random_range(-2.0..2.0));
            let v: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
            let ty = QUANT[i % 3];
            let a = encode_tensor(&v, ty).unwrap();
            if !f16::from_le_bytes([a[0], a[1]]).is_normal() {
                continue;
            }
            checked += 1;
            let back = decode_tensor(&a, ty, 32).unwrap();
            let b = encode_tensor(&back, ty).unwrap();
            assert_eq!(a, b, "{ty:?} block {i}");
        }
        assert!(checked > 9_900);
    }

    #[test]
    fn subnormal_scales_still_decode_consistently() {
        let v: Vec<f32> = (0..32).map(|i| (i as f32 - 16.0) * 1e-5).collect();
        for ty in QUANT {
            let a = encode_tensor(&v, ty).unwrap();
            let d = f16::from_le_bytes([a[0], a[1]]).to_f32().abs();
            let back = decode_tensor(&a, ty, 32).unwrap();
            for (x, y) in v.iter().zip(&back) {
                assert!((x - y).abs() <= d, "{ty:?}");
            }
        }
    }

    #[test]
    fn error_within_half_step() {
        let mut rng = substream(3, "blocks-err");
        for ty in QUANT {
            let v: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let bytes = encode_tensor(&v, ty).unwrap();
            let d = f16::from_le_bytes([bytes[0], bytes[1]]).to_f32().abs();
            let back = decode_tensor(&bytes, ty, 32).unwrap();
            // the side opposite the extreme saturates one step early
            let bound = if ty == PayloadType::Q8_0 { 0.5 * d } else { d };
            for (a, b) in v.iter().zip(&back) {
                assert!((a - b).abs() <= bound * 1.001 + 1e-7, "{ty:?}: {a} vs {b} (d = {d})");
            }
        }
    }
}
