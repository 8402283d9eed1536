//! `RMPN` network checkpoints.
//!
//! Layout (little-endian): magic `RMPN`, version `u32`, layer count `u32`,
//! `layer count + 1` layer sizes (`u32`), one norm flag byte per layer, then
//! every parameter as raw `f32` in declaration order.

use std::path::Path;

use super::{DenseLayer, DenseNet, LayerNorm};
use crate::binio::{put_f32s, put_u32, Reader};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RMPN";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(net: &DenseNet<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, net.layers().len() as u32);
    for s in net.layer_sizes() {
        put_u32(&mut buf, s as u32);
    }
    for l in net.layers() {
        buf.push(u8::from(l.norm.is_some()));
    }
    for (_, p) in net.params() {
        put_f32s(&mut buf, p);
    }
    buf
}

pub fn read_checkpoint(data: &[u8]) -> Result<DenseNet<f32>> {
    let mut r = Reader::new(data, "network checkpoint");
    if r.bytes(4)? != MAGIC {
        return Err(r.err_at(0, "bad magic, expected RMPN"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            what: "network checkpoint",
            found: version,
            expected: VERSION,
        });
    }
    let n_layers = r.u32()? as u64;
    let n_layers = r.bounded_count(n_layers, 5, "layer count")?;
    if n_layers == 0 {
        return Err(r.err("checkpoint has no layers"));
    }
    let mut sizes = Vec::with_capacity(n_layers + 1);
    for _ in 0..=n_layers {
        let s = r.u32()? as usize;
        if s == 0 {
            return Err(r.err("zero layer size"));
        }
        sizes.push(s);
    }
    let mut flags = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        match r.u8()? {
            0 => flags.push(false),
            1 => flags.push(true),
            f => return Err(r.err(format!("invalid norm flag {f}"))),
        }
    }
    let mut layers = Vec::with_capacity(n_layers);
    for k in 0..n_layers {
        let (i, o) = (sizes[k], sizes[k + 1]);
        let weight = r.f32_vec(i.checked_mul(o).ok_or_else(|| r.err("layer too large"))?)?;
        let bias = r.f32_vec(o)?;
        let norm = if flags[k] {
            Some(LayerNorm {
                gain: r.f32_vec(o)?,
                shift: r.f32_vec(o)?,
            })
        } else {
            None
        };
        layers.push(DenseLayer {
            in_dim: i,
            out_dim: o,
            weight,
            bias,
            norm,
        });
    }
    if r.remaining() != 0 {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    let net = DenseNet::from_layers(layers)?;
    if !net.all_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(net)
}

pub fn save_checkpoint(net: &DenseNet<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DenseNet<f32>> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn round_trip_and_corruption() {
        let mut rng = substream(9, "ckpt");
        let net = DenseNet::<f32>::new(&[11, 16, 16, 8, 2], 2, &mut rng).unwrap();
        let bytes = write_checkpoint(&net);
        assert_eq!(read_checkpoint(&bytes).unwrap(), net);

        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad), Err(Error::Parse { offset: 0, .. })));
        let mut bumped = bytes.clone();
        bumped[4] = 2;
        assert!(matches!(read_checkpoint(&bumped), Err(Error::UnsupportedVersion { found: 2, .. })));
        let mut chain = bytes;
        chain[12] = 0;
        assert!(read_checkpoint(&chain).is_err());
    }
}
