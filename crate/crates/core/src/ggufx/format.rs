//! GGUF v3 container: typed metadata, tensor descriptors and an aligned
//! payload blob, little-endian throughout.

use serde_json::{json, Value};

use super::blocks::decode_tensor;
use super::PayloadType;
use crate::binio::{put_u32, put_u64, Reader};
use crate::{Error, Result};

pub const GGUF_MAGIC: &[u8; 4] = b"GGUF";
pub const GGUF_VERSION: u32 = 3;
pub const DEFAULT_ALIGNMENT: u32 = 32;
const MAX_DIMS: u32 = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum GgufValue {
    U8(u8),
    I8(i8),
    U16(u16),
    I16(i16),
    U32(u32),
    I32(i32),
    F32(f32),
    Bool(bool),
    String(String),
    /// Homogeneous array; the element type is taken from `elem_type`.
    Array { elem_type: u32, items: Vec<GgufValue> },
    U64(u64),
    I64(i64),
    F64(f64),
}

impl GgufValue {
    pub fn type_id(&self) -> u32 {
        match self {
            GgufValue::U8(_) => 0,
            GgufValue::I8(_) => 1,
            GgufValue::U16(_) => 2,
            GgufValue::I16(_) => 3,
            GgufValue::U32(_) => 4,
            GgufValue::I32(_) => 5,
            GgufValue::F32(_) => 6,
            GgufValue::Bool(_) => 7,
            GgufValue::String(_) => 8,
            GgufValue::Array { .. } => 9,
            GgufValue::U64(_) => 10,
            GgufValue::I64(_) => 11,
            GgufValue::F64(_) => 12,
        }
    }

    pub fn array(elem_type: u32, items: Vec<GgufValue>) -> Self {
        GgufValue::Array { elem_type, items }
    }

    pub fn strings<S: AsRef<str>>(items: &[S]) -> Self {
        Self::array(8, items.iter().map(|s| GgufValue::String(s.as_ref().to_string())).collect())
    }

    pub fn f32s(items: &[f32]) -> Self {
        Self::array(6, items.iter().map(|&v| GgufValue::F32(v)).collect())
    }

    pub fn i32s(items: &[i32]) -> Self {
        Self::array(5, items.iter().map(|&v| GgufValue::I32(v)).collect())
    }

    pub fn as_u64(&self) -> Option<u64> {
        match *self {
            GgufValue::U8(v) => Some(v.into()),
            GgufValue::U16(v) => Some(v.into()),
            GgufValue::U32(v) => Some(v.into()),
            GgufValue::U64(v) => Some(v),
            GgufValue::I8(v) => u64::try_from(v).ok(),
            GgufValue::I16(v) => u64::try_from(v).ok(),
            GgufValue::I32(v) => u64::try_from(v).ok(),
            GgufValue::I64(v) => u64::try_from(v).ok(),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            GgufValue::F32(v) => Some(v.into()),
            GgufValue::F64(v) => Some(v),
            _ => self.as_u64().map(|v| v as f64),
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            GgufValue::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_array(&self) -> Option<&[GgufValue]> {
        match self {
            GgufValue::Array { items, .. } => Some(items),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            GgufValue::U8(v) => json!(v),
            GgufValue::I8(v) => json!(v),
            GgufValue::U16(v) => json!(v),
            GgufValue::I16(v) => json!(v),
            GgufValue::U32(v) => json!(v),
            GgufValue::I32(v) => json!(v),
            GgufValue::F32(v) => json!(v),
            GgufValue::Bool(v) => json!(v),
            GgufValue::String(v) => json!(v),
            GgufValue::Array { items, .. } => Value::Array(items.iter().map(|v| v.to_json()).collect()),
            GgufValue::U64(v) => json!(v),
            GgufValue::I64(v) => json!(v),
            GgufValue::F64(v) => json!(v),
        }
    }

    fn write(&self, buf: &mut Vec<u8>) -> Result<()> {
        match self {
            GgufValue::U8(v) => buf.push(*v),
            GgufValue::I8(v) => buf.extend(v.to_le_bytes()),
            GgufValue::U16(v) => buf.extend(v.to_le_bytes()),
            GgufValue::I16(v) => buf.extend(v.to_le_bytes()),
            GgufValue::U32(v) => buf.extend(v.to_le_bytes()),
            GgufValue::I32(v) => buf.extend(v.to_le_bytes()),
            GgufValue::F32(v) => buf.extend(v.to_le_bytes()),
            GgufValue::Bool(v) => buf.push(u8::from(*v)),
            GgufValue::String(s) => put_string(buf, s),
            GgufValue::Array { elem_type, items } => {
                if let Some(bad) = items.iter().find(|v| v.type_id() != *elem_type) {
                    return Err(Error::Invalid(format!(
                        "array of type {elem_type} holds a value of type {}",
                        bad.type_id()
                    )));
                }
                put_u32(buf, *elem_type);
                put_u64(buf, items.len() as u64);
                for v in items {
                    v.write(buf)?;
                }
            }
            GgufValue::U64(v) => buf.extend(v.to_le_bytes()),
            GgufValue::I64(v) => buf.extend(v.to_le_bytes()),
            GgufValue::F64(v) => buf.extend(v.to_le_bytes()),
        }
        Ok(())
    }

    fn read(r: &mut Reader<'_>, ty: u32, depth: usize) -> Result<Self> {
        Ok(match ty {
            0 => GgufValue::U8(r.u8()?),
            1 => GgufValue::I8(r.i8()?),
            2 => GgufValue::U16(r.u16()?),
            3 => GgufValue::I16(r.i16()?),
            4 => GgufValue::U32(r.u32()?),
            5 => GgufValue::I32(r.i32()?),
            6 => GgufValue::F32(r.f32()?),
            7 => {
                let at = r.pos();
                match r.u8()? {
                    0 => GgufValue::Bool(false),
                    1 => GgufValue::Bool(true),
                    b => return Err(r.err_at(at, format!("invalid bool byte {b}"))),
                }
            }
            8 => GgufValue::String(read_string(r)?),
            9 => {
                if depth > 4 {
                    return Err(r.err("arrays nested too deeply"));
                }
                let at = r.pos();
                let elem_type = r.u32()?;
                if elem_type > 12 {
                    return Err(r.err_at(at, format!("unknown array element type {elem_type}")));
                }
                let raw = r.u64()?;
                let n = r.bounded_count(raw, 1, "array length")?;
                let mut items = Vec::with_capacity(n);
                for _ in 0..n {
                    items.push(GgufValue::read(r, elem_type, depth + 1)?);
                }
                GgufValue::Array { elem_type, items }
            }
            10 => GgufValue::U64(r.u64()?),
            11 => GgufValue::I64(r.i64()?),
            12 => GgufValue::F64(r.f64()?),
            _ => return Err(r.err(format!("unknown value type {ty}"))),
        })
    }
}

fn put_string(buf: &mut Vec<u8>, s: &str) {
    put_u64(buf, s.len() as u64);
    buf.extend(s.as_bytes());
}

fn read_string(r: &mut Reader<'_>) -> Result<String> {
    let at = r.pos();
    let raw = r.u64()?;
    let n = r.bounded_count(raw, 1, "string length")?;
    let bytes = r.bytes(n)?;
    String::from_utf8(bytes.to_vec()).map_err(|_| r.err_at(at, "string is not valid UTF-8"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    /// `dims[0]` is the fastest-varying (column) dimension.
    pub dims: Vec<u64>,
    pub ty: PayloadType,
    /// Relative to the start of the data section.
    pub offset: u64,
}

impl TensorInfo {
    pub fn elements(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }

    pub fn byte_len(&self) -> usize {
        self.ty.tensor_bytes(self.elements())
    }
}

/// A parsed (or about to be written) GGUF file.
#[derive(Debug, Clone, PartialEq)]
pub struct GgufDocument {
    pub version: u32,
    pub metadata: Vec<(String, GgufValue)>,
    pub tensors: Vec<TensorInfo>,
    pub alignment: u32,
    /// Absolute file offset of the data section.
    pub data_offset: usize,
    pub data: Vec<u8>,
}

impl GgufDocument {
    pub fn get(&self, key: &str) -> Option<&GgufValue> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_bytes(&self, info: &TensorInfo) -> &[u8] {
        let start = info.offset as usize;
        &self.data[start..start + info.byte_len()]
    }

    /// Dequantized values of a tensor, row-major.
    pub fn dequantize(&self, name: &str) -> Result<Vec<f32>> {
        let info = self
            .tensor(name)
            .ok_or_else(|| Error::Invalid(format!("no tensor named {name}")))?;
        decode_tensor(self.tensor_bytes(info), info.ty, info.elements())
    }

    /// Structural report for inspection tools.
    pub fn report(&self) -> Value {
        let meta: serde_json::Map<String, Value> = self
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), v.to_json()))
            .collect();
        let tensors: Vec<Value> = self
            .tensors
            .iter()
            .map(|t| {
                json!({
                    "name": t.name,
                    "dims": t.dims,
                    "type": t.ty.name(),
                    "offset": t.offset,
                    "bytes": t.byte_len(),
                })
            })
            .collect();
        json!({
            "version": self.version,
            "alignment": self.alignment,
            "data_offset": self.data_offset,
            "file_bytes": self.data_offset + self.data.len(),
            "metadata": meta,
            "tensors": tensors,
        })
    }
}

fn pad_to(buf: &mut Vec<u8>, align: usize) {
    let rem = buf.len() % align;
    if rem != 0 {
        buf.resize(buf.len() + align - rem, 0);
    }
}

/// Byte accounting of a written file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeLedger {
    /// Header, metadata and descriptors, before alignment padding.
    pub header_bytes: usize,
    /// Sum of tensor payload lengths.
    pub tensor_bytes: usize,
    /// Alignment padding after the header and between payloads.
    pub padding_bytes: usize,
    pub file_bytes: usize,
}

/// Serializes metadata and `(name, dims, type, payload)` tensors. Offsets
/// are assigned in order, each aligned to `alignment`.
pub fn write_document(
    metadata: &[(String, GgufValue)],
    tensors: &[(String, Vec<u64>, PayloadType, Vec<u8>)],
    alignment: u32,
) -> Result<(Vec<u8>, SizeLedger)> {
    if alignment == 0 || !alignment.is_power_of_two() {
        return Err(Error::Invalid(format!("alignment {alignment} is not a power of two")));
    }
    let align = alignment as usize;
    let mut buf = Vec::new();
    buf.extend(GGUF_MAGIC);
    put_u32(&mut buf, GGUF_VERSION);
    put_u64(&mut buf, tensors.len() as u64);
    put_u64(&mut buf, metadata.len() as u64);
    for (k, v) in metadata {
        put_string(&mut buf, k);
        put_u32(&mut buf, v.type_id());
        v.write(&mut buf)?;
    }
    let mut offset = 0usize;
    let mut offsets = Vec::with_capacity(tensors.len());
    for (name, dims, ty, payload) in tensors {
        let elems = dims.iter().product::<u64>() as usize;
        if payload.len() != ty.tensor_bytes(elems) {
            return Err(Error::Shape(format!("payload of {name} has {} bytes for {elems} values", payload.len())));
        }
        put_string(&mut buf, name);
        put_u32(&mut buf, dims.len() as u32);
        for &d in dims {
            put_u64(&mut buf, d);
        }
        put_u32(&mut buf, ty.type_id());
        put_u64(&mut buf, offset as u64);
        offsets.push(offset);
        offset = (offset + payload.len()).next_multiple_of(align);
    }
    let header_bytes = buf.len();
    pad_to(&mut buf, align);
    let data_start = buf.len();
    let mut tensor_bytes = 0;
    for ((_, _, _, payload), off) in tensors.iter().zip(offsets) {
        buf.resize(data_start + off, 0);
        buf.extend(payload);
        tensor_bytes += payload.len();
    }
    let file_bytes = buf.len();
    Ok((
        buf,
        SizeLedger {
            header_bytes,
            tensor_bytes,
            padding_bytes: file_bytes - header_bytes - tensor_bytes,
            file_bytes,
        },
    ))
}

/// Parses and validates a GGUF v3 byte buffer.
pub fn parse_document(bytes: &[u8]) -> Result<GgufDocument> {
    let mut r = Reader::new(bytes, "GGUF");
    if r.bytes(4)? != GGUF_MAGIC {
        return Err(r.err_at(0, "bad magic"));
    }
    let version = r.u32()?;
    if version != GGUF_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "GGUF",
            found: version,
            expected: GGUF_VERSION,
        });
    }
    let raw_tensors = r.u64()?;
    let raw_kv = r.u64()?;
    let n_tensors = r.bounded_count(raw_tensors, 8 + 4 + 8 + 4 + 8, "tensor count")?;
    let n_kv = r.bounded_count(raw_kv, 8 + 4, "metadata count")?;

    let mut metadata = Vec::with_capacity(n_kv);
    let mut alignment = DEFAULT_ALIGNMENT;
    for _ in 0..n_kv {
        let key = read_string(&mut r)?;
        let at = r.pos();
        let ty = r.u32()?;
        let value = GgufValue::read(&mut r, ty, 0)?;
        if key == "general.alignment" {
            match value {
                GgufValue::U32(a) if a > 0 && a.is_power_of_two() => alignment = a,
                _ => return Err(r.err_at(at, "general.alignment must be a power-of-two u32")),
            }
        }
        if metadata.iter().any(|(k, _): &(String, GgufValue)| *k == key) {
            return Err(r.err_at(at, format!("duplicate metadata key {key}")));
        }
        metadata.push((key, value));
    }

    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let start = r.pos();
        let name = read_string(&mut r)?;
        let n_dims = r.u32()?;
        if n_dims == 0 || n_dims > MAX_DIMS {
            return Err(r.err_at(start, format!("tensor {name} has {n_dims} dimensions")));
        }
        let mut dims = Vec::with_capacity(n_dims as usize);
        for _ in 0..n_dims {
            let d = r.u64()?;
            if d == 0 || d > u32::MAX as u64 {
                return Err(r.err_at(start, format!("tensor {name} has dimension {d}")));
            }
            dims.push(d);
        }
        let ty_at = r.pos();
        let ty_id = r.u32()?;
        let ty = PayloadType::from_type_id(ty_id)
            .ok_or_else(|| r.err_at(ty_at, format!("tensor {name} has unsupported type {ty_id}")))?;
        let off_at = r.pos();
        let offset = r.u64()?;
        if offset % u64::from(alignment) != 0 {
            return Err(r.err_at(off_at, format!("tensor {name} offset {offset} is not {alignment}-byte aligned")));
        }
        if tensors.iter().any(|t: &TensorInfo| t.name == name) {
            return Err(r.err_at(start, format!("duplicate tensor {name}")));
        }
        tensors.push(TensorInfo { name, dims, ty, offset });
    }

    let data_offset = r.pos().next_multiple_of(alignment as usize);
    if data_offset > bytes.len() {
        return Err(r.err_at(bytes.len(), "file ends before the data section"));
    }
    let data = bytes[data_offset..].to_vec();
    let mut end = 0u64;
    for t in &tensors {
        if t.offset < end {
            return Err(Error::parse(
                "GGUF",
                data_offset as u64 + t.offset,
                format!("tensor {} overlaps the previous payload", t.name),
            ));
        }
        end = t.offset + t.byte_len() as u64;
        if end > data.len() as u64 {
            return Err(Error::parse(
                "GGUF",
                data_offset as u64 + t.offset,
                format!("payload of tensor {} runs past the end of the file", t.name),
            ));
        }
    }
    Ok(GgufDocument {
        version,
        metadata,
        tensors,
        alignment,
        data_offset,
        data,
    })
}
