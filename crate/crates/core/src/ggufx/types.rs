use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tensor storage types this exporter can emit (ggml type ids).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PayloadType {
    F32,
    F16,
    Q4_0,
    Q5_0,
    Q8_0,
}

impl PayloadType {
    pub fn type_id(self) -> u32 {
        match self {
            PayloadType::F32 => 0,
            PayloadType::F16 => 1,
            PayloadType::Q4_0 => 2,
            PayloadType::Q5_0 => 6,
            PayloadType::Q8_0 => 8,
        }
    }

    pub fn from_type_id(id: u32) -> Option<Self> {
        Some(match id {
            0 => PayloadType::F32,
            1 => PayloadType::F16,
            2 => PayloadType::Q4_0,
            6 => PayloadType::Q5_0,
            8 => PayloadType::Q8_0,
            _ => return None,
        })
    }

    /// Elements per block.
    pub fn block_size(self) -> usize {
        match self {
            PayloadType::F32 | PayloadType::F16 => 1,
            PayloadType::Q4_0 | PayloadType::Q5_0 | PayloadType::Q8_0 => 32,
        }
    }

    /// Bytes per block.
    pub fn block_bytes(self) -> usize {
        match self {
            PayloadType::F32 => 4,
            PayloadType::F16 => 2,
            PayloadType::Q4_0 => 18,
            PayloadType::Q5_0 => 22,
            PayloadType::Q8_0 => 34,
        }
    }

    pub fn bits_per_weight(self) -> f64 {
        8.0 * self.block_bytes() as f64 / self.block_size() as f64
    }

    /// Bytes needed for `elements` values (trailing partial block padded).
    pub fn tensor_bytes(self, elements: usize) -> usize {
        elements.div_ceil(self.block_size()) * self.block_bytes()
    }

    pub fn name(self) -> &'static str {
        match self {
            PayloadType::F32 => "F32",
            PayloadType::F16 => "F16",
            PayloadType::Q4_0 => "Q4_0",
            PayloadType::Q5_0 => "Q5_0",
            PayloadType::Q8_0 => "Q8_0",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeMapEntry {
    /// Container type the learned bit-width nominally maps to.
    pub label: String,
    /// Block codec actually written.
    pub payload: PayloadType,
    pub block_size: usize,
    pub block_bytes: usize,
}

impl TypeMapEntry {
    fn new(label: &str, payload: PayloadType) -> Self {
        Self {
            label: label.to_string(),
            payload,
            block_size: payload.block_size(),
            block_bytes: payload.block_bytes(),
        }
    }

    /// True when the written codec is not the labelled K-quant type.
    pub fn is_downgraded(&self) -> bool {
        self.label != self.payload.name()
    }
}

/// Nominal bit-width -> container type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GgufTypeMap {
    pub entries: BTreeMap<u8, TypeMapEntry>,
}

impl Default for GgufTypeMap {
    fn default() -> Self {
        let entries = [
            (3, TypeMapEntry::new("Q3_K_M", PayloadType::Q4_0)),
            (4, TypeMapEntry::new("Q4_K_M", PayloadType::Q4_0)),
            (5, TypeMapEntry::new("Q5_K_M", PayloadType::Q5_0)),
            (6, TypeMapEntry::new("Q6_K", PayloadType::Q8_0)),
            (8, TypeMapEntry::new("Q8_0", PayloadType::Q8_0)),
        ]
        .into_iter()
        .collect();
        Self { entries }
    }
}

impl GgufTypeMap {
    /// Exact lookup; widths not in the map but above the smallest key fall
    /// back to `Q8_0`.
    pub fn map_bits(&self, bits: u8) -> Result<TypeMapEntry> {
        if let Some(e) = self.entries.get(&bits) {
            return Ok(e.clone());
        }
        match self.entries.keys().next() {
            Some(&min) if bits > min => Ok(TypeMapEntry::new("Q8_0", PayloadType::Q8_0)),
            Some(&min) => Err(Error::Invalid(format!(
                "bit-width {bits} is below the smallest mapped width {min}"
            ))),
            None => Err(Error::Invalid("empty type map".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (b, e) in &self.entries {
            if e.block_size != e.payload.block_size() || e.block_bytes != e.payload.block_bytes() {
                return Err(Error::Config(format!(
                    "type map entry for {b} bits disagrees with the {} block layout",
                    e.payload.name()
                )));
            }
        }
        Ok(())
    }
}
