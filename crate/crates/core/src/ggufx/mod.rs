//! GGUF v3 export and read-back.

pub mod blocks;
mod export;
mod format;
mod types;

pub use export::{
    expected_layer_weights, export_gguf, model_from_gguf, read_gguf, stored_allocation, write_gguf, ExportOptions,
    ExportSummary,
};
pub use format::{
    parse_document, write_document, GgufDocument, GgufValue, SizeLedger, TensorInfo, DEFAULT_ALIGNMENT, GGUF_MAGIC,
    GGUF_VERSION,
};
pub use types::*;
