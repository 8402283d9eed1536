use proptest::prelude::*;
use rampkit::ggufx::blocks::{decode_tensor, encode_tensor};
use rampkit::ggufx::{
    export_gguf, model_from_gguf, parse_document, stored_allocation, ExportOptions, GgufTypeMap, PayloadType, GGUF_VERSION,
};
use rampkit::quantcore::BitPalette;
use rampkit::tinylm::{generate_model, perplexity, Corpus, TinyModelSpec};

fn small_spec(seed: u64) -> TinyModelSpec {
    TinyModelSpec {
        vocab_size: 64,
        d_model: 32,
        n_heads: 2,
        n_blocks: 1,
        d_ff: 64,
        max_seq_len: 32,
        seed,
        ..TinyModelSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn codecs_reencode_identically(values in prop::collection::vec(-2.0f32..2.0, 1..100), which in 0usize..3) {
        let ty = [PayloadType::Q4_0, PayloadType::Q5_0, PayloadType::Q8_0][which];
        let bytes = encode_tensor(&values, ty).unwrap();
        prop_assert_eq!(bytes.len(), ty.tensor_bytes(values.len()));
        let decoded = decode_tensor(&bytes, ty, values.len()).unwrap();
        prop_assert_eq!(encode_tensor(&decoded, ty).unwrap(), bytes);
    }

    #[test]
    fn exported_files_parse_and_carry_their_allocation(seed in 0u64..50, picks in prop::collection::vec(0usize..3, 7)) {
        let model = generate_model(&small_spec(seed)).unwrap();
        let palette = BitPalette::default();
        let bits: Vec<u8> = picks.iter().map(|&i| palette.bits()[i]).collect();
        let (bytes, summary) = export_gguf(&model, &bits, None, &GgufTypeMap::default(), &ExportOptions::default()).unwrap();
        prop_assert_eq!(summary.ledger.file_bytes, bytes.len());
        let doc = parse_document(&bytes).unwrap();
        prop_assert_eq!(doc.version, GGUF_VERSION);
        prop_assert_eq!(stored_allocation(&doc).unwrap(), bits);
    }
}

#[test]
fn eight_bit_export_scores_close_to_full_precision() {
    let model = generate_model(&small_spec(1)).unwrap();
    let corpus = Corpus::synthetic(64, 1, 4, 24, 1.1, 1).unwrap();
    let (bytes, _) = export_gguf(&model, &[8; 7], None, &GgufTypeMap::default(), &ExportOptions::default()).unwrap();
    let rebuilt = model_from_gguf(&parse_document(&bytes).unwrap()).unwrap();
    let (a, b) = (perplexity(&model, &corpus.evaluation).unwrap(), perplexity(&rebuilt, &corpus.evaluation).unwrap());
    assert!((a - b).abs() / a < 1e-2, "{a} vs {b}");
}

#[test]
fn truncated_files_are_rejected() {
    let model = generate_model(&small_spec(2)).unwrap();
    let (bytes, _) = export_gguf(&model, &[4; 7], None, &GgufTypeMap::default(), &ExportOptions::default()).unwrap();
    for cut in [3, 8, 24, bytes.len() / 3, bytes.len() - 1] {
        assert!(parse_document(&bytes[..cut]).is_err(), "accepted {cut} bytes");
    }
}
