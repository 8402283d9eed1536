use proptest::prelude::*;
use rampkit::calibrate::collect_act_scales;
use rampkit::quantcore::{dequantize_layer, fake_quantize, quantize_group, quantize_layer, reconstruction_error, PackedCodes};
use rampkit::scalefold::{compute_fold_scales, fold_model};
use rampkit::tensor::Matrix;
use rampkit::tinylm::{generate_model, Corpus, TinyModelSpec};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn group_codes_stay_in_range_and_reconstruct(values in prop::collection::vec(-4.0f32..4.0, 1..160), bits in 2u8..=8) {
        let (scale, zero, codes) = quantize_group(&values, bits);
        let qmax = (1u16 << bits) - 1;
        prop_assert!(u16::from(zero) <= qmax);
        prop_assert!(codes.iter().all(|&c| u16::from(c) <= qmax));
        prop_assert!(scale >= 0.0);
        for (&v, &c) in values.iter().zip(&codes) {
            let w = scale * (f32::from(c) - f32::from(zero));
            prop_assert!((w - v).abs() <= scale / 2.0 + 1e-5, "{v} -> {w} (scale {scale})");
        }
    }

    #[test]
    fn packing_round_trips(codes in prop::collection::vec(0u8..=255, 0..300), bits in 2u8..=8) {
        let masked: Vec<u8> = codes.iter().map(|&c| (u16::from(c) & ((1u16 << bits) - 1)) as u8).collect();
        let packed = PackedCodes::pack(&masked, bits);
        prop_assert_eq!(packed.unpack(), masked);
    }
}

#[test]
fn layer_round_trip_and_monotone_error() {
    let spec = TinyModelSpec::default();
    let model = generate_model(&spec).unwrap();
    for idx in 0..model.n_layers() {
        let w = model.layer_weight(idx).unwrap();
        let q = quantize_layer(w, 4, 128).unwrap();
        assert_eq!(dequantize_layer(&q).unwrap(), fake_quantize(w, 4, 128).unwrap());
        let errs: Vec<f64> = [3u8, 4, 5, 8].iter().map(|&b| reconstruction_error(w, b, 128).unwrap()).collect();
        assert!(errs.windows(2).all(|p| p[1] <= p[0]), "layer {idx}: {errs:?}");
    }
}

#[test]
fn zero_matrix_quantizes_to_zero() {
    let w = Matrix::zeros(4, 256);
    assert_eq!(fake_quantize(&w, 3, 128).unwrap(), w);
}

#[test]
fn folding_preserves_logits() {
    let spec = TinyModelSpec {
        seed: 9,
        ..TinyModelSpec::default()
    };
    let model = generate_model(&spec).unwrap();
    let corpus = Corpus::synthetic(spec.vocab_size, 8, 2, 32, 1.1, 9).unwrap();
    let stats = collect_act_scales(&model, &corpus.calibration, 8).unwrap();
    let fold = compute_fold_scales(&stats, model.blocks.len()).unwrap();
    let mut folded = model.clone();
    fold_model(&mut folded, &fold).unwrap();
    for seq in &corpus.evaluation {
        let a = model.forward_logits(seq).unwrap();
        let b = folded.forward_logits(seq).unwrap();
        let max = a.data.iter().fold(0f32, |m, v| m.max(v.abs()));
        let diff = a.data.iter().zip(&b.data).fold(0f32, |m, (x, y)| m.max((x - y).abs()));
        assert!(diff / max <= 1e-4, "relative max error {}", diff / max);
    }
    let mut restored = folded.clone();
    fold_model(&mut restored, &fold.inverse()).unwrap();
    for idx in 0..model.n_layers() {
        let (a, b) = (model.layer_weight(idx).unwrap(), restored.layer_weight(idx).unwrap());
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() <= 1e-6 * x.abs().max(1.0)));
    }
}
