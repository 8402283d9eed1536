mod common;

use proptest::prelude::*;
use rampkit::nnkit::{read_checkpoint, write_checkpoint, DenseNet};
use rampkit::rng::substream;

#[test]
fn backward_matches_finite_differences() {
    for (sizes, norm) in [(&[11usize, 16, 1][..], 0), (&[12, 24, 24, 1][..], 2), (&[11, 32, 16, 2][..], 1)] {
        let mut rng = substream(21, "fd");
        let net: DenseNet<f64> = DenseNet::new(sizes, norm, &mut rng).unwrap();
        let (worst, n) = common::fd_check(&net, &mut rng, 1e-6, 200);
        assert!(n > 0);
        assert!(worst < 1e-4, "{sizes:?}: worst relative error {worst}");
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut rng = substream(5, "ckpt");
    let net: DenseNet<f32> = DenseNet::new(&[11, 64, 32, 2], 2, &mut rng).unwrap();
    let back = read_checkpoint(&write_checkpoint(&net)).unwrap();
    assert_eq!(back, net);
    let x = [0.25f32; 11];
    assert_eq!(back.forward(&x).unwrap(), net.forward(&x).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let mut rng = substream(5, "ckpt");
    let net: DenseNet<f32> = DenseNet::new(&[4, 8, 1], 1, &mut rng).unwrap();
    let bytes = write_checkpoint(&net);
    for cut in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        assert!(read_checkpoint(&bytes[..cut]).is_err(), "accepted {cut} bytes");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_is_finite_and_shaped(seed in 0u64..1000, hidden in 1usize..40, out in 1usize..4, scale in -50.0f64..50.0) {
        let mut rng = substream(seed, "prop");
        let net: DenseNet<f64> = DenseNet::new(&[7, hidden, hidden, out], 2, &mut rng).unwrap();
        let x: Vec<f64> = (0..7).map(|i| scale * (i as f64 - 3.0)).collect();
        let y = net.forward(&x).unwrap();
        prop_assert_eq!(y.len(), out);
        prop_assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_input_width_is_an_error(seed in 0u64..100, width in 0usize..20) {
        prop_assume!(width != 5);
        let mut rng = substream(seed, "prop");
        let net: DenseNet<f64> = DenseNet::new(&[5, 8, 1], 1, &mut rng).unwrap();
        prop_assert!(net.forward(&vec![0.0; width]).is_err());
    }
}
