use rampkit::nnkit::DenseNet;
use rampkit::rng::substream;
use std::time::Instant;
fn main() {
    let mut rng = substream(1, "b");
    let net = DenseNet::<f32>::new(&[12, 512, 512, 256, 1], 2, &mut rng).unwrap();
    let x = vec![0.1f32; 128 * 12];
    let t = Instant::now();
    for _ in 0..20 {
        let (_y, tape) = net.forward_batch(&x, 128).unwrap();
        let up = vec![1.0f32; 128];
        let _ = net.backward_batch(&tape, &up).unwrap();
    }
    println!("fwd+bwd batch128: {:?}", t.elapsed() / 20);
}
