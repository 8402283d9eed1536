#![allow(dead_code)]

use rand::Rng;
use rampkit::nnkit::DenseNet;
use rampkit::rng::Rng as ChaRng;

fn dot(net: &DenseNet<f64>, x: &[f64], upstream: &[f64]) -> f64 {
    net.forward(x).unwrap().iter().zip(upstream).map(|(a, b)| a * b).sum()
}

/// Central-difference check of `backward` on up to `per_tensor` entries of
/// every parameter tensor. Returns the worst relative error over entries
/// whose gradient exceeds 1e-6 in magnitude, and how many were compared.
pub fn fd_check(net: &DenseNet<f64>, rng: &mut ChaRng, h: f64, per_tensor: usize) -> (f64, usize) {
    let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let up: Vec<f64> = (0..net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = net.backward(&x, &up).unwrap();
    let mut probe = net.clone();
    let (mut worst, mut n) = (0.0f64, 0usize);
    for (t, g) in grads.tensors.iter().enumerate() {
        let picks: Vec<usize> = if g.len() <= per_tensor {
            (0..g.len()).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..g.len())).collect()
        };
        for i in picks {
            let orig = probe.params_mut()[t][i];
            probe.params_mut()[t][i] = orig + h;
            let plus = dot(&probe, &x, &up);
            probe.params_mut()[t][i] = orig - h;
            let minus = dot(&probe, &x, &up);
            probe.params_mut()[t][i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs());
            if scale > 1e-6 {
                worst = worst.max((fd - g[i]).abs() / scale);
                n += 1;
            }
        }
    }
    (worst, n)
}

/// Small end-to-end configuration: a few policy episodes past warm-up.
pub fn small_run_config(seed: u64, out: &std::path::Path) -> rampkit::config::RunConfig {
    let mut cfg = rampkit::config::RunConfig::default();
    cfg.seed = seed;
    cfg.corpus.n_calibration = 8;
    cfg.corpus.n_evaluation = 8;
    cfg.corpus.seq_len = 32;
    cfg.corpus.calibration_sequences = 8;
    cfg.train.episodes = 24;
    cfg.checkpoint_every = 10;
    cfg.out_dir = out.to_path_buf();
    cfg
}

/// Runs the full pipeline twice with one config and compares the allocation
/// JSON and the GGUF bytes.
pub fn pipeline_determinism() -> Result<String, String> {
    use rampkit::pipeline::{run, ALLOCATION_FILE, GGUF_FILE};
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let mut outputs = Vec::new();
    for d in &dirs {
        let cfg = small_run_config(11, d.path());
        let summary = run(&cfg).map_err(|e| e.to_string())?;
        let alloc = std::fs::read(d.path().join(ALLOCATION_FILE)).map_err(|e| e.to_string())?;
        let gguf = std::fs::read(d.path().join(GGUF_FILE)).map_err(|e| e.to_string())?;
        outputs.push((summary, alloc, gguf));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    if a.1 != b.1 {
        return Err("allocation JSON differs between runs".into());
    }
    if a.2 != b.2 {
        return Err("GGUF bytes differ between runs".into());
    }
    let hash = &a.0.config_hash;
    if !String::from_utf8_lossy(&a.1).contains(hash.as_str()) {
        return Err("allocation JSON lacks the config hash".into());
    }
    Ok(format!(
        "allocation {} B and GGUF {} B identical, hash {hash}, avg bits {:.3}",
        a.1.len(),
        a.2.len(),
        a.0.avg_bits
    ))
}
