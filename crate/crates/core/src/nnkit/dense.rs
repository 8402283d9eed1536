use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{Real, LAYERNORM_EPS};
use crate::{Error, Result};

/// Per-unit gain and shift applied after mean/variance normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Vec<T>,
    pub shift: Vec<T>,
}

/// One affine layer. `weight` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    /// Only hidden layers may carry a norm.
    pub norm: Option<LayerNorm<T>>,
}

/// Feed-forward network: hidden layers compute
/// `relu(layernorm(W h + b))` (norm optional per layer), the output layer is
/// affine only.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet<T = f32> {
    layers: Vec<DenseLayer<T>>,
}

/// Gradients (or any per-parameter arrays) in parameter declaration order:
/// for each layer `weight, bias[, gain, shift]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T = f32> {
    pub names: Vec<String>,
    pub tensors: Vec<Vec<T>>,
}

/// Intermediate values from a batched forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    batch: usize,
    input: Vec<T>,
    layers: Vec<LayerTape<T>>,
}

#[derive(Debug, Clone)]
struct LayerTape<T> {
    /// Normalized pre-activation (`xhat`), only for normed layers.
    xhat: Vec<T>,
    /// `1 / sqrt(var + eps)` per row, only for normed layers.
    inv_std: Vec<T>,
    /// Value fed to the activation (post-norm). For the output layer this is
    /// the network output.
    pre_act: Vec<T>,
    /// Layer output after activation.
    out: Vec<T>,
}

impl<T: Real> GradientSet<T> {
    pub fn zeros_like(net: &DenseNet<T>) -> Self {
        let (names, tensors) = net
            .params()
            .into_iter()
            .map(|(n, p)| (n, vec![T::zero(); p.len()]))
            .unzip();
        Self { names, tensors }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| {
                let g = g.to_f64().unwrap_or(f64::NAN);
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all tensors so the global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let factor = T::lit(max_norm / norm);
            for t in &mut self.tensors {
                for g in t.iter_mut() {
                    *g *= factor;
                }
            }
        }
        norm
    }

    pub fn scale(&mut self, factor: T) {
        for t in &mut self.tensors {
            for g in t.iter_mut() {
                *g *= factor;
            }
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet<T>) -> Result<()> {
        if self.tensors.len() != other.tensors.len()
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Shape("gradient sets differ in shape".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        Ok(())
    }

    /// Name of the first tensor holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.names
            .iter()
            .zip(&self.tensors)
            .find(|(_, t)| t.iter().any(|g| !g.is_finite()))
            .map(|(n, _)| n.as_str())
    }

    fn matches(&self, net: &DenseNet<T>) -> bool {
        let shapes = net.params();
        shapes.len() == self.tensors.len()
            && shapes.iter().zip(&self.tensors).all(|((_, p), g)| p.len() == g.len())
    }
}

impl<T: Real> DenseNet<T> {
    /// Builds a network with Glorot-uniform weights, zero biases, unit gains
    /// and zero shifts. The first `normalized_hidden` hidden layers get a
    /// layer norm.
    pub fn new<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        normalized_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Shape("a network needs at least input and output sizes".into()));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Shape("layer sizes must be positive".into()));
        }
        let n_layers = layer_sizes.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let (fan_in, fan_out) = (layer_sizes[k], layer_sizes[k + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            let weight = (0..fan_in * fan_out)
                .map(|_| T::lit(dist.sample(rng)))
                .collect();
            let hidden = k + 1 < n_layers;
            let norm = (hidden && k < normalized_hidden).then(|| LayerNorm {
                gain: vec![T::one(); fan_out],
                shift: vec![T::zero(); fan_out],
            });
            layers.push(DenseLayer {
                in_dim: fan_in,
                out_dim: fan_out,
                weight,
                bias: vec![T::zero(); fan_out],
                norm,
            });
        }
        Ok(Self { layers })
    }

    /// Assembles a network from explicit layers, validating the shape chain.
    pub fn from_layers(layers: Vec<DenseLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::Shape(format!("layer {k} has a zero dimension")));
            }
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::Shape(format!("layer {k} parameters do not match its dims")));
            }
            if let Some(n) = &l.norm {
                if k + 1 == layers.len() {
                    return Err(Error::Shape("output layer cannot be normalized".into()));
                }
                if n.gain.len() != l.out_dim || n.shift.len() != l.out_dim {
                    return Err(Error::Shape(format!("layer {k} norm does not match its width")));
                }
            }
            if k > 0 && layers[k - 1].out_dim != l.in_dim {
                return Err(Error::Shape(format!(
                    "layer {k} expects {} inputs but layer {} emits {}",
                    l.in_dim,
                    k - 1,
                    layers[k - 1].out_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer<T>] {
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].in_dim)
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn same_architecture(&self, other: &DenseNet<T>) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.in_dim == b.in_dim && a.out_dim == b.out_dim && a.norm.is_some() == b.norm.is_some()
            })
    }

    /// Parameters in declaration order with their names.
    pub fn params(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{k}.weight"), l.weight.as_slice()));
            out.push((format!("layer{k}.bias"), l.bias.as_slice()));
            if let Some(n) = &l.norm {
                out.push((format!("layer{k}.ln_gain"), n.gain.as_slice()));
                out.push((format!("layer{k}.ln_shift"), n.shift.as_slice()));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(n) = &mut l.norm {
                out.push(&mut n.gain);
                out.push(&mut n.shift);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, p)| p.iter().all(|v| v.is_finite()))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.forward_batch(x, 1).map(|(y, _)| y)
    }

    /// Forward pass over `batch` row-major samples. Returns the outputs
    /// (`batch x output_dim`) and the tape needed by [`Self::backward_batch`].
    pub fn forward_batch(&self, x: &[T], batch: usize) -> Result<(Vec<T>, Tape<T>)> {
        let in_dim = self.input_dim();
        if batch == 0 || x.len() != batch * in_dim {
            return Err(Error::Shape(format!(
                "input of length {} is not {batch} samples of width {in_dim}",
                x.len()
            )));
        }
        let n_layers = self.layers.len();
        let mut tapes: Vec<LayerTape<T>> = Vec::with_capacity(n_layers);
        for (k, layer) in self.layers.iter().enumerate() {
            let h: &[T] = if k == 0 { x } else { &tapes[k - 1].out };
            let (m, kk, n) = (batch, layer.in_dim, layer.out_dim);
            let mut z = Vec::with_capacity(m * n);
            for _ in 0..m {
                z.extend_from_slice(&layer.bias);
            }
            // z = h (m x k) * W^T (k x n) + z
            T::gemm(
                m,
                kk,
                n,
                T::one(),
                h,
                kk as isize,
                1,
                &layer.weight,
                1,
                kk as isize,
                T::one(),
                &mut z,
                n as isize,
                1,
            );
            let hidden = k + 1 < n_layers;
            let mut xhat = Vec::new();
            let mut inv_std = Vec::new();
            if let Some(ln) = &layer.norm {
                xhat.reserve(m * n);
                inv_std.reserve(m);
                let eps = T::lit(LAYERNORM_EPS);
                let nn = T::from_usize(n).expect("width fits");
                for row in z.chunks_mut(n) {
                    let mean = row.iter().copied().sum::<T>() / nn;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
                    let is = T::one() / (var + eps).sqrt();
                    inv_std.push(is);
                    for (j, v) in row.iter_mut().enumerate() {
                        let xh = (*v - mean) * is;
                        xhat.push(xh);
                        *v = ln.gain[j] * xh + ln.shift[j];
                    }
                }
            }
            let out = if hidden {
                z.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
            } else {
                z.clone()
            };
            tapes.push(LayerTape {
                xhat,
                inv_std,
                pre_act: z,
                out,
            });
        }
        let y = tapes[n_layers - 1].out.clone();
        Ok((
            y,
            Tape {
                batch,
                input: x.to_vec(),
                layers: tapes,
            },
        ))
    }

    /// Single-sample gradient of `output . upstream` with respect to every
    /// parameter.
    pub fn backward(&self, x: &[T], upstream: &[T]) -> Result<GradientSet<T>> {
        let (_, tape) = self.forward_batch(x, 1)?;
        self.backward_batch(&tape, upstream).map(|(g, _)| g)
    }

    /// Gradient of `sum_b output_b . upstream_b` with respect to every
    /// parameter (summed over the batch) and with respect to each input row.
    pub fn backward_batch(&self, tape: &Tape<T>, upstream: &[T]) -> Result<(GradientSet<T>, Vec<T>)> {
        let batch = tape.batch;
        if tape.layers.len() != self.layers.len() {
            return Err(Error::Shape("tape does not belong to this network".into()));
        }
        if upstream.len() != batch * self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream of length {} does not match {batch} x {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let n_layers = self.layers.len();
        let mut grads: Vec<Vec<Vec<T>>> = Vec::with_capacity(n_layers);
        let mut delta = upstream.to_vec();
        for k in (0..n_layers).rev() {
            let layer = &self.layers[k];
            let lt = &tape.layers[k];
            let n = layer.out_dim;
            let hidden = k + 1 < n_layers;
            if hidden {
                for (d, &p) in delta.iter_mut().zip(&lt.pre_act) {
                    if p <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            let mut layer_grads = Vec::new();
            if let Some(ln) = &layer.norm {
                let nn = T::from_usize(n).expect("width fits");
                let mut dgain = vec![T::zero(); n];
                let mut dshift = vec![T::zero(); n];
                for b in 0..batch {
                    let dy = &mut delta[b * n..(b + 1) * n];
                    let xh = &lt.xhat[b * n..(b + 1) * n];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..n {
                        dgain[j] += dy[j] * xh[j];
                        dshift[j] += dy[j];
                        let dxh = dy[j] * ln.gain[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh = mean_dxh / nn;
                    mean_dxh_xh = mean_dxh_xh / nn;
                    let is = lt.inv_std[b];
                    for j in 0..n {
                        let dxh = dy[j] * ln.gain[j];
                        dy[j] = is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                layer_grads.push(dgain);
                layer_grads.push(dshift);
            }
            let h: &[T] = if k == 0 { &tape.input } else { &tape.layers[k - 1].out };
            let in_dim = layer.in_dim;
            // dW = delta^T (n x batch) * h (batch x in)
            let mut dw = vec![T::zero(); n * in_dim];
            T::gemm(
                n,
                batch,
                in_dim,
                T::one(),
                &delta,
                1,
                n as isize,
                h,
                in_dim as isize,
                1,
                T::zero(),
                &mut dw,
                in_dim as isize,
                1,
            );
            let mut db = vec![T::zero(); n];
            for row in delta.chunks(n) {
                for (g, &d) in db.iter_mut().zip(row) {
                    *g += d;
                }
            }
            // dh = delta (batch x n) * W (n x in)
            let mut dh = vec![T::zero(); batch * in_dim];
            T::gemm(
                batch,
                n,
                in_dim,
                T::one(),
                &delta,
                n as isize,
                1,
                &layer.weight,
                in_dim as isize,
                1,
                T::zero(),
                &mut dh,
                in_dim as isize,
                1,
            );
            let mut ordered = vec![dw, db];
            ordered.extend(layer_grads);
            grads.push(ordered);
            delta = dh;
        }
        grads.reverse();
        let names = self.params().into_iter().map(|(n, _)| n).collect();
        let tensors = grads.into_iter().flatten().collect();
        Ok((GradientSet { names, tensors }, delta))
    }

    /// Applies `param -= step * grad` (plain gradient step, used in tests
    /// and finite-difference probes).
    pub fn apply_gradient(&mut self, grads: &GradientSet<T>, step: T) -> Result<()> {
        if !grads.matches(self) {
            return Err(Error::Shape("gradient set does not match network".into()));
        }
        for (p, g) in self.params_mut().into_iter().zip(&grads.tensors) {
            for (x, &d) in p.iter_mut().zip(g) {
                *x -= step * d;
            }
        }
        Ok(())
    }

    pub(crate) fn check_grads(&self, grads: &GradientSet<T>) -> Result<()> {
        if grads.matches(self) {
            Ok(())
        } else {
            Err(Error::Shape("gradient set does not match network".into()))
        }
    }
}

/// Blends `online` into `target`: `target <- (1 - tau) target + tau online`.
pub fn polyak_update<T: Real>(target: &mut DenseNet<T>, online: &DenseNet<T>, tau: T) -> Result<()> {
    if !(tau >= T::zero() && tau <= T::one()) {
        return Err(Error::Invalid(format!("polyak rate {tau:?} outside [0, 1]")));
    }
    if !target.same_architecture(online) {
        return Err(Error::Shape("target and online networks differ in architecture".into()));
    }
    let keep = T::one() - tau;
    let src: Vec<Vec<T>> = online.params().into_iter().map(|(_, p)| p.to_vec()).collect();
    for (dst, src) in target.params_mut().into_iter().zip(&src) {
        if tau == T::one() {
            dst.copy_from_slice(src);
        } else {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = keep * *d + tau * s;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn affine_1x1(w: f64, b: f64) -> DenseNet<f64> {
        DenseNet::from_layers(vec![DenseLayer {
            in_dim: 1,
            out_dim: 1,
            weight: vec![w],
            bias: vec![b],
            norm: None,
        }])
        .unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut rng = substream(1, "t");
        let mut net = DenseNet::<f32>::new(&[5, 8, 3], 1, &mut rng).unwrap();
        for p in net.params_mut() {
            p.fill(0.0);
        }
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn affine_identity_case() {
        let net = affine_1x1(2.0, 1.0);
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![7.0]);
        let g = net.backward(&[3.0], &[1.0]).unwrap();
        assert_eq!(g.tensors, vec![vec![3.0], vec![1.0]]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = substream(2, "t");
        let net = DenseNet::<f64>::new(&[4, 6, 6, 2], 2, &mut rng).unwrap();
        let g = net.backward(&[0.3, -0.1, 2.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!(g.tensors.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let mut rng = substream(3, "t");
        let net = DenseNet::<f32>::new(&[3, 4, 1], 1, &mut rng).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(matches!(net.backward(&[1.0, 2.0, 3.0], &[1.0, 1.0]), Err(Error::Shape(_))));
        let bad = DenseNet::<f32>::from_layers(vec![
            DenseLayer { in_dim: 2, out_dim: 3, weight: vec![0.0; 6], bias: vec![0.0; 3], norm: None },
            DenseLayer { in_dim: 4, out_dim: 1, weight: vec![0.0; 4], bias: vec![0.0; 1], norm: None },
        ]);
        assert!(bad.is_err());
    }

    #[test]
    fn initialization_bounds() {
        let mut rng = substream(4, "t");
        let net = DenseNet::<f32>::new(&[11, 64, 2], 1, &mut rng).unwrap();
        let limit = (6.0f32 / 75.0).sqrt();
        let l0 = &net.layers()[0];
        assert!(l0.weight.iter().all(|w| w.abs() <= limit));
        assert!(l0.bias.iter().all(|&b| b == 0.0));
        let ln = l0.norm.as_ref().unwrap();
        assert!(ln.gain.iter().all(|&g| g == 1.0) && ln.shift.iter().all(|&s| s == 0.0));
        assert!(net.layers()[1].norm.is_none());
    }

    #[test]
    fn batch_gradient_is_sum_of_sample_gradients() {
        let mut rng = substream(5, "t");
        let net = DenseNet::<f64>::new(&[3, 7, 5, 2], 2, &mut rng).unwrap();
        let xs = [0.2, -1.0, 0.7, 1.5, 0.1, -0.3, -0.4, 0.9, 2.0];
        let ups = [1.0, -0.5, 0.3, 0.2, -1.0, 0.8];
        let (_, tape) = net.forward_batch(&xs, 3).unwrap();
        let (batched, _) = net.backward_batch(&tape, &ups).unwrap();
        let mut summed = GradientSet::zeros_like(&net);
        for b in 0..3 {
            let g = net.backward(&xs[b * 3..b * 3 + 3], &ups[b * 2..b * 2 + 2]).unwrap();
            summed.add_assign(&g).unwrap();
        }
        for (a, b) in batched.tensors.iter().flatten().zip(summed.tensors.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn polyak_endpoints_and_arithmetic() {
        let mut rng = substream(6, "t");
        let online = DenseNet::<f32>::new(&[3, 4, 1], 1, &mut rng).unwrap();
        let original = DenseNet::<f32>::new(&[3, 4, 1], 1, &mut rng).unwrap();

        let mut t = original.clone();
        polyak_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, online);

        let mut t = original.clone();
        polyak_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t, original);

        let mut target = affine_1x1(1.0, 1.0);
        polyak_update(&mut target, &affine_1x1(0.0, 0.0), 0.005).unwrap();
        assert!((target.layers()[0].weight[0] - 0.995).abs() < 1e-15);

        let other = DenseNet::<f32>::new(&[3, 5, 1], 1, &mut rng).unwrap();
        let mut t = original.clone();
        assert!(polyak_update(&mut t, &other, 0.5).is_err());
        assert!(polyak_update(&mut t, &online, 1.5).is_err());
    }

    #[test]
    fn global_norm_clipping() {
        let mut g = GradientSet::<f64> {
            names: vec!["a".into(), "b".into()],
            tensors: vec![vec![3.0], vec![4.0]],
        };
        assert_eq!(g.clip_global_norm(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert!((g.tensors[0][0] - 0.6).abs() < 1e-12);
        let before = g.clone();
        g.clip_global_norm(10.0);
        assert_eq!(g, before);
    }
}
